"""Dense linear-algebra helpers shared by the rest of the package.

Matrices are plain float64 ``numpy`` arrays in row-major (C) order.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    """Seeded generator; every random draw in the package goes through one of these."""
    return np.random.default_rng(np.uint64(seed % 2**64))


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sgn(x):
    """Sign with the tie rule sgn(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def map_elementwise(m, f: Callable) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    out = f(m)
    out = np.asarray(out, dtype=np.float64)
    if out.shape != m.shape:
        out = np.vectorize(f, otypes=[np.float64])(m)
    return out


_REDUCERS = {
    "sum": np.sum,
    "max": np.max,
    "mean": np.mean,
    "median": np.median,
}
_AXES = {"rows": 0, "cols": 1, "all": None}


def reduce(m, axis: str = "all", kind: str = "sum", return_index: bool = False):
    """Reduce ``m`` along ``axis``.

    ``axis="rows"`` collapses the rows (one value per column), ``"cols"``
    collapses the columns and ``"all"`` yields a scalar. For ``kind="max"``
    with ``return_index=True`` the first argmax is returned alongside.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("cannot reduce an empty matrix")
    if kind not in _REDUCERS:
        raise ValueError(f"unknown reduction {kind!r}")
    if axis not in _AXES:
        raise ValueError(f"unknown axis {axis!r}")
    ax = _AXES[axis]
    if m.ndim == 1 and ax is not None:
        ax = 0
    value = _REDUCERS[kind](m, axis=ax)
    if return_index:
        if kind != "max":
            raise ValueError("return_index is only defined for max")
        idx = np.argmax(m, axis=ax)
        return value, idx
    return value
