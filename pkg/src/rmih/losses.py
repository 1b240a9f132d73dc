"""Robust NCA retrieval loss, quantization loss and the composite objective.

Codes are passed around as ``(N, K)`` float arrays, one row per bag (or per
instance for the single-instance arm).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import sgn

HUBER_EFFICIENCY = 1.345  # ~95% asymptotic efficiency under Gaussian noise
MAD_TO_SIGMA = 1.485
MAD_FLOOR = 1e-6
WARMUP_FACTOR = 7.0
ROBUST_MODES = ("huber", "l2")


def huber_rho(r, c):
    """``r^2/2`` for ``|r| <= c``, ``c|r| - c^2/2`` beyond."""
    a = np.abs(np.asarray(r, dtype=np.float64))
    m = np.minimum(a, c)
    return m * (a - 0.5 * m)


def huber_rho_grad(r, c):
    """``r`` inside the threshold, ``c * sgn(r)`` outside."""
    c = np.asarray(c, dtype=np.float64)
    return np.clip(np.asarray(r, dtype=np.float64), -c, c)


def scale_from_residuals(residuals, t: int = 2) -> np.ndarray:
    """Per-bit Huber thresholds from a ``(pairs, K)`` residual sample.

    ``c_k = 1.345 * 1.485 * MAD_k``, floored, and multiplied by 7 during the
    first epoch (``t == 1``).
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    med = np.median(r, axis=0)
    mad = np.median(np.abs(r - med), axis=0)
    sigma = MAD_TO_SIGMA * mad
    c = HUBER_EFFICIENCY * np.maximum(sigma, MAD_FLOOR)
    if t == 1:
        c = WARMUP_FACTOR * c
    return c


def pair_residuals(H) -> np.ndarray:
    """``h_i - h_j`` over all unordered pairs ``i < j``, shape ``(N(N-1)/2, K)``."""
    H = np.asarray(H, dtype=np.float64)
    i, j = np.triu_indices(H.shape[0], k=1)
    return H[i] - H[j]


def estimate_scale(H, t: int) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] < 2:
        raise ValueError("scale estimation needs at least two codes")
    return scale_from_residuals(pair_residuals(H), t)


def _residual_tensor(H) -> np.ndarray:
    return H[:, None, :] - H[None, :, :]


def pairwise_huber(H, c=None, robust: str = "huber") -> np.ndarray:
    """Pairwise code distances ``L_ij = sum_k rho_k(h_i^k - h_j^k)``.

    ``robust="l2"`` uses the plain quadratic ``r^2 / 2`` and ignores ``c``.
    """
    H = np.asarray(H, dtype=np.float64)
    R = _residual_tensor(H)
    if robust == "l2":
        L = 0.5 * np.einsum("ijk,ijk->ij", R, R)
    elif robust == "huber":
        L = huber_rho(R, np.asarray(c, dtype=np.float64)).sum(axis=2)
    else:
        raise ValueError(f"unknown robust mode {robust!r}")
    np.fill_diagonal(L, 0.0)
    return L


def neighbor_probs(L) -> np.ndarray:
    """Row-wise softmax of ``-L`` over ``l != i``; the diagonal is zero."""
    L = np.asarray(L, dtype=np.float64)
    n = L.shape[0]
    if n < 2:
        raise ValueError("neighbor probabilities need at least two items")
    logits = -L.copy()
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def nca_loss(p, S) -> float:
    p = np.asarray(p, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    n = p.shape[0]
    off = S * p
    np.fill_diagonal(off, 0.0)
    return 1.0 - off.sum() / (n * n)


def residual_grad(H, c=None, robust: str = "huber") -> np.ndarray:
    """Per-pair derivative tensor ``D[i, j, k] = rho'(h_i^k - h_j^k)``."""
    R = _residual_tensor(H)
    if robust == "l2":
        return R
    return huber_rho_grad(R, np.asarray(c, dtype=np.float64))


def nca_grad(H, S, p, c=None, robust: str = "huber") -> np.ndarray:
    """Gradient of :func:`nca_loss` with respect to every code row.

    ``D[a, b] = rho'(h_a - h_b)`` per bit. The four sums below are, in order,
    similar pairs pointing at ``i``, their normalizer, similar pairs leaving
    ``i`` and theirs. Together they form the ascent direction of the
    neighbourhood mass, so the loss gradient is its negation over ``N^2``.
    """
    H = np.asarray(H, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = H.shape[0]
    D = residual_grad(H, c, robust)
    Sp = S * p
    np.fill_diagonal(Sp, 0.0)
    P = Sp.sum(axis=1)

    incoming = np.einsum("li,lik->ik", Sp, D)
    incoming_norm = np.einsum("l,li,lik->ik", P, p, D)
    outgoing = np.einsum("ij,ijk->ik", Sp, D)
    outgoing_norm = P[:, None] * np.einsum("iz,izk->ik", p, D)

    ascent = (incoming - incoming_norm) - (outgoing - outgoing_norm)
    return -ascent / (n * n)


def nca_terms(H, S, t: int, robust: str = "huber", scale=None):
    """Loss and gradient of the robust NCA objective on one code set.

    The Huber thresholds are estimated from ``H`` (unless given) and then
    held fixed, so the gradient is with respect to ``H`` at constant scale.
    """
    H = np.asarray(H, dtype=np.float64)
    c = None
    if robust == "huber":
        c = estimate_scale(H, t) if scale is None else scale
    L = pairwise_huber(H, c, robust)
    p = neighbor_probs(L)
    return nca_loss(p, S), nca_grad(H, S, p, c, robust), c


def quant_loss(H) -> float:
    a = np.abs(np.asarray(H, dtype=np.float64)) - 1.0
    # log cosh(x) = |x| + log1p(exp(-2|x|)) - log 2, stable for large |x|
    a = np.abs(a)
    return float(np.sum(a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)))


def quant_grad(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    return np.tanh(np.abs(H) - 1.0) * sgn(H)


def tradeoff_schedule(t: float, t_max: float):
    """``(lambda_MI, lambda_SI)``: MI weight rises quadratically from 0.5 to 1."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    t = min(max(float(t), 0.0), float(t_max))
    lam_mi = 1.0 - 0.5 * (1.0 - t / t_max) ** 2
    return lam_mi, 1.0 - lam_mi


TRADEOFF_MODES = ("decay", "equal", "no_si")


def tradeoff_weights(mode: str, t: float, t_max: float):
    if mode == "decay":
        return tradeoff_schedule(t, t_max)
    if mode == "equal":
        return 0.5, 0.5
    if mode == "no_si":
        return 1.0, 0.0
    raise ValueError(f"unknown tradeoff mode {mode!r}")


@dataclass(frozen=True)
class LossWeights:
    lam_mi: float
    lam_si: float
    lam_q: float
    lam_w: float
    t: int = 1
    t_max: int = 1


@dataclass
class LossBreakdown:
    total: float
    j_mi: float
    j_si: float
    j_q: float
    r_w: float
    grad_mi: np.ndarray  # (bags, K)
    grad_si: np.ndarray  # (instances, K)
    scale_mi: np.ndarray | None = None
    scale_si: np.ndarray | None = None


QUANT_NORMS = ("pairs_bits", "pairs", "sum")


def composite_loss(h_mi, h_si, S_mi, S_si, weights: LossWeights, r_w: float,
                   robust: str = "huber", scale_mi=None, scale_si=None,
                   quant_norm: str = "pairs_bits") -> LossBreakdown:
    """Weighted sum of the MI and SI retrieval losses, quantization loss and decay.

    Returns gradients with respect to the two heads' tanh outputs; the weight
    decay gradient is added during backpropagation. Scales left as ``None``
    are estimated from the codes at epoch ``weights.t``.

    ``quant_norm`` rescales the quantization sum: ``"pairs_bits"`` divides by
    ``N^2 K`` (``N`` bags, ``K`` bits), ``"pairs"`` by ``N^2`` (the retrieval
    loss normalizer) and ``"sum"`` leaves it raw. ``LossBreakdown.j_q`` is the
    rescaled value.
    """
    if quant_norm not in QUANT_NORMS:
        raise ValueError(f"quant_norm must be one of {QUANT_NORMS}")
    j_mi, g_mi, c_mi = nca_terms(h_mi, S_mi, weights.t, robust, scale_mi)
    j_si, g_si, c_si = nca_terms(h_si, S_si, weights.t, robust, scale_si)
    n, k = np.shape(h_mi)
    q_scale = {"pairs_bits": 1.0 / (n * n * k), "pairs": 1.0 / (n * n), "sum": 1.0}[quant_norm]
    j_q = q_scale * quant_loss(h_mi)
    total = (weights.lam_mi * j_mi + weights.lam_si * j_si
             + weights.lam_q * j_q + weights.lam_w * r_w)
    grad_mi = weights.lam_mi * g_mi + weights.lam_q * q_scale * quant_grad(h_mi)
    grad_si = weights.lam_si * g_si
    return LossBreakdown(total, j_mi, j_si, j_q, r_w, grad_mi, grad_si, c_mi, c_si)
