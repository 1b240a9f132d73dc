"""Instance encoder, MIPool, tanh hashing heads and their exact backward pass."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numeric import Rng, sgn

POOL_MODES = ("max", "mean")
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class ModelParams:
    layers: list
    mi_head: Layer
    si_head: Layer

    @property
    def K(self) -> int:
        return self.mi_head.weight.shape[0]

    @property
    def d(self) -> int:
        return self.layers[0].weight.shape[1]

    def blocks(self):
        """``(name, array)`` pairs for every trainable array, in a fixed order."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layer{i}.weight", layer.weight))
            out.append((f"layer{i}.bias", layer.bias))
        for name, head in (("mi_head", self.mi_head), ("si_head", self.si_head)):
            out.append((f"{name}.weight", head.weight))
            out.append((f"{name}.bias", head.bias))
        return out

    def arrays(self):
        return [a for _, a in self.blocks()]

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def map(self, f) -> "ModelParams":
        def g(layer):
            return Layer(f(layer.weight), f(layer.bias), layer.activation)
        return ModelParams([g(l) for l in self.layers], g(self.mi_head), g(self.si_head))

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def weight_norm(self) -> float:
        """Squared Frobenius norm of every weight and bias."""
        return float(sum(np.sum(a * a) for a in self.arrays()))


Gradients = ModelParams


def _glorot(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


FCL_ACTIVATIONS = ("linear", "relu")


def init_params(rng: Rng, d: int, hidden_dims=(64,), dz: int = 32, K: int = 16,
                fcl_activation: str = "linear") -> ModelParams:
    dims = [d, *hidden_dims, dz]
    if min(dims) < 1 or K < 1:
        raise ValueError("all dimensions must be >= 1")
    if fcl_activation not in FCL_ACTIVATIONS:
        raise ValueError(f"fcl_activation must be one of {FCL_ACTIVATIONS}")
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = "relu" if i < len(dims) - 2 else fcl_activation
        layers.append(Layer(_glorot(rng, b, a), np.zeros(b), act))
    mi = Layer(_glorot(rng, K, dz), np.zeros(K), "tanh")
    si = Layer(_glorot(rng, K, dz), np.zeros(K), "tanh")
    return ModelParams(layers, mi, si)


@dataclass
class ForwardTrace:
    pool: str
    offsets: np.ndarray  # (B+1,) instance block boundaries
    activations: list  # [X, a_1, ..., a_L]; a_L is z
    routing: np.ndarray | None  # (B, dz) within-bag argmax, max pool only
    z_hat: np.ndarray  # (B, dz)
    h_mi: np.ndarray  # (B, K)
    h_si: np.ndarray  # (M, K)

    @property
    def z(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)


def _activate(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "linear":
        return x
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def stack_bags(bags):
    sizes = [b.instances.shape[0] for b in bags]
    if any(n < 1 for n in sizes):
        raise ValueError("empty bag in batch")
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return np.concatenate([b.instances for b in bags], axis=0), offsets


def encode(params: ModelParams, X) -> list:
    acts = [np.asarray(X, dtype=np.float64)]
    for layer in params.layers:
        acts.append(_activate(acts[-1] @ layer.weight.T + layer.bias, layer.activation))
    return acts


def mi_pool(z, offsets, pool: str):
    """Dimension-wise pooling of each bag's instance block.

    Returns ``(z_hat, routing)``; routing holds the within-bag index of the
    first maximum per dimension (``None`` for mean pooling).
    """
    n_bags = len(offsets) - 1
    if pool == "mean":
        sums = np.add.reduceat(z, offsets[:-1], axis=0)
        return sums / np.diff(offsets)[:, None], None
    if pool != "max":
        raise ValueError(f"unknown pool mode {pool!r}")
    routing = np.empty((n_bags, z.shape[1]), dtype=np.int64)
    for b in range(n_bags):
        routing[b] = np.argmax(z[offsets[b]:offsets[b + 1]], axis=0)
    z_hat = z[offsets[:-1, None] + routing, np.arange(z.shape[1])]
    return z_hat, routing


def forward(params: ModelParams, bags, pool: str = "max") -> ForwardTrace:
    X, offsets = stack_bags(bags)
    if X.shape[1] != params.d:
        raise ValueError(f"instance dimension {X.shape[1]} does not match model input {params.d}")
    acts = encode(params, X)
    z = acts[-1]
    z_hat, routing = mi_pool(z, offsets, pool)
    h_mi = np.tanh(z_hat @ params.mi_head.weight.T + params.mi_head.bias)
    h_si = np.tanh(z @ params.si_head.weight.T + params.si_head.bias)
    return ForwardTrace(pool, offsets, acts, routing, z_hat, h_mi, h_si)


def quantize(h) -> np.ndarray:
    return sgn(h).astype(np.int8)


def backward(params: ModelParams, trace: ForwardTrace, dJ_dh_mi, dJ_dh_si,
             lam_w: float = 0.0) -> Gradients:
    dJ_dh_mi = np.asarray(dJ_dh_mi, dtype=np.float64)
    dJ_dh_si = np.asarray(dJ_dh_si, dtype=np.float64)
    if dJ_dh_mi.shape != trace.h_mi.shape:
        raise ValueError(f"MI gradient shape {dJ_dh_mi.shape} != {trace.h_mi.shape}")
    if dJ_dh_si.shape != trace.h_si.shape:
        raise ValueError(f"SI gradient shape {dJ_dh_si.shape} != {trace.h_si.shape}")
    z = trace.z

    da_mi = dJ_dh_mi * (1.0 - trace.h_mi ** 2)
    mi = Layer(da_mi.T @ trace.z_hat, da_mi.sum(axis=0), "tanh")
    dz_hat = da_mi @ params.mi_head.weight

    dz = np.zeros_like(z)
    if trace.pool == "max":
        rows = trace.offsets[:-1, None] + trace.routing
        cols = np.broadcast_to(np.arange(z.shape[1]), rows.shape)
        np.add.at(dz, (rows, cols), dz_hat)
    else:
        sizes = trace.sizes
        dz += np.repeat(dz_hat / sizes[:, None], sizes, axis=0)

    da_si = dJ_dh_si * (1.0 - trace.h_si ** 2)
    si = Layer(da_si.T @ z, da_si.sum(axis=0), "tanh")
    dz += da_si @ params.si_head.weight

    grads = [None] * len(params.layers)
    delta = dz
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "relu":
            delta = delta * (trace.activations[i + 1] > 0)
        grads[i] = Layer(delta.T @ trace.activations[i], delta.sum(axis=0), layer.activation)
        if i > 0:
            delta = delta @ layer.weight

    g = ModelParams(grads, mi, si)
    if lam_w:
        for ga, pa in zip(g.arrays(), params.arrays()):
            ga += 2.0 * lam_w * pa
    return g


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_block: str
    worst_index: tuple
    per_block: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_diff_check(params: ModelParams, loss_fn, analytic: Gradients, eps: float = 1e-4,
                      tolerance: float = 1e-4, rng: Rng | None = None,
                      max_coords_per_block: int | None = None) -> GradCheckReport:
    """Compare ``analytic`` with central differences of ``loss_fn(params)``.

    Blocks larger than ``max_coords_per_block`` are checked on a random
    subset drawn from ``rng``. ``params`` is perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    worst = (-1.0, "", ())
    per_block = {}
    for (name, theta), g in zip(params.blocks(), analytic.arrays()):
        coords = list(np.ndindex(theta.shape))
        if max_coords_per_block is not None and len(coords) > max_coords_per_block:
            if rng is None:
                raise ValueError("subset checking needs an rng")
            pick = rng.choice(len(coords), size=max_coords_per_block, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        block_worst = 0.0
        for idx in coords:
            orig = theta[idx]
            theta[idx] = orig + eps
            jp = loss_fn(params)
            theta[idx] = orig - eps
            jm = loss_fn(params)
            theta[idx] = orig
            f = (jp - jm) / (2.0 * eps)
            a = g[idx]
            rel = abs(a - f) / max(abs(a), abs(f), 1e-8)
            block_worst = max(block_worst, rel)
            if rel > worst[0]:
                worst = (rel, name, idx)
        per_block[name] = block_worst
    return GradCheckReport(worst[0], worst[1], worst[2], per_block, tolerance)


def _layer_dict(layer: Layer) -> dict:
    rows, cols = layer.weight.shape
    return {
        "rows": rows,
        "cols": cols,
        "weights": layer.weight.ravel().tolist(),
        "bias": layer.bias.tolist(),
        "activation": layer.activation,
    }


def _layer_from(d: dict) -> Layer:
    w = np.array(d["weights"], dtype=np.float64)
    if w.size != d["rows"] * d["cols"] or len(d["bias"]) != d["rows"]:
        raise ValueError("checkpoint layer shape does not match its data")
    return Layer(w.reshape(d["rows"], d["cols"]), np.array(d["bias"], dtype=np.float64),
                 d["activation"])


def params_to_dict(params: ModelParams) -> dict:
    return {
        "layers": [_layer_dict(l) for l in params.layers],
        "mi_head": _layer_dict(params.mi_head),
        "si_head": _layer_dict(params.si_head),
    }


def params_from_dict(d: dict) -> ModelParams:
    return ModelParams([_layer_from(l) for l in d["layers"]],
                       _layer_from(d["mi_head"]), _layer_from(d["si_head"]))


def save_checkpoint(path, params: ModelParams, pool: str, config: dict | None = None,
                    extra: dict | None = None) -> None:
    doc = {"version": CHECKPOINT_VERSION, "K": params.K, "pool_mode": pool}
    doc.update(params_to_dict(params))
    doc["config"] = config or {}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_checkpoint(path):
    """Returns ``(params, pool_mode, document)``."""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    params = params_from_dict(doc)
    if params.K != doc["K"]:
        raise ValueError(f"{path}: K={doc['K']} disagrees with head shape {params.K}")
    return params, doc["pool_mode"], doc
