"""Mini-batch SGD with momentum over the composite hashing objective."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import net
from .data import BagDataset, instance_labels, similarity_from_labels
from .losses import (QUANT_NORMS, ROBUST_MODES, TRADEOFF_MODES, LossWeights, composite_loss,
                     estimate_scale, tradeoff_weights)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    t_max: int = 150
    batch_size: int = 32
    lr0: float = 0.01
    lr_decay: float = 0.98
    momentum: float = 0.9
    lam_q: float = 0.05
    lam_w: float = 0.001
    pool: str = "max"
    robust: str = "huber"
    tradeoff: str = "decay"
    seed: int = 0
    K: int = 16
    hidden_dims: tuple = (64,)
    dz: int = 32
    fcl_activation: str = "linear"
    scale_refresh: str = "batch"
    quant_norm: str = "pairs_bits"
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lam_q < 0 or self.lam_w < 0:
            raise ValueError("loss weights must be non-negative")
        if self.pool not in net.POOL_MODES:
            raise ValueError(f"pool must be one of {net.POOL_MODES}")
        if self.robust not in ROBUST_MODES:
            raise ValueError(f"robust must be one of {ROBUST_MODES}")
        if self.tradeoff not in TRADEOFF_MODES:
            raise ValueError(f"tradeoff must be one of {TRADEOFF_MODES}")
        if self.scale_refresh not in ("batch", "epoch"):
            raise ValueError("scale_refresh must be 'batch' or 'epoch'")
        if self.quant_norm not in QUANT_NORMS:
            raise ValueError(f"quant_norm must be one of {QUANT_NORMS}")
        if self.fcl_activation not in net.FCL_ACTIVATIONS:
            raise ValueError(f"fcl_activation must be one of {net.FCL_ACTIVATIONS}")
        if self.K < 1 or self.dz < 1:
            raise ValueError("K and dz must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


LOG_COLUMNS = ("epoch", "lr", "lam_mi", "lam_si", "J", "J_mi", "J_si", "J_q", "R_w", "quant_error")


def init_model(cfg: TrainConfig, d: int) -> net.ModelParams:
    """Fresh parameters for input dimension ``d``, seeded by ``cfg.seed``."""
    return net.init_params(np.random.default_rng(cfg.seed), d, cfg.hidden_dims, cfg.dz, cfg.K,
                           cfg.fcl_activation)


def lr_at(t: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_decay ** (t - 1)


def sgd_step(params: net.ModelParams, grads: net.Gradients, velocity: net.ModelParams,
             lr: float, momentum: float) -> None:
    """Classical momentum, in place: ``v <- m*v - lr*g``; ``theta <- theta + v``."""
    for (name, g) in zip((n for n, _ in grads.blocks()), grads.arrays()):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    for p, g, v in zip(params.arrays(), grads.arrays(), velocity.arrays()):
        v *= momentum
        v -= lr * g
        p += v


def batch_objective(params, bags, cfg: TrainConfig, weights: LossWeights,
                    scale_mi=None, scale_si=None):
    """Forward pass plus composite loss on one batch.

    Returns ``(trace, breakdown)``; the breakdown carries the scales that
    were used so a caller can re-evaluate the loss at frozen thresholds.
    """
    trace = net.forward(params, bags, cfg.pool)
    S_mi = similarity_from_labels([b.label for b in bags])
    S_si = similarity_from_labels(instance_labels(bags))
    parts = composite_loss(trace.h_mi, trace.h_si, S_mi, S_si, weights,
                           params.weight_norm(), cfg.robust, scale_mi, scale_si,
                           cfg.quant_norm)
    return trace, parts


def epoch_scales(params, ds: BagDataset, cfg: TrainConfig, t: int):
    trace = net.forward(params, ds.bags, cfg.pool)
    if cfg.robust != "huber":
        return None, None
    return estimate_scale(trace.h_mi, t), estimate_scale(trace.h_si, t)


def epoch_batches(n: int, cfg: TrainConfig, t: int):
    order = np.random.default_rng([cfg.seed, t]).permutation(n)
    batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    return [b for b in batches if len(b) >= 2]


def train_epoch(params, velocity, ds: BagDataset, cfg: TrainConfig, t: int) -> dict:
    lam_mi, lam_si = tradeoff_weights(cfg.tradeoff, t, cfg.t_max)
    weights = LossWeights(lam_mi, lam_si, cfg.lam_q, cfg.lam_w, t, cfg.t_max)
    lr = lr_at(t, cfg)
    scale_mi = scale_si = None
    if cfg.scale_refresh == "epoch":
        scale_mi, scale_si = epoch_scales(params, ds, cfg, t)

    totals = dict.fromkeys(("J", "J_mi", "J_si", "J_q", "R_w", "quant_error"), 0.0)
    batches = epoch_batches(len(ds), cfg, t)
    if not batches:
        raise ValueError("dataset too small for a single batch of two bags")
    for idx in batches:
        bags = [ds.bags[i] for i in idx]
        trace, parts = batch_objective(params, bags, cfg, weights, scale_mi, scale_si)
        grads = net.backward(params, trace, parts.grad_mi, parts.grad_si, cfg.lam_w)
        try:
            sgd_step(params, grads, velocity, lr, cfg.momentum)
        except FloatingPointError as e:
            raise FloatingPointError(f"epoch {t}: {e}") from None
        totals["J"] += parts.total
        totals["J_mi"] += parts.j_mi
        totals["J_si"] += parts.j_si
        totals["J_q"] += parts.j_q
        totals["R_w"] += parts.r_w
        totals["quant_error"] += float(np.mean(np.abs(np.abs(trace.h_mi) - 1.0)))
    record = {"epoch": t, "lr": lr, "lam_mi": lam_mi, "lam_si": lam_si}
    record.update({k: v / len(batches) for k, v in totals.items()})
    return record


def save_training_checkpoint(path, params, velocity, cfg: TrainConfig, epoch: int) -> None:
    # the output location is not part of the model; keeps checkpoints relocatable
    config = cfg.to_dict() | {"checkpoint_dir": None}
    net.save_checkpoint(path, params, cfg.pool, config,
                        {"epoch": epoch, "optimizer": net.params_to_dict(velocity)})


def load_training_checkpoint(path):
    """Returns ``(params, velocity, cfg, epoch)`` from a checkpoint written by training."""
    params, _, doc = net.load_checkpoint(path)
    cfg = TrainConfig.from_dict(doc["config"])
    velocity = net.params_from_dict(doc["optimizer"]) if "optimizer" in doc else params.zeros_like()
    return params, velocity, cfg, int(doc.get("epoch", 0))


def train(ds: BagDataset, cfg: TrainConfig, params=None, velocity=None, start_epoch: int = 1):
    """Run epochs ``start_epoch..t_max``; returns ``(params, log_records)``.

    ``params``/``velocity`` resume an interrupted run; otherwise they are
    initialized from ``cfg.seed``.
    """
    if params is None:
        params = init_model(cfg, ds.d)
    if velocity is None:
        velocity = params.zeros_like()
    records = []
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    for t in range(start_epoch, cfg.t_max + 1):
        rec = train_epoch(params, velocity, ds, cfg, t)
        records.append(rec)
        log.info("epoch %d J=%.5f J_mi=%.5f J_si=%.5f qerr=%.4f", t, rec["J"], rec["J_mi"],
                 rec["J_si"], rec["quant_error"])
        if ckpt_dir and ((cfg.checkpoint_every and t % cfg.checkpoint_every == 0) or t == cfg.t_max):
            save_training_checkpoint(ckpt_dir / f"ckpt-epoch-{t}", params, velocity, cfg, t)
    return params, records


def write_log(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow({k: rec[k] if k == "epoch" else repr(float(rec[k])) for k in LOG_COLUMNS})


def read_log(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


def kink_margin(params, bags, cfg: TrainConfig, weights: LossWeights) -> float:
    """Distance of the current point to the nearest non-smooth point of the objective.

    Covers ReLU pre-activations at 0, max-pool runner-up gaps and Huber
    residuals at the threshold. Central differences straddling any of these
    measure the wrong slope, so gradient checks should stay well clear.
    """
    trace, parts = batch_objective(params, bags, cfg, weights)
    margins = [np.inf]
    x = trace.activations[0]
    for layer, a in zip(params.layers, trace.activations[1:]):
        if layer.activation == "relu":
            margins.append(np.abs(x @ layer.weight.T + layer.bias).min())
        x = a
    if cfg.pool == "max":
        z = trace.z
        for lo, hi in zip(trace.offsets[:-1], trace.offsets[1:]):
            if hi - lo > 1:
                top2 = np.sort(z[lo:hi], axis=0)[-2:]
                margins.append((top2[1] - top2[0]).min())
    if cfg.robust == "huber":
        for h, c in ((trace.h_mi, parts.scale_mi), (trace.h_si, parts.scale_si)):
            r = np.abs(h[:, None, :] - h[None, :, :])
            margins.append(np.abs(r - c).min())
    return float(min(margins))


def gradient_check(params, bags, cfg: TrainConfig, weights: LossWeights, eps: float = 1e-4,
                   tolerance: float = 1e-4, corrupt: bool = False,
                   max_coords_per_block: int | None = None, rng=None) -> net.GradCheckReport:
    """Central-difference check of the full composite objective on one batch.

    Huber thresholds are estimated once at the unperturbed parameters and held
    fixed, matching how training treats them. ``corrupt`` adds 1 to one
    analytic entry, which must make the check fail.
    """
    trace, parts = batch_objective(params, bags, cfg, weights)
    grads = net.backward(params, trace, parts.grad_mi, parts.grad_si, weights.lam_w)
    if corrupt:
        grads.mi_head.weight[0, 0] += 1.0

    def loss(p):
        return batch_objective(p, bags, cfg, weights, parts.scale_mi, parts.scale_si)[1].total

    return net.finite_diff_check(params, loss, grads, eps, tolerance, rng, max_coords_per_block)
