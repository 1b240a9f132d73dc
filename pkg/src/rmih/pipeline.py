"""Glue between a trained model and the retrieval index, plus the ablation grid."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import net
from .data import BagDataset
from .retrieval import (build_index, euclidean_distances, nnca, nnca_from_distances,
                        self_mask)
from .trainer import TrainConfig, train


def embed(params, ds: BagDataset, pool: str):
    """Relaxed codes: ``(h_mi, h_si_blocks)`` with one block per bag."""
    trace = net.forward(params, ds.bags, pool)
    blocks = [trace.h_si[a:b] for a, b in zip(trace.offsets[:-1], trace.offsets[1:])]
    return trace.h_mi, blocks


def index_dataset(params, ds: BagDataset, pool: str, mode: str = "bag_code"):
    h_mi, blocks = embed(params, ds, pool)
    if mode == "bag_code":
        codes = net.quantize(h_mi)
    else:
        codes = [net.quantize(b) for b in blocks]
    return build_index(ds.ids, ds.labels, codes, mode)


def heldout_nnca(params, db: BagDataset, queries: BagDataset, pool: str,
                 binarized: bool = True, mode: str = "bag_code") -> float:
    """Nearest-neighbour accuracy of ``queries`` retrieved against ``db``.

    ``binarized=False`` ranks by Euclidean distance between the relaxed bag
    codes instead of Hamming distance between their signs.
    """
    if binarized:
        return nnca(index_dataset(params, db, pool, mode), index_dataset(params, queries, pool, mode))
    h_db, _ = embed(params, db, pool)
    h_q, _ = embed(params, queries, pool)
    D = euclidean_distances(h_q, h_db)
    return nnca_from_distances(D, queries.labels, db.labels, self_mask(db.ids, queries.ids))


@dataclass(frozen=True)
class Variant:
    name: str
    robust: str
    tradeoff: str
    pool: str = "max"
    lam_q: float | None = None  # None keeps the base config value
    binarized: bool = True


VARIANTS = {
    v.name: v
    for v in (
        Variant("A", "l2", "equal"),
        Variant("B", "l2", "decay"),
        Variant("C", "huber", "equal"),
        Variant("D", "l2", "no_si"),
        Variant("E", "huber", "no_si"),
        Variant("RMIH-mean", "huber", "decay", pool="mean"),
        Variant("RMIH-max", "huber", "decay", pool="max"),
        Variant("RMIH(lq=0)", "huber", "decay", lam_q=0.0),
        Variant("RMIH-NB", "huber", "decay", binarized=False),
    )
}


def variant_config(base: TrainConfig, v: Variant, seed: int) -> TrainConfig:
    return replace(base, robust=v.robust, tradeoff=v.tradeoff, pool=v.pool,
                   lam_q=base.lam_q if v.lam_q is None else v.lam_q, seed=seed,
                   checkpoint_dir=None)


def run_variant(train_ds: BagDataset, test_ds: BagDataset, base: TrainConfig, v: Variant,
                seed: int) -> float:
    cfg = variant_config(base, v, seed)
    params, _ = train(train_ds, cfg)
    return heldout_nnca(params, train_ds, test_ds, cfg.pool, v.binarized)
