"""Bag-structured datasets: synthetic generation, label noise, splits and I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numeric import Rng


@dataclass(frozen=True)
class Bag:
    id: str
    instances: np.ndarray  # (n_i, d)
    label: int

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.instances.shape == other.instances.shape
            and np.array_equal(self.instances, other.instances)
        )

    __hash__ = None


@dataclass(frozen=True)
class BagDataset:
    d: int
    bags: list
    num_classes: int

    def __post_init__(self):
        if not self.bags:
            raise ValueError("no bags")
        for bag in self.bags:
            if bag.instances.ndim != 2 or bag.instances.shape[1] != self.d:
                raise ValueError(
                    f"bag {bag.id!r} has dimension {bag.instances.shape[-1]}, expected {self.d}"
                )
            if bag.size < 1:
                raise ValueError(f"bag {bag.id!r} is empty")
            if not 0 <= bag.label < self.num_classes:
                raise ValueError(f"bag {bag.id!r} has label {bag.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    @property
    def ids(self) -> list:
        return [b.id for b in self.bags]

    def subset(self, indices) -> "BagDataset":
        return BagDataset(self.d, [self.bags[i] for i in indices], self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.d}:{self.num_classes}".encode())
        for bag in self.bags:
            h.update(f"|{bag.id}:{bag.label}:{bag.instances.shape[0]}".encode())
            h.update(np.ascontiguousarray(bag.instances, dtype="<f8").tobytes())
        return h.hexdigest()


def similarity_from_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label list")
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def instance_labels(bags) -> np.ndarray:
    """Bag labels broadcast onto member instances, in bag order."""
    return np.concatenate([np.full(b.size, b.label) for b in bags])


def instance_similarity(bags) -> np.ndarray:
    if not bags:
        raise ValueError("empty bag list")
    return similarity_from_labels(instance_labels(bags))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    bags_per_class: int = 50
    dim: int = 16
    min_size: int = 2
    max_size: int = 6
    witness_rate: float = 0.5
    background_spread: float = 1.0
    witness_spread: float = 0.5
    separation: float = 3.0

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < 2:
            raise ValueError("need dim >= 2")
        if self.bags_per_class < 1:
            raise ValueError("need at least one bag per class")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError(f"invalid bag size range [{self.min_size}, {self.max_size}]")
        if not 0.0 <= self.witness_rate <= 1.0:
            raise ValueError("witness_rate must lie in [0, 1]")
        if self.background_spread < 0 or self.witness_spread < 0 or self.separation <= 0:
            raise ValueError("spreads must be >= 0 and separation > 0")


def concept_means(rng: Rng, classes: int, dim: int, separation: float) -> np.ndarray:
    """Random class concepts, each at distance ``separation`` from the origin."""
    means = rng.standard_normal((classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return separation * means


def generate_synthetic(rng: Rng, spec: SyntheticSpec = SyntheticSpec()) -> BagDataset:
    """Bags whose label is carried by a subset of "witness" instances.

    Witnesses sit near their class concept; the rest of each bag is drawn from
    one background distribution shared by all classes. Every bag has at least
    one witness.
    """
    spec.validate()
    means = concept_means(rng, spec.classes, spec.dim, spec.separation)
    bags = []
    for c in range(spec.classes):
        for b in range(spec.bags_per_class):
            n = int(rng.integers(spec.min_size, spec.max_size + 1))
            n_wit = max(1, int(round(spec.witness_rate * n)))
            x = spec.background_spread * rng.standard_normal((n, spec.dim))
            x[:n_wit] = means[c] + spec.witness_spread * rng.standard_normal((n_wit, spec.dim))
            x = x[rng.permutation(n)]
            bags.append(Bag(f"c{c}-b{b:04d}", x, c))
    return BagDataset(spec.dim, bags, spec.classes)


def inject_label_noise(ds: BagDataset, rng: Rng, rate: float) -> BagDataset:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate {rate} outside [0, 1]")
    n_flip = math.floor(rate * len(ds))
    chosen = rng.choice(len(ds), size=n_flip, replace=False)
    bags = list(ds.bags)
    for i in chosen:
        old = bags[i].label
        new = int(rng.integers(ds.num_classes - 1))
        if new >= old:
            new += 1
        bags[i] = replace(bags[i], label=new)
    return BagDataset(ds.d, bags, ds.num_classes)


def split(ds: BagDataset, rng: Rng, train_fraction: float = 0.8):
    """Stratified split into (train, test); both keep the original bag order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    labels = ds.labels
    train_idx = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            raise ValueError(f"class {c} has fewer than 2 bags, cannot stratify")
        n_train = int(round(train_fraction * members.size))
        n_train = min(max(n_train, 1), members.size - 1)
        train_idx.extend(rng.permutation(members)[:n_train].tolist())
    train_set = set(train_idx)
    train = sorted(train_set)
    test = [i for i in range(len(ds)) if i not in train_set]
    return (
        BagDataset(ds.d, [ds.bags[i] for i in train], ds.num_classes),
        BagDataset(ds.d, [ds.bags[i] for i in test], ds.num_classes),
    )


def save_bags(ds: BagDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"dim": ds.d, "classes": ds.num_classes}) + "\n")
        for bag in ds.bags:
            rec = {"id": bag.id, "label": str(bag.label), "instances": bag.instances.tolist()}
            f.write(json.dumps(rec) + "\n")


def load_bags(path) -> BagDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    lines = [(n, ln) for n, ln in enumerate(lines, start=1) if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: no bags")
    try:
        header = json.loads(lines[0][1])
        dim, classes = int(header["dim"]), int(header["classes"])
    except (ValueError, KeyError, TypeError) as e:
        raise ValueError(f"{path}:{lines[0][0]}: malformed header ({e})") from None
    bags = []
    seen = set()
    for lineno, text in lines[1:]:
        try:
            rec = json.loads(text)
            bag_id = str(rec["id"])
            label = int(rec["label"])
            x = np.array(rec["instances"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: malformed record ({e})") from None
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"{path}:{lineno}: bag {bag_id!r} has no instances or ragged instances")
        if x.shape[1] != dim:
            raise ValueError(
                f"{path}:{lineno}: bag {bag_id!r} has dimension {x.shape[1]}, file declares {dim}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{path}:{lineno}: bag {bag_id!r} has non-finite features")
        if not 0 <= label < classes:
            raise ValueError(f"{path}:{lineno}: bag {bag_id!r} label {label} outside [0, {classes})")
        if bag_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate bag id {bag_id!r}")
        seen.add(bag_id)
        bags.append(Bag(bag_id, x, label))
    if not bags:
        raise ValueError(f"{path}: no bags")
    return BagDataset(dim, bags, classes)
