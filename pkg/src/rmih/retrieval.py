"""Hamming-space index over bag codes, bag-level distance and retrieval metrics."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

INDEX_MODES = ("bag_code", "instance_codes")
PR_GRID = np.round(np.arange(1, 21) * 0.05, 2)


def pack_codes(codes) -> np.ndarray:
    """Pack ``(n, K)`` codes over {-1, +1} into ``(n, ceil(K/64))`` uint64 words.

    Bit ``k`` of a code lands in word ``k // 64`` at position ``k % 64``;
    ``+1`` is a set bit.
    """
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    n, K = codes.shape
    n_words = max(1, -(-K // 64))
    bits = np.zeros((n, n_words * 64), dtype=np.uint8)
    bits[:, :K] = codes > 0
    packed = np.packbits(bits, axis=1, bitorder="little")
    return packed.view("<u8").reshape(n, n_words)


def unpack_codes(words, K: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    bits = np.unpackbits(words.view(np.uint8), axis=1, bitorder="little")[:, :K]
    return np.where(bits > 0, 1, -1).astype(np.int8)


def hamming_words(a, b) -> np.ndarray:
    """All-pairs popcount distance between packed rows of ``a`` and ``b``."""
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def hamming(a, b) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"code length mismatch: {a.shape} vs {b.shape}")
    return int(hamming_words(pack_codes(a), pack_codes(b))[0, 0])


def bag_distance(query, db) -> float:
    """Mean over the query bag's codes of the nearest Hamming distance into ``db``."""
    query = np.asarray(query)
    db = np.asarray(db)
    if query.ndim == 1:
        query = query[None, :]
    if db.ndim == 1:
        db = db[None, :]
    if query.shape[0] == 0 or db.shape[0] == 0:
        raise ValueError("bag_distance needs non-empty code lists")
    if query.shape[1] != db.shape[1]:
        raise ValueError(f"code length mismatch: {query.shape[1]} vs {db.shape[1]}")
    return float(hamming_words(pack_codes(query), pack_codes(db)).min(axis=1).mean())


@dataclass
class RetrievalIndex:
    K: int
    mode: str
    ids: list = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    words: np.ndarray | None = None  # (total codes, W) packed
    offsets: np.ndarray | None = None  # (entries+1,) code block boundaries

    def __len__(self) -> int:
        return len(self.ids)

    def codes_of(self, i: int) -> np.ndarray:
        return unpack_codes(self.words[self.offsets[i]:self.offsets[i + 1]], self.K)

    def distances(self, query_codes) -> np.ndarray:
        """Distance from one query (a code, or a bag of codes) to every entry."""
        if len(self) == 0:
            raise ValueError("query against an empty index")
        q = np.asarray(query_codes)
        if q.ndim == 1:
            q = q[None, :]
        if q.shape[1] != self.K:
            raise ValueError(f"query has {q.shape[1]} bits, index has K={self.K}")
        H = hamming_words(pack_codes(q), self.words)
        if self.mode == "bag_code":
            return H[0].astype(np.float64)
        return np.minimum.reduceat(H, self.offsets[:-1], axis=1).mean(axis=0)


def build_index(ids, labels, codes, mode: str = "bag_code") -> RetrievalIndex:
    """Index in insertion order.

    ``codes`` is an ``(N, K)`` array in ``bag_code`` mode and a list of
    ``(n_i, K)`` arrays in ``instance_codes`` mode.
    """
    if mode not in INDEX_MODES:
        raise ValueError(f"mode must be one of {INDEX_MODES}")
    ids = [str(i) for i in ids]
    if len(ids) != len(labels) or len(ids) != len(codes):
        raise ValueError("ids, labels and codes must have equal length")
    if not ids:
        return RetrievalIndex(0, mode)
    if mode == "bag_code":
        blocks = [np.asarray(c).reshape(1, -1) for c in codes]
    else:
        blocks = [np.atleast_2d(np.asarray(c)) for c in codes]
    Ks = {b.shape[1] for b in blocks}
    if len(Ks) != 1:
        raise ValueError(f"inconsistent code lengths {sorted(Ks)}")
    if any(b.shape[0] == 0 for b in blocks):
        raise ValueError("entry without codes")
    K = Ks.pop()
    sizes = [b.shape[0] for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    words = pack_codes(np.concatenate(blocks, axis=0))
    return RetrievalIndex(K, mode, ids, np.asarray(labels, dtype=np.int64), words, offsets)


def query_topk(index: RetrievalIndex, query_codes, k: int, exclude_id: str | None = None):
    """Ranked ``(id, distance)`` pairs; ties keep insertion order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    d = index.distances(query_codes)
    order = np.argsort(d, kind="stable")
    out = []
    for i in order:
        if exclude_id is not None and index.ids[i] == exclude_id:
            continue
        out.append((index.ids[i], float(d[i])))
        if len(out) == k:
            break
    return out


def distance_matrix(index: RetrievalIndex, queries: RetrievalIndex) -> np.ndarray:
    if queries.K != index.K:
        raise ValueError(f"query K={queries.K} does not match index K={index.K}")
    return np.stack([index.distances(queries.codes_of(i)) for i in range(len(queries))])


def self_mask(db_ids, query_ids) -> np.ndarray:
    """``True`` where query and database entry are the same bag."""
    return np.asarray(query_ids, dtype=object)[:, None] == np.asarray(db_ids, dtype=object)[None, :]


def _ranked(D, mask):
    D = np.where(mask, np.inf, np.asarray(D, dtype=np.float64))
    order = np.argsort(D, axis=1, kind="stable")
    valid = ~np.take_along_axis(mask, order, axis=1)
    return order, valid


def nnca_from_distances(D, query_labels, db_labels, mask=None) -> float:
    D = np.asarray(D, dtype=np.float64)
    if D.shape[1] == 0:
        raise ValueError("empty database")
    if mask is None:
        mask = np.zeros(D.shape, dtype=bool)
    order, valid = _ranked(D, mask)
    hits = []
    for q in range(D.shape[0]):
        cand = order[q][valid[q]]
        if cand.size:
            hits.append(db_labels[cand[0]] == query_labels[q])
    return float(np.mean(hits)) if hits else 0.0


def group_labels(labels, label_groups=None) -> np.ndarray:
    """Map labels through ``label_groups`` (label -> group); identity when ``None``."""
    labels = np.asarray(labels)
    if label_groups is None:
        return labels
    return np.array([label_groups.get(int(l), int(l)) for l in labels], dtype=np.int64)


def pr_from_distances(D, query_labels, db_labels, mask=None, grid=PR_GRID, label_groups=None):
    """Interpolated macro-averaged PR points on ``grid`` and mean average precision.

    Relevance is strict label equality unless ``label_groups`` merges labels
    (e.g. ``{0: 0, 1: 1, 2: 1}`` for one-class-vs-rest). Queries with no
    relevant database entry are skipped.
    """
    D = np.asarray(D, dtype=np.float64)
    db_labels = group_labels(db_labels, label_groups)
    query_labels = group_labels(query_labels, label_groups)
    if mask is None:
        mask = np.zeros(D.shape, dtype=bool)
    order, valid = _ranked(D, mask)
    curves, aps = [], []
    for q in range(D.shape[0]):
        cand = order[q][valid[q]]
        rel = (db_labels[cand] == query_labels[q]).astype(np.float64)
        n_rel = rel.sum()
        if n_rel == 0:
            continue
        tp = np.cumsum(rel)
        precision = tp / np.arange(1, rel.size + 1)
        recall = tp / n_rel
        aps.append(float(np.sum(precision * rel) / n_rel))
        # interpolated precision: best precision at any recall >= r
        best_after = np.maximum.accumulate(precision[::-1])[::-1]
        pos = np.searchsorted(recall, np.asarray(grid) - 1e-12, side="left")
        curves.append(best_after[np.minimum(pos, rel.size - 1)])
    if not aps:
        return [(float(r), 0.0) for r in grid], 0.0
    mean_curve = np.mean(curves, axis=0)
    return [(float(r), float(p)) for r, p in zip(grid, mean_curve)], float(np.mean(aps))


def nnca(index: RetrievalIndex, queries: RetrievalIndex) -> float:
    D = distance_matrix(index, queries)
    return nnca_from_distances(D, queries.labels, index.labels, self_mask(index.ids, queries.ids))


def pr_curve(index: RetrievalIndex, queries: RetrievalIndex, label_groups=None):
    D = distance_matrix(index, queries)
    return pr_from_distances(D, queries.labels, index.labels, self_mask(index.ids, queries.ids),
                             label_groups=label_groups)


@dataclass
class EvalReport:
    nnca: float
    pr_points: list
    map: float
    latency_ms: dict = field(default_factory=dict)


def evaluate(index: RetrievalIndex, queries: RetrievalIndex, label_groups=None) -> EvalReport:
    rows, lat = [], []
    for i in range(len(queries)):
        codes = queries.codes_of(i)
        t0 = time.perf_counter()
        rows.append(index.distances(codes))
        lat.append((time.perf_counter() - t0) * 1e3)
    D = np.stack(rows) if rows else np.zeros((0, len(index)))
    mask = self_mask(index.ids, queries.ids)
    acc = nnca_from_distances(D, queries.labels, index.labels, mask)
    points, m = pr_from_distances(D, queries.labels, index.labels, mask,
                                  label_groups=label_groups)
    lat = np.asarray(lat) if lat else np.zeros(1)
    stats = {"p50": float(np.percentile(lat, 50)), "p95": float(np.percentile(lat, 95)),
             "max": float(lat.max())}
    return EvalReport(acc, points, m, stats)


def euclidean_distances(Q, X) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    d2 = (Q * Q).sum(1)[:, None] + (X * X).sum(1)[None, :] - 2.0 * Q @ X.T
    return np.sqrt(np.maximum(d2, 0.0))


def save_index(index: RetrievalIndex, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"K": index.K, "mode": index.mode, "count": len(index)}) + "\n")
        for i, (bag_id, label) in enumerate(zip(index.ids, index.labels)):
            block = index.words[index.offsets[i]:index.offsets[i + 1]]
            codes = ["".join(f"{int(w):016x}" for w in row) for row in block]
            f.write(json.dumps({"id": bag_id, "label": str(int(label)), "codes": codes}) + "\n")


def load_index(path) -> RetrievalIndex:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty index file")
    header = json.loads(lines[0])
    K, mode, count = int(header["K"]), header["mode"], int(header["count"])
    if mode not in INDEX_MODES:
        raise ValueError(f"{path}: unknown mode {mode!r}")
    if len(lines) - 1 != count:
        raise ValueError(f"{path}: header declares {count} entries, found {len(lines) - 1}")
    if count == 0:
        return RetrievalIndex(K, mode)
    ids, labels, blocks = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        words = np.array([[int(s[j:j + 16], 16) for j in range(0, len(s), 16)] for s in rec["codes"]],
                         dtype=np.uint64)
        if words.shape[1] != max(1, -(-K // 64)):
            raise ValueError(f"{path}:{lineno}: code width does not match K={K}")
        ids.append(rec["id"])
        labels.append(int(rec["label"]))
        blocks.append(words)
    sizes = [b.shape[0] for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return RetrievalIndex(K, mode, ids, np.asarray(labels, dtype=np.int64),
                          np.concatenate(blocks, axis=0), offsets)
