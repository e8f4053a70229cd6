"""Top-K retrieval and the Recall / Hit Ratio / Coverage metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataset import InteractionLog
from .graph import BipartiteGraph, CategoryMap, IdMaps

METRICS = ("recall", "hit_ratio", "coverage")
_USER_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class EvalSet:
    """Held-out items per user, internal ids; users with no known items are absent."""

    users: np.ndarray
    items: tuple[np.ndarray, ...]

    def __len__(self):
        return int(self.users.size)


def build_eval_set(log: InteractionLog, maps: IdMaps) -> EvalSet:
    """Map a held-out log onto graph ids, dropping users/items unseen in training."""
    per_user: dict[int, list[int]] = {}
    for u, i in log.records:
        uu = maps.user_index.get(u)
        ii = maps.item_index.get(i)
        if uu is None or ii is None:
            continue
        per_user.setdefault(uu, []).append(ii)
    users = np.array(sorted(per_user), dtype=np.int64)
    return EvalSet(users, tuple(np.array(sorted(per_user[u]), dtype=np.int64) for u in users))


def recommend_topk(scores, K: int, exclude=()) -> np.ndarray:
    """Reference top-K for one user: full sort by (-score, item id)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    scores = np.asarray(scores, dtype=float)
    keep = np.ones(scores.size, dtype=bool)
    keep[np.asarray(list(exclude), dtype=np.int64)] = False
    items = np.flatnonzero(keep)
    order = np.lexsort((items, -scores[items]))
    return items[order[:K]]


def topk_matrix(scores: np.ndarray, K: int) -> np.ndarray:
    """Row-wise top-K ordered by (-score, column); ``-inf`` entries come back as -1.

    Linear-time partition picks the K-th value; ties at that value are filled
    in ascending column order, so the result equals a full stable sort.
    """
    B, n = scores.shape
    K = min(K, n)
    thr = np.partition(scores, n - K, axis=1)[:, n - K][:, None]
    gt = scores > thr
    eq = scores == thr
    need = K - gt.sum(axis=1, keepdims=True)
    take = gt | (eq & (np.cumsum(eq, axis=1) <= need))
    rows, cols = np.nonzero(take)
    cols = cols.reshape(B, K)
    vals = scores[rows, cols.ravel()].reshape(B, K)
    order = np.lexsort((cols, -vals), axis=-1)
    top = np.take_along_axis(cols, order, axis=1)
    top_vals = np.take_along_axis(vals, order, axis=1)
    top[np.isneginf(top_vals)] = -1
    return top


def _mask_train(scores: np.ndarray, users: np.ndarray, graph: BipartiteGraph) -> None:
    starts, ends = graph.user_indptr[users], graph.user_indptr[users + 1]
    rows = np.repeat(np.arange(users.size), ends - starts)
    cols = np.concatenate([graph.user_indices[s:e] for s, e in zip(starts, ends)]) if users.size else []
    scores[rows, cols] = -np.inf


def recommend_batch(users: np.ndarray, K: int, graph: BipartiteGraph, final: np.ndarray | None = None,
                    item_scores: np.ndarray | None = None) -> np.ndarray:
    """Top-K item ids for many users, train items excluded, padded with -1."""
    U = graph.user_count
    out = []
    for c0 in range(0, users.size, _USER_CHUNK):
        chunk = users[c0:c0 + _USER_CHUNK]
        if item_scores is not None:
            scores = np.tile(np.asarray(item_scores, dtype=float), (chunk.size, 1))
        else:
            scores = final[chunk] @ final[U:].T
        _mask_train(scores, chunk, graph)
        out.append(topk_matrix(scores, K))
    return np.concatenate(out) if out else np.zeros((0, K), dtype=np.int64)


def recall_at_k(recommended, test_items) -> float:
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise ValueError("recall undefined for an empty test set")
    return len(test.intersection(np.asarray(recommended).tolist())) / len(test)


def hit_ratio_at_k(recommended, test_items) -> int:
    return int(bool(set(np.asarray(test_items).tolist()).intersection(np.asarray(recommended).tolist())))


def coverage_at_k(recommended, categories: CategoryMap) -> int:
    rec = np.asarray(recommended, dtype=np.int64)
    rec = rec[rec >= 0]
    return int(np.unique(categories.item_category[rec]).size)


def popularity_scores(graph: BipartiteGraph) -> np.ndarray:
    return graph.item_degrees.astype(float)


@dataclass
class MetricsReport:
    values: dict[tuple[str, int], float]
    evaluated_user_count: int
    metadata: dict = field(default_factory=dict)

    def value(self, metric: str, cutoff: int) -> float:
        return self.values[(metric, cutoff)]

    @property
    def cutoffs(self) -> list[int]:
        return sorted({k for _, k in self.values})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "cutoff", "value"])
        for metric in METRICS:
            for k in self.cutoffs:
                writer.writerow([metric, k, f"{self.values[(metric, k)]:.10f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def table(self) -> str:
        header = f"{'metric':<10}" + "".join(f"{'@' + str(k):>12}" for k in self.cutoffs)
        lines = [header]
        for metric in METRICS:
            lines.append(f"{metric:<10}" + "".join(f"{self.values[(metric, k)]:>12.4f}" for k in self.cutoffs))
        lines.append(f"users evaluated: {self.evaluated_user_count}")
        return "\n".join(lines)


def evaluate(scorer: np.ndarray, eval_set: EvalSet, graph: BipartiteGraph, categories: CategoryMap,
             cutoffs=(100, 300), metadata: dict | None = None) -> MetricsReport:
    """Average the three metrics over users with a non-empty held-out set.

    ``scorer`` is either final node embeddings (N x d, dot-product scoring)
    or a 1-D per-item score vector shared by all users (popularity).
    """
    if len(eval_set) == 0:
        raise ValueError("no evaluable users")
    cutoffs = sorted({int(k) for k in cutoffs})
    kmax = cutoffs[-1]
    scorer = np.asarray(scorer)
    if scorer.ndim == 1:
        top = recommend_batch(eval_set.users, kmax, graph, item_scores=scorer)
    else:
        top = recommend_batch(eval_set.users, kmax, graph, final=scorer)

    n_items = graph.item_count
    sizes = np.array([t.size for t in eval_set.items])
    rows = np.repeat(np.arange(len(eval_set)), sizes)
    truth = np.sort(rows * n_items + np.concatenate(eval_set.items))
    valid = top >= 0
    keys = np.arange(len(eval_set))[:, None] * n_items + np.where(valid, top, 0)
    pos = np.minimum(np.searchsorted(truth, keys), truth.size - 1)
    hit = (truth[pos] == keys) & valid
    cats = np.where(valid, categories.item_category[np.where(valid, top, 0)], -1)

    values = {}
    for k in cutoffs:
        hits = hit[:, :k].sum(axis=1)
        values[("recall", k)] = float(np.mean(hits / sizes))
        values[("hit_ratio", k)] = float(np.mean(hits > 0))
        c = np.sort(cats[:, :k], axis=1)
        new_value = np.concatenate([np.ones((c.shape[0], 1), dtype=bool), np.diff(c, axis=1) != 0], axis=1)
        distinct = ((c >= 0) & new_value).sum(axis=1)
        values[("coverage", k)] = float(np.mean(distinct))
    return MetricsReport(values, len(eval_set), dict(metadata or {}))
