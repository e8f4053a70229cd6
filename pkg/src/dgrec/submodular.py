"""Submodular set functions and cardinality-constrained greedy maximization.

Elements of a ground set are addressed by position ``0..n-1``; callers keep
the ground set in ascending id order so that positional tie-breaking equals
smallest-id tie-breaking.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("facility_complement", "facility_full", "category_coverage", "bucket_coverage")
MONOTONE_VARIANTS = ("facility_full", "category_coverage", "bucket_coverage")

# gains closer than this are treated as tied and resolved by smallest position
TIE_TOL = 1e-12
BRUTE_FORCE_LIMIT = 20


@dataclass(frozen=True)
class KernelConfig:
    sigma_squared: float = 1.0

    def __post_init__(self):
        if not self.sigma_squared > 0:
            raise ValueError("sigma_squared must be positive")


@dataclass(frozen=True)
class SubmodularChoice:
    variant: str = "facility_complement"
    bucket_count: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown submodular variant {self.variant!r}")
        if self.variant == "bucket_coverage" and self.bucket_count < 1:
            raise ValueError("bucket_count must be >= 1")


@dataclass
class SelectionState:
    selected: list[int]
    best_sim: np.ndarray
    current_value: float


def gaussian_sim(e_i, e_j, cfg: KernelConfig) -> float:
    e_i = np.asarray(e_i, dtype=float)
    e_j = np.asarray(e_j, dtype=float)
    if e_i.shape != e_j.shape:
        raise ValueError(f"dimension mismatch: {e_i.shape} vs {e_j.shape}")
    diff = e_i - e_j
    return math.exp(-float(diff @ diff) / cfg.sigma_squared)


def similarity_matrix(features: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """Pairwise Gaussian kernel; the diagonal is exactly 1."""
    x = np.asarray(features, dtype=float)
    sq = np.einsum("ij,ij->i", x, x)
    dist = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(dist, 0.0, out=dist)
    np.fill_diagonal(dist, 0.0)
    return np.exp(-dist / cfg.sigma_squared)


@dataclass(frozen=True)
class BucketBoundaries:
    mins: np.ndarray
    widths: np.ndarray  # 0 marks a constant dimension
    bucket_count: int

    def assign(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=float))
        safe = np.where(self.widths > 0, self.widths, 1.0)
        idx = np.floor((values - self.mins) / safe).astype(np.int64)
        idx = np.clip(idx, 0, self.bucket_count - 1)
        idx[:, self.widths == 0] = 0
        return idx


def bucketize(embeddings, bucket_count: int) -> BucketBoundaries:
    """Equal-width buckets spanning each dimension's [min, max]."""
    if bucket_count < 1:
        raise ValueError("bucket_count must be >= 1")
    x = np.atleast_2d(np.asarray(embeddings, dtype=float))
    lo, hi = x.min(axis=0), x.max(axis=0)
    widths = np.where(hi > lo, (hi - lo) / bucket_count, 0.0)
    return BucketBoundaries(lo, widths, bucket_count)


@dataclass
class GroundSet:
    """Elements with optional embedding features and categories."""

    features: np.ndarray | None = None
    categories: np.ndarray | None = None
    _sim: dict = field(default_factory=dict, repr=False)
    _buckets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.features is not None:
            self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        if self.categories is not None:
            self.categories = np.asarray(self.categories, dtype=np.int64)

    @classmethod
    def scalars(cls, values) -> "GroundSet":
        return cls(features=np.asarray(values, dtype=float).reshape(-1, 1))

    def __len__(self):
        if self.features is not None:
            return self.features.shape[0]
        return len(self.categories)

    def sim(self, kernel: KernelConfig) -> np.ndarray:
        key = kernel.sigma_squared
        if key not in self._sim:
            self._sim[key] = similarity_matrix(self.features, kernel)
        return self._sim[key]

    def bucket_ids(self, bucket_count: int) -> np.ndarray:
        """Per element, the flat ids ``dim * bucket_count + bucket`` it covers."""
        if bucket_count not in self._buckets:
            bounds = bucketize(self.features, bucket_count)
            idx = bounds.assign(self.features)
            dims = np.arange(self.features.shape[1])
            self._buckets[bucket_count] = dims[None, :] * bucket_count + idx
        return self._buckets[bucket_count]

    def require(self, variant: str) -> None:
        if variant in ("facility_complement", "facility_full", "bucket_coverage") and self.features is None:
            raise ValueError(f"{variant} needs embedding features")
        if variant == "category_coverage" and self.categories is None:
            raise ValueError("category_coverage needs item categories")


def evaluate(choice: SubmodularChoice, subset, ground: GroundSet, kernel: KernelConfig | None = None) -> float:
    """Direct (non-incremental) evaluation of f(subset)."""
    n = len(ground)
    subset = [int(s) for s in subset]
    if any(s < 0 or s >= n for s in subset):
        raise ValueError("subset element outside the ground set")
    if len(set(subset)) != len(subset):
        raise ValueError("subset has duplicates")
    ground.require(choice.variant)
    if not subset:
        return 0.0
    variant = choice.variant
    if variant in ("facility_complement", "facility_full"):
        sim = ground.sim(kernel or KernelConfig())
        best = sim[:, subset].max(axis=1)
        if variant == "facility_complement":
            mask = np.ones(n, dtype=bool)
            mask[subset] = False
            return float(best[mask].sum())
        return float(best.sum())
    if variant == "category_coverage":
        return float(len(set(ground.categories[subset].tolist())))
    ids = ground.bucket_ids(choice.bucket_count)
    return float(np.unique(ids[subset]).size)


def _argmax_first(gains: np.ndarray, candidates: np.ndarray) -> int:
    """Position (in ``candidates``) of the largest gain, smallest id on ties."""
    g = gains[candidates]
    best = g.max()
    return int(candidates[np.flatnonzero(g >= best - TIE_TOL)[0]])


def greedy_select(ground: GroundSet, k: int, choice: SubmodularChoice,
                  kernel: KernelConfig | None = None) -> SelectionState:
    """Budget-driven greedy maximization with cached coverage state.

    Exactly ``min(k, n)`` steps are taken, even when the best marginal gain is
    negative (possible for ``facility_complement``).  ``best_sim`` holds
    max similarity to the selected set for the facility variants and a 0/1
    covered indicator (per category or bucket) for the coverage variants.
    """
    n = len(ground)
    if k < 1 or n == 0:
        raise ValueError("greedy_select needs k >= 1 and a non-empty ground set")
    ground.require(choice.variant)
    variant = choice.variant
    in_set = np.zeros(n, dtype=bool)
    selected: list[int] = []
    value = 0.0

    if variant in ("facility_complement", "facility_full"):
        sim = ground.sim(kernel or KernelConfig())
        best = np.zeros(n)
        for _ in range(min(k, n)):
            # improvement[v, i] = max(m_i, sim(i, v)) - m_i
            improvement = np.maximum(sim, best[None, :]) - best[None, :]
            if variant == "facility_full":
                gains = improvement.sum(axis=1)
            else:
                outside = ~in_set
                # sum over i outside S and i != v, minus v's own lost term m_v
                gains = improvement[:, outside].sum(axis=1) - np.diag(improvement) * outside - best
            v = _argmax_first(gains, np.flatnonzero(~in_set))
            value += float(gains[v])
            selected.append(v)
            in_set[v] = True
            np.maximum(best, sim[:, v], out=best)
        return SelectionState(selected, best, value)

    if variant == "category_coverage":
        cats = ground.categories
        n_cat = int(cats.max()) + 1
        covered = np.zeros(n_cat)
        for _ in range(min(k, n)):
            gains = 1.0 - covered[cats]
            v = _argmax_first(gains, np.flatnonzero(~in_set))
            value += float(gains[v])
            selected.append(v)
            in_set[v] = True
            covered[cats[v]] = 1.0
        return SelectionState(selected, covered, value)

    ids = ground.bucket_ids(choice.bucket_count)
    covered = np.zeros(ids.shape[1] * choice.bucket_count)
    for _ in range(min(k, n)):
        # each element covers exactly one bucket per dimension, so ids in a row are distinct
        gains = (1.0 - covered[ids]).sum(axis=1)
        v = _argmax_first(gains, np.flatnonzero(~in_set))
        value += float(gains[v])
        selected.append(v)
        in_set[v] = True
        covered[ids[v]] = 1.0
    return SelectionState(selected, covered, value)


def naive_greedy_select(ground: GroundSet, k: int, choice: SubmodularChoice,
                        kernel: KernelConfig | None = None) -> list[int]:
    """Greedy that re-evaluates f from scratch for every candidate."""
    n = len(ground)
    selected: list[int] = []
    for _ in range(min(k, n)):
        base = evaluate(choice, selected, ground, kernel)
        gains = np.full(n, -np.inf)
        for v in range(n):
            if v not in selected:
                gains[v] = evaluate(choice, selected + [v], ground, kernel) - base
        candidates = np.array([v for v in range(n) if v not in selected])
        selected.append(_argmax_first(gains, candidates))
    return selected


def brute_force_select(ground: GroundSet, k: int, choice: SubmodularChoice,
                       kernel: KernelConfig | None = None) -> tuple[tuple[int, ...], float]:
    """Exact maximizer over all subsets of size <= k (n <= 20)."""
    n = len(ground)
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} elements, got {n}")
    best_set: tuple[int, ...] = ()
    best_val = 0.0
    for size in range(1, min(k, n) + 1):
        for subset in itertools.combinations(range(n), size):
            val = evaluate(choice, subset, ground, kernel)
            if val > best_val + TIE_TOL or (abs(val - best_val) <= TIE_TOL and subset < best_set):
                best_set, best_val = subset, val
    return best_set, best_val


def greedy_select_many(features: np.ndarray, k: int, choice: SubmodularChoice,
                       kernel: KernelConfig) -> np.ndarray:
    """Facility-location greedy for a batch of equal-size ground sets.

    ``features`` has shape (batch, n, d); returns selected positions in pick
    order, shape (batch, min(k, n)).  Same gains and tie rule as
    ``greedy_select``.
    """
    if choice.variant not in ("facility_complement", "facility_full"):
        raise ValueError("batched greedy supports the facility variants only")
    x = np.asarray(features, dtype=float)
    batch, n, _ = x.shape
    sq = np.einsum("bnd,bnd->bn", x, x)
    dist = sq[:, :, None] + sq[:, None, :] - 2.0 * np.einsum("bnd,bmd->bnm", x, x)
    np.maximum(dist, 0.0, out=dist)
    diag = np.arange(n)
    dist[:, diag, diag] = 0.0
    sim = np.exp(-dist / kernel.sigma_squared)

    best = np.zeros((batch, n))
    in_set = np.zeros((batch, n), dtype=bool)
    rows = np.arange(batch)
    steps = min(k, n)
    picks = np.zeros((batch, steps), dtype=np.int64)
    for step in range(steps):
        improvement = np.maximum(sim, best[:, None, :]) - best[:, None, :]
        if choice.variant == "facility_full":
            gains = improvement.sum(axis=2)
        else:
            outside = ~in_set
            gains = (np.einsum("bvi,bi->bv", improvement, outside.astype(float))
                     - improvement[:, diag, diag] * outside - best)
        gains[in_set] = -np.inf
        top = gains.max(axis=1, keepdims=True)
        v = np.argmax(gains >= top - TIE_TOL, axis=1)
        picks[:, step] = v
        in_set[rows, v] = True
        np.maximum(best, sim[rows, :, v], out=best)
    return picks
