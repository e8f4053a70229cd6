"""Interaction ingestion, k-core filtering, splitting and synthetic data."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNKNOWN_CATEGORY = "__unknown__"

Record = tuple[str, str]


class DataError(ValueError):
    """Raised for malformed input files or degenerate data."""


@dataclass(frozen=True)
class InteractionLog:
    records: tuple[Record, ...]

    def __post_init__(self):
        if len(set(self.records)) != len(self.records):
            raise DataError("duplicate (user, item) records in log")

    @classmethod
    def from_pairs(cls, pairs) -> "InteractionLog":
        """Build a log, dropping exact duplicates but keeping first-seen order."""
        seen = dict.fromkeys((str(u), str(i)) for u, i in pairs)
        return cls(tuple(seen))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def users(self) -> set[str]:
        return {u for u, _ in self.records}

    @property
    def items(self) -> set[str]:
        return {i for _, i in self.records}


@dataclass(frozen=True)
class SplitBundle:
    train: InteractionLog
    validation: InteractionLog
    test: InteractionLog
    seed: int
    ratios: tuple[float, float, float]


@dataclass(frozen=True)
class SyntheticSpec:
    user_count: int = 5000
    item_count: int = 3000
    category_count: int = 40
    zipf_exponent: float = 1.2
    majority_interest_prob: float = 0.7
    interactions_per_user: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("user_count", "item_count", "category_count", "interactions_per_user"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.zipf_exponent < 0:
            raise DataError("zipf_exponent must be non-negative")
        if not 0 < self.majority_interest_prob <= 1:
            raise DataError("majority_interest_prob must lie in (0, 1]")
        if self.category_count > self.item_count:
            raise DataError("more categories than items")


def _read_pairs(path: Path, what: str) -> list[Record]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) < 2 or not parts[0].strip() or not parts[1].strip():
            raise DataError(f"{path}: malformed {what} line {lineno}: {line!r}")
        pairs.append((parts[0].strip(), parts[1].strip()))
    if not pairs:
        raise DataError(f"{path}: empty {what} file")
    return pairs


def read_interactions(path) -> InteractionLog:
    return InteractionLog.from_pairs(_read_pairs(path, "interaction"))


def read_categories(path) -> dict[str, str]:
    categories = {}
    for item, cat in _read_pairs(path, "category"):
        categories.setdefault(item, cat)
    return categories


def ingest(interactions_path, categories_path=None) -> tuple[InteractionLog, dict[str, str]]:
    """Read an interaction file and its item->category file.

    Items with no category entry are mapped to ``UNKNOWN_CATEGORY``; category
    rows for items that never occur in the log are dropped.
    """
    log = read_interactions(interactions_path)
    raw = read_categories(categories_path) if categories_path is not None else {}
    categories = {item: raw.get(item, UNKNOWN_CATEGORY) for item in sorted(log.items)}
    return log, categories


def write_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in log.records:
            fh.write(f"{u}\t{i}\n")


def write_categories(categories: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(categories):
            fh.write(f"{item}\t{categories[item]}\n")


def k_core_filter(log: InteractionLog, k: int) -> InteractionLog:
    """Maximal k-core of the bipartite interaction graph.

    All users and items below degree k are removed simultaneously each round
    until nothing changes.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    records = list(log.records)
    while True:
        user_deg = Counter(u for u, _ in records)
        item_deg = Counter(i for _, i in records)
        kept = [(u, i) for u, i in records if user_deg[u] >= k and item_deg[i] >= k]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise DataError("k-core eliminates all data")
    return InteractionLog(tuple(records))


def _split_counts(n: int, ratios) -> tuple[int, int, int]:
    if n < 3:
        return n, 0, 0
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise DataError(f"split ratios must be three positive fractions summing to 1, got {ratios}")
    return ratios


def split(log: InteractionLog, ratios=(0.6, 0.2, 0.2), seed: int = 0, mode: str = "per_user") -> SplitBundle:
    """Random train/validation/test split.

    ``per_user`` partitions each user's interactions by ``ratios`` (floor for
    validation and test, remainder to train; users with fewer than three
    interactions go entirely to train).  ``global`` permutes all records and
    cuts once, then moves any validation/test record whose user has no train
    interaction back into train.
    """
    ratios = _check_ratios(ratios)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    if mode == "per_user":
        by_user = defaultdict(list)
        for u, i in log.records:
            by_user[u].append(i)
        for u in sorted(by_user):
            items = sorted(by_user[u])
            order = rng.permutation(len(items))
            n_train, n_val, _ = _split_counts(len(items), ratios)
            shuffled = [(u, items[j]) for j in order]
            train.extend(shuffled[:n_train])
            val.extend(shuffled[n_train:n_train + n_val])
            test.extend(shuffled[n_train + n_val:])
    elif mode == "global":
        records = sorted(log.records)
        order = rng.permutation(len(records))
        n_train, n_val, _ = _split_counts(len(records), ratios)
        shuffled = [records[j] for j in order]
        train = shuffled[:n_train]
        train_users = {u for u, _ in train}
        for rec in shuffled[n_train:n_train + n_val]:
            (val if rec[0] in train_users else train).append(rec)
        for rec in shuffled[n_train + n_val:]:
            (test if rec[0] in train_users else train).append(rec)
    else:
        raise DataError(f"unknown split mode {mode!r}")
    return SplitBundle(
        InteractionLog(tuple(train)),
        InteractionLog(tuple(val)),
        InteractionLog(tuple(test)),
        seed=seed,
        ratios=ratios,
    )


def zipf_category_sizes(item_count: int, category_count: int, exponent: float) -> np.ndarray:
    """Category sizes proportional to rank**-exponent, each at least one item.

    Largest-remainder rounding keeps the total exact and the sizes sorted.
    """
    ranks = np.arange(1, category_count + 1, dtype=float)
    share = ranks ** -exponent
    spare = item_count - category_count
    raw = share / share.sum() * spare
    sizes = np.floor(raw).astype(np.int64)
    remainder = spare - sizes.sum()
    # stable sort keeps lower ranks first among equal fractional parts
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    return sizes + 1


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionLog, dict[str, str]]:
    """Long-tailed synthetic interactions with a category per item.

    Each user has one majority category, drawn proportionally to category
    size.  Every interaction comes from that category with probability
    ``majority_interest_prob`` and uniformly from all items otherwise; items
    are distinct per user.
    """
    if spec.interactions_per_user > spec.item_count:
        raise DataError("interactions_per_user exceeds item_count")
    rng = np.random.default_rng(spec.seed)
    sizes = zipf_category_sizes(spec.item_count, spec.category_count, spec.zipf_exponent)
    item_category = np.repeat(np.arange(spec.category_count), sizes)
    rng.shuffle(item_category)
    members = [np.flatnonzero(item_category == c) for c in range(spec.category_count)]
    member_sets = [set(m.tolist()) for m in members]
    majority = rng.choice(spec.category_count, size=spec.user_count, p=sizes / sizes.sum())

    width_u = len(str(spec.user_count - 1))
    width_i = len(str(spec.item_count - 1))
    records = []
    for u in range(spec.user_count):
        pool, pool_set = members[majority[u]], member_sets[majority[u]]
        chosen: set[int] = set()
        picks = []
        taken_from_pool = 0
        while len(picks) < spec.interactions_per_user:
            from_major = rng.random() < spec.majority_interest_prob
            if from_major and taken_from_pool < len(pool):
                item = int(pool[rng.integers(len(pool))])
            elif from_major and spec.majority_interest_prob == 1.0:
                break  # majority category exhausted
            else:
                item = int(rng.integers(spec.item_count))
            if item not in chosen:
                chosen.add(item)
                picks.append(item)
                taken_from_pool += item in pool_set
        records.extend((f"u{u:0{width_u}d}", f"i{i:0{width_i}d}") for i in picks)
    categories = {f"i{i:0{width_i}d}": f"c{int(c):02d}" for i, c in enumerate(item_category)}
    log = InteractionLog(tuple(records))
    used = log.items
    return log, {k: v for k, v in categories.items() if k in used}


def dataset_stats(log: InteractionLog, categories: dict[str, str]) -> dict[str, float]:
    items = log.items
    n_cat = len({categories.get(i, UNKNOWN_CATEGORY) for i in items})
    return {
        "users": len(log.users),
        "items": len(items),
        "interactions": len(log),
        "categories": n_cat,
        "avg_category_size": len(items) / n_cat if n_cat else 0.0,
    }


def format_stats(stats: dict[str, float]) -> str:
    rows = [
        ("Users", f"{stats['users']:,}"),
        ("Items", f"{stats['items']:,}"),
        ("Interactions", f"{stats['interactions']:,}"),
        ("Categories", f"{stats['categories']:,}"),
        ("Average Category Size", f"{stats['avg_category_size']:.3f}"),
    ]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def write_split(bundle: SplitBundle, categories: dict[str, str], out_dir, extra: dict | None = None) -> list[Path]:
    """Write train/validation/test/categories files plus a key=value manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("train", "validation", "test"):
        p = out / f"{name}.tsv"
        write_interactions(getattr(bundle, name), p)
        paths.append(p)
    cat_path = out / "categories.tsv"
    write_categories(categories, cat_path)
    paths.append(cat_path)
    manifest = {
        "seed": bundle.seed,
        "ratios": ",".join(f"{r:g}" for r in bundle.ratios),
        "train_count": len(bundle.train),
        "validation_count": len(bundle.validation),
        "test_count": len(bundle.test),
        **(extra or {}),
    }
    man_path = out / "manifest.txt"
    man_path.write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    paths.append(man_path)
    return paths


def read_split(split_dir) -> tuple[SplitBundle, dict[str, str]]:
    d = Path(split_dir)
    manifest = {}
    man_path = d / "manifest.txt"
    if man_path.exists():
        for line in man_path.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                manifest[key.strip()] = value.strip()

    def load(name):
        p = d / f"{name}.tsv"
        if p.stat().st_size == 0:
            return InteractionLog(())
        return read_interactions(p)

    bundle = SplitBundle(
        load("train"),
        load("validation"),
        load("test"),
        seed=int(manifest.get("seed", 0)),
        ratios=tuple(float(r) for r in manifest.get("ratios", "0.6,0.2,0.2").split(",")),
    )
    categories = read_categories(d / "categories.tsv")
    return bundle, categories
