"""Compressed bipartite interaction graph and category bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import UNKNOWN_CATEGORY, InteractionLog


def _csr_from_pairs(rows: np.ndarray, cols: np.ndarray, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr, cols.astype(np.int64)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """User->items and item->users adjacency in offset+index form.

    Neighbor lists are sorted ascending; the two directions are transposes.
    """

    user_count: int
    item_count: int
    user_indptr: np.ndarray
    user_indices: np.ndarray
    item_indptr: np.ndarray
    item_indices: np.ndarray

    @classmethod
    def from_edges(cls, users, items, user_count: int, item_count: int) -> "BipartiteGraph":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size == 0:
            raise ValueError("graph needs at least one edge")
        if users.min() < 0 or users.max() >= user_count or items.min() < 0 or items.max() >= item_count:
            raise ValueError("edge endpoint out of range")
        keys = np.unique(users * item_count + items)
        users, items = keys // item_count, keys % item_count
        u_ptr, u_idx = _csr_from_pairs(users, items, user_count)
        i_ptr, i_idx = _csr_from_pairs(items, users, item_count)
        for arr in (u_ptr, u_idx, i_ptr, i_idx):
            arr.setflags(write=False)
        return cls(user_count, item_count, u_ptr, u_idx, i_ptr, i_idx)

    @property
    def edge_count(self) -> int:
        return int(self.user_indices.size)

    @property
    def node_count(self) -> int:
        return self.user_count + self.item_count

    @property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    @property
    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    def user_neighbors(self, u: int) -> np.ndarray:
        return self.user_indices[self.user_indptr[u]:self.user_indptr[u + 1]]

    def item_neighbors(self, i: int) -> np.ndarray:
        return self.item_indices[self.item_indptr[i]:self.item_indptr[i + 1]]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(users, items) arrays of every edge, user-major order."""
        users = np.repeat(np.arange(self.user_count), self.user_degrees)
        return users, self.user_indices.copy()

    def has_edges(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.item_count + np.asarray(items, dtype=np.int64)
        edge_keys = self._edge_keys()
        pos = np.searchsorted(edge_keys, keys)
        pos = np.minimum(pos, edge_keys.size - 1)
        return edge_keys[pos] == keys

    def _edge_keys(self) -> np.ndarray:
        cached = self.__dict__.get("_keys")
        if cached is None:
            users, items = self.edges()
            cached = users * self.item_count + items
            object.__setattr__(self, "_keys", cached)
        return cached


@dataclass(frozen=True)
class IdMaps:
    users: tuple[str, ...]
    items: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "user_index", {u: n for n, u in enumerate(self.users)})
        object.__setattr__(self, "item_index", {i: n for n, i in enumerate(self.items)})


def build_graph(train: InteractionLog) -> tuple[BipartiteGraph, IdMaps]:
    """Assign contiguous ids (sorted external keys) and build the adjacency."""
    if len(train) == 0:
        raise ValueError("cannot build a graph from an empty log")
    maps = IdMaps(tuple(sorted(train.users)), tuple(sorted(train.items)))
    users = np.fromiter((maps.user_index[u] for u, _ in train.records), dtype=np.int64, count=len(train))
    items = np.fromiter((maps.item_index[i] for _, i in train.records), dtype=np.int64, count=len(train))
    return BipartiteGraph.from_edges(users, items, len(maps.users), len(maps.items)), maps


def degree_norm(u_degree, i_degree):
    """Symmetric GCN normalization 1/(sqrt(d_u) sqrt(d_i)); works elementwise on arrays."""
    if np.any(np.asarray(u_degree) < 1) or np.any(np.asarray(i_degree) < 1):
        raise ValueError("degree_norm needs positive degrees")
    if np.isscalar(u_degree) and np.isscalar(i_degree):
        return 1.0 / (math.sqrt(u_degree) * math.sqrt(i_degree))
    return 1.0 / (np.sqrt(np.asarray(u_degree, dtype=float)) * np.sqrt(np.asarray(i_degree, dtype=float)))


@dataclass(frozen=True, eq=False)
class CategoryMap:
    item_category: np.ndarray
    category_sizes: np.ndarray
    names: tuple[str, ...]

    @classmethod
    def build(cls, maps: IdMaps, categories: dict[str, str]) -> "CategoryMap":
        raw = [categories.get(item, UNKNOWN_CATEGORY) for item in maps.items]
        names = tuple(sorted(set(raw)))
        index = {name: c for c, name in enumerate(names)}
        item_category = np.array([index[c] for c in raw], dtype=np.int64)
        sizes = np.bincount(item_category, minlength=len(names))
        return cls(item_category, sizes, names)

    @classmethod
    def from_array(cls, item_category) -> "CategoryMap":
        item_category = np.asarray(item_category, dtype=np.int64)
        n = int(item_category.max()) + 1 if item_category.size else 0
        return cls(item_category, np.bincount(item_category, minlength=n), tuple(f"c{c}" for c in range(n)))

    @property
    def category_count(self) -> int:
        return len(self.names)


@dataclass(frozen=True, eq=False)
class SelectedNeighborhoods:
    """Per-node diversified neighbor subsets, same layout as the graph.

    Replaced as a whole on every refresh; ``generation`` counts refreshes.
    """

    user_indptr: np.ndarray
    user_indices: np.ndarray
    item_indptr: np.ndarray
    item_indices: np.ndarray
    budget: int | None
    generation: int = 0

    @classmethod
    def full(cls, graph: BipartiteGraph, generation: int = 0) -> "SelectedNeighborhoods":
        return cls(graph.user_indptr, graph.user_indices, graph.item_indptr, graph.item_indices,
                   None, generation)

    @classmethod
    def from_lists(cls, user_lists, item_lists, budget, generation=0) -> "SelectedNeighborhoods":
        def pack(lists):
            indptr = np.zeros(len(lists) + 1, dtype=np.int64)
            np.cumsum([len(x) for x in lists], out=indptr[1:])
            indices = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if lists else np.zeros(0, np.int64)
            return indptr, indices.astype(np.int64)

        u_ptr, u_idx = pack(user_lists)
        i_ptr, i_idx = pack(item_lists)
        return cls(u_ptr, u_idx, i_ptr, i_idx, budget, generation)

    def user_selected(self, u: int) -> np.ndarray:
        return self.user_indices[self.user_indptr[u]:self.user_indptr[u + 1]]

    def item_selected(self, i: int) -> np.ndarray:
        return self.item_indices[self.item_indptr[i]:self.item_indptr[i + 1]]

    @property
    def user_sizes(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    @property
    def item_sizes(self) -> np.ndarray:
        return np.diff(self.item_indptr)
