"""Embedding table, light graph convolution and layer readouts.

Node ``n < user_count`` is a user; node ``user_count + i`` is item ``i``.
Every forward step here has a matching ``*_backward`` used by training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import BipartiteGraph, SelectedNeighborhoods, degree_norm

log = logging.getLogger(__name__)

NORM_CONVENTIONS = ("full", "selected")


@dataclass
class ModelParams:
    embeddings: np.ndarray  # (user_count + item_count, d)
    attention: np.ndarray  # (d,) shared, or (2, d) with a user row and an item row

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.embeddings.copy(), self.attention.copy())

    def arrays(self) -> list[np.ndarray]:
        return [self.embeddings, self.attention]

    def squared_norm(self) -> float:
        return float(np.sum(self.embeddings ** 2) + np.sum(self.attention ** 2))


def init_params(user_count: int, item_count: int, d: int, seed: int = 0,
                init_scale: float = 0.1, per_side_attention: bool = False) -> ModelParams:
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 1.0, size=(user_count + item_count, d)) * init_scale
    att = rng.normal(0.0, 1.0, size=(2, d) if per_side_attention else (d,)) * init_scale
    return ModelParams(emb, att)


def propagation_matrix(graph: BipartiteGraph, neighborhoods: SelectedNeighborhoods,
                       norm: str = "full") -> sp.csr_matrix:
    """Sparse P with E^(l+1) = P @ E^(l) over the selected neighborhoods.

    Row u holds ``norm(u, i)`` for ``i in S_u`` and row ``U + i`` holds
    ``norm(i, u)`` for ``u in S_i``.  ``norm="full"`` uses graph degrees,
    ``norm="selected"`` uses selected-subset sizes.
    """
    if norm not in NORM_CONVENTIONS:
        raise ValueError(f"unknown degree convention {norm!r}")
    U, I = graph.user_count, graph.item_count
    if norm == "full":
        u_deg, i_deg = graph.user_degrees, graph.item_degrees
    else:
        u_deg = np.maximum(neighborhoods.user_sizes, 1)
        i_deg = np.maximum(neighborhoods.item_sizes, 1)

    u_rows = np.repeat(np.arange(U), neighborhoods.user_sizes)
    u_cols = neighborhoods.user_indices
    i_rows = np.repeat(np.arange(I), neighborhoods.item_sizes)
    i_cols = neighborhoods.item_indices
    rows = np.concatenate([u_rows, U + i_rows])
    cols = np.concatenate([U + u_cols, i_cols])
    vals = np.concatenate([
        degree_norm(u_deg[u_rows], i_deg[u_cols]) if u_rows.size else np.zeros(0),
        degree_norm(u_deg[i_cols], i_deg[i_rows]) if i_rows.size else np.zeros(0),
    ])
    empty = int(np.sum(neighborhoods.user_sizes == 0) + np.sum(neighborhoods.item_sizes == 0))
    if empty:
        log.info("%d nodes have empty selected neighborhoods; they propagate zero vectors", empty)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(U + I, U + I))
    P.sort_indices()
    return P


def propagate(P: sp.csr_matrix, embeddings: np.ndarray, layers: int) -> list[np.ndarray]:
    """Light graph convolution: ``[E0, P E0, P^2 E0, ...]`` (no self loop, no transform)."""
    if layers < 0:
        raise ValueError("layer count must be >= 0")
    out = [embeddings]
    for _ in range(layers):
        out.append(P @ out[-1])
    return out


def propagate_backward(P_T: sp.csr_matrix, layer_grads: list[np.ndarray]) -> np.ndarray:
    """Gradient w.r.t. E0 given dL/dE^(l) for every layer (P_T is P transposed)."""
    g = layer_grads[-1]
    for grad in reversed(layer_grads[:-1]):
        g = grad + P_T @ g
    return g


def _node_attention(attention: np.ndarray, user_count: int, node_count: int) -> np.ndarray:
    """Attention vector per node, shape (N, d)."""
    if attention.ndim == 1:
        return np.broadcast_to(attention, (node_count, attention.size))
    side = (np.arange(node_count) >= user_count).astype(np.int64)
    return attention[side]


@dataclass
class ReadoutResult:
    final: np.ndarray  # (N, d)
    weights: np.ndarray  # (N, L+1)


def layer_attention_readout(layers: list[np.ndarray], attention: np.ndarray,
                            user_count: int = 0) -> ReadoutResult:
    """Softmax over per-layer scores <W, e^(l)>, weighted sum of the layers."""
    stack = np.stack(layers, axis=1)  # (N, L+1, d)
    w = _node_attention(attention, user_count, stack.shape[0])
    scores = np.einsum("nld,nd->nl", stack, w)
    scores -= scores.max(axis=1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=1, keepdims=True)
    final = np.einsum("nl,nld->nd", a, stack)
    return ReadoutResult(final, a)


def layer_attention_backward(layers: list[np.ndarray], attention: np.ndarray,
                             readout: ReadoutResult, grad_final: np.ndarray,
                             user_count: int = 0) -> tuple[list[np.ndarray], np.ndarray]:
    """Backward through the attention readout.

    Returns per-layer gradients and the gradient for the attention vector(s).
    """
    stack = np.stack(layers, axis=1)
    a = readout.weights
    w = _node_attention(attention, user_count, stack.shape[0])
    grad_a = np.einsum("nld,nd->nl", stack, grad_final)
    grad_s = a * (grad_a - np.sum(a * grad_a, axis=1, keepdims=True))
    grad_stack = a[:, :, None] * grad_final[:, None, :] + grad_s[:, :, None] * w[:, None, :]
    per_node = np.einsum("nl,nld->nd", grad_s, stack)
    if attention.ndim == 1:
        grad_att = per_node.sum(axis=0)
    else:
        grad_att = np.stack([per_node[:user_count].sum(axis=0), per_node[user_count:].sum(axis=0)])
    return [grad_stack[:, l] for l in range(stack.shape[1])], grad_att


def mean_readout(layers: list[np.ndarray]) -> np.ndarray:
    return sum(layers[1:], layers[0].copy()) / len(layers)


def mean_backward(layers: list[np.ndarray], grad_final: np.ndarray) -> list[np.ndarray]:
    g = grad_final / len(layers)
    return [g] * len(layers)


def score(e_u, e_i) -> float:
    e_u = np.asarray(e_u, dtype=float)
    e_i = np.asarray(e_i, dtype=float)
    if e_u.shape != e_i.shape:
        raise ValueError("score needs vectors of equal dimension")
    return float(e_u @ e_i)


@dataclass
class Forward:
    layers: list[np.ndarray]
    readout: ReadoutResult | None  # None for the mean readout
    final: np.ndarray


def forward(P: sp.csr_matrix, params: ModelParams, layers: int, use_attention: bool,
            user_count: int, include_layer0: bool = True) -> Forward:
    """Propagate and read out; with ``include_layer0=False`` the raw table is left out."""
    all_layers = propagate(P, params.embeddings, layers)
    used = all_layers if include_layer0 or layers == 0 else all_layers[1:]
    if use_attention:
        ro = layer_attention_readout(used, params.attention, user_count)
        return Forward(all_layers, ro, ro.final)
    return Forward(all_layers, None, mean_readout(used))


def forward_backward(P_T: sp.csr_matrix, params: ModelParams, fwd: Forward, grad_final: np.ndarray,
                     user_count: int, include_layer0: bool = True) -> ModelParams:
    """Gradients of a scalar loss w.r.t. params, given dL/d(final embeddings)."""
    n_layers = len(fwd.layers)
    skip = 0 if include_layer0 or n_layers == 1 else 1
    used = fwd.layers[skip:]
    if fwd.readout is not None:
        used_grads, grad_att = layer_attention_backward(used, params.attention, fwd.readout,
                                                        grad_final, user_count)
    else:
        used_grads, grad_att = mean_backward(used, grad_final), np.zeros_like(params.attention)
    layer_grads = [np.zeros_like(grad_final)] * skip + list(used_grads)
    return ModelParams(propagate_backward(P_T, layer_grads), grad_att)


CHECKPOINT_MAGIC = "dgrec-checkpoint-v1"


def save_checkpoint(path, params: ModelParams, neighborhoods: SelectedNeighborhoods,
                    header: dict) -> None:
    """Write an ``.npz`` archive: a ``key=value`` text header plus raw arrays.

    Arrays: ``embeddings`` (float64, N x d), ``attention``, and the selected
    neighborhoods as ``user_indptr/user_indices/item_indptr/item_indices``.
    """
    meta = {"format": CHECKPOINT_MAGIC, "d": params.dim, **header,
            "generation": neighborhoods.generation, "budget": neighborhoods.budget}
    text = "".join(f"{k}={v}\n" for k, v in meta.items())
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(text), embeddings=params.embeddings, attention=params.attention,
                 user_indptr=neighborhoods.user_indptr, user_indices=neighborhoods.user_indices,
                 item_indptr=neighborhoods.item_indptr, item_indices=neighborhoods.item_indices)


def load_checkpoint(path) -> tuple[ModelParams, SelectedNeighborhoods, dict[str, str]]:
    with np.load(path, allow_pickle=False) as z:
        header = dict(line.split("=", 1) for line in str(z["header"]).splitlines() if "=" in line)
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        params = ModelParams(z["embeddings"].copy(), z["attention"].copy())
        budget = header.get("budget", "None")
        nb = SelectedNeighborhoods(z["user_indptr"].copy(), z["user_indices"].copy(),
                                   z["item_indptr"].copy(), z["item_indices"].copy(),
                                   None if budget == "None" else int(budget),
                                   int(header.get("generation", 0)))
    return params, nb, header
