"""Class-balanced BPR training with exact gradients, Adam and neighborhood refresh."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as M
from .dataset import SplitBundle
from .evaluation import EvalSet, build_eval_set, evaluate
from .graph import BipartiteGraph, CategoryMap, IdMaps, SelectedNeighborhoods, build_graph
from .submodular import (
    VARIANTS,
    GroundSet,
    KernelConfig,
    SubmodularChoice,
    greedy_select,
    greedy_select_many,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 32
    layers: int = 3
    k: int = 5
    sigma_squared: float = 1.0
    beta: float = 0.9
    l2: float = 1e-6
    learning_rate: float = 0.01
    negatives_per_positive: int = 4
    batch_size: int = 2048
    max_epochs: int = 100
    patience: int = 10
    refresh_period_epochs: int = 1
    seed: int = 0
    use_selection: bool = True
    use_attention: bool = True
    use_reweight: bool = True
    normalize_weights: bool = True
    submodular: str = "facility_complement"
    bucket_count: int = 4
    norm: str = "full"
    per_side_attention: bool = False
    include_layer0: bool = True
    selection_source: str = "layer0"
    val_k: int = 300
    init_scale: float = 0.1
    threads: int = 1

    def validate(self) -> "TrainConfig":
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        for name in ("d", "k", "negatives_per_positive", "batch_size", "refresh_period_epochs",
                     "val_k", "bucket_count", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("layers", "max_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.learning_rate > 0 or not self.sigma_squared > 0:
            raise ValueError("learning_rate and sigma_squared must be positive")
        if self.l2 < 0 or self.init_scale < 0:
            raise ValueError("l2 and init_scale must be non-negative")
        if self.submodular not in VARIANTS:
            raise ValueError(f"unknown submodular variant {self.submodular!r}")
        if self.norm not in M.NORM_CONVENTIONS:
            raise ValueError(f"unknown norm convention {self.norm!r}")
        if self.selection_source not in ("layer0", "readout"):
            raise ValueError("selection_source must be layer0 or readout")
        return self

    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = {"int": int, "float": float, "bool": bool, "str": str}
        return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


def class_balanced_weight(beta: float, category_size):
    """(1 - beta) / (1 - beta**n); exactly 1 for beta = 0. Vectorized over sizes."""
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    size = np.asarray(category_size)
    if np.any(size < 1):
        raise ValueError("category size must be >= 1")
    if beta == 0:
        out = np.ones(size.shape)
    else:
        out = (1.0 - beta) / (1.0 - np.power(beta, size.astype(float)))
    return float(out) if out.ndim == 0 else out


def bpr_loss(pos_score, neg_score):
    """-ln sigmoid(pos - neg), computed as softplus(neg - pos)."""
    out = np.logaddexp(0.0, np.asarray(neg_score, dtype=float) - np.asarray(pos_score, dtype=float))
    return float(out) if out.ndim == 0 else out


def sample_negatives(user: int, n: int, graph: BipartiteGraph, rng: np.random.Generator) -> np.ndarray:
    """n independent uniform draws from the items ``user`` has not interacted with."""
    return sample_negative_batch(np.array([user]), n, graph, rng)[0]


def sample_negative_batch(users: np.ndarray, n: int, graph: BipartiteGraph,
                          rng: np.random.Generator) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    if np.any(graph.user_degrees[users] >= graph.item_count):
        raise ValueError("a user has interacted with every item; no negatives exist")
    neg = rng.integers(graph.item_count, size=(users.size, n))
    rows = np.repeat(users, n).reshape(users.size, n)
    bad = graph.has_edges(rows, neg)
    while bad.any():
        neg[bad] = rng.integers(graph.item_count, size=int(bad.sum()))
        bad[bad] = graph.has_edges(rows[bad], neg[bad])
    return neg


@dataclass
class BatchResult:
    loss: float
    grads: M.ModelParams


def batch_loss(params: M.ModelParams, P, P_T, users, pos, neg, weights, config: TrainConfig,
               user_count: int) -> BatchResult:
    """Mean weighted BPR over (positive, negative) pairs plus l2 * ||Theta||^2.

    ``neg`` has shape (batch, negatives_per_positive); ``weights`` holds the
    class-balanced weight of each positive's category.  Gradients are exact,
    with the neighborhoods (hence ``P``) held fixed.
    """
    fwd = M.forward(P, params, config.layers, config.use_attention, user_count, config.include_layer0)
    final = fwd.final
    users = np.asarray(users)
    pos_nodes = user_count + np.asarray(pos)
    neg_nodes = user_count + np.asarray(neg)
    e_u, e_i, e_j = final[users], final[pos_nodes], final[neg_nodes]
    s_pos = np.einsum("bd,bd->b", e_u, e_i)
    s_neg = np.einsum("bd,bnd->bn", e_u, e_j)
    x = s_neg - s_pos[:, None]
    w = np.asarray(weights, dtype=float)[:, None]
    pairs = x.size
    data_loss = float(np.sum(w * np.logaddexp(0.0, x)) / pairs)
    loss = data_loss + config.l2 * params.squared_norm()
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")

    coef = w * _sigmoid(x) / pairs  # d loss / d x
    grad_final = np.zeros_like(final)
    c_sum = coef.sum(axis=1)
    np.add.at(grad_final, users, np.einsum("bn,bnd->bd", coef, e_j) - c_sum[:, None] * e_i)
    np.add.at(grad_final, pos_nodes, -c_sum[:, None] * e_u)
    np.add.at(grad_final, neg_nodes.ravel(), (coef[:, :, None] * e_u[:, None, :]).reshape(-1, e_u.shape[1]))

    grads = M.forward_backward(P_T, params, fwd, grad_final, user_count, config.include_layer0)
    if config.l2:
        grads.embeddings += 2.0 * config.l2 * params.embeddings
        grads.attention = grads.attention + 2.0 * config.l2 * params.attention
    return BatchResult(loss, grads)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: M.ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: M.ModelParams, grads: M.ModelParams, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def refresh_neighborhoods(graph: BipartiteGraph, node_features: np.ndarray, config: TrainConfig,
                          categories: CategoryMap | None = None, generation: int = 0) -> SelectedNeighborhoods:
    """Greedy submodular selection of up to ``k`` neighbors for every node.

    ``node_features`` is (user_count + item_count, d).  Nodes whose degree is
    at most ``k`` keep their full neighborhood.  Category coverage needs item
    categories, so item nodes (whose neighbors are users) keep their full
    neighborhood under that variant.
    """
    if not config.use_selection:
        return SelectedNeighborhoods.full(graph, generation)
    U = graph.user_count
    choice = SubmodularChoice(config.submodular, config.bucket_count)
    kernel = KernelConfig(config.sigma_squared)
    user_lists = _select_side(graph.user_indptr, graph.user_indices, node_features[U:], config.k,
                              choice, kernel, categories.item_category if categories is not None else None,
                              config.threads)
    if choice.variant == "category_coverage":
        item_lists = [graph.item_neighbors(i) for i in range(graph.item_count)]
    else:
        item_lists = _select_side(graph.item_indptr, graph.item_indices, node_features[:U], config.k,
                                  choice, kernel, None, config.threads)
    return SelectedNeighborhoods.from_lists(user_lists, item_lists, config.k, generation)


_BATCH_ELEMENTS = 1 << 21


def _select_side(indptr, indices, neighbor_features, k, choice, kernel, neighbor_categories, threads):
    n_nodes = indptr.size - 1
    degrees = np.diff(indptr)
    out: list[np.ndarray] = [indices[indptr[v]:indptr[v + 1]] for v in range(n_nodes)]
    todo = np.flatnonzero(degrees > k)
    if todo.size == 0:
        return out

    jobs = []
    if choice.variant in ("facility_complement", "facility_full"):
        for deg in np.unique(degrees[todo]):
            nodes = todo[degrees[todo] == deg]
            chunk = max(1, _BATCH_ELEMENTS // int(deg * deg))
            for start in range(0, nodes.size, chunk):
                jobs.append(("batch", nodes[start:start + chunk]))
    else:
        jobs = [("single", np.array([v])) for v in todo]

    def run(job):
        kind, nodes = job
        if kind == "batch":
            nbrs = np.stack([out[v] for v in nodes])
            picks = greedy_select_many(neighbor_features[nbrs], k, choice, kernel)
            return nodes, [np.sort(row[p]) for row, p in zip(nbrs, picks)]
        v = int(nodes[0])
        nb = out[v]
        ground = GroundSet(features=neighbor_features[nb],
                           categories=neighbor_categories[nb] if neighbor_categories is not None else None)
        state = greedy_select(ground, k, choice, kernel)
        return nodes, [np.sort(nb[state.selected])]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for nodes, lists in results:
        for v, lst in zip(nodes, lists):
            out[v] = lst
    return out


class EarlyStopping:
    """Track the best validation value; stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record a value; returns True when this epoch is a new best."""
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainingData:
    graph: BipartiteGraph
    maps: IdMaps
    categories: CategoryMap
    validation: EvalSet
    test: EvalSet

    @classmethod
    def from_split(cls, bundle: SplitBundle, categories: dict[str, str]) -> "TrainingData":
        graph, maps = build_graph(bundle.train)
        return cls(graph, maps, CategoryMap.build(maps, categories),
                   build_eval_set(bundle.validation, maps), build_eval_set(bundle.test, maps))


LOG_COLUMNS = ("epoch", "loss", "val_recall", "val_coverage", "elapsed_seconds", "neighborhood_generation")


@dataclass
class FitResult:
    params: M.ModelParams
    neighborhoods: SelectedNeighborhoods
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def item_weights(config: TrainConfig, categories: CategoryMap, train_items=None) -> np.ndarray:
    """Class-balanced weight per item.

    With ``normalize_weights`` and ``train_items`` given, weights are scaled to
    average 1 over the training positives, so ``l2`` keeps the same strength
    relative to the data term for every beta.  beta = 0 stays exactly 1.
    """
    if not config.use_reweight:
        return np.ones(categories.item_category.size)
    per_category = class_balanced_weight(config.beta, np.maximum(categories.category_sizes, 1))
    weights = np.atleast_1d(per_category)[categories.item_category]
    if config.normalize_weights and train_items is not None:
        weights = weights / weights[np.asarray(train_items)].mean()
    return weights


def selection_features(graph, params, neighborhoods, config) -> np.ndarray:
    if config.selection_source == "layer0" or neighborhoods is None:
        return params.embeddings
    P = M.propagation_matrix(graph, neighborhoods, config.norm)
    return M.forward(P, params, config.layers, config.use_attention, graph.user_count,
                     config.include_layer0).final


def final_embeddings(graph, params, neighborhoods, config) -> np.ndarray:
    P = M.propagation_matrix(graph, neighborhoods, config.norm)
    return M.forward(P, params, config.layers, config.use_attention, graph.user_count,
                     config.include_layer0).final


def fit(data: TrainingData, config: TrainConfig, progress=None) -> FitResult:
    """Epoch loop: refresh, shuffled mini-batches, Adam, validation, early stopping.

    Returns the parameters (and neighborhoods) from the best validation epoch.
    """
    config.validate()
    graph = data.graph
    U = graph.user_count
    init_seq, train_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = M.init_params(U, graph.item_count, config.d, int(init_seq.generate_state(1)[0]),
                           config.init_scale, config.per_side_attention)
    rng = np.random.default_rng(train_seq)
    edge_users, edge_items = graph.edges()
    weights = item_weights(config, data.categories, edge_items)

    neighborhoods = SelectedNeighborhoods.full(graph)
    if config.use_selection:
        neighborhoods = refresh_neighborhoods(graph, params.embeddings, config, data.categories, 1)
    result = FitResult(params.copy(), neighborhoods)
    if config.max_epochs == 0:
        return result

    adam = AdamState.like(params)
    stopper = EarlyStopping(config.patience)
    start = time.perf_counter()
    generation = neighborhoods.generation
    for epoch in range(1, config.max_epochs + 1):
        if config.use_selection and epoch > 1 and (epoch - 1) % config.refresh_period_epochs == 0:
            generation += 1
            feats = selection_features(graph, params, neighborhoods, config)
            neighborhoods = refresh_neighborhoods(graph, feats, config, data.categories, generation)
        P = M.propagation_matrix(graph, neighborhoods, config.norm)
        P_T = P.T.tocsr()

        order = rng.permutation(edge_users.size)
        total, batches = 0.0, 0
        for b0 in range(0, order.size, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            users, pos = edge_users[idx], edge_items[idx]
            neg = sample_negative_batch(users, config.negatives_per_positive, graph, rng)
            try:
                res = batch_loss(params, P, P_T, users, pos, neg, weights[pos], config, U)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {batches + 1}: {exc}") from exc
            adam_step(params, res.grads, adam, config.learning_rate)
            total += res.loss
            batches += 1

        final = M.forward(P, params, config.layers, config.use_attention, U, config.include_layer0).final
        report = evaluate(final, data.validation, graph, data.categories, (config.val_k,))
        val_recall = report.value("recall", config.val_k)
        row = {
            "epoch": epoch,
            "loss": total / max(batches, 1),
            "val_recall": val_recall,
            "val_coverage": report.value("coverage", config.val_k),
            "elapsed_seconds": time.perf_counter() - start,
            "neighborhood_generation": neighborhoods.generation,
        }
        result.log.append(row)
        if progress is not None:
            progress(row)
        if stopper.update(epoch, val_recall):
            result.params = params.copy()
            result.neighborhoods = neighborhoods
            result.best_epoch = epoch
        if stopper.should_stop:
            break
    return result


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
