import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dgrec import model as M
from dgrec import training as T
from dgrec.dataset import InteractionLog, SplitBundle
from dgrec.evaluation import MetricsReport
from dgrec.graph import BipartiteGraph, CategoryMap, SelectedNeighborhoods
from oracles import gradient_check, random_bipartite


class TestClassBalancedWeight:
    @pytest.mark.parametrize("beta", [0.0, 0.3, 0.9, 0.999])
    def test_singleton_category(self, beta):
        assert T.class_balanced_weight(beta, 1) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("size", [1, 2, 50, 10_000])
    def test_beta_zero_exactly_one(self, size):
        assert T.class_balanced_weight(0.0, size) == 1.0

    def test_half_two(self):
        assert T.class_balanced_weight(0.5, 2) == pytest.approx(0.5 / 0.75, abs=1e-12)
        assert T.class_balanced_weight(0.5, 2) == pytest.approx(0.666667, abs=1e-6)

    def test_vectorized(self):
        np.testing.assert_allclose(T.class_balanced_weight(0.5, np.array([1, 2])), [1.0, 2 / 3])

    @pytest.mark.parametrize("beta,size", [(0.5, 0), (1.0, 3), (-0.1, 3)])
    def test_errors(self, beta, size):
        with pytest.raises(ValueError):
            T.class_balanced_weight(beta, size)

    @given(st.floats(0.01, 0.99), st.integers(1, 500))
    def test_decreasing_in_size(self, beta, n):
        assert T.class_balanced_weight(beta, n + 1) <= T.class_balanced_weight(beta, n)


class TestBprLoss:
    def test_equal_scores(self):
        assert T.bpr_loss(0.7, 0.7) == pytest.approx(math.log(2), abs=1e-12)

    def test_margin_one(self):
        assert T.bpr_loss(1.0, 0.0) == pytest.approx(0.313262, abs=1e-6)
        assert T.bpr_loss(1.0, 0.0) == pytest.approx(-math.log(1 / (1 + math.exp(-1))), abs=1e-15)

    def test_saturation_is_stable(self):
        assert T.bpr_loss(1e6, 0.0) == 0.0
        assert T.bpr_loss(0.0, 1e6) == pytest.approx(1e6)


class TestNegatives:
    def test_forced_single_candidate(self):
        g = BipartiteGraph.from_edges([0, 0, 0], [0, 1, 3], 1, 4)
        out = T.sample_negatives(0, 6, g, np.random.default_rng(0))
        assert out.tolist() == [2] * 6

    def test_never_positive(self):
        rng = np.random.default_rng(1)
        g = random_bipartite(rng, 15, 12, density=0.5)
        users = np.repeat(np.arange(15), 20)
        neg = T.sample_negative_batch(users, 4, g, rng)
        assert not g.has_edges(np.repeat(users, 4).reshape(neg.shape), neg).any()

    def test_full_user_rejected(self):
        g = BipartiteGraph.from_edges([0, 0], [0, 1], 1, 2)
        with pytest.raises(ValueError):
            T.sample_negatives(0, 1, g, np.random.default_rng(0))

    def test_deterministic(self):
        g = BipartiteGraph.from_edges([0, 1], [0, 1], 2, 5)
        a = T.sample_negative_batch(np.array([0, 1]), 7, g, np.random.default_rng(3))
        b = T.sample_negative_batch(np.array([0, 1]), 7, g, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_uniform_chi_square(self):
        g = BipartiteGraph.from_edges([0, 0], [2, 7], 1, 10)
        draws = T.sample_negatives(0, 100_000, g, np.random.default_rng(42))
        counts = np.bincount(draws, minlength=10)
        assert counts[2] == counts[7] == 0
        observed = np.delete(counts, [2, 7])
        assert stats.chisquare(observed).pvalue > 0.01


def _batch_setup(seed=0, beta=0.9, **overrides):
    rng = np.random.default_rng(seed)
    g = random_bipartite(rng, 12, 15, density=0.3)
    config = T.TrainConfig(d=4, layers=2, beta=beta, **overrides)
    params = M.init_params(12, 15, 4, seed=seed, init_scale=0.3)
    params.attention = rng.normal(size=4)
    P = M.propagation_matrix(g, SelectedNeighborhoods.full(g))
    users, pos = g.edges()
    neg = T.sample_negative_batch(users, 4, g, rng)
    cats = CategoryMap.from_array(rng.integers(0, 3, size=15))
    return g, config, params, P, P.T.tocsr(), users, pos, neg, cats


class TestBatchLoss:
    def test_zero_params_mean_weight_ln2(self):
        g, config, params, P, P_T, users, pos, neg, cats = _batch_setup(l2=0.0)
        zero = M.ModelParams(np.zeros_like(params.embeddings), np.zeros_like(params.attention))
        w = np.linspace(0.5, 1.5, users.size)
        res = T.batch_loss(zero, P, P_T, users, pos, neg, w, config, 12)
        assert res.loss == pytest.approx(w.mean() * math.log(2), abs=1e-12)

    def test_l2_only_gradient(self):
        g, config, params, P, P_T, users, pos, neg, cats = _batch_setup(l2=0.25)
        w = np.zeros(users.size)
        res = T.batch_loss(params, P, P_T, users, pos, neg, w, config, 12)
        np.testing.assert_allclose(res.grads.embeddings, 2 * 0.25 * params.embeddings, atol=1e-15)
        np.testing.assert_allclose(res.grads.attention, 2 * 0.25 * params.attention, atol=1e-15)
        assert res.loss == pytest.approx(0.25 * params.squared_norm())

    def test_beta_zero_is_unweighted_bitwise(self):
        g, config, params, P, P_T, users, pos, neg, cats = _batch_setup(beta=0.0)
        w = T.item_weights(config, cats)[pos]
        weighted = T.batch_loss(params, P, P_T, users, pos, neg, w, config, 12)
        plain = T.batch_loss(params, P, P_T, users, pos, neg, np.ones(users.size), config, 12)
        assert weighted.loss == plain.loss
        assert np.array_equal(weighted.grads.embeddings, plain.grads.embeddings)
        assert np.array_equal(weighted.grads.attention, plain.grads.attention)

    def test_normalized_weights(self):
        cats = CategoryMap.from_array([0, 0, 0, 1, 2, 2])
        train_items = np.array([0, 1, 3, 3, 4, 5, 5])
        cfg = T.TrainConfig(beta=0.9)
        w = T.item_weights(cfg, cats, train_items)
        assert w[train_items].mean() == pytest.approx(1.0, abs=1e-12)
        raw = T.item_weights(replace(cfg, normalize_weights=False), cats, train_items)
        np.testing.assert_allclose(w / w[0], raw / raw[0], rtol=1e-12)
        assert np.array_equal(T.item_weights(replace(cfg, beta=0.0), cats, train_items), np.ones(6))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self):
        g, config, params, P, P_T, users, pos, neg, cats = _batch_setup()
        params.embeddings[0, 0] = np.nan
        with pytest.raises(T.TrainingDiverged):
            T.batch_loss(params, P, P_T, users, pos, neg, np.ones(users.size), config, 12)

    def test_finite_difference(self):
        assert gradient_check(seed=3, n_users=8, n_items=10) <= 1e-4

    @pytest.mark.parametrize("attention", [True, False])
    def test_finite_difference_small_config(self, attention):
        g, config, params, P, P_T, users, pos, neg, cats = _batch_setup(l2=1e-2)
        config = replace(config, use_attention=attention)
        w = T.item_weights(config, cats)[pos]
        f = lambda p: T.batch_loss(p, P, P_T, users, pos, neg, w, config, 12).loss
        grads = T.batch_loss(params, P, P_T, users, pos, neg, w, config, 12).grads
        h = 1e-5
        for arr, garr in zip(params.arrays(), grads.arrays()):
            for idx in [(0, 0), (3, 1), (20, 3)] if arr.ndim == 2 else [(0,), (2,)]:
                orig = arr[idx]
                arr[idx] = orig + h
                up = f(params)
                arr[idx] = orig - h
                down = f(params)
                arr[idx] = orig
                assert garr[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = M.init_params(3, 3, 2, seed=0)
        before = p.copy()
        state = T.AdamState.like(p)
        zero = M.ModelParams(np.zeros_like(p.embeddings), np.zeros_like(p.attention))
        for _ in range(3):
            T.adam_step(p, zero, state, 0.1)
        assert np.array_equal(p.embeddings, before.embeddings)

    def test_first_step_is_sign(self):
        p = M.init_params(2, 2, 3, seed=0)
        before = p.copy()
        g = M.ModelParams(np.random.default_rng(1).normal(size=p.embeddings.shape), np.array([1e-3, -2.0, 5.0]))
        T.adam_step(p, g, T.AdamState.like(p), 0.01)
        np.testing.assert_allclose(p.embeddings - before.embeddings, -0.01 * np.sign(g.embeddings), rtol=1e-5)
        np.testing.assert_allclose(p.attention - before.attention, -0.01 * np.sign(g.attention), rtol=1e-4)

    def test_deterministic_trajectory(self):
        def run():
            p = M.init_params(4, 4, 2, seed=5)
            s = T.AdamState.like(p)
            rng = np.random.default_rng(0)
            for _ in range(5):
                T.adam_step(p, M.ModelParams(rng.normal(size=p.embeddings.shape), rng.normal(size=2)), s, 0.05)
            return p
        assert np.array_equal(run().embeddings, run().embeddings)


class TestRefresh:
    def test_large_budget_keeps_everything(self):
        rng = np.random.default_rng(0)
        g = random_bipartite(rng, 10, 9, density=0.5)
        feats = rng.normal(size=(19, 3))
        for variant in ("facility_complement", "facility_full", "category_coverage", "bucket_coverage"):
            cfg = T.TrainConfig(k=100, submodular=variant)
            nb = T.refresh_neighborhoods(g, feats, cfg, CategoryMap.from_array(rng.integers(0, 3, 9)))
            assert np.array_equal(nb.user_indices, g.user_indices)
            assert np.array_equal(nb.item_indices, g.item_indices)

    def test_selection_off_is_full(self):
        rng = np.random.default_rng(1)
        g = random_bipartite(rng, 10, 9, density=0.6)
        nb = T.refresh_neighborhoods(g, rng.normal(size=(19, 3)), T.TrainConfig(k=1, use_selection=False))
        assert np.array_equal(nb.user_indices, g.user_indices)

    @given(st.integers(0, 10_000), st.integers(1, 4),
           st.sampled_from(["facility_complement", "facility_full", "category_coverage", "bucket_coverage"]))
    @settings(max_examples=40, deadline=None)
    def test_subset_and_budget(self, seed, k, variant):
        rng = np.random.default_rng(seed)
        g = random_bipartite(rng, 9, 8, density=0.5)
        cfg = T.TrainConfig(k=k, submodular=variant)
        nb = T.refresh_neighborhoods(g, rng.normal(size=(17, 3)), cfg, CategoryMap.from_array(rng.integers(0, 3, 8)))
        for u in range(9):
            sel, full = nb.user_selected(u), g.user_neighbors(u)
            assert set(sel) <= set(full) and sel.size == min(k, full.size)
        for i in range(8):
            assert set(nb.item_selected(i)) <= set(g.item_neighbors(i))

    def test_threads_do_not_change_result(self):
        rng = np.random.default_rng(2)
        g = random_bipartite(rng, 30, 25, density=0.4)
        feats = rng.normal(size=(55, 4))
        a = T.refresh_neighborhoods(g, feats, T.TrainConfig(k=3, threads=1))
        b = T.refresh_neighborhoods(g, feats, T.TrainConfig(k=3, threads=4))
        assert np.array_equal(a.user_indices, b.user_indices) and np.array_equal(a.item_indices, b.item_indices)

    def test_gradient_opacity(self):
        # user 0 has items 0..4 but aggregates only from items 0 and 1
        g = BipartiteGraph.from_edges([0] * 5 + [1], [0, 1, 2, 3, 4, 0], 2, 5)
        nb = SelectedNeighborhoods.from_lists([[0, 1], [0]], [[0, 1], [0], [0], [0], [0]], budget=2)
        P = M.propagation_matrix(g, nb)
        P_T = P.T.tocsr()
        cfg = T.TrainConfig(d=3, layers=1, use_attention=False, l2=0.0)
        params = M.init_params(2, 5, 3, seed=0, init_scale=0.5)
        args = (np.array([0]), np.array([0]), np.array([[1]]), np.ones(1), cfg, 2)
        base = T.batch_loss(params, P, P_T, *args)
        params.embeddings[2 + 3] += 10.0  # item 3 is not selected by user 0
        moved = T.batch_loss(params, P, P_T, *args)
        assert base.loss == moved.loss
        assert np.array_equal(base.grads.embeddings, moved.grads.embeddings)


class TestEarlyStopping:
    def test_trace(self):
        stopper = T.EarlyStopping(2)
        seen = []
        for epoch, v in enumerate([0.2, 0.1, 0.1, 0.3], start=1):
            stopper.update(epoch, v)
            seen.append(epoch)
            if stopper.should_stop:
                break
        assert seen == [1, 2, 3] and stopper.best_epoch == 1

    def test_fit_returns_best_snapshot(self, monkeypatch):
        data = _toy_data()
        values = iter([0.2, 0.1, 0.1, 0.9, 0.9])
        snapshots = []

        def fake_evaluate(final, *args, **kwargs):
            snapshots.append(final.copy())
            v = next(values)
            return MetricsReport({("recall", 5): v, ("coverage", 5): 1.0}, 1, {})

        monkeypatch.setattr(T, "evaluate", fake_evaluate)
        cfg = T.TrainConfig(d=4, layers=1, val_k=5, patience=2, max_epochs=10, batch_size=4)
        res = T.fit(data, cfg)
        assert [r["epoch"] for r in res.log] == [1, 2, 3]
        assert res.best_epoch == 1
        final = T.final_embeddings(data.graph, res.params, res.neighborhoods, cfg)
        np.testing.assert_array_equal(final, snapshots[0])


def _toy_data(users=12, items=10, seed=0):
    rng = np.random.default_rng(seed)
    records = sorted({(f"u{u:02d}", f"i{i:02d}") for u in range(users)
                      for i in rng.choice(items, size=5, replace=False)})
    log = InteractionLog(tuple(records))
    bundle = SplitBundle(log, InteractionLog(tuple(records[::7])), InteractionLog(tuple(records[1::7])), 0,
                         (0.6, 0.2, 0.2))
    cats = {f"i{i:02d}": f"c{i % 3}" for i in range(items)}
    return T.TrainingData.from_split(bundle, cats)


class TestFit:
    def test_zero_epochs_returns_init(self):
        data = _toy_data()
        cfg = T.TrainConfig(d=4, max_epochs=0, seed=3)
        res = T.fit(data, cfg)
        init_seq, _ = np.random.SeedSequence(3).spawn(2)
        init = M.init_params(data.graph.user_count, data.graph.item_count, 4,
                             int(init_seq.generate_state(1)[0]), cfg.init_scale)
        assert np.array_equal(res.params.embeddings, init.embeddings) and res.log == []

    def test_loss_decreases(self):
        data = _toy_data(30, 20)
        cfg = T.TrainConfig(d=8, layers=2, k=3, max_epochs=5, patience=5, batch_size=16, val_k=5, l2=1e-7)
        res = T.fit(data, cfg)
        losses = [r["loss"] for r in res.log]
        assert len(losses) == 5 and all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic_log(self):
        data = _toy_data()
        cfg = T.TrainConfig(d=4, layers=2, k=2, max_epochs=3, patience=3, batch_size=8, val_k=5)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "elapsed_seconds"} for r in rows]
        a, b = T.fit(data, cfg), T.fit(data, cfg)
        assert strip(a.log) == strip(b.log)
        assert np.array_equal(a.params.embeddings, b.params.embeddings)

    def test_generation_advances_each_epoch(self):
        data = _toy_data()
        cfg = T.TrainConfig(d=4, layers=1, k=2, max_epochs=3, patience=3, batch_size=8, val_k=5)
        gens = [r["neighborhood_generation"] for r in T.fit(data, cfg).log]
        assert gens == [1, 2, 3]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            T.fit(_toy_data(), T.TrainConfig(beta=1.0))


class TestAblationEquivalence:
    def test_attention_off_is_mean_readout(self):
        g, config, params, P, *_ = _batch_setup()
        fwd = M.forward(P, params, 2, False, 12)
        np.testing.assert_array_equal(fwd.final, M.mean_readout(M.propagate(P, params.embeddings, 2)))

    def test_lightgcn_toggles_use_full_graph(self):
        rng = np.random.default_rng(0)
        g = random_bipartite(rng, 10, 8, density=0.5)
        cfg = T.TrainConfig(k=1, use_selection=False, use_attention=False, use_reweight=False)
        nb = T.refresh_neighborhoods(g, rng.normal(size=(18, 3)), cfg)
        P = M.propagation_matrix(g, nb)
        E0 = rng.normal(size=(18, 3))
        # reference: symmetric normalized adjacency, mean over layers 0..L
        R = np.zeros((10, 8))
        R[g.edges()] = 1
        A = np.block([[np.zeros((10, 10)), R], [R.T, np.zeros((8, 8))]])
        deg = A.sum(1)
        An = A / np.sqrt(np.outer(deg, deg))
        ref = np.mean([np.linalg.matrix_power(An, l) @ E0 for l in range(4)], axis=0)
        got = M.forward(P, M.ModelParams(E0, np.zeros(3)), 3, False, 10).final
        np.testing.assert_allclose(got, ref, atol=1e-12)
        assert np.array_equal(T.item_weights(cfg, CategoryMap.from_array([0] * 7 + [1])), np.ones(8))

    def test_mf_bpr_scores_are_dot_products(self):
        g, config, params, P, *_ = _batch_setup()
        fwd = M.forward(P, params, 0, False, 12)
        assert np.array_equal(fwd.final, params.embeddings)
