import numpy as np
import pytest

from trialtransport import (
    Cohort, Covariate, CovariateSchema, FitError, ForestParams, SurvivalForest,
    logrank_statistic,
)
from trialtransport.survival_forest import _nelson_aalen, _prefix_logrank

from conftest import brute_force_logrank, make_source


def one_feature_schema():
    return CovariateSchema((Covariate("x", "numeric"),))


def two_feature_schema():
    return CovariateSchema((Covariate("x", "binary"), Covariate("z", "numeric")))


def simulated_cohort(n, seed, schema=None, hazard=0.3):
    rng = np.random.default_rng(seed)
    schema = schema or one_feature_schema()
    x = rng.normal(size=n)
    t_event = rng.exponential(1 / hazard, n)
    censor = np.minimum(rng.exponential(8, n), 6.5)
    event = t_event <= censor
    time = np.minimum(t_event, censor)
    return Cohort(schema, [f"s{i:04d}" for i in range(n)], {"x": x},
                  "source", arm=["A"] * n, event=event, time=time)


class TestLogrank:
    def test_identical_patterns_zero(self):
        t = [1, 2, 3, 1, 2, 3]
        e = [1, 1, 0, 1, 1, 0]
        g = [True, True, True, False, False, False]
        assert logrank_statistic(g, t, e) == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = 12
            t = np.round(rng.exponential(2, n), 1) + 0.1
            e = rng.random(n) < 0.7
            g = rng.random(n) < 0.5
            if g.all() or not g.any():
                continue
            assert logrank_statistic(g, t, e) == pytest.approx(
                brute_force_logrank(g, t, e), abs=1e-9)

    def test_relabeling_symmetric(self):
        t = [1, 2, 3, 4, 5, 6]
        e = [1, 1, 1, 0, 1, 0]
        g = np.array([True, False, True, False, True, False])
        assert logrank_statistic(g, t, e) == pytest.approx(
            logrank_statistic(~g, t, e), abs=1e-12)

    def test_no_events_zero(self):
        assert logrank_statistic([True, False], [1, 2], [False, False]) == 0.0

    def test_one_empty_group_errors(self):
        with pytest.raises(ValueError):
            logrank_statistic([True, True], [1, 2], [True, True])

    def test_prefix_consistency(self):
        rng = np.random.default_rng(8)
        t = rng.exponential(2, 25)
        e = rng.random(25) < 0.7
        x = rng.normal(size=25)
        order = np.argsort(x, kind="stable")
        stat, _ = _prefix_logrank(t[order], e[order])
        for k in (3, 10, 20):
            g = np.zeros(25, bool)
            g[order[:k]] = True
            assert stat[k - 1] == pytest.approx(logrank_statistic(g, t, e), abs=1e-9)


class TestNelsonAalen:
    def test_basic_increments(self):
        grid, chf = _nelson_aalen(np.array([1.0, 2.0, 3.0]),
                                  np.array([True, True, True]))
        np.testing.assert_allclose(chf, [1 / 3, 1 / 3 + 1 / 2, 1 / 3 + 1 / 2 + 1], atol=1e-12)

    def test_censoring_keeps_at_risk(self):
        grid, chf = _nelson_aalen(np.array([2.0, 2.0, 3.0]),
                                  np.array([True, False, True]))
        np.testing.assert_allclose(chf, [1 / 3, 1 / 3 + 1.0], atol=1e-12)


class TestFit:
    def test_no_events_errors(self):
        schema = one_feature_schema()
        c = Cohort(schema, ["a", "b"], {"x": [0.0, 1.0]}, "source",
                   arm=["A", "A"], event=[False, False], time=[1.0, 2.0])
        with pytest.raises(FitError, match="no events"):
            SurvivalForest.fit(c, ForestParams(n_trees=1))

    def test_degenerate_single_subject_leaf(self):
        schema = one_feature_schema()
        c = Cohort(schema, ["a", "b"], {"x": [0.0, 0.0]}, "source",
                   arm=["A", "A"], event=[True, True], time=[2.0, 2.0])
        f = SurvivalForest.fit(c, ForestParams(n_trees=1, max_depth=0, seed=0))
        x = np.array([[0.0]])
        assert f.predict_risk(x, 1.0)[0] == 0.0
        assert f.predict_risk(x, 3.0)[0] == pytest.approx(1 - np.exp(-1), abs=1e-12)

    def test_depth0_equals_marginal_nelson_aalen(self):
        c = simulated_cohort(150, seed=2)
        f = SurvivalForest.fit(c, ForestParams(n_trees=40, max_depth=0, seed=3))
        xs = np.array([[-2.0], [0.0], [3.0]])
        preds = f.predict_risk(xs, 5.0)
        assert preds[0] == preds[1] == preds[2]
        # equals the bagged average of per-tree marginal Nelson-Aalen risks
        per_tree = []
        c_sorted = c.sort_by_id()
        for t in f.trees:
            grid, chf = _nelson_aalen(c_sorted.time[t.bag], c_sorted.event[t.bag])
            pos = np.searchsorted(grid, 5.0, side="right") - 1
            h = chf[pos] if pos >= 0 else 0.0
            per_tree.append(1 - np.exp(-h))
        assert preds[0] == pytest.approx(np.mean(per_tree), abs=1e-12)

    def test_perfect_separator_chosen_at_root(self):
        # binary x separates early deaths from late; z is constant (no valid split)
        schema = two_feature_schema()
        rows = []
        for i, (x, t) in enumerate([(0, 1.0), (0, 1.5), (0, 2.0),
                                    (1, 10.0), (1, 11.0), (1, 12.0)]):
            rows.append((f"s{i}", {"x": x, "z": 0.5}, "A", True, t))
        c = make_source(schema, rows)
        params = ForestParams(n_trees=20, mtry=2, min_node_size=1,
                              min_node_events=1, max_depth=1, seed=5)
        f = SurvivalForest.fit(c, params)
        roots = [t.feature[0] for t in f.trees if t.feature[0] >= 0]
        assert roots, "at least some trees must split"
        assert all(r == 0 for r in roots)  # feature 0 is x
        # and x's log-rank statistic really beats any z split by hand enumeration
        times = [r[4] for r in rows]
        events = [True] * 6
        x_stat = brute_force_logrank([r[1]["x"] == 0 for r in rows], times, events)
        z_vals = sorted(r[1]["z"] for r in rows)
        for k in range(1, 6):
            g = [r[1]["z"] <= z_vals[k - 1] for r in rows]
            if all(g) or not any(g):
                continue
            assert x_stat >= brute_force_logrank(g, times, events) - 1e-9

    def test_seed_determinism_bit_identical(self, tmp_path):
        c = simulated_cohort(80, seed=9)
        params = ForestParams(n_trees=10, seed=42)
        f1 = SurvivalForest.fit(c, params)
        f2 = SurvivalForest.fit(c, params)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        f1.save(p1)
        f2.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_row_permutation_invariance(self):
        c = simulated_cohort(60, seed=10)
        perm = np.random.default_rng(0).permutation(60)
        shuffled = c.subset(perm)
        params = ForestParams(n_trees=5, seed=11)
        f1 = SurvivalForest.fit(c, params)
        f2 = SurvivalForest.fit(shuffled, params)
        X = np.linspace(-2, 2, 7)[:, None]
        np.testing.assert_array_equal(f1.predict_risk(X, 5.0), f2.predict_risk(X, 5.0))


class TestPredict:
    def test_risk_in_unit_interval_and_monotone(self):
        c = simulated_cohort(120, seed=12)
        f = SurvivalForest.fit(c, ForestParams(n_trees=25, seed=13))
        X = np.random.default_rng(1).normal(size=(15, 1))
        prev = np.zeros(15)
        for h in [0.5, 1.0, 2.0, 4.0, 6.0]:
            r = f.predict_risk(X, h)
            assert np.all((r >= 0) & (r <= 1))
            assert np.all(r >= prev - 1e-15)
            prev = r

    def test_mean_of_trees_identity(self):
        c = simulated_cohort(100, seed=14)
        f = SurvivalForest.fit(c, ForestParams(n_trees=12, seed=15))
        X = np.array([[0.3], [-1.2]])
        per_tree = f.predict_risk_per_tree(X, 5.0)
        np.testing.assert_array_equal(f.predict_risk(X, 5.0), per_tree.mean(axis=1))

    def test_two_tree_average(self):
        # forests predicting 0.2 and 0.4 average to 0.3: single-subject leaves
        schema = one_feature_schema()
        f = None
        c = Cohort(schema, ["a", "b"], {"x": [0.0, 0.0]}, "source",
                   arm=["A", "A"], event=[True, True], time=[1.0, 1.0])
        f = SurvivalForest.fit(c, ForestParams(n_trees=2, max_depth=0, seed=0))
        t0, t1 = f.trees
        t0.leaf_chfs[0] = np.array([-np.log(0.8)])   # risk 0.2
        t1.leaf_chfs[0] = np.array([-np.log(0.6)])   # risk 0.4
        assert f.predict_risk(np.array([[0.0]]), 2.0)[0] == pytest.approx(0.3, abs=1e-12)

    def test_leaf_with_no_events_zero_risk(self):
        schema = one_feature_schema()
        c = Cohort(schema, ["a", "b"], {"x": [0.0, 1.0]}, "source",
                   arm=["A", "A"], event=[True, False], time=[1.0, 5.0])
        # force the tree to a root leaf over a bag that may contain only censored rows
        f = SurvivalForest.fit(c, ForestParams(n_trees=1, max_depth=0, seed=1))
        tree = f.trees[0]
        if tree.leaf_grids[0].size == 0:
            assert f.predict_risk(np.array([[0.0]]), 10.0)[0] == 0.0
        else:
            # direct check of the contract on an empty-hazard leaf
            tree.leaf_grids[0] = np.zeros(0)
            tree.leaf_chfs[0] = np.zeros(0)
            assert f.predict_risk(np.array([[0.0]]), 10.0)[0] == 0.0

    def test_wrong_width_errors(self):
        c = simulated_cohort(30, seed=16)
        f = SurvivalForest.fit(c, ForestParams(n_trees=2, seed=17))
        with pytest.raises(Exception):
            f.predict_risk(np.zeros((3, 4)), 5.0)


class TestOob:
    def test_oob_fraction_near_bootstrap_theory(self):
        c = simulated_cohort(200, seed=18)
        f = SurvivalForest.fit(c, ForestParams(n_trees=500, seed=19, max_depth=2))
        assert f.oob_fraction() == pytest.approx((1 - 1 / 200) ** 200, abs=0.05)

    @pytest.mark.filterwarnings("ignore:rows in-bag")
    def test_singleton_and_mean(self):
        c = simulated_cohort(50, seed=20)
        f = SurvivalForest.fit(c, ForestParams(n_trees=8, seed=21))
        c_sorted = c.sort_by_id()
        per_tree = f.predict_risk_per_tree(c_sorted, 5.0)
        oob = np.column_stack([t.oob_mask for t in f.trees])
        preds = f.predict_risk_oob(c_sorted, 5.0, fallback=True)
        for i in range(50):
            idx = np.flatnonzero(oob[i])
            if idx.size:
                assert preds[i] == pytest.approx(per_tree[i, idx].mean(), abs=1e-12)

    def test_no_oob_trees_errors_without_fallback(self):
        schema = one_feature_schema()
        c = Cohort(schema, ["a", "b"], {"x": [0.0, 1.0]}, "source",
                   arm=["A", "A"], event=[True, True], time=[1.0, 2.0])
        # with 1 tree and 2 rows, some row is frequently in-bag; find a seed
        for seed in range(30):
            f = SurvivalForest.fit(c, ForestParams(n_trees=1, seed=seed, max_depth=0))
            if not f.trees[0].oob_mask.all() and f.trees[0].oob_mask.any() is not None:
                if (~f.trees[0].oob_mask).all() or (~f.trees[0].oob_mask).any():
                    pass
            if not f.trees[0].oob_mask.any():
                with pytest.raises(FitError, match="no OOB"):
                    f.predict_risk_oob(c, 5.0)
                return
        pytest.skip("no seed produced an all-in-bag tree")


class TestSerialization:
    def test_round_trip_lossless(self, tmp_path):
        c = simulated_cohort(70, seed=22)
        f = SurvivalForest.fit(c, ForestParams(n_trees=6, seed=23))
        path = tmp_path / "forest.json"
        f.save(path)
        g = SurvivalForest.load(path)
        X = np.random.default_rng(2).normal(size=(9, 1))
        for h in (1.0, 3.5, 6.0):
            np.testing.assert_array_equal(f.predict_risk(X, h), g.predict_risk(X, h))
        path2 = tmp_path / "forest2.json"
        g.save(path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_version_and_format_checked(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError):
            SurvivalForest.load(bad)
