import math

import numpy as np
import pytest

from trialtransport import (
    BUILTIN_SCENARIOS, Contrast, CovariateDist, OracleTruth, Scenario, generate,
    scenario_s1, scenario_s2,
)


def flat_scenario(lam_a=0.1, lam_b=0.3, **kwargs):
    """Covariate-free hazards; every truth is closed form by hand."""
    defaults = dict(
        name="flat",
        source_covariates=(CovariateDist("x", "normal", (0.0, 1.0)),),
        target_covariates=(CovariateDist("x", "normal", (0.0, 1.0)),),
        arms=("A", "B"), allocation=(0.5, 0.5),
        log_hazard={"A": {"intercept": math.log(lam_a)},
                    "B": {"intercept": math.log(lam_b)}},
        n_source=400, n_target=100, horizon=5.0, seed=3)
    defaults.update(kwargs)
    return Scenario(**defaults)


class TestScenarioValidation:
    def test_allocation_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            flat_scenario(allocation=(0.5, 0.6))

    def test_missing_arm_hazard(self):
        with pytest.raises(ValueError, match="no hazard model"):
            flat_scenario(log_hazard={"A": {"intercept": 0.0}})

    def test_covariate_names_must_match(self):
        with pytest.raises(ValueError, match="share names"):
            flat_scenario(target_covariates=(
                CovariateDist("y", "normal", (0.0, 1.0)),))

    def test_json_round_trip(self):
        s = scenario_s2()
        t = Scenario.from_json(s.to_json())
        assert t == s
        assert t.to_json() == s.to_json()


class TestOracleHandValues:
    def test_true_risk_exponential(self):
        truth = OracleTruth(flat_scenario())
        # lambda = 0.1, t = 5 -> 1 - e^{-0.5}
        assert truth.true_risk({"x": 0.0}, "A", 5.0) == pytest.approx(
            1 - math.exp(-0.5), abs=1e-12)

    def test_true_ite_additivity_and_antisymmetry(self):
        truth = OracleTruth(scenario_s2())
        cov = {"z": 1.0, "u": 0.3}
        ab = truth.true_ite(cov, Contrast("A", "B"))
        ba = truth.true_ite(cov, Contrast("B", "A"))
        assert ab == pytest.approx(-ba, abs=1e-15)

    def test_flat_tate_closed_form(self):
        truth = OracleTruth(flat_scenario())
        val, err = truth.true_tate(Contrast("A", "B"), "target")
        want = (1 - math.exp(-0.5)) - (1 - math.exp(-1.5))
        assert err == 0.0
        assert val == pytest.approx(want, abs=1e-10)

    def test_discrete_enumeration_hand_value(self):
        # z ~ Bern(0.7) in the target: TATE = 0.3*gap(z=0) + 0.7*gap(z=1)
        s = scenario_s2()
        truth = OracleTruth(s)
        c = Contrast("A", "B")
        gap0 = truth.true_ite({"z": 0.0, "u": 0.0}, c)
        gap1 = truth.true_ite({"z": 1.0, "u": 0.0}, c)
        val, err = truth.true_tate(c, "target")
        assert err == 0.0
        assert val == pytest.approx(0.3 * gap0 + 0.7 * gap1, abs=1e-12)

    def test_quadrature_matches_monte_carlo(self):
        s = scenario_s1()
        truth = OracleTruth(s)
        val, err = truth.true_tate(Contrast("A", "B"), "target")
        assert err == 0.0
        rng = np.random.default_rng(0)
        w = rng.normal(0.35, 1.0, 400_000)
        lam_a = 0.008 * np.exp(0.25 * w)
        lam_b = 0.022 * np.exp(0.25 * w)
        gaps = np.exp(-lam_b * 5) - np.exp(-lam_a * 5)
        mc_se = gaps.std(ddof=1) / math.sqrt(gaps.size)
        assert val == pytest.approx(gaps.mean(), abs=4 * mc_se)

    def test_truth_table_keys(self):
        tbl = OracleTruth(scenario_s1()).truth_table()
        assert set(tbl) == {"A_vs_B"}
        assert set(tbl["A_vs_B"]) == {"tate", "tate_mc_error",
                                      "sate", "sate_mc_error"}


class TestGenerate:
    def test_shapes_ids_reproducibility(self):
        s = flat_scenario()
        src1, tgt1, _ = generate(s)
        src2, tgt2, _ = generate(s)
        assert src1.n == 400 and tgt1.n == 100
        assert src1.ids[0] == "s000" and tgt1.ids[0] == "t000"
        np.testing.assert_array_equal(src1.time, src2.time)
        np.testing.assert_array_equal(src1.covariates["x"], src2.covariates["x"])
        assert tgt1.ids == tgt2.ids

    def test_different_seed_different_draw(self):
        s = flat_scenario()
        src1, _, _ = generate(s)
        src2, _, _ = generate(s, seed=s.seed + 1)
        assert not np.array_equal(src1.time, src2.time)

    def test_near_zero_hazard_no_events(self):
        s = flat_scenario(log_hazard={"A": {"intercept": -1e3},
                                      "B": {"intercept": -1e3}},
                          admin_censor_time=6.5)
        src, _, _ = generate(s)
        assert not src.event.any()

    def test_heavy_censoring_shortens_follow_up(self):
        s = flat_scenario(censor_rate=50.0)
        src, _, _ = generate(s)
        assert src.time.max() < 1.0
        assert src.event.mean() < 0.2

    def test_event_rate_matches_oracle(self):
        # no censoring: the arm-A event fraction is Binomial(n, p_true)
        s = flat_scenario(n_source=4000, admin_censor_time=None)
        src, _, truth = generate(s)
        for arm, lam in (("A", 0.1), ("B", 0.3)):
            sub = src.arm_subset(arm)
            frac = float((sub.event & (sub.time <= 5.0)).mean())
            p = truth.true_event_probability(arm, "source", 5.0)
            assert p == pytest.approx(1 - math.exp(-lam * 5.0), abs=1e-10)
            se = math.sqrt(p * (1 - p) / sub.n)
            assert frac == pytest.approx(p, abs=3.5 * se)

    def test_arm_allocation_close(self):
        s = flat_scenario(n_source=4000)
        src, _, _ = generate(s)
        frac_a = float((src.arm == "A").mean())
        assert frac_a == pytest.approx(0.5, abs=3.5 * 0.5 / math.sqrt(4000))

    def test_builtins_generate(self):
        for name, factory in BUILTIN_SCENARIOS.items():
            s = factory(n_source=200, n_target=100)
            src, tgt, truth = generate(s)
            assert src.n == 200 and tgt.n == 100
            assert src.event.any()
            assert set(src.arms()) == {"A", "B"}

    def test_s2_sate_tate_diverge(self):
        truth = OracleTruth(scenario_s2())
        c = Contrast("A", "B")
        tate_val, _ = truth.true_tate(c, "target")
        sate_val, _ = truth.true_tate(c, "source")
        assert tate_val < sate_val < 0
        assert abs(tate_val - sate_val) > 0.02
