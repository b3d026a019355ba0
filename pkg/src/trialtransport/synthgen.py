"""Synthetic trial / target generator with analytic truth values.

Event times are exponential with a log-linear hazard in the covariates, so
true risks have the closed form 1 - exp(-lambda_a(w) * t) and true target
effects reduce to expectations over the target covariate law (exact for
discrete covariates, Gauss-Hermite quadrature for one normal covariate,
Monte Carlo with a reported error otherwise).
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from .data_model import Cohort, Covariate, CovariateSchema
from .estimates import Contrast, all_contrasts

_DISTS = ("normal", "bernoulli", "categorical")


@dataclass(frozen=True)
class CovariateDist:
    """Marginal law of one covariate: ("normal", mu, sigma),
    ("bernoulli", q) or ("categorical", levels, probs)."""

    name: str
    dist: str
    params: tuple

    def __post_init__(self):
        if self.dist not in _DISTS:
            raise ValueError(f"unknown distribution {self.dist!r}")
        if self.dist == "normal":
            mu, sigma = self.params
            if sigma <= 0:
                raise ValueError("sigma must be positive")
        elif self.dist == "bernoulli":
            (q,) = self.params
            if not 0 <= q <= 1:
                raise ValueError("bernoulli probability out of range")
        else:
            levels, probs = self.params
            if len(levels) != len(probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError("categorical probabilities must match levels and sum to 1")

    def schema_entry(self) -> Covariate:
        if self.dist == "normal":
            return Covariate(self.name, "numeric")
        if self.dist == "bernoulli":
            return Covariate(self.name, "binary")
        return Covariate(self.name, "categorical", tuple(self.params[0]))

    def draw(self, n: int, rng) -> np.ndarray:
        if self.dist == "normal":
            mu, sigma = self.params
            return rng.normal(mu, sigma, size=n)
        if self.dist == "bernoulli":
            (q,) = self.params
            return (rng.random(n) < q).astype(float)
        levels, probs = self.params
        return np.asarray(levels, dtype=object)[rng.choice(len(levels), size=n, p=probs)]


@dataclass(frozen=True)
class Scenario:
    """Generative recipe for a source trial and a (possibly shifted) target."""

    name: str
    source_covariates: tuple           # CovariateDist per covariate
    target_covariates: tuple           # same names/kinds, possibly shifted laws
    arms: tuple
    allocation: tuple                  # probabilities, sum to 1
    log_hazard: Mapping[str, Mapping[str, float]]
    # per arm: {"intercept": b0, cov_name: coef, "cov=level": coef, ...}
    censor_rate: Optional[float] = None
    admin_censor_time: Optional[float] = None
    n_source: int = 1000
    n_target: int = 500
    horizon: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.allocation) - 1.0) > 1e-9:
            raise ValueError("allocation probabilities must sum to 1")
        if self.censor_rate is not None and self.censor_rate < 0:
            raise ValueError("censor rate must be >= 0")
        src_names = [c.name for c in self.source_covariates]
        tgt_names = [c.name for c in self.target_covariates]
        if src_names != tgt_names:
            raise ValueError("source and target covariate laws must share names")
        for arm in self.arms:
            if arm not in self.log_hazard:
                raise ValueError(f"no hazard model for arm {arm!r}")

    def schema(self) -> CovariateSchema:
        return CovariateSchema(tuple(c.schema_entry() for c in self.source_covariates))

    def hazard(self, arm: str, covariates: Mapping[str, np.ndarray]) -> np.ndarray:
        coefs = self.log_hazard[arm]
        n = len(next(iter(covariates.values())))
        lp = np.full(n, float(coefs.get("intercept", 0.0)))
        for c in self.source_covariates:
            col = covariates[c.name]
            if c.dist == "categorical":
                for lvl in c.params[0]:
                    beta = coefs.get(f"{c.name}={lvl}", 0.0)
                    if beta:
                        lp += beta * (np.asarray(col, object) == lvl)
            else:
                beta = coefs.get(c.name, 0.0)
                if beta:
                    lp += beta * np.asarray(col, float)
        return np.exp(lp)

    def to_json(self) -> str:
        def dist_payload(c):
            return {"name": c.name, "dist": c.dist, "params": list(c.params)}
        payload = {
            "name": self.name,
            "source_covariates": [dist_payload(c) for c in self.source_covariates],
            "target_covariates": [dist_payload(c) for c in self.target_covariates],
            "arms": list(self.arms), "allocation": list(self.allocation),
            "log_hazard": {a: dict(m) for a, m in self.log_hazard.items()},
            "censor_rate": self.censor_rate,
            "admin_censor_time": self.admin_censor_time,
            "n_source": self.n_source, "n_target": self.n_target,
            "horizon": self.horizon, "seed": self.seed,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        payload = json.loads(text)

        def dist(item):
            params = item["params"]
            if item["dist"] == "categorical":
                params = (tuple(params[0]), tuple(params[1]))
            return CovariateDist(item["name"], item["dist"], tuple(params))

        return cls(
            name=payload["name"],
            source_covariates=tuple(dist(i) for i in payload["source_covariates"]),
            target_covariates=tuple(dist(i) for i in payload["target_covariates"]),
            arms=tuple(payload["arms"]), allocation=tuple(payload["allocation"]),
            log_hazard=payload["log_hazard"],
            censor_rate=payload.get("censor_rate"),
            admin_censor_time=payload.get("admin_censor_time"),
            n_source=payload["n_source"], n_target=payload["n_target"],
            horizon=payload.get("horizon", 5.0), seed=payload.get("seed", 0))


class OracleTruth:
    """Closed-form (or quadrature / Monte-Carlo) truths for a scenario."""

    MC_DRAWS = 1_000_000

    def __init__(self, scenario: Scenario):
        self.scenario = scenario

    def true_risk(self, covariates: Mapping[str, object], arm: str,
                  t: float) -> float:
        cov = {k: np.asarray([v], dtype=object if isinstance(v, str) else float)
               for k, v in covariates.items()}
        lam = self.scenario.hazard(arm, cov)[0]
        return float(1.0 - math.exp(-lam * t))

    def true_ite(self, covariates: Mapping[str, object], contrast: Contrast,
                 t: Optional[float] = None) -> float:
        t = self.scenario.horizon if t is None else t
        return (self.true_risk(covariates, contrast.treated, t)
                - self.true_risk(covariates, contrast.reference, t))

    # -- averaging over a covariate law -------------------------------------

    def _atoms(self, laws) -> Optional[list]:
        """Discrete part of the law as (prob, {name: value}); None if any
        normal covariate is present alongside it (handled separately)."""
        atoms = [(1.0, {})]
        for c in laws:
            if c.dist == "normal":
                continue
            new = []
            if c.dist == "bernoulli":
                (q,) = c.params
                support = [(1.0 - q, 0.0), (q, 1.0)]
            else:
                support = list(zip(c.params[1], c.params[0]))
            for p0, base in atoms:
                for p, v in support:
                    if p == 0:
                        continue
                    d = dict(base)
                    d[c.name] = v
                    new.append((p0 * p, d))
            atoms = new
        return atoms

    def _expected_survival_gap(self, laws, contrast: Contrast, t: float):
        """E[risk under treated arm - risk under reference arm] over the
        covariate law; returns (value, mc_error)."""
        normals = [c for c in laws if c.dist == "normal"]
        atoms = self._atoms(laws)

        def gap_given(values: Mapping[str, float]) -> float:
            return self.true_ite(values, contrast, t)

        if not normals:
            val = sum(p * gap_given(v) for p, v in atoms)
            return float(val), 0.0
        if len(normals) == 1:
            c = normals[0]
            mu, sigma = c.params
            nodes, wts = np.polynomial.hermite_e.hermegauss(80)
            wts = wts / math.sqrt(2.0 * math.pi)
            val = 0.0
            for p, base in atoms:
                for z, w in zip(nodes, wts):
                    v = dict(base)
                    v[c.name] = mu + sigma * z
                    val += p * w * gap_given(v)
            return float(val), 0.0
        # several continuous covariates: Monte Carlo with reported error
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=self.scenario.seed, spawn_key=(99,))))
        cov = {c.name: c.draw(self.MC_DRAWS, rng) for c in laws}
        lam_t = self.scenario.hazard(contrast.treated, cov)
        lam_r = self.scenario.hazard(contrast.reference, cov)
        gaps = np.exp(-lam_r * t) - np.exp(-lam_t * t)
        return float(gaps.mean()), float(gaps.std(ddof=1) / math.sqrt(self.MC_DRAWS))

    def true_tate(self, contrast: Contrast, population: str = "target",
                  t: Optional[float] = None) -> Tuple[float, float]:
        """(value, mc_error); population 'source' gives the trial-sample truth."""
        t = self.scenario.horizon if t is None else t
        laws = (self.scenario.target_covariates if population == "target"
                else self.scenario.source_covariates)
        return self._expected_survival_gap(laws, contrast, t)

    def true_event_probability(self, arm: str, population: str = "source",
                               t: Optional[float] = None) -> float:
        """P(event time <= t) under one arm, ignoring censoring."""
        t = self.scenario.horizon if t is None else t
        laws = (self.scenario.target_covariates if population == "target"
                else self.scenario.source_covariates)
        normals = [c for c in laws if c.dist == "normal"]
        atoms = self._atoms(laws)

        def risk_given(values):
            return self.true_risk(values, arm, t)

        if not normals:
            return float(sum(p * risk_given(v) for p, v in atoms))
        if len(normals) == 1:
            c = normals[0]
            mu, sigma = c.params
            nodes, wts = np.polynomial.hermite_e.hermegauss(80)
            wts = wts / math.sqrt(2.0 * math.pi)
            return float(sum(p * w * risk_given({**base, c.name: mu + sigma * z})
                             for p, base in atoms for z, w in zip(nodes, wts)))
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=self.scenario.seed, spawn_key=(98,))))
        cov = {c.name: c.draw(self.MC_DRAWS, rng) for c in laws}
        lam = self.scenario.hazard(arm, cov)
        return float(np.mean(1.0 - np.exp(-lam * t)))

    def truth_table(self) -> dict:
        out = {}
        for c in all_contrasts(self.scenario.arms):
            val, err = self.true_tate(c, "target")
            sval, serr = self.true_tate(c, "source")
            out[c.key] = {"tate": val, "tate_mc_error": err,
                          "sate": sval, "sate_mc_error": serr}
        return out


def generate(scenario: Scenario, seed: Optional[int] = None):
    """Draw (source cohort, target cohort, oracle truth) for a scenario."""
    seed = scenario.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0,))))
    schema = scenario.schema()

    src_cov = {c.name: c.draw(scenario.n_source, rng)
               for c in scenario.source_covariates}
    arm_idx = rng.choice(len(scenario.arms), size=scenario.n_source,
                         p=scenario.allocation)
    arm = np.asarray(scenario.arms, dtype=object)[arm_idx]
    lam = np.empty(scenario.n_source)
    for i, a in enumerate(scenario.arms):
        mask = arm == a
        if mask.any():
            lam[mask] = scenario.hazard(a, {k: v[mask] for k, v in src_cov.items()})
    with np.errstate(divide="ignore"):
        event_time = np.where(lam > 0,
                              rng.exponential(1.0, scenario.n_source) / np.maximum(lam, 1e-300),
                              np.inf)
    censor = np.full(scenario.n_source, np.inf)
    if scenario.censor_rate is not None and scenario.censor_rate > 0:
        censor = rng.exponential(1.0 / scenario.censor_rate, scenario.n_source)
    if scenario.admin_censor_time is not None:
        censor = np.minimum(censor, scenario.admin_censor_time)
    if not np.isfinite(censor).all() and not np.isfinite(event_time).all():
        # zero-hazard, uncensored rows would have infinite follow-up
        censor = np.where(np.isfinite(censor), censor, scenario.horizon * 2)
    event = event_time <= censor
    time = np.minimum(event_time, censor)

    width = len(str(max(scenario.n_source, scenario.n_target)))
    source = Cohort(schema, [f"s{i:0{width}d}" for i in range(scenario.n_source)],
                    src_cov, "source", arm=arm, event=event, time=time)

    tgt_cov = {c.name: c.draw(scenario.n_target, rng)
               for c in scenario.target_covariates}
    target = Cohort(schema, [f"t{i:0{width}d}" for i in range(scenario.n_target)],
                    tgt_cov, "target")
    return source, target, OracleTruth(scenario)


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

def scenario_s1(n_source: int = 4000, n_target: int = 2000,
                seed: int = 20240817) -> Scenario:
    """Two arms, one prognostic normal covariate shifted in the target, equal
    slopes across arms (no effect modification on the hazard scale)."""
    return Scenario(
        name="S1",
        source_covariates=(CovariateDist("w", "normal", (0.0, 1.0)),),
        target_covariates=(CovariateDist("w", "normal", (0.35, 1.0)),),
        arms=("A", "B"), allocation=(0.5, 0.5),
        log_hazard={"A": {"intercept": math.log(0.008), "w": 0.25},
                    "B": {"intercept": math.log(0.022), "w": 0.25}},
        censor_rate=0.02, admin_censor_time=6.5,
        n_source=n_source, n_target=n_target, horizon=5.0, seed=seed)


def scenario_s2(n_source: int = 4000, n_target: int = 2000,
                seed: int = 20240818) -> Scenario:
    """Effect modified by a binary covariate whose prevalence differs between
    source (30%) and target (70%), making SATE and TATE diverge by
    construction. A pure-noise numeric covariate exercises covariate sampling."""
    return Scenario(
        name="S2",
        source_covariates=(CovariateDist("z", "bernoulli", (0.3,)),
                           CovariateDist("u", "normal", (0.0, 1.0))),
        target_covariates=(CovariateDist("z", "bernoulli", (0.7,)),
                           CovariateDist("u", "normal", (0.0, 1.0))),
        arms=("A", "B"), allocation=(0.5, 0.5),
        log_hazard={"A": {"intercept": math.log(0.02), "z": -1.2},
                    "B": {"intercept": math.log(0.02), "z": 0.5}},
        censor_rate=0.02, admin_censor_time=6.5,
        n_source=n_source, n_target=n_target, horizon=5.0, seed=seed)


BUILTIN_SCENARIOS = {"S1": scenario_s1, "S2": scenario_s2}
