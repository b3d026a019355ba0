"""Counterfactual random-forest engine: per-arm outcome models, counterfactual
risk grids, ITE/TATE estimation, OOB re-translation, and the bootstrap driver
that supplies every standard error."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data_model import AlignmentError, Cohort, design_matrix, evaluate_predicate
from .estimates import Contrast, ContrastEstimate, all_contrasts
from .km import km_fit_cohort, risk_at, sate_contrast
from .survival_forest import FitError, ForestParams, SurvivalForest
from .weighting import SelectionParams, compute_weights, fit_selection_model, \
    weighted_contrast


def derived_seed(master: int, *key: int) -> int:
    """Deterministic child seed; independent of fitting/scheduling order."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=tuple(key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ArmModelSet:
    """One fitted outcome forest per treatment arm at a fixed horizon."""

    forests: Mapping[str, SurvivalForest]
    horizon: float
    arms: tuple

    def __post_init__(self):
        fps = {f.fingerprint for f in self.forests.values()}
        if len(fps) != 1:
            raise AlignmentError("arm forests disagree on the covariate schema")

    @property
    def schema(self):
        return self.forests[self.arms[0]].schema

    def contrasts(self) -> tuple:
        return all_contrasts(self.arms)


def fit_arm_models(source: Cohort, params: ForestParams, horizon: float = 5.0,
                   covariates: Optional[Sequence[str]] = None) -> ArmModelSet:
    """Fit one survival forest per arm on that arm's rows only.

    Arm seeds are derived from the master seed and the arm's index in sorted
    arm order, so adding arms does not perturb existing ones.
    """
    arms = source.arms()
    forests = {}
    for i, arm in enumerate(arms):
        sub = source.arm_subset(arm)
        if not sub.event.any():
            raise FitError(f"arm {arm!r} has no events")
        arm_params = replace(params, seed=derived_seed(params.seed, 1, i))
        forests[arm] = SurvivalForest.fit(sub, arm_params, covariates)
    return ArmModelSet(forests, horizon, arms)


@dataclass(frozen=True)
class CounterfactualGrid:
    """Predicted risk per target subject under every arm."""

    arms: tuple
    risks: np.ndarray          # (n_subjects, n_arms)
    subject_ids: tuple

    def __post_init__(self):
        arr = np.asarray(self.risks, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "risks", arr)

    @property
    def n(self) -> int:
        return self.risks.shape[0]

    def column(self, arm: str) -> np.ndarray:
        try:
            return self.risks[:, self.arms.index(arm)]
        except ValueError:
            raise KeyError(f"unknown arm {arm!r}") from None


def counterfactual_grid(models: ArmModelSet, target: Cohort) -> CounterfactualGrid:
    """Pass every target subject through every arm's model at the model horizon."""
    try:
        X = design_matrix(target, models.schema)
    except AlignmentError as exc:
        raise AlignmentError(
            f"target does not align with the fitted schema: {exc}") from exc
    return _grid_from_matrix(models, X, target.ids)


def _grid_from_matrix(models: ArmModelSet, X: np.ndarray,
                      ids) -> CounterfactualGrid:
    cols = [models.forests[a].predict_risk(X, models.horizon) for a in models.arms]
    return CounterfactualGrid(models.arms, np.column_stack(cols), tuple(ids))


def ite(grid: CounterfactualGrid, contrast: Contrast, subject=None):
    """Individual treatment effect: risk under treated arm minus reference arm."""
    values = grid.column(contrast.treated) - grid.column(contrast.reference)
    if subject is None:
        return values
    if isinstance(subject, str):
        subject = grid.subject_ids.index(subject)
    return float(values[subject])


def tate(grid: CounterfactualGrid, contrast: Contrast, mask=None) -> float:
    """Average ITE over (a subset of) the target; equals the difference of the
    per-arm mean risks."""
    values = ite(grid, contrast)
    if mask is not None:
        values = values[np.asarray(mask, dtype=bool)]
    if values.size == 0:
        raise ValueError("empty target subset")
    return float(values.mean())


def subgroup_tate(grid: CounterfactualGrid, contrast: Contrast, target: Cohort,
                  predicate) -> ContrastEstimate:
    """TATE restricted to the subgroup the predicate selects.

    Point only; the bootstrap driver re-evaluates the same predicate subset on
    each replicate's grid (no per-subgroup refit).
    """
    mask = evaluate_predicate(target, predicate)
    if not mask.any():
        raise ValueError("subgroup predicate selects no target subjects")
    return ContrastEstimate(contrast, "tate", tate(grid, contrast, mask))


# ---------------------------------------------------------------------------
# OOB re-translation
# ---------------------------------------------------------------------------

def oob_counterfactual_grid(models: ArmModelSet, source: Cohort) -> CounterfactualGrid:
    """Counterfactual grid over the source cohort as its own target.

    A subject's risk under the arm they were randomized to uses only trees
    that held the subject out of bag; risks under every other arm use the full
    forest (the subject never entered that forest's training data).
    """
    source = source.sort_by_id()
    X = design_matrix(source, models.schema)
    cols = []
    for arm in models.arms:
        forest = models.forests[arm]
        risks = forest.predict_risk(X, models.horizon)
        mask = source.arm == arm
        own = source.subset(mask)
        oob = forest.predict_risk_oob(own, models.horizon, fallback=True)
        risks = risks.copy()
        risks[mask] = oob
        cols.append(risks)
    return CounterfactualGrid(models.arms, np.column_stack(cols), source.ids)


def oob_retranslate(source: Cohort, params: ForestParams,
                    contrasts: Sequence[Contrast], horizon: float = 5.0,
                    covariates: Optional[Sequence[str]] = None,
                    models: Optional[ArmModelSet] = None) -> dict:
    """Internal-validity check: re-translate the model back onto the trial
    sample, per contrast."""
    if models is None:
        models = fit_arm_models(source, params, horizon, covariates)
    grid = oob_counterfactual_grid(models, source)
    return {c.key: tate(grid, c) for c in contrasts}


# ---------------------------------------------------------------------------
# Bootstrap driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubgroupEstimate:
    subgroup: str
    n: int
    estimate: ContrastEstimate


@dataclass(frozen=True)
class BootstrapResult:
    estimates: tuple          # ContrastEstimate per (estimand, contrast)
    subgroups: tuple          # SubgroupEstimate
    n_boot: int
    n_redraws: int
    redraw_warning: bool

    def get(self, estimand: str, contrast: Contrast) -> ContrastEstimate:
        for e in self.estimates:
            if e.estimand == estimand and e.contrast == contrast:
                return e
        raise KeyError((estimand, contrast.key))


def _stratified_resample(source: Cohort, rng) -> Cohort:
    """With-replacement resample preserving each arm's size."""
    parts = []
    for arm in source.arms():
        idx = np.flatnonzero(source.arm == arm)
        parts.append(idx[rng.integers(0, idx.size, size=idx.size)])
    return source.subset(np.concatenate(parts))


def _replicate_cohort(source: Cohort, master_seed: int, b: int):
    """Draw one bootstrap replicate, redrawing zero-event-arm samples."""
    redraws = 0
    for attempt in range(1000):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=master_seed, spawn_key=(2, b, attempt))))
        rep = _stratified_resample(source, rng)
        if all(rep.event[rep.arm == a].any() for a in rep.arms()):
            return rep, redraws, derived_seed(master_seed, 3, b, attempt)
        redraws += 1
    raise FitError("could not draw a bootstrap replicate with events in every arm")


def _point_values(source, target_X, target_ids, params, horizon, covariates,
                  contrasts, estimands, target_masks, eligible_mask,
                  selection_params, target, seed):
    """All requested estimand values for one dataset (full data or replicate)."""
    out = {}
    sub_out = {}
    need_models = bool({"tate", "tate_eligible", "oob_retranslation"} & set(estimands)) \
        or bool(target_masks)
    models = None
    grid = None
    if need_models:
        models = fit_arm_models(source, replace(params, seed=seed), horizon, covariates)
        if target_X is not None:
            grid = _grid_from_matrix(models, target_X, target_ids)
    for c in contrasts:
        if "sate" in estimands:
            out[("sate", c.key)] = sate_contrast(
                source, c.treated, c.reference, horizon).point
        if "tate" in estimands:
            out[("tate", c.key)] = tate(grid, c)
        if "tate_eligible" in estimands:
            out[("tate_eligible", c.key)] = tate(grid, c, eligible_mask)
        for name, mask in target_masks.items():
            sub_out[(name, c.key)] = tate(grid, c, mask)
    if "oob_retranslation" in estimands:
        oob = oob_retranslate(source, params, contrasts, horizon, covariates,
                              models=models)
        for c in contrasts:
            out[("oob_retranslation", c.key)] = oob[c.key]
    if "weighted" in estimands:
        sel = fit_selection_model(
            source, target, replace(selection_params,
                                    seed=derived_seed(seed, 7)), covariates)
        wts = compute_weights(sel, source)
        for c in contrasts:
            out[("weighted", c.key)] = weighted_contrast(
                source, wts, c, horizon).point
    return out, sub_out


def bootstrap_estimates(source: Cohort, target: Optional[Cohort],
                        params: ForestParams,
                        contrasts: Optional[Sequence[Contrast]] = None,
                        estimands: Sequence[str] = ("sate", "tate"),
                        n_boot: int = 1000, horizon: float = 5.0,
                        covariates: Optional[Sequence[str]] = None,
                        subgroups: Optional[Mapping] = None,
                        eligibility=None,
                        selection_params: SelectionParams = SelectionParams(),
                        confidence: float = 0.95,
                        n_jobs: int = 1) -> BootstrapResult:
    """Bootstrap standard errors for every requested estimand and contrast.

    Each replicate resamples the source cohort with replacement, stratified by
    arm, and refits every model with replicate-derived seeds; the target cohort
    is never resampled. Points come from the full data; the bootstrap
    contributes only spread. Replicates whose resample leaves an arm without
    events are redrawn and counted.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be >= 2")
    source = source.sort_by_id()
    if contrasts is None:
        contrasts = all_contrasts(source.arms())
    estimands = tuple(estimands)
    needs_target = {"tate", "tate_eligible", "weighted"} & set(estimands)
    if (needs_target or subgroups) and target is None:
        raise ValueError("these estimands require a target cohort")

    schema = (source.schema if covariates is None
              else source.schema.project(covariates))
    target_X = design_matrix(target, schema) if target is not None else None
    target_ids = target.ids if target is not None else ()
    target_masks = {}
    if subgroups:
        for name, pred in subgroups.items():
            mask = evaluate_predicate(target, pred)
            if not mask.any():
                raise ValueError(f"subgroup {name!r} selects no target subjects")
            target_masks[name] = mask
    eligible_mask = None
    if "tate_eligible" in estimands:
        eligible_mask = evaluate_predicate(target, eligibility)
        if not eligible_mask.any():
            raise ValueError("eligibility criteria select no target subjects")

    point, sub_point = _point_values(
        source, target_X, target_ids, params, horizon, covariates, contrasts,
        estimands, target_masks, eligible_mask, selection_params, target,
        params.seed)

    def one_replicate(b):
        rep, redraws, seed = _replicate_cohort(source, params.seed, b)
        vals, sub_vals = _point_values(
            rep, target_X, target_ids, params, horizon, covariates, contrasts,
            estimands, target_masks, eligible_mask, selection_params, target,
            seed)
        return vals, sub_vals, redraws

    if n_jobs == 1:
        results = [one_replicate(b) for b in range(n_boot)]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(one_replicate)(b) for b in range(n_boot))

    n_redraws = sum(r[2] for r in results)
    redraw_warning = n_redraws > 0.1 * n_boot
    if redraw_warning:
        warnings.warn(f"{n_redraws} bootstrap redraws over {n_boot} replicates")

    estimates = []
    for key, pt in point.items():
        values = np.array([r[0][key] for r in results])
        estimand, ckey = key
        contrast = next(c for c in contrasts if c.key == ckey)
        estimates.append(ContrastEstimate.from_bootstrap(
            contrast, estimand, pt, float(values.std(ddof=1)), n_boot, confidence))
    sub_estimates = []
    for key, pt in sub_point.items():
        values = np.array([r[1][key] for r in results])
        name, ckey = key
        contrast = next(c for c in contrasts if c.key == ckey)
        sub_estimates.append(SubgroupEstimate(
            name, int(target_masks[name].sum()),
            ContrastEstimate.from_bootstrap(
                contrast, "tate", pt, float(values.std(ddof=1)), n_boot,
                confidence)))
    return BootstrapResult(tuple(estimates), tuple(sub_estimates),
                           n_boot, n_redraws, redraw_warning)
