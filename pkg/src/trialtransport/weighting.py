"""Inverse-odds selection weighting: the comparator to the outcome-model route."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .data_model import AlignmentError, Cohort, CovariateSchema, design_matrix
from .estimates import Contrast, ContrastEstimate
from .km import km_fit_cohort, risk_at


@dataclass(frozen=True)
class SelectionParams:
    """Classification-forest knobs, mirroring the survival ForestParams minus
    the survival-specific fields."""

    n_trees: int = 500
    mtry: Optional[int] = None
    min_leaf: int = 15
    seed: int = 0
    clip: tuple = (0.01, 0.99)


class SelectionModel:
    """Trial-membership model P(in source trial | covariates).

    A bagged classification forest; the membership probability is the fraction
    of trees voting "source". Probabilities are clipped away from 0/1 before
    the odds transform.
    """

    def __init__(self, forest: RandomForestClassifier, schema: CovariateSchema,
                 clip: tuple):
        self.forest = forest
        self.schema = schema
        self.fingerprint = schema.fingerprint()
        self.clip = clip

    def membership_probability(self, cohort: Cohort) -> np.ndarray:
        X = design_matrix(cohort, self.schema)
        votes = np.zeros(X.shape[0])
        for est in self.forest.estimators_:
            votes += (est.predict(X) == 1.0)
        p = votes / len(self.forest.estimators_)
        return np.clip(p, self.clip[0], self.clip[1])


def fit_selection_model(source: Cohort, target: Cohort,
                        params: SelectionParams = SelectionParams(),
                        covariates: Optional[Sequence[str]] = None) -> SelectionModel:
    """Fit the membership forest on the stacked source+target rows.

    Rows are canonically ordered (source first, then by id) before fitting so
    the result does not depend on stacking order.
    """
    schema = (source.schema if covariates is None
              else source.schema.project(covariates))
    try:
        Xs = design_matrix(source.sort_by_id(), schema)
        Xt = design_matrix(target.sort_by_id(), schema)
    except AlignmentError as exc:
        raise AlignmentError(f"selection model alignment failed: {exc}") from exc
    if Xs.shape[0] == 0 or Xt.shape[0] == 0:
        raise ValueError("both cohorts must be non-empty")
    X = np.vstack([Xs, Xt])
    y = np.concatenate([np.ones(Xs.shape[0]), np.zeros(Xt.shape[0])])
    p = X.shape[1]
    mtry = params.mtry if params.mtry is not None else max(1, int(np.ceil(np.sqrt(p))))
    forest = RandomForestClassifier(
        n_estimators=params.n_trees, max_features=min(mtry, p),
        min_samples_leaf=params.min_leaf, bootstrap=True,
        random_state=params.seed % (2 ** 32), n_jobs=1)
    forest.fit(X, y)
    return SelectionModel(forest, schema, params.clip)


@dataclass(frozen=True)
class WeightSet:
    """Per-subject inverse-odds weights (1 - p) / p for trial membership p."""

    weights: np.ndarray
    min: float
    max: float
    ess: float

    def __post_init__(self):
        arr = np.asarray(self.weights, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "weights", arr)

    def write_csv(self, path, ids=None):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "weight"])
            for i, wt in enumerate(self.weights):
                w.writerow([ids[i] if ids is not None else i, repr(float(wt))])
            w.writerow(["__summary__",
                        f"min={self.min!r} max={self.max!r} ess={self.ess!r}"])


def compute_weights(model: SelectionModel, source: Cohort) -> WeightSet:
    """Weights reweighting trial subjects toward the target population."""
    p = model.membership_probability(source)
    w = (1.0 - p) / p
    ess = float(w.sum() ** 2 / np.square(w).sum())
    return WeightSet(w, float(w.min()), float(w.max()), ess)


def weighted_contrast(source: Cohort, weights, contrast: Contrast,
                      horizon: float) -> ContrastEstimate:
    """Weighted Kaplan-Meier risk difference at `horizon`.

    Point estimate only; the bootstrap driver supplies the SE, refitting the
    selection model on every replicate.
    """
    w = weights.weights if isinstance(weights, WeightSet) else np.asarray(weights, float)
    if w.shape[0] != source.n:
        raise ValueError("weights must cover every source row")
    for arm in (contrast.treated, contrast.reference):
        if float(w[source.arm == arm].sum()) <= 0:
            raise ValueError(f"arm {arm!r} has zero total weight")
    ra = risk_at(km_fit_cohort(source, contrast.treated, w), horizon)
    rb = risk_at(km_fit_cohort(source, contrast.reference, w), horizon)
    return ContrastEstimate(contrast, "weighted", float(ra - rb))
