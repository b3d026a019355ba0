"""Kaplan-Meier product-limit estimation and risk differences at a horizon."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_model import Cohort
from .estimates import Contrast, ContrastEstimate


@dataclass(frozen=True)
class KmCurve:
    """Step survival curve on the distinct event-time grid.

    Counts are weight totals; with unit weights they are subject counts.
    Censored subjects at an event time remain at risk for that time (events
    processed before censorings at the same instant).
    """

    grid: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    max_time: float

    def __post_init__(self):
        for name in ("grid", "survival", "at_risk", "events"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "survival", "at_risk", "events"])
            for row in zip(self.grid, self.survival, self.at_risk, self.events):
                w.writerow([repr(float(v)) for v in row])


def km_fit(times, events, weights=None) -> KmCurve:
    """Weighted product-limit estimator S(t) = prod_{t_j <= t} (1 - d_j / n_j)."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise ValueError("cannot fit a survival curve to an empty dataset")
    if np.any(times < 0):
        raise ValueError("times must be >= 0")
    if weights is None:
        weights = np.ones_like(times)
    else:
        weights = np.asarray(weights, dtype=float)
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
    grid = np.unique(times[events])
    d = np.zeros(grid.size)
    np.add.at(d, np.searchsorted(grid, times[events]), weights[events])
    at_risk = np.array([weights[times >= t].sum() for t in grid])
    with np.errstate(invalid="ignore"):
        surv = np.cumprod(1.0 - d / at_risk) if grid.size else np.zeros(0)
    return KmCurve(grid, surv, at_risk, d, float(times.max()))


def risk_at(curve: KmCurve, horizon: float, with_flag: bool = False):
    """1 - S at the largest grid time <= horizon; 0 before the first event.

    Beyond the last observed follow-up time the last survival value is carried
    forward; `with_flag` additionally returns whether that extrapolation
    happened.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    pos = np.searchsorted(curve.grid, horizon, side="right") - 1
    risk = 0.0 if pos < 0 else float(1.0 - curve.survival[pos])
    if with_flag:
        return risk, horizon > curve.max_time
    return risk


def km_fit_cohort(cohort: Cohort, arm: str, weights=None) -> KmCurve:
    if cohort.arm is None:
        raise ValueError("Kaplan-Meier needs an outcome-bearing source cohort")
    mask = cohort.arm == arm
    if not mask.any():
        raise ValueError(f"unknown or empty arm {arm!r}")
    w = None if weights is None else np.asarray(weights, float)[mask]
    return km_fit(cohort.time[mask], cohort.event[mask], w)


def sate_contrast(source: Cohort, arm_a: str, arm_b: str,
                  horizon: float) -> ContrastEstimate:
    """Trial risk difference at `horizon`: risk under arm_a minus arm_b.

    Point estimate only; standard errors come from the bootstrap driver.
    """
    ra = risk_at(km_fit_cohort(source, arm_a), horizon)
    rb = risk_at(km_fit_cohort(source, arm_b), horizon)
    return ContrastEstimate(Contrast(arm_a, arm_b), "sate", float(ra - rb))
