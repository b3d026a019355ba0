"""Right-censored survival forest: bagged trees, log-rank splits, Nelson-Aalen leaves."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data_model import AlignmentError, Cohort, CovariateSchema, design_matrix

FOREST_FILE_VERSION = 1


class FitError(ValueError):
    """Training data cannot support a survival model."""


@dataclass(frozen=True)
class ForestParams:
    """Tuning knobs; defaults reproduce the 500-tree setup."""

    n_trees: int = 500
    mtry: Optional[int] = None          # None -> ceil(sqrt(p))
    min_node_events: int = 3
    min_node_size: int = 15
    max_depth: Optional[int] = None
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")
        if self.min_node_events < 1 or self.min_node_size < 1:
            raise ValueError("node minima must be positive")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def resolved_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(p))
        return max(1, min(m, p))


def tree_seed(master_seed: int, tree_index: int) -> np.random.Generator:
    """Per-tree generator; mixing via SeedSequence keeps trees independent of
    execution order."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(tree_index,))))


# ---------------------------------------------------------------------------
# Log-rank machinery
# ---------------------------------------------------------------------------

def logrank_statistic(group, times, events) -> float:
    """Two-sample log-rank chi-square statistic with Breslow tie handling.

    `group` is a boolean membership indicator for one of the two groups; the
    statistic is symmetric under relabeling. Defined as 0 when the variance
    vanishes (e.g. no events).
    """
    group = np.asarray(group, dtype=bool)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if group.all() or not group.any():
        raise ValueError("both groups must be non-empty")
    grid = np.unique(times[events])
    if grid.size == 0:
        return 0.0
    d = np.array([np.sum(events & (times == t)) for t in grid], dtype=float)
    Y = np.array([np.sum(times >= t) for t in grid], dtype=float)
    d1 = np.array([np.sum(events & group & (times == t)) for t in grid], dtype=float)
    Y1 = np.array([np.sum(group & (times >= t)) for t in grid], dtype=float)
    num = float(np.sum(d1 - Y1 * d / Y))
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(Y > 1, d * (Y - d) / (Y - 1.0), 0.0) * Y1 * (Y - Y1) / Y ** 2
    var = float(np.sum(v))
    if var <= 0:
        return 0.0
    return num * num / var


def _prefix_logrank(t_sorted: np.ndarray, e_sorted: np.ndarray):
    """Log-rank statistics for every prefix split of rows sorted by a covariate.

    Returns (stat, left_events) where stat[k-1] is the statistic for the split
    placing the first k rows left, and left_events[k-1] the event count left.
    Rows with no events yield None.
    """
    grid = np.unique(t_sorted[e_sorted])
    if grid.size == 0:
        return None, None
    n = t_sorted.size
    ti = np.searchsorted(grid, t_sorted)        # event-time index per row
    d = np.bincount(ti[e_sorted], minlength=grid.size).astype(float)
    srt = np.sort(t_sorted)
    Y = (n - np.searchsorted(srt, grid, side="left")).astype(float)
    at_risk = t_sorted[:, None] >= grid[None, :]
    Y1 = np.cumsum(at_risk, axis=0, dtype=float)
    left_events = np.cumsum(e_sorted, dtype=float)
    rate = d / Y
    # numerator: sum_j d1j - Y1j * dj/Yj ; d1 prefix sums collapse to event cumsum
    d1_term = np.zeros(n)
    np.add.at(d1_term, np.flatnonzero(e_sorted), 1.0)
    num = np.cumsum(d1_term) - Y1 @ rate
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(Y > 1, d * (Y - d) / (Y - 1.0), 0.0) / Y ** 2
    var = (Y1 * (Y[None, :] - Y1)) @ coef
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(var > 0, num * num / var, 0.0)
    return stat, left_events


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

class SurvivalTree:
    """One bagged survival tree stored as flat node arrays.

    Internal node i: feature[i] >= 0, rows with x[feature] <= threshold go to
    children_left[i]. Leaf i: feature[i] == -1 and leaf_index[i] points into
    (leaf_grids, leaf_chfs), the Nelson-Aalen cumulative hazard of the in-bag
    leaf rows.
    """

    def __init__(self, feature, threshold, children_left, children_right,
                 leaf_index, leaf_grids, leaf_chfs, bag, oob_mask):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=float)
        self.children_left = np.asarray(children_left, dtype=np.int32)
        self.children_right = np.asarray(children_right, dtype=np.int32)
        self.leaf_index = np.asarray(leaf_index, dtype=np.int32)
        self.leaf_grids = [np.asarray(g, dtype=float) for g in leaf_grids]
        self.leaf_chfs = [np.asarray(c, dtype=float) for c in leaf_chfs]
        self.bag = np.asarray(bag, dtype=np.int64)
        self.oob_mask = np.asarray(oob_mask, dtype=bool)

    def leaf_of(self, X: np.ndarray) -> np.ndarray:
        """Leaf id for every row of X, routed iteratively."""
        n = X.shape[0]
        out = np.empty(n, dtype=np.int64)
        stack = [(0, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            f = self.feature[node]
            if f < 0:
                out[idx] = self.leaf_index[node]
                continue
            left = X[idx, f] <= self.threshold[node]
            if left.any():
                stack.append((self.children_left[node], idx[left]))
            if not left.all():
                stack.append((self.children_right[node], idx[~left]))
        return out

    def chf_at(self, leaf_ids: np.ndarray, horizon: float) -> np.ndarray:
        out = np.zeros(leaf_ids.size)
        for lid in np.unique(leaf_ids):
            grid = self.leaf_grids[lid]
            pos = np.searchsorted(grid, horizon, side="right") - 1
            val = self.leaf_chfs[lid][pos] if pos >= 0 else 0.0
            out[leaf_ids == lid] = val
        return out

    def predict_risk(self, X: np.ndarray, horizon: float) -> np.ndarray:
        return 1.0 - np.exp(-self.chf_at(self.leaf_of(X), horizon))


def _nelson_aalen(times: np.ndarray, events: np.ndarray):
    grid = np.unique(times[events])
    if grid.size == 0:
        return grid, np.zeros(0)
    d = np.bincount(np.searchsorted(grid, times[events]),
                    minlength=grid.size).astype(float)
    srt = np.sort(times)
    Y = (times.size - np.searchsorted(srt, grid, side="left")).astype(float)
    return grid, np.cumsum(d / Y)


def _grow_tree(X, times, events, params: ForestParams, rng) -> SurvivalTree:
    n, p = X.shape
    bag = np.sort(rng.integers(0, n, size=n))
    oob_mask = np.ones(n, dtype=bool)
    oob_mask[bag] = False
    mtry = params.resolved_mtry(p)

    feature, threshold = [], []
    left_child, right_child, leaf_index = [], [], []
    leaf_grids, leaf_chfs = [], []

    def make_leaf(node_id, idx):
        grid, chf = _nelson_aalen(times[idx], events[idx])
        feature[node_id] = -1
        leaf_index[node_id] = len(leaf_grids)
        leaf_grids.append(grid)
        leaf_chfs.append(chf)

    def new_node():
        feature.append(-2)
        threshold.append(np.nan)
        left_child.append(-1)
        right_child.append(-1)
        leaf_index.append(-1)
        return len(feature) - 1

    def grow(idx, depth):
        node_id = new_node()
        n_node = idx.size
        n_events = int(events[idx].sum())
        depth_ok = params.max_depth is None or depth < params.max_depth
        if (not depth_ok or n_node < 2 * params.min_node_size
                or n_events < 2 * params.min_node_events):
            make_leaf(node_id, idx)
            return node_id
        t_node = times[idx]
        e_node = events[idx]
        feats = np.sort(rng.choice(p, size=mtry, replace=False))
        best = None  # (stat, feature, threshold, order, k)
        for f in feats:
            x = X[idx, f]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            distinct = xs[:-1] != xs[1:]          # split allowed between k-1, k
            if not distinct.any():
                continue
            stat, left_ev = _prefix_logrank(t_node[order], e_node[order])
            if stat is None:
                continue
            k = np.arange(1, n_node)              # left group sizes
            s = stat[:-1]
            lev = left_ev[:-1]
            valid = (distinct
                     & (k >= params.min_node_size)
                     & (n_node - k >= params.min_node_size)
                     & (lev >= params.min_node_events)
                     & (n_events - lev >= params.min_node_events))
            if not valid.any():
                continue
            s = np.where(valid, s, -np.inf)
            j = int(np.argmax(s))                 # first max -> lowest threshold
            if s[j] > 0 and (best is None or s[j] > best[0]):
                thr = 0.5 * (xs[j] + xs[j + 1])
                best = (s[j], int(f), float(thr), order, j + 1)
        if best is None:
            make_leaf(node_id, idx)
            return node_id
        _, f, thr, order, k = best
        feature[node_id] = f
        threshold[node_id] = thr
        left_child[node_id] = grow(idx[order[:k]], depth + 1)
        right_child[node_id] = grow(idx[order[k:]], depth + 1)
        return node_id

    grow(bag, 0)
    return SurvivalTree(feature, threshold, left_child, right_child,
                        leaf_index, leaf_grids, leaf_chfs, bag, oob_mask)


# ---------------------------------------------------------------------------
# Forest
# ---------------------------------------------------------------------------

class SurvivalForest:
    """Bagged survival trees sharing one covariate schema.

    Prediction routes a subject through every tree, converts each leaf
    cumulative hazard to risk 1 - exp(-CHF(horizon)), and averages the
    per-tree risks.
    """

    def __init__(self, params: ForestParams, trees, schema: CovariateSchema,
                 n_train: int):
        if len(trees) != params.n_trees:
            raise ValueError("tree count does not match params")
        self.params = params
        self.trees = list(trees)
        self.schema = schema
        self.fingerprint = schema.fingerprint()
        self.n_train = n_train

    # -- fitting ------------------------------------------------------------

    @classmethod
    def fit(cls, training: Cohort, params: ForestParams,
            covariates: Optional[Sequence[str]] = None) -> "SurvivalForest":
        """Fit on one arm's rows. Rows are canonically sorted by id before any
        randomness is consumed, so training row order is irrelevant."""
        if training.label != "source":
            raise FitError("survival forests train on source (outcome-bearing) cohorts")
        if training.n < 2:
            raise FitError("need at least 2 training rows")
        if not training.event.any():
            raise FitError("cannot fit survival model with no events")
        training = training.sort_by_id()
        schema = (training.schema if covariates is None
                  else training.schema.project(covariates))
        X = design_matrix(training, schema)
        times = training.time
        events = training.event

        def one(i):
            return _grow_tree(X, times, events, params, tree_seed(params.seed, i))

        if params.n_jobs == 1:
            trees = [one(i) for i in range(params.n_trees)]
        else:
            trees = Parallel(n_jobs=params.n_jobs)(
                delayed(one)(i) for i in range(params.n_trees))
        return cls(params, trees, schema, training.n)

    # -- prediction ---------------------------------------------------------

    def _matrix(self, x) -> np.ndarray:
        if isinstance(x, Cohort):
            return design_matrix(x, self.schema)
        X = np.asarray(x, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.schema.feature_names()):
            raise AlignmentError("covariate vector width does not match model schema")
        return X

    def check_fingerprint(self, other: "SurvivalForest"):
        if self.fingerprint != other.fingerprint:
            raise AlignmentError("schema fingerprint mismatch between forests")

    def predict_risk_per_tree(self, x, horizon: float) -> np.ndarray:
        """(n_rows, n_trees) matrix of single-tree risks."""
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        X = self._matrix(x)
        return np.column_stack([t.predict_risk(X, horizon) for t in self.trees])

    def predict_risk(self, x, horizon: float) -> np.ndarray:
        """Mean over trees of leaf-level risk at `horizon`; values in [0, 1]."""
        return self.predict_risk_per_tree(x, horizon).mean(axis=1)

    def predict_risk_oob(self, training: Cohort, horizon: float,
                         fallback: bool = False) -> np.ndarray:
        """Out-of-bag risk per training row: average only over trees that did
        not bag the row. Rows in-bag everywhere either error or, with
        `fallback`, use the all-tree prediction (logged as a warning)."""
        training = training.sort_by_id()
        if training.n != self.n_train:
            raise FitError("OOB prediction requires the original training cohort")
        per_tree = self.predict_risk_per_tree(training, horizon)
        oob = np.column_stack([t.oob_mask for t in self.trees])
        counts = oob.sum(axis=1)
        if (counts == 0).any():
            if not fallback:
                raise FitError("no OOB trees for at least one training row")
            warnings.warn("rows in-bag for every tree fall back to in-bag prediction")
        with np.errstate(invalid="ignore"):
            out = np.where(counts > 0,
                           (per_tree * oob).sum(axis=1) / np.maximum(counts, 1),
                           per_tree.mean(axis=1))
        return out

    def oob_fraction(self) -> float:
        return float(np.mean([t.oob_mask.mean() for t in self.trees]))

    # -- serialization ------------------------------------------------------

    def save(self, path):
        payload = {
            "format": "trialtransport-survival-forest",
            "version": FOREST_FILE_VERSION,
            "params": {k: getattr(self.params, k) for k in
                       ("n_trees", "mtry", "min_node_events", "min_node_size",
                        "max_depth", "seed", "n_jobs")},
            "fingerprint": self.fingerprint,
            "n_train": self.n_train,
            "schema": [[e.name, e.kind, list(e.levels) if e.levels else None, e.unit]
                       for e in self.schema.entries],
            "trees": [{
                "feature": t.feature.tolist(),
                "threshold": [repr(v) for v in t.threshold.tolist()],
                "left": t.children_left.tolist(),
                "right": t.children_right.tolist(),
                "leaf_index": t.leaf_index.tolist(),
                "grids": [[repr(v) for v in g.tolist()] for g in t.leaf_grids],
                "chfs": [[repr(v) for v in c.tolist()] for c in t.leaf_chfs],
                "bag": t.bag.tolist(),
            } for t in self.trees],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "SurvivalForest":
        from .data_model import Covariate
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != "trialtransport-survival-forest":
            raise ValueError("not a survival-forest file")
        if payload["version"] != FOREST_FILE_VERSION:
            raise ValueError(f"unsupported forest file version {payload['version']}")
        params = ForestParams(**payload["params"])
        schema = CovariateSchema(tuple(
            Covariate(n, k, tuple(lv) if lv else None, u)
            for n, k, lv, u in payload["schema"]))
        n_train = payload["n_train"]
        trees = []
        for t in payload["trees"]:
            bag = np.asarray(t["bag"], dtype=np.int64)
            oob = np.ones(n_train, dtype=bool)
            oob[bag] = False
            trees.append(SurvivalTree(
                t["feature"], [float(v) for v in t["threshold"]],
                t["left"], t["right"], t["leaf_index"],
                [[float(v) for v in g] for g in t["grids"]],
                [[float(v) for v in c] for c in t["chfs"]],
                bag, oob))
        forest = cls(params, trees, schema, n_train)
        if forest.fingerprint != payload["fingerprint"]:
            raise ValueError("schema fingerprint mismatch in forest file")
        return forest


# Functional-style aliases ---------------------------------------------------------

def fit(training: Cohort, params: ForestParams,
        covariates: Optional[Sequence[str]] = None) -> SurvivalForest:
    return SurvivalForest.fit(training, params, covariates)


def predict_risk(forest: SurvivalForest, x, horizon: float):
    r = forest.predict_risk(x, horizon)
    return float(r[0]) if np.ndim(x) == 1 else r


def predict_risk_oob(forest: SurvivalForest, training: Cohort, row_index: int,
                     horizon: float) -> float:
    return float(forest.predict_risk_oob(training, horizon)[row_index])
