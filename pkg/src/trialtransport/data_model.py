"""Cohorts, covariate schemas, schema alignment, and covariate-balance diagnostics."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

KINDS = ("numeric", "binary", "categorical")


class SchemaError(ValueError):
    """Invalid covariate schema."""


class CohortError(ValueError):
    """Cohort rows do not conform to their schema."""


class AlignmentError(ValueError):
    """Source and target schemas cannot be aligned."""


@dataclass(frozen=True)
class Covariate:
    """One entry of a covariate dictionary."""

    name: str
    kind: str
    levels: Optional[tuple] = None
    unit: Optional[str] = None

    def __post_init__(self):
        if not self.name:
            raise SchemaError("covariate name must be non-empty")
        if self.kind not in KINDS:
            raise SchemaError(f"unknown covariate kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise SchemaError(f"categorical covariate {self.name!r} needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"duplicate levels for {self.name!r}")
            object.__setattr__(self, "levels", tuple(str(l) for l in self.levels))
        elif self.levels is not None:
            raise SchemaError(f"levels only allowed for categorical ({self.name!r})")


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate dictionary shared by every row of a cohort."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise SchemaError("covariate names must be unique")

    @property
    def names(self):
        return tuple(e.name for e in self.entries)

    def __getitem__(self, name: str) -> Covariate:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def project(self, names: Sequence[str]) -> "CovariateSchema":
        """Sub-schema containing `names`, kept in this schema's order."""
        keep = set(names)
        missing = keep - set(self.names)
        if missing:
            raise SchemaError(f"unknown covariates: {sorted(missing)}")
        return CovariateSchema(tuple(e for e in self.entries if e.name in keep))

    def fingerprint(self) -> str:
        """Stable hash of the schema contents; used to tie models to their inputs."""
        payload = [[e.name, e.kind, list(e.levels) if e.levels else None]
                   for e in self.entries]
        blob = json.dumps(payload, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def feature_names(self) -> tuple:
        """Column names of the expanded design matrix (one indicator per level)."""
        out = []
        for e in self.entries:
            if e.kind == "categorical":
                out.extend(f"{e.name}={lvl}" for lvl in e.levels)
            else:
                out.append(e.name)
        return tuple(out)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject; arm/event/time are present for trial (source) subjects only."""

    id: str
    covariates: Mapping[str, object]
    arm: Optional[str] = None
    event: Optional[bool] = None
    time: Optional[float] = None


class Cohort:
    """Immutable rectangular dataset of subjects conforming to a schema.

    Source cohorts carry arm / event / follow-up time for every row; target
    cohorts need only covariates. Covariate values are validated eagerly and
    missing values are rejected.
    """

    def __init__(self, schema, ids, covariates, label,
                 arm=None, event=None, time=None):
        if label not in ("source", "target"):
            raise CohortError(f"label must be 'source' or 'target', got {label!r}")
        self.schema = schema
        self.label = label
        self.ids = tuple(str(i) for i in ids)
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise CohortError("subject ids must be unique")
        self.covariates = {}
        for entry in schema.entries:
            if entry.name not in covariates:
                raise CohortError(f"missing covariate column {entry.name!r}")
            col = covariates[entry.name]
            if entry.kind == "categorical":
                arr = np.asarray([str(v) for v in col], dtype=object)
                bad = set(arr) - set(entry.levels)
                if bad:
                    raise CohortError(
                        f"values {sorted(bad)} of {entry.name!r} not in declared levels")
            else:
                arr = np.asarray(col, dtype=float)
                if not np.all(np.isfinite(arr)):
                    raise CohortError(f"non-finite value in {entry.name!r}")
                if entry.kind == "binary" and not np.all(np.isin(arr, (0.0, 1.0))):
                    raise CohortError(f"binary covariate {entry.name!r} has non-0/1 value")
            if arr.shape[0] != n:
                raise CohortError(f"column {entry.name!r} has wrong length")
            arr.setflags(write=False)
            self.covariates[entry.name] = arr

        if label == "source":
            if arm is None or event is None or time is None:
                raise CohortError("source cohorts require arm, event, and time")
            self.arm = np.asarray([str(a) for a in arm], dtype=object)
            self.event = np.asarray(event, dtype=bool)
            self.time = np.asarray(time, dtype=float)
            if not (len(self.arm) == len(self.event) == len(self.time) == n):
                raise CohortError("arm/event/time length mismatch")
            if np.any(self.time < 0) or not np.all(np.isfinite(self.time)):
                raise CohortError("follow-up times must be finite and >= 0")
            for a in (self.arm, self.event, self.time):
                a.setflags(write=False)
        else:
            if any(x is not None for x in (arm, event, time)):
                raise CohortError("target cohorts carry covariates only")
            self.arm = self.event = self.time = None

    @classmethod
    def from_records(cls, schema, records, label):
        ids = [r.id for r in records]
        covs = {e.name: [r.covariates[e.name] for r in records] for e in schema.entries}
        if label == "source":
            return cls(schema, ids, covs, label,
                       arm=[r.arm for r in records],
                       event=[r.event for r in records],
                       time=[r.time for r in records])
        return cls(schema, ids, covs, label)

    @property
    def n(self) -> int:
        return len(self.ids)

    def arms(self) -> tuple:
        if self.arm is None:
            return ()
        seen = []
        for a in self.arm:
            if a not in seen:
                seen.append(a)
        return tuple(sorted(seen))

    def subset(self, index) -> "Cohort":
        """New cohort from a boolean mask or integer index array.

        Integer indices may repeat (bootstrap resampling); repeated rows get
        suffixed ids to keep id uniqueness.
        """
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        ids = [self.ids[i] for i in index]
        if len(set(ids)) != len(ids):
            counts = {}
            out = []
            for i in ids:
                k = counts.get(i, 0)
                counts[i] = k + 1
                out.append(i if k == 0 else f"{i}#{k}")
            ids = out
        covs = {name: col[index] for name, col in self.covariates.items()}
        if self.label == "source":
            return Cohort(self.schema, ids, covs, "source",
                          arm=self.arm[index], event=self.event[index],
                          time=self.time[index])
        return Cohort(self.schema, ids, covs, "target")

    def sort_by_id(self) -> "Cohort":
        order = sorted(range(self.n), key=lambda i: self.ids[i])
        if order == list(range(self.n)):
            return self
        return self.subset(np.asarray(order))

    def arm_subset(self, arm_label: str) -> "Cohort":
        if self.arm is None:
            raise CohortError("target cohorts have no arms")
        mask = self.arm == arm_label
        if not mask.any():
            raise CohortError(f"no rows in arm {arm_label!r}")
        return self.subset(mask)

    def with_schema(self, schema: CovariateSchema) -> "Cohort":
        """Re-validate this cohort against a (typically projected) schema."""
        covs = {e.name: self.covariates[e.name] for e in schema.entries}
        if self.label == "source":
            return Cohort(schema, self.ids, covs, "source",
                          arm=self.arm, event=self.event, time=self.time)
        return Cohort(schema, self.ids, covs, "target")


def design_matrix(cohort: Cohort, schema: CovariateSchema) -> np.ndarray:
    """Expand a cohort to a numeric matrix under `schema`.

    Categorical covariates become one 0/1 indicator per declared level, so all
    downstream split logic is threshold-based.
    """
    cols = []
    for entry in schema.entries:
        if entry.name not in cohort.covariates:
            raise AlignmentError(f"cohort lacks covariate {entry.name!r}")
        col = cohort.covariates[entry.name]
        if entry.kind == "categorical":
            observed = set(col)
            extra = observed - set(entry.levels)
            if extra:
                raise AlignmentError(
                    f"levels {sorted(extra)} of {entry.name!r} unknown to the model schema")
            for lvl in entry.levels:
                cols.append((col == lvl).astype(float))
        else:
            cols.append(np.asarray(col, dtype=float))
    return np.column_stack(cols) if cols else np.empty((cohort.n, 0))


@dataclass(frozen=True)
class AlignmentReport:
    """Partition of covariate names produced by aligning two schemas."""

    shared: tuple
    dropped_source: tuple
    dropped_target: tuple
    type_conflicts: tuple

    def to_dict(self):
        return {"shared": list(self.shared),
                "dropped_source": list(self.dropped_source),
                "dropped_target": list(self.dropped_target),
                "type_conflicts": list(self.type_conflicts)}


def _compatible(src: Covariate, tgt: Covariate) -> bool:
    if src.kind != tgt.kind:
        return False
    if src.kind == "categorical":
        # target levels must be expressible in the source model's vocabulary
        return set(tgt.levels) <= set(src.levels)
    return True


def align_schemas(source: CovariateSchema, target: CovariateSchema) -> AlignmentReport:
    """Partition covariate names into shared / source-only / target-only / conflicting.

    Downstream model fitting uses exactly the `shared` set.
    """
    shared, conflicts, dropped_source = [], [], []
    for entry in source.entries:
        if entry.name not in target:
            dropped_source.append(entry.name)
        elif _compatible(entry, target[entry.name]):
            shared.append(entry.name)
        else:
            conflicts.append(entry.name)
    dropped_target = [n for n in target.names if n not in source]
    if not shared:
        raise AlignmentError("no common covariates between source and target schemas")
    return AlignmentReport(tuple(shared), tuple(dropped_source),
                           tuple(dropped_target), tuple(conflicts))


# ---------------------------------------------------------------------------
# Standardized mean differences
# ---------------------------------------------------------------------------

def _smd_numeric(xs: np.ndarray, xt: np.ndarray) -> Optional[float]:
    pooled = np.sqrt((np.var(xt, ddof=1) + np.var(xs, ddof=1)) / 2.0)
    if pooled == 0:
        return None
    return float((np.mean(xt) - np.mean(xs)) / pooled)


def _smd_proportion(ps: float, pt: float) -> Optional[float]:
    pooled = np.sqrt((pt * (1 - pt) + ps * (1 - ps)) / 2.0)
    if pooled == 0:
        return None
    return float((pt - ps) / pooled)


def compute_smd(covariate: str, source: Cohort, target: Cohort) -> Optional[float]:
    """Standardized mean difference, signed target minus source.

    `covariate` may be a numeric/binary name or ``"name=level"`` for one level
    of a categorical covariate. Returns None when the pooled spread is zero
    (reported as not-applicable, never as zero).
    """
    name, _, level = covariate.partition("=")
    for cohort in (source, target):
        if name not in cohort.schema:
            raise KeyError(f"covariate {name!r} not in {cohort.label} cohort")
        if cohort.n < 2:
            raise ValueError("need at least 2 rows per cohort for an SMD")
    entry = source.schema[name]
    xs, xt = source.covariates[name], target.covariates[name]
    if entry.kind == "numeric":
        return _smd_numeric(np.asarray(xs, float), np.asarray(xt, float))
    if entry.kind == "binary":
        return _smd_proportion(float(np.mean(xs)), float(np.mean(xt)))
    if not level:
        raise ValueError(f"{name!r} is categorical; use 'name=level'")
    return _smd_proportion(float(np.mean(xs == level)), float(np.mean(xt == level)))


@dataclass(frozen=True)
class SmdRow:
    name: str
    source_summary: str
    target_summary: str
    smd: Optional[float]
    flagged: Optional[bool]


@dataclass(frozen=True)
class SmdTable:
    rows: tuple
    threshold: float = 0.1

    def flagged_names(self):
        return tuple(r.name for r in self.rows if r.flagged)

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["covariate", "target_summary", "source_summary", "smd", "flagged"])
            for r in self.rows:
                w.writerow([r.name, r.target_summary, r.source_summary,
                            "NA" if r.smd is None else repr(r.smd),
                            "NA" if r.flagged is None else int(r.flagged)])


def _numeric_summary(x: np.ndarray) -> str:
    med, lo, hi = np.percentile(x, [50, 25, 75])
    return f"{med:.6g} ({lo:.6g}- {hi:.6g})"


def _prop_summary(mask: np.ndarray) -> str:
    return f"{int(mask.sum())} ({100.0 * mask.mean():.1f}%)"


def smd_table(source: Cohort, target: Cohort, covariates=None,
              threshold: float = 0.1) -> SmdTable:
    """Table-1-style balance table over the given (default: all shared) covariates."""
    if covariates is None:
        covariates = [n for n in source.schema.names if n in target.schema]
    rows = []
    for name in covariates:
        entry = source.schema[name]
        if entry.kind == "categorical":
            keys = [f"{name}={lvl}" for lvl in entry.levels]
        else:
            keys = [name]
        for key in keys:
            smd = compute_smd(key, source, target)
            if entry.kind == "numeric":
                s_sum = _numeric_summary(np.asarray(source.covariates[name], float))
                t_sum = _numeric_summary(np.asarray(target.covariates[name], float))
            elif entry.kind == "binary":
                s_sum = _prop_summary(source.covariates[name] == 1)
                t_sum = _prop_summary(target.covariates[name] == 1)
            else:
                lvl = key.split("=", 1)[1]
                s_sum = _prop_summary(source.covariates[name] == lvl)
                t_sum = _prop_summary(target.covariates[name] == lvl)
            flagged = None if smd is None else abs(smd) > threshold
            rows.append(SmdRow(key, s_sum, t_sum, smd, flagged))
    return SmdTable(tuple(rows), threshold)


# ---------------------------------------------------------------------------
# Eligibility predicates
# ---------------------------------------------------------------------------

_CMP = {
    "<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal,
    "==": None, "!=": None,
}


def evaluate_predicate(cohort: Cohort, criteria) -> np.ndarray:
    """Evaluate a conjunction/disjunction tree of threshold and membership
    predicates, returning a boolean row mask.

    Leaf form: ``{"var": name, "op": <|<=|>|>=|==|!=|in|not_in, "value": v}``;
    branches: ``{"all": [...]}, {"any": [...]}, {"not": ...}``. Empty or None
    criteria select every row.
    """
    if criteria is None or criteria == {} or criteria == []:
        return np.ones(cohort.n, dtype=bool)
    if "all" in criteria:
        masks = [evaluate_predicate(cohort, c) for c in criteria["all"]]
        return np.logical_and.reduce(masks) if masks else np.ones(cohort.n, bool)
    if "any" in criteria:
        masks = [evaluate_predicate(cohort, c) for c in criteria["any"]]
        return np.logical_or.reduce(masks) if masks else np.ones(cohort.n, bool)
    if "not" in criteria:
        return ~evaluate_predicate(cohort, criteria["not"])
    name, op, value = criteria["var"], criteria["op"], criteria.get("value")
    if name not in cohort.schema:
        raise KeyError(f"predicate references unknown covariate {name!r}")
    col = cohort.covariates[name]
    kind = cohort.schema[name].kind
    if op in ("in", "not_in"):
        values = [str(v) for v in value] if kind == "categorical" else value
        mask = np.isin(col, values)
        return ~mask if op == "not_in" else mask
    if op in ("==", "!="):
        target = str(value) if kind == "categorical" else value
        mask = col == target
        return ~mask if op == "!=" else mask
    if op not in _CMP or _CMP[op] is None:
        raise ValueError(f"unknown predicate op {op!r}")
    if kind == "categorical":
        raise ValueError(f"ordering comparison on categorical covariate {name!r}")
    return _CMP[op](np.asarray(col, float), float(value))


def eligibility_filter(cohort: Cohort, criteria) -> Cohort:
    """Rows of `cohort` satisfying `criteria`; the input cohort is unmodified."""
    mask = evaluate_predicate(cohort, criteria)
    if mask.all():
        return cohort
    return cohort.subset(mask)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

RESERVED_COLUMNS = ("id", "arm", "event", "time")


def write_schema_json(schema: CovariateSchema, path):
    payload = [{"name": e.name, "kind": e.kind,
                **({"levels": list(e.levels)} if e.levels else {}),
                **({"unit": e.unit} if e.unit else {})}
               for e in schema.entries]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_schema_json(path) -> CovariateSchema:
    with open(path) as fh:
        payload = json.load(fh)
    entries = []
    for item in payload:
        entries.append(Covariate(item["name"], item["kind"],
                                 tuple(item["levels"]) if "levels" in item else None,
                                 item.get("unit")))
    return CovariateSchema(tuple(entries))


def write_cohort_csv(cohort: Cohort, path, delimiter=","):
    names = cohort.schema.names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        head = ["id"]
        if cohort.label == "source":
            head += ["arm", "event", "time"]
        head += list(names)
        w.writerow(head)
        for i in range(cohort.n):
            row = [cohort.ids[i]]
            if cohort.label == "source":
                row += [cohort.arm[i], int(cohort.event[i]), repr(float(cohort.time[i]))]
            for name in names:
                v = cohort.covariates[name][i]
                if cohort.schema[name].kind == "categorical":
                    row.append(v)
                else:
                    row.append(repr(float(v)))
            w.writerow(row)


def read_cohort_csv(path, schema: CovariateSchema, label: str,
                    delimiter=",") -> Cohort:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        fields = reader.fieldnames or []
        if "id" not in fields:
            raise CohortError("cohort file lacks an 'id' column")
        missing = [n for n in schema.names if n not in fields]
        if missing:
            raise CohortError(f"cohort file lacks covariate columns {missing}")
        ids, covs = [], {n: [] for n in schema.names}
        arm, event, time = [], [], []
        has_outcome = all(c in fields for c in ("arm", "event", "time"))
        if label == "source" and not has_outcome:
            raise CohortError("source cohort file requires arm, event, time columns")
        for row in reader:
            ids.append(row["id"])
            for n in schema.names:
                if row[n] is None or row[n] == "":
                    raise CohortError(f"missing value for {n!r} in row {row['id']!r}")
                covs[n].append(row[n])
            if label == "source":
                arm.append(row["arm"])
                event.append(bool(int(row["event"])))
                time.append(float(row["time"]))
    if label == "source":
        return Cohort(schema, ids, covs, "source", arm=arm, event=event, time=time)
    return Cohort(schema, ids, covs, "target")
