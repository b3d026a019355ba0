import numpy as np
import pytest

from trialtransport import Cohort, Covariate, CovariateSchema


@pytest.fixture
def simple_schema():
    return CovariateSchema((
        Covariate("age", "numeric"),
        Covariate("smoker", "binary"),
    ))


def make_source(schema, rows):
    """rows: list of (id, covdict, arm, event, time)."""
    return Cohort(
        schema,
        [r[0] for r in rows],
        {name: [r[1][name] for r in rows] for name in schema.names},
        "source",
        arm=[r[2] for r in rows],
        event=[r[3] for r in rows],
        time=[r[4] for r in rows],
    )


def make_target(schema, rows):
    """rows: list of (id, covdict)."""
    return Cohort(
        schema,
        [r[0] for r in rows],
        {name: [r[1][name] for r in rows] for name in schema.names},
        "target",
    )


def brute_force_logrank(group, times, events):
    """Independent O-E / V computation, kept deliberately naive."""
    group = [bool(g) for g in group]
    grid = sorted({t for t, e in zip(times, events) if e})
    num = 0.0
    var = 0.0
    for t in grid:
        at_risk = [i for i, ti in enumerate(times) if ti >= t]
        y = len(at_risk)
        y1 = sum(1 for i in at_risk if group[i])
        d = sum(1 for i, ti in enumerate(times) if ti == t and events[i])
        d1 = sum(1 for i, ti in enumerate(times) if ti == t and events[i] and group[i])
        num += d1 - y1 * d / y
        if y > 1:
            var += d * (y - d) / (y - 1) * y1 * (y - y1) / y ** 2
    if var <= 0:
        return 0.0
    return num ** 2 / var
