"""Treatment contrasts and interval estimates shared across estimators."""
from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional

ESTIMANDS = ("sate", "oob_retranslation", "tate", "tate_eligible", "weighted")


@dataclass(frozen=True)
class Contrast:
    """Treated arm versus reference arm."""

    treated: str
    reference: str

    def __post_init__(self):
        if self.treated == self.reference:
            raise ValueError("a contrast needs two distinct arms")

    @property
    def key(self) -> str:
        return f"{self.treated}_vs_{self.reference}"

    def flipped(self) -> "Contrast":
        return Contrast(self.reference, self.treated)


def all_contrasts(arms) -> tuple:
    """All ordered pairs (a_i, a_j), i < j, in arm order."""
    arms = list(arms)
    return tuple(Contrast(arms[i], arms[j])
                 for i in range(len(arms)) for j in range(i + 1, len(arms)))


def normal_quantile(confidence: float) -> float:
    # 1.96 pinned for the conventional 95% level; other levels recompute.
    if confidence == 0.95:
        return 1.96
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    return NormalDist().inv_cdf(0.5 + confidence / 2.0)


@dataclass(frozen=True)
class ContrastEstimate:
    """Point estimate with optional bootstrap SE and normal-approximation CI."""

    contrast: Contrast
    estimand: str
    point: float
    se: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n_boot: int = 0

    @classmethod
    def from_bootstrap(cls, contrast, estimand, point, se, n_boot,
                       confidence: float = 0.95) -> "ContrastEstimate":
        z = normal_quantile(confidence)
        return cls(contrast, estimand, float(point), float(se),
                   float(point - z * se), float(point + z * se), n_boot)

    def cell(self) -> str:
        """Table cell, 'point (ci_low, ci_high)' like the reported grids."""
        if self.se is None:
            return f"{self.point:.4f}"
        return f"{self.point:.4f} ({self.ci_low:.4f}, {self.ci_high:.4f})"
