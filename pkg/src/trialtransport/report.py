"""Assembly and emission of the Table-2-style transport report."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional, Sequence

from .engine import BootstrapResult
from .estimates import Contrast, ESTIMANDS

ESTIMAND_LABELS = {
    "sate": "Sample average treatment effect (trial, Kaplan-Meier)",
    "oob_retranslation": "Re-translation to the trial sample (out-of-bag)",
    "tate": "Translation to the target population",
    "tate_eligible": "Translation to the trial-eligible target subset",
    "weighted": "Weighted comparator (inverse-odds selection weights)",
}


@dataclass(frozen=True)
class TransportReport:
    """Grid of estimates across estimands and contrasts, plus subgroup rows."""

    result: BootstrapResult
    contrasts: tuple
    estimands: tuple
    config_hash: str = ""
    seed: int = 0

    def _header_lines(self):
        return [f"config_hash={self.config_hash}", f"seed={self.seed}",
                f"n_boot={self.result.n_boot}",
                f"bootstrap_redraws={self.result.n_redraws}"]

    def grid(self) -> dict:
        out = {}
        for estimand in self.estimands:
            row = {}
            for c in self.contrasts:
                try:
                    row[c.key] = self.result.get(estimand, c)
                except KeyError:
                    continue
            out[estimand] = row
        return out

    def write_csv(self, path):
        grid = self.grid()
        with open(path, "w", newline="") as fh:
            for line in self._header_lines():
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["estimand"] + [c.key for c in self.contrasts])
            for estimand in self.estimands:
                row = [ESTIMAND_LABELS.get(estimand, estimand)]
                for c in self.contrasts:
                    est = grid[estimand].get(c.key)
                    row.append("" if est is None else est.cell())
                w.writerow(row)

    def write_json(self, path):
        grid = self.grid()
        payload = {
            "config_hash": self.config_hash, "seed": self.seed,
            "n_boot": self.result.n_boot,
            "bootstrap_redraws": self.result.n_redraws,
            "redraw_warning": self.result.redraw_warning,
            "estimates": {
                estimand: {
                    key: {"point": est.point, "se": est.se,
                          "ci_low": est.ci_low, "ci_high": est.ci_high,
                          "n_boot": est.n_boot}
                    for key, est in row.items()}
                for estimand, row in grid.items()},
            "subgroups": [
                {"subgroup": s.subgroup, "contrast": s.estimate.contrast.key,
                 "n": s.n, "point": s.estimate.point, "se": s.estimate.se,
                 "ci_low": s.estimate.ci_low, "ci_high": s.estimate.ci_high}
                for s in self.result.subgroups],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    def write_subgroups_csv(self, path):
        """Forest-plot data: one row per subgroup x contrast."""
        with open(path, "w", newline="") as fh:
            for line in self._header_lines():
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["subgroup", "contrast", "n", "point", "ci_low", "ci_high"])
            for s in self.result.subgroups:
                e = s.estimate
                w.writerow([s.subgroup, e.contrast.key, s.n,
                            repr(e.point), repr(e.ci_low), repr(e.ci_high)])
