"""Batch front end: config parsing, pipeline orchestration, report emission."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import __version__
from .data_model import align_schemas, eligibility_filter, read_cohort_csv, \
    read_schema_json, smd_table, write_cohort_csv, write_schema_json
from .engine import bootstrap_estimates
from .estimates import Contrast, all_contrasts
from .survival_forest import ForestParams
from .synthgen import BUILTIN_SCENARIOS, OracleTruth, Scenario, generate
from .report import TransportReport
from .weighting import SelectionParams, compute_weights, fit_selection_model


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class RunConfig:
    source_data: str
    source_schema: str
    target_data: str
    target_schema: str
    output_dir: str = "out"
    horizon: float = 5.0
    forest: ForestParams = field(default_factory=ForestParams)
    n_boot: int = 1000
    contrasts: Optional[tuple] = None          # ((treated, reference), ...)
    estimands: tuple = ("sate", "oob_retranslation", "tate")
    subgroups: dict = field(default_factory=dict)
    eligibility: Optional[dict] = None
    smd_threshold: float = 0.1
    seed: int = 0
    confidence: float = 0.95
    n_jobs: int = 1

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        payload = dict(payload)
        forest = payload.pop("forest", {})
        cfg = cls(forest=ForestParams(**forest), **{
            k: tuple(tuple(c) for c in v) if k == "contrasts" and v else
            (tuple(v) if k == "estimands" else v)
            for k, v in payload.items()})
        if cfg.eligibility and "tate_eligible" not in cfg.estimands:
            cfg = replace(cfg, estimands=cfg.estimands + ("tate_eligible",))
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["forest"] = {k: getattr(self.forest, k) for k in
                       ("n_trees", "mtry", "min_node_events", "min_node_size",
                        "max_depth", "seed", "n_jobs")}
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)   # where results land does not affect them
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_run_config(path, overrides: Optional[dict] = None) -> RunConfig:
    with open(path) as fh:
        payload = json.load(fh)
    overrides = overrides or {}
    for key in ("seed", "n_boot", "horizon", "output_dir"):
        if overrides.get(key) is not None:
            payload[key] = overrides[key]
    if overrides.get("trees") is not None:
        payload.setdefault("forest", {})["n_trees"] = overrides["trees"]
    cfg = RunConfig.from_dict(payload)
    return replace(cfg, forest=replace(cfg.forest, seed=cfg.seed))


def run_transport(config: RunConfig) -> Path:
    """Execute the full pipeline and write all reports; returns the output dir.

    Stage failures raise StageError; outputs from completed stages are left in
    place and listed in the manifest.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    completed = []
    manifest = {
        "config": config.to_dict(), "config_hash": chash, "seed": config.seed,
        "version": __version__, "completed_stages": completed, "status": "running",
        "notes": ["weighted comparator uses weighted Kaplan-Meier at the horizon",
                  "selection weights are inverse odds (1-p)/p of trial membership"],
    }

    def save_manifest():
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, default=list)
            fh.write("\n")

    def stage(name):
        def wrap(fn):
            try:
                result = fn()
            except StageError:
                manifest["status"] = f"failed at {name}"
                save_manifest()
                raise
            except Exception as exc:
                manifest["status"] = f"failed at {name}"
                save_manifest()
                raise StageError(name, str(exc)) from exc
            completed.append(name)
            return result
        return wrap

    def _ingest():
        src_schema = read_schema_json(config.source_schema)
        tgt_schema = read_schema_json(config.target_schema)
        source = read_cohort_csv(config.source_data, src_schema, "source")
        target = read_cohort_csv(config.target_data, tgt_schema, "target")
        return src_schema, tgt_schema, source, target
    src_schema, tgt_schema, source, target = stage("ingest")(_ingest)

    def _align():
        report = align_schemas(src_schema, tgt_schema)
        with open(out / "alignment.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
        return report
    alignment = stage("alignment")(_align)
    shared = list(alignment.shared)

    def _smd():
        table = smd_table(source, target, shared, config.smd_threshold)
        table.write_csv(out / "smd_table.csv",
                        header_lines=[f"config_hash={chash}", f"seed={config.seed}"])
        return table
    stage("smd")(_smd)

    def _contrasts():
        if config.contrasts:
            return tuple(Contrast(a, b) for a, b in config.contrasts)
        return all_contrasts(source.arms())
    contrasts = stage("contrasts")(_contrasts)

    def _estimate():
        return bootstrap_estimates(
            source, target, config.forest, contrasts,
            estimands=config.estimands, n_boot=config.n_boot,
            horizon=config.horizon, covariates=shared,
            subgroups=config.subgroups or None,
            eligibility=config.eligibility,
            selection_params=SelectionParams(seed=config.seed),
            confidence=config.confidence, n_jobs=config.n_jobs)
    result = stage("estimation")(_estimate)

    def _reports():
        report = TransportReport(result, contrasts, tuple(config.estimands),
                                 chash, config.seed)
        report.write_csv(out / "report.csv")
        report.write_json(out / "report.json")
        if result.subgroups:
            report.write_subgroups_csv(out / "subgroups.csv")
        if "weighted" in config.estimands:
            model = fit_selection_model(
                source, target, SelectionParams(seed=config.seed), shared)
            weights = compute_weights(model, source.sort_by_id())
            weights.write_csv(out / "weights.csv", source.sort_by_id().ids)
    stage("reports")(_reports)

    manifest["status"] = "ok"
    manifest["bootstrap_redraws"] = result.n_redraws
    manifest["redraw_warning"] = result.redraw_warning
    save_manifest()
    return out


def run_generate(scenario: Scenario, out_dir) -> Path:
    """Generate a scenario's cohorts and truth file in the standard formats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target, truth = generate(scenario)
    write_schema_json(scenario.schema(), out / "schema.json")
    write_cohort_csv(source, out / "source.csv")
    write_cohort_csv(target, out / "target.csv")
    payload = {"scenario": scenario.name, "seed": scenario.seed,
               "horizon": scenario.horizon, "contrasts": truth.truth_table()}
    with open(out / "truth.json", "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    with open(out / "scenario.json", "w") as fh:
        fh.write(scenario.to_json())
        fh.write("\n")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialtransport",
        description="Transport randomized-trial treatment effects to a target "
                    "population via per-arm survival forests.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transport", help="run the full transport pipeline")
    t.add_argument("--config", required=True, help="run configuration (JSON)")
    t.add_argument("--seed", type=int)
    t.add_argument("--n-boot", type=int, dest="n_boot")
    t.add_argument("--horizon", type=float)
    t.add_argument("--trees", type=int)
    t.add_argument("--out", dest="output_dir")

    g = sub.add_parser("generate", help="generate a synthetic scenario")
    g.add_argument("--config", help="scenario configuration (JSON)")
    g.add_argument("--scenario", choices=sorted(BUILTIN_SCENARIOS),
                   help="built-in scenario name")
    g.add_argument("--n-source", type=int)
    g.add_argument("--n-target", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", default="out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "transport":
            cfg = load_run_config(args.config, {
                "seed": args.seed, "n_boot": args.n_boot,
                "horizon": args.horizon, "trees": args.trees,
                "output_dir": args.output_dir})
            run_transport(cfg)
        else:
            if args.config:
                with open(args.config) as fh:
                    scenario = Scenario.from_json(fh.read())
            elif args.scenario:
                kwargs = {}
                if args.n_source:
                    kwargs["n_source"] = args.n_source
                if args.n_target:
                    kwargs["n_target"] = args.n_target
                scenario = BUILTIN_SCENARIOS[args.scenario](**kwargs)
            else:
                print("generate needs --config or --scenario", file=sys.stderr)
                return 2
            if args.seed is not None:
                scenario = replace(scenario, seed=args.seed)
            run_generate(scenario, args.out)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
