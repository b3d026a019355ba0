import json

import numpy as np
import pytest

from trialtransport import Scenario, read_cohort_csv, read_schema_json
from trialtransport.cli import RunConfig, load_run_config, main, run_generate
from trialtransport.synthgen import scenario_s2


def small_scenario(**kwargs):
    s = scenario_s2(n_source=240, n_target=120)
    return s if not kwargs else Scenario(**{**s.__dict__, **kwargs})


def write_inputs(tmp_path):
    data = tmp_path / "data"
    run_generate(small_scenario(), data)
    return data


def transport_config(tmp_path, data, out_name="out", **extra):
    cfg = {
        "source_data": str(data / "source.csv"),
        "source_schema": str(data / "schema.json"),
        "target_data": str(data / "target.csv"),
        "target_schema": str(data / "schema.json"),
        "output_dir": str(tmp_path / out_name),
        "horizon": 5.0,
        "forest": {"n_trees": 4},
        "n_boot": 3,
        "seed": 11,
    }
    cfg.update(extra)
    path = tmp_path / f"{out_name}_config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestGenerate:
    def test_round_trip_files(self, tmp_path):
        data = write_inputs(tmp_path)
        for name in ("schema.json", "source.csv", "target.csv",
                     "truth.json", "scenario.json"):
            assert (data / name).exists()
        schema = read_schema_json(data / "schema.json")
        src = read_cohort_csv(data / "source.csv", schema, "source")
        tgt = read_cohort_csv(data / "target.csv", schema, "target")
        assert src.n == 240 and tgt.n == 120
        assert set(src.arms()) == {"A", "B"}
        truth = json.loads((data / "truth.json").read_text())
        assert "A_vs_B" in truth["contrasts"]
        # scenario.json reproduces the generator inputs exactly
        again = Scenario.from_json((data / "scenario.json").read_text())
        assert again == small_scenario()

    def test_cli_builtin_scenario(self, tmp_path):
        out = tmp_path / "gen"
        rc = main(["generate", "--scenario", "S2", "--n-source", "60",
                   "--n-target", "40", "--seed", "5", "--out", str(out)])
        assert rc == 0
        schema = read_schema_json(out / "schema.json")
        src = read_cohort_csv(out / "source.csv", schema, "source")
        assert src.n == 60

    def test_generate_requires_scenario_or_config(self, capsys):
        assert main(["generate", "--out", "x"]) == 2


class TestTransport:
    def test_pipeline_outputs(self, tmp_path):
        data = write_inputs(tmp_path)
        cfg = transport_config(tmp_path, data)
        assert main(["transport", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        for name in ("manifest.json", "alignment.json", "smd_table.csv",
                     "report.csv", "report.json"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["completed_stages"] == [
            "ingest", "alignment", "smd", "contrasts", "estimation", "reports"]
        report = json.loads((out / "report.json").read_text())
        assert manifest["config_hash"] == report["config_hash"]
        cells = report["estimates"]
        assert "A_vs_B" in cells["tate"] and "A_vs_B" in cells["sate"]
        assert {"point", "se", "ci_low", "ci_high"} <= set(cells["tate"]["A_vs_B"])

    def test_byte_identical_reruns(self, tmp_path):
        data = write_inputs(tmp_path)
        cfg1 = transport_config(tmp_path, data, out_name="r1")
        cfg2 = transport_config(tmp_path, data, out_name="r2")
        assert main(["transport", "--config", str(cfg1)]) == 0
        assert main(["transport", "--config", str(cfg2)]) == 0
        for name in ("report.csv", "report.json", "smd_table.csv"):
            assert (tmp_path / "r1" / name).read_bytes() == \
                (tmp_path / "r2" / name).read_bytes(), name

    def test_seed_override_changes_hash_and_estimates(self, tmp_path):
        data = write_inputs(tmp_path)
        cfg = transport_config(tmp_path, data, out_name="a")
        assert main(["transport", "--config", str(cfg), "--seed", "99",
                     "--out", str(tmp_path / "b")]) == 0
        assert main(["transport", "--config", str(cfg)]) == 0
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["config_hash"] != mb["config_hash"]
        assert ma["seed"] == 11 and mb["seed"] == 99

    def test_weighted_and_subgroups(self, tmp_path):
        data = write_inputs(tmp_path)
        cfg = transport_config(
            tmp_path, data, out_name="w",
            estimands=["sate", "tate", "weighted"],
            subgroups={"z1": {"var": "z", "op": "==", "value": 1.0}})
        assert main(["transport", "--config", str(cfg)]) == 0
        out = tmp_path / "w"
        assert (out / "weights.csv").exists()
        assert (out / "subgroups.csv").exists()
        report = json.loads((out / "report.json").read_text())
        assert "weighted" in report["estimates"]
        assert report["subgroups"] and report["subgroups"][0]["subgroup"] == "z1"

    def test_eligibility_adds_estimand(self, tmp_path):
        data = write_inputs(tmp_path)
        cfg = transport_config(
            tmp_path, data, out_name="e",
            eligibility={"var": "u", "op": "<", "value": 1.0})
        assert main(["transport", "--config", str(cfg)]) == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert "tate_eligible" in report["estimates"]

    def test_missing_input_nonzero_exit(self, tmp_path, capsys):
        data = write_inputs(tmp_path)
        cfg = transport_config(tmp_path, data, out_name="bad",
                               source_data=str(data / "nope.csv"))
        assert main(["transport", "--config", str(cfg)]) == 1
        manifest = json.loads((tmp_path / "bad" / "manifest.json").read_text())
        assert manifest["status"].startswith("failed at ingest")

    def test_four_arm_run_has_six_contrasts(self, tmp_path):
        s = scenario_s2(n_source=360, n_target=80)
        s = Scenario(**{**s.__dict__,
                        "arms": ("A", "B", "C", "D"),
                        "allocation": (0.25, 0.25, 0.25, 0.25),
                        "log_hazard": {a: dict(s.log_hazard["A"])
                                       for a in ("A", "B", "C", "D")}})
        data = tmp_path / "data4"
        run_generate(s, data)
        cfg = transport_config(tmp_path, data, out_name="four",
                               estimands=["sate", "tate"])
        assert main(["transport", "--config", str(cfg)]) == 0
        report = json.loads((tmp_path / "four" / "report.json").read_text())
        assert set(report["estimates"]["tate"]) == {
            "A_vs_B", "A_vs_C", "A_vs_D", "B_vs_C", "B_vs_D", "C_vs_D"}


class TestRunConfig:
    def test_hash_ignores_output_dir(self):
        base = dict(source_data="s.csv", source_schema="s.json",
                    target_data="t.csv", target_schema="t.json")
        a = RunConfig.from_dict({**base, "output_dir": "x"})
        b = RunConfig.from_dict({**base, "output_dir": "y"})
        assert a.config_hash() == b.config_hash()

    def test_hash_sensitive_to_seed_and_trees(self):
        base = dict(source_data="s.csv", source_schema="s.json",
                    target_data="t.csv", target_schema="t.json")
        a = RunConfig.from_dict(base)
        b = RunConfig.from_dict({**base, "seed": 1})
        c = RunConfig.from_dict({**base, "forest": {"n_trees": 7}})
        assert len({a.config_hash(), b.config_hash(), c.config_hash()}) == 3

    def test_override_loading(self, tmp_path):
        base = dict(source_data="s.csv", source_schema="s.json",
                    target_data="t.csv", target_schema="t.json", seed=3)
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(base))
        cfg = load_run_config(p, {"seed": 8, "trees": 12})
        assert cfg.seed == 8
        assert cfg.forest.n_trees == 12
        assert cfg.forest.seed == 8
