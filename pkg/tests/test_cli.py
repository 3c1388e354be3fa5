import json
from pathlib import Path

import pandas as pd
import pytest

from medshock.cli import main

CFG = """
n_persons = 2500
n_groups = 8
shock_hazard = 0.02
p_child = 0.4
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "dgp.cfg"
    path.write_text(CFG)
    return str(path)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, cfg_file):
    out = tmp_path_factory.mktemp("run")
    rc = main(["pipeline", "--seed", "11", "--out", str(out), "--config", cfg_file])
    assert rc == 0
    return out


class TestStages:
    def test_pipeline_outputs_exist(self, pipeline_dir):
        expected = [
            "persons.csv", "outcomes.csv", "shocks.csv", "innovations.csv", "deflator.csv", "truth.json",
            "registry_summary.json", "pairs.csv", "balance.csv", "panel.csv",
            "results_dd.csv", "results_dd.json", "results_eventstudy.csv",
            "results_ddd_nme.csv", "results_ddd_nme.json", "results_ddd_patent.csv",
            "subsamples.csv", "pretrend.csv", "oracle.json", "partition.csv", "trees.txt", "robust.csv",
        ]
        for name in expected:
            assert (pipeline_dir / name).exists(), name

    def test_output_headers_record_version_and_seed(self, pipeline_dir):
        for name in ("pairs.csv", "panel.csv", "results_dd.csv", "robust.csv"):
            first = (pipeline_dir / name).read_text().splitlines()[0]
            assert first.startswith("# medshock ")
            assert "seed=11" in first and "config=" in first

    def test_results_schema(self, pipeline_dir):
        results = pd.read_csv(pipeline_dir / "results_dd.csv", comment="#")
        assert list(results.columns) == ["term", "estimate", "se", "p", "n", "clusters"]
        assert set(results["term"]) == {"post", "dd"}

    def test_oracle_passes_on_planted_effects(self, pipeline_dir):
        oracle = json.loads((pipeline_dir / "oracle.json").read_text())
        assert oracle["passed"] is True

    def test_estimate_rerun_with_flags(self, pipeline_dir):
        rc = main(["estimate", "--out", str(pipeline_dir), "--spec", "ddd", "--measure", "patent", "--by-event-year", "--seed", "11"])
        assert rc == 0
        results = pd.read_csv(pipeline_dir / "results.csv", comment="#")
        assert "ddm_ev_0" in set(results["term"])

    def test_estimate_cohort_cluster(self, pipeline_dir):
        rc = main(["estimate", "--out", str(pipeline_dir), "--spec", "dd", "--cluster", "cohort", "--seed", "11"])
        assert rc == 0
        payload = json.loads((pipeline_dir / "results.json").read_text())
        assert payload["n_clusters"] < payload["n_rows"] / 8


class TestDeterminism:
    def test_pipeline_reruns_byte_identical(self, tmp_path, cfg_file):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["pipeline", "--seed", "5", "--out", str(a), "--config", cfg_file]) == 0
        assert main(["pipeline", "--seed", "5", "--out", str(b), "--config", cfg_file]) == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestErrors:
    def test_unknown_subcommand_usage_exit(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "error[usage]" in capsys.readouterr().err

    def test_estimate_before_match_names_pairs_file(self, tmp_path, capsys):
        rc = main(["estimate", "--out", str(tmp_path)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "error[data]" in err and "pairs.csv" in err

    def test_stack_before_match_names_pairs_file(self, tmp_path, cfg_file, capsys):
        assert main(["simulate", "--seed", "3", "--out", str(tmp_path), "--config", cfg_file]) == 0
        rc = main(["stack", "--out", str(tmp_path)])
        assert rc == 2
        assert "pairs.csv" in capsys.readouterr().err

    def test_validation_failure_data_exit(self, tmp_path, cfg_file, capsys):
        assert main(["simulate", "--seed", "3", "--out", str(tmp_path), "--config", cfg_file]) == 0
        persons = tmp_path / "persons.csv"
        lines = persons.read_text().splitlines()
        lines.append(lines[2])  # duplicate person row
        persons.write_text("\n".join(lines) + "\n")
        rc = main(["ingest", "--out", str(tmp_path)])
        assert rc == 2
        assert "duplicate" in capsys.readouterr().err

    def test_missing_config_seed_is_data_error(self, tmp_path, capsys):
        cfg = tmp_path / "noseed.cfg"
        cfg.write_text("n_persons = 10\nbad_key = 1\n")
        rc = main(["simulate", "--out", str(tmp_path), "--config", str(cfg)])
        assert rc == 2
        assert "bad_key" in capsys.readouterr().err
