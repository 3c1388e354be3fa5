import numpy as np
import pandas as pd
import pytest

from medshock_figures.cli import main
from medshock_figures.render import FigureSpec, SchemaError, render


def results_csv(tmp_path, name="results.csv"):
    frame = pd.DataFrame(
        {
            "term": ["ev_m2", "ev_0", "ev_1", "dd_ev_m2", "dd_ev_0", "dd_ev_1"],
            "estimate": [0.01, 0.03, 0.05, 0.004, -0.31, -0.29],
            "se": [0.01, 0.01, 0.01, 0.012, 0.012, 0.013],
            "p": [0.3, 0.0, 0.0, 0.7, 0.0, 0.0],
            "n": 1000,
            "clusters": 200,
        }
    )
    path = tmp_path / name
    frame.to_csv(path, index=False)
    return path


def subsamples_csv(tmp_path):
    rows = []
    for name in ("men", "women", "stay_0_3", "stay_3_7", "stay_7_14", "cohort_1990_1994"):
        rows.append({"subsample": name, "term": "dd", "estimate": -0.3 + 0.01 * len(rows), "se": 0.02, "p": 0.0, "n": 500, "clusters": 100, "note": ""})
    rows.append({"subsample": "nobody", "term": "", "estimate": np.nan, "se": np.nan, "p": np.nan, "n": 0, "clusters": 0, "note": "empty"})
    path = tmp_path / "subsamples.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def balance_csv(tmp_path):
    frame = pd.DataFrame(
        {
            "scope": ["overall", "overall", "cancer"],
            "covariate": ["birth_year", "schooling_years", "birth_year"],
            "std_diff": [0.02, -0.04, 0.08],
            "balanced": [True, True, True],
        }
    )
    path = tmp_path / "balance.csv"
    frame.to_csv(path, index=False)
    return path


class TestEventStudy:
    def test_renders_and_returns_points(self, tmp_path):
        path = results_csv(tmp_path)
        out = tmp_path / "fig.svg"
        result = render(FigureSpec("event_study", [str(path)], str(out)))
        assert out.exists() and out.stat().st_size > 0
        assert set(result.data["event_year"]) == {-3, -2, -1, 0, 1}
        refs = result.data[result.data.reference]
        assert set(refs["event_year"]) == {-3, -1}
        assert (refs["estimate"] == 0).all()

    def test_two_series_for_both_measures(self, tmp_path):
        a = results_csv(tmp_path, "results_ddd_nme.csv")
        b = results_csv(tmp_path, "results_ddd_patent.csv")
        out = tmp_path / "both.svg"
        result = render(FigureSpec("event_study", [str(a), str(b)], str(out)))
        assert result.data["source"].nunique() == 2

    def test_no_event_terms_is_schema_error(self, tmp_path):
        frame = pd.DataFrame({"term": ["post", "dd"], "estimate": [0.1, -0.3], "se": [0.01, 0.01]})
        path = tmp_path / "plain.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(SchemaError, match="dd_ev"):
            render(FigureSpec("event_study", [str(path)], str(tmp_path / "x.svg")))

    def test_missing_column_named(self, tmp_path):
        frame = pd.DataFrame({"term": ["dd_ev_0"], "estimate": [1.0]})
        path = tmp_path / "nose.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(SchemaError, match="se"):
            render(FigureSpec("event_study", [str(path)], str(tmp_path / "x.svg")))

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("term,estimate,se\n")
        with pytest.raises(SchemaError, match="empty"):
            render(FigureSpec("event_study", [str(path)], str(tmp_path / "x.svg")))

    def test_deterministic_values_and_size(self, tmp_path):
        path = results_csv(tmp_path)
        r1 = render(FigureSpec("event_study", [str(path)], str(tmp_path / "a.svg")))
        r2 = render(FigureSpec("event_study", [str(path)], str(tmp_path / "b.svg")))
        pd.testing.assert_frame_equal(r1.data, r2.data)
        assert r1.size_inches == r2.size_inches
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


class TestForestAndDose:
    def test_forest_skips_missing_entries(self, tmp_path):
        path = subsamples_csv(tmp_path)
        result = render(FigureSpec("forest", [str(path)], str(tmp_path / "forest.svg")))
        assert "nobody" not in set(result.data["subsample"])
        assert {"men", "women"} <= set(result.data["subsample"])

    def test_dose_uses_bucket_subsamples_only(self, tmp_path):
        path = subsamples_csv(tmp_path)
        result = render(FigureSpec("dose_response", [str(path)], str(tmp_path / "dose.svg")))
        assert all(s.startswith(("stay_", "cohort_")) for s in result.data["subsample"])

    def test_dose_without_buckets_is_schema_error(self, tmp_path):
        frame = pd.DataFrame({"subsample": ["men"], "term": ["dd"], "estimate": [0.1], "se": [0.01]})
        path = tmp_path / "flat.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(SchemaError, match="bucket"):
            render(FigureSpec("dose_response", [str(path)], str(tmp_path / "x.svg")))


class TestBalance:
    def test_draws_threshold_reference_line(self, tmp_path):
        path = balance_csv(tmp_path)
        result = render(FigureSpec("balance", [str(path)], str(tmp_path / "bal.svg")))
        assert 0.1 in result.reference_lines
        assert len(result.data) == 3


class TestCli:
    def test_round_trip(self, tmp_path, capsys):
        path = results_csv(tmp_path)
        out = tmp_path / "cli.svg"
        rc = main(["--kind", "event_study", "--in", str(path), "--out", str(out)])
        assert rc == 0 and out.exists()

    def test_schema_error_exit_names_column(self, tmp_path, capsys):
        frame = pd.DataFrame({"term": ["dd_ev_0"], "estimate": [1.0]})
        path = tmp_path / "nose.csv"
        frame.to_csv(path, index=False)
        rc = main(["--kind", "event_study", "--in", str(path), "--out", str(tmp_path / "x.svg")])
        assert rc == 2
        assert "se" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        assert main(["--kind", "nope", "--in", "x", "--out", "y"]) == 1

    def test_missing_file(self, tmp_path, capsys):
        rc = main(["--kind", "balance", "--in", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.svg")])
        assert rc == 2
        assert "not found" in capsys.readouterr().err

    def test_png_output(self, tmp_path):
        path = results_csv(tmp_path)
        out = tmp_path / "fig.png"
        assert main(["--kind", "event_study", "--in", str(path), "--out", str(out)]) == 0
        assert out.stat().st_size > 0
