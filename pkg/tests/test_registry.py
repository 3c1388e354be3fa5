import math

import numpy as np
import pandas as pd
import pytest

from medshock._validation import DataError
from medshock.registry import Deflator, chapter_of, deflate, ihs, load_registry

from conftest import write_csv

# closed form: ihs(1) = ln(1 + sqrt(2))
IHS_ONE = math.log(1.0 + math.sqrt(2.0))


class TestIhs:
    def test_zero(self):
        assert ihs(0.0) == 0.0

    def test_one_closed_form(self):
        assert abs(ihs(1.0) - IHS_ONE) < 1e-12
        assert abs(IHS_ONE - 0.881373587019543) < 1e-12

    def test_odd(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1e4, 200)
        assert np.allclose(ihs(-x), -ihs(x), rtol=0, atol=1e-12)

    def test_strictly_increasing(self):
        rng = np.random.default_rng(1)
        x = np.sort(rng.normal(0, 1e5, 500))
        assert np.all(np.diff(ihs(x)) > 0)

    def test_matches_log_form(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 100, 100)
        assert np.allclose(ihs(x), np.log(x + np.sqrt(x**2 + 1.0)), rtol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            ihs(float("nan"))
        with pytest.raises(DataError):
            ihs(np.array([1.0, np.inf]))


class TestDeflate:
    def test_base_year_unchanged(self):
        d = Deflator({2021: 1.0, 1990: 0.5})
        assert deflate(100.0, 2021, d) == 100.0

    def test_halves_at_index_two(self):
        d = Deflator({2021: 1.0, 1990: 2.0})
        assert deflate(100.0, 1990, d) == 50.0

    def test_round_trip(self):
        d = Deflator({2021: 1.0, 1990: 0.73})
        x = 12345.6
        assert abs(deflate(x * d.index_for(1990), 1990, d) - x) < 1e-9

    def test_missing_year_names_year(self):
        d = Deflator({2021: 1.0})
        with pytest.raises(DataError, match="1979"):
            deflate(1.0, 1979, d)

    def test_requires_base_year(self):
        with pytest.raises(DataError, match="2021"):
            Deflator({1990: 1.0})

    def test_requires_positive_index(self):
        with pytest.raises(DataError, match="positive"):
            Deflator({2021: 1.0, 1990: -0.5})


class TestChapters:
    def test_known_groups(self):
        assert chapter_of(1) == "cancer"
        assert chapter_of(28) == "circulatory"
        assert chapter_of(90) == "infectious"

    def test_all_91_mapped(self):
        assert {chapter_of(g) for g in range(1, 92)} == {
            "cancer", "circulatory", "mental", "nervous", "digestive",
            "musculoskeletal", "urinary", "respiratory", "metabolic",
            "bloodforming", "sense", "skin", "infectious",
        }

    def test_out_of_range(self):
        with pytest.raises(DataError):
            chapter_of(92)


class TestLoadRegistry:
    def test_loads_fixture(self, tiny_register):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        assert reg.n_persons == 3
        assert reg.n_shocks == 2
        # earnings transformed at load
        rec = reg.person_record(1)
        assert abs(rec.ihs_earnings_38_39 - ihs(250000.0)) < 1e-12

    def test_duplicate_person_id(self, tiny_register, tmp_path):
        persons = pd.read_csv(tiny_register["persons"])
        persons.loc[2, "person_id"] = 1
        path = write_csv(tmp_path / "dup.csv", persons)
        with pytest.raises(DataError, match="person_id 1"):
            load_registry(path, tiny_register["outcomes"], tiny_register["shocks"])

    def test_clean_window_violation(self, tiny_register, tmp_path):
        shocks = pd.DataFrame({"person_id": [1, 1], "shock_year": [1988, 1990], "disease_group": [5, 5]})
        path = write_csv(tmp_path / "bad_shocks.csv", shocks)
        with pytest.raises(DataError, match="clean window"):
            load_registry(tiny_register["persons"], tiny_register["outcomes"], path)

    def test_clean_window_allows_wide_gaps(self, tiny_register, tmp_path):
        shocks = pd.DataFrame({"person_id": [1, 1], "shock_year": [1988, 1992], "disease_group": [5, 7]})
        path = write_csv(tmp_path / "ok_shocks.csv", shocks)
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], path)
        assert reg.n_shocks == 2

    def test_disease_group_range(self, tiny_register, tmp_path):
        shocks = pd.DataFrame({"person_id": [1], "shock_year": [1990], "disease_group": [92]})
        path = write_csv(tmp_path / "bad_group.csv", shocks)
        with pytest.raises(DataError, match="disease_group 92"):
            load_registry(tiny_register["persons"], tiny_register["outcomes"], path)

    def test_malformed_row_reports_line(self, tiny_register, tmp_path):
        raw = open(tiny_register["persons"]).read().splitlines()
        raw[2] = raw[2].replace("1947", "xx")
        bad = tmp_path / "mangled.csv"
        bad.write_text("\n".join(raw) + "\n")
        with pytest.raises(DataError, match=r"line 3"):
            load_registry(bad, tiny_register["outcomes"], tiny_register["shocks"])

    def test_unknown_role(self, tiny_register, tmp_path):
        persons = pd.read_csv(tiny_register["persons"])
        persons.loc[0, "role"] = "cousin"
        path = write_csv(tmp_path / "role.csv", persons)
        with pytest.raises(DataError, match="cousin"):
            load_registry(path, tiny_register["outcomes"], tiny_register["shocks"])

    def test_missing_file(self, tiny_register):
        with pytest.raises(DataError, match="not found"):
            load_registry(tiny_register["dir"] / "nope.csv", tiny_register["outcomes"], tiny_register["shocks"])

    def test_duplicate_person_year_outcome(self, tiny_register, tmp_path):
        outcomes = pd.read_csv(tiny_register["outcomes"])
        outcomes = pd.concat([outcomes, outcomes.iloc[[0]]], ignore_index=True)
        path = write_csv(tmp_path / "dup_out.csv", outcomes)
        with pytest.raises(DataError, match="duplicate person-year"):
            load_registry(tiny_register["persons"], path, tiny_register["shocks"])

    def test_absent_cells_stay_absent(self, tiny_register, tmp_path):
        outcomes = pd.read_csv(tiny_register["outcomes"])
        outcomes.loc[0, "capital"] = np.nan
        path = write_csv(tmp_path / "holes.csv", outcomes)
        reg = load_registry(tiny_register["persons"], path, tiny_register["shocks"])
        assert reg.outcomes["capital"].isna().sum() == 1

    def test_emergency_rows_dropped_by_default(self, tiny_register, tmp_path):
        shocks = pd.DataFrame(
            {"person_id": [1, 2], "shock_year": [1990, 1992], "disease_group": [5, 5], "emergency": [0, 1]}
        )
        path = write_csv(tmp_path / "em.csv", shocks)
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], path)
        assert reg.n_shocks == 1
        reg_all = load_registry(tiny_register["persons"], tiny_register["outcomes"], path, include_emergency=True)
        assert reg_all.n_shocks == 2

    def test_shock_age_window(self, tiny_register, tmp_path):
        shocks = pd.DataFrame({"person_id": [3], "shock_year": [1985], "disease_group": [5]})
        path = write_csv(tmp_path / "young.csv", shocks)
        with pytest.raises(DataError, match="age"):
            load_registry(tiny_register["persons"], tiny_register["outcomes"], path)

    def test_reserialization_deterministic(self, tiny_register, tmp_path):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        d1 = tmp_path / "save1"
        d2 = tmp_path / "save2"
        reg.save(d1)
        reloaded = load_registry(d1 / "persons.csv", d1 / "outcomes.csv", d1 / "shocks.csv", d1 / "deflator.csv")
        reloaded.save(d2)
        for name in ("persons.csv", "outcomes.csv", "shocks.csv", "deflator.csv"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
