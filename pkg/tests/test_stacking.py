import numpy as np
import pandas as pd
import pytest

from medshock.innovation import InnovationEvent, build_series, lag
from medshock.registry import ihs, load_registry
from medshock.stacking import attach_event_dummies, build_panel

from conftest import write_csv


def series_1990s():
    events = [InnovationEvent(5, y, "nme_approved") for y in (1985, 1987, 1989)]
    events += [InnovationEvent(5, y, "patent_granted") for y in (1986, 1988)]
    return lag(build_series(events, (1984, 1995)), 1)


@pytest.fixture
def pair_frame():
    return pd.DataFrame(
        {
            "treated_id": [1],
            "control_id": [2],
            "disease_group": [5],
            "shock_year": [1990],
            "gender": [0],
            "distance": [0.0],
        }
    )


class TestBuildPanel:
    def test_full_pair_yields_ten_rows(self, tiny_register, pair_frame):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        panel = build_panel(pair_frame, reg, series_1990s())
        assert len(panel) == 10
        assert int((panel["post"] == 1).sum()) == 4
        assert int((panel["dd"] == 1).sum()) == 2
        assert panel["experimental_id"].nunique() == 2

    def test_missing_control_year_drops_row(self, tiny_register, pair_frame, tmp_path):
        outcomes = pd.read_csv(tiny_register["outcomes"])
        outcomes = outcomes[~((outcomes.person_id == 2) & (outcomes.year == 1991))]
        path = write_csv(tmp_path / "gap.csv", outcomes)
        reg = load_registry(tiny_register["persons"], path, tiny_register["shocks"], tiny_register["deflator"])
        panel = build_panel(pair_frame, reg, series_1990s())
        assert len(panel) == 9

    def test_clock_is_the_treated_units(self, tiny_register, pair_frame):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        panel = build_panel(pair_frame, reg, series_1990s())
        assert np.array_equal(panel["calendar_year"].to_numpy(), (panel["shock_year"] + panel["event_year"]).to_numpy())
        control = panel[panel.treated == 0]
        assert sorted(control["calendar_year"]) == [1987, 1988, 1989, 1990, 1991]

    def test_person_in_two_pairs_gets_two_ids(self, tiny_register):
        # person 2 serves as control in pair 0 and treated in pair 1
        pairs = pd.DataFrame(
            {
                "treated_id": [1, 2],
                "control_id": [2, 3],
                "disease_group": [5, 5],
                "shock_year": [1990, 1992],
                "gender": [0, 0],
                "distance": [0.0, 0.0],
            }
        )
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        panel = build_panel(pairs, reg, series_1990s())
        ids_of_2 = panel.loc[panel.person_id == 2, "experimental_id"].unique()
        assert len(ids_of_2) == 2
        roles = panel.loc[panel.person_id == 2].groupby("experimental_id")["treated"].first()
        assert set(roles) == {0, 1}

    def test_m_is_lagged_series_at_cohort(self, tiny_register, pair_frame):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        series = series_1990s()
        panel = build_panel(pair_frame, reg, series)
        assert panel["m_nme"].nunique() == 1
        assert panel["m_nme"].iloc[0] == pytest.approx(series.value(5, 1990, "nme"))
        # lag 1 of the raw stock: 3 approvals by 1989
        assert panel["m_nme"].iloc[0] == pytest.approx(3 / 100)

    def test_outcome_is_ihs_of_deflated(self, tiny_register, pair_frame, tmp_path):
        deflator = pd.DataFrame({"year": list(range(1985, 1996)) + [2021], "index": [0.5] * 11 + [1.0]})
        dpath = write_csv(tmp_path / "defl.csv", deflator)
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], dpath)
        panel = build_panel(pair_frame, reg, series_1990s())
        row = panel[(panel.person_id == 1) & (panel.event_year == 0)].iloc[0]
        nominal = 100000.0 + 1000.0 * 1 + 10.0 * (1990 - 1985)
        assert row["family_income"] == pytest.approx(ihs(nominal / 0.5))

    def test_treated_without_outcomes_drops_pair(self, tiny_register, tmp_path, pair_frame):
        outcomes = pd.read_csv(tiny_register["outcomes"])
        outcomes = outcomes[outcomes.person_id != 1]
        path = write_csv(tmp_path / "noone.csv", outcomes)
        reg = load_registry(tiny_register["persons"], path, tiny_register["shocks"], tiny_register["deflator"])
        with pytest.warns(UserWarning, match="dropped 1 pair"):
            panel = build_panel(pair_frame, reg, series_1990s())
        assert panel.empty

    def test_deterministic(self, tiny_register, pair_frame):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        a = build_panel(pair_frame, reg, series_1990s())
        b = build_panel(pair_frame, reg, series_1990s())
        assert a.to_csv(index=False) == b.to_csv(index=False)


class TestEventDummies:
    def test_reference_rows_all_zero(self, tiny_register, pair_frame):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        panel = attach_event_dummies(build_panel(pair_frame, reg, series_1990s()))
        refs = panel[panel.event_year.isin([-3, -1])]
        for col in ("ev_m2", "ev_0", "ev_1", "dd_ev_m2", "dd_ev_0", "dd_ev_1"):
            assert refs[col].sum() == 0

    def test_treated_interaction(self, tiny_register, pair_frame):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        panel = attach_event_dummies(build_panel(pair_frame, reg, series_1990s()))
        row = panel[(panel.treated == 1) & (panel.event_year == 0)].iloc[0]
        assert row["dd_ev_0"] == 1 and row["ev_0"] == 1
        row = panel[(panel.treated == 0) & (panel.event_year == 0)].iloc[0]
        assert row["dd_ev_0"] == 0 and row["ev_0"] == 1

    def test_column_sums_match_counts(self, tiny_register, pair_frame):
        reg = load_registry(tiny_register["persons"], tiny_register["outcomes"], tiny_register["shocks"], tiny_register["deflator"])
        panel = attach_event_dummies(build_panel(pair_frame, reg, series_1990s()))
        for t, tag in ((-2, "m2"), (0, "0"), (1, "1")):
            assert panel[f"ev_{tag}"].sum() == (panel.event_year == t).sum()
            assert panel[f"dd_ev_{tag}"].sum() == ((panel.event_year == t) & (panel.treated == 1)).sum()
