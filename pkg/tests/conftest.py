import numpy as np
import pandas as pd
import pytest


def write_csv(path, frame):
    frame.to_csv(path, index=False, lineterminator="\n")
    return str(path)


@pytest.fixture
def tiny_register(tmp_path):
    """Three index persons; two of them form a valid treated/control pair."""
    persons = pd.DataFrame(
        {
            "person_id": [1, 2, 3],
            "birth_year": [1948, 1947, 1950],
            "gender": [0, 0, 1],
            "schooling_years": [12, 11, 14],
            "earnings_38_39": [250000.0, 240000.0, 300000.0],
            "family_id": [1, 2, 3],
            "role": ["index", "index", "index"],
            "liquidity_flag": [0, 1, 0],
            "marital_flag": [1, 1, 0],
        }
    )
    years = list(range(1985, 1996))
    rows = []
    for pid in (1, 2, 3):
        for y in years:
            rows.append({"person_id": pid, "year": y, **{c: 100000.0 + 1000.0 * pid + 10.0 * (y - 1985) for c in OUTCOMES}})
    outcomes = pd.DataFrame(rows)
    shocks = pd.DataFrame({"person_id": [1, 2], "shock_year": [1990, 1992], "disease_group": [5, 5]})
    deflator = pd.DataFrame({"year": years + [2021], "index": [1.0] * len(years) + [1.0]})
    paths = {
        "persons": write_csv(tmp_path / "persons.csv", persons),
        "outcomes": write_csv(tmp_path / "outcomes.csv", outcomes),
        "shocks": write_csv(tmp_path / "shocks.csv", shocks),
        "deflator": write_csv(tmp_path / "deflator.csv", deflator),
        "dir": tmp_path,
    }
    return paths


OUTCOMES = [
    "family_income",
    "own_income",
    "partner_income",
    "wages",
    "unemployment",
    "capital",
    "sickness",
    "disability",
    "child_income",
    "child_wages",
    "child_welfare",
]


def toy_panel():
    """Eight-row, two-period, two-id-per-arm construction with a known DD.

    Treated changes: +2 and +3 (mean 2.5); control changes: +1 and 0
    (mean 0.5); so the difference-in-differences is exactly 2.0.
    """
    rows = []
    values = {
        (1, 1): (1.0, 3.0),
        (2, 1): (2.0, 5.0),
        (3, 0): (1.0, 2.0),
        (4, 0): (3.0, 3.0),
    }
    for (eid, treated), (y_pre, y_post) in values.items():
        for t, y in ((-1, y_pre), (0, y_post)):
            rows.append(
                {
                    "experimental_id": eid,
                    "pair_id": eid % 2,
                    "person_id": eid,
                    "disease_group": 5,
                    "chapter": "digestive",
                    "shock_year": 1990,
                    "event_year": t,
                    "calendar_year": 1990 + t,
                    "treated": treated,
                    "post": int(t >= 0),
                    "dd": treated * int(t >= 0),
                    "m_nme": 0.1,
                    "m_patent": 0.2,
                    "family_income": y,
                }
            )
    return pd.DataFrame(rows)
