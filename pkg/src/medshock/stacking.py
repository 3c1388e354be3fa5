"""Expansion of matched pairs into the stacked event-year estimation panel.

Each pair contributes two experimental identities (one per arm), each with up
to five rows at event years t in {-3..+1} on the treated unit's clock. A
person appearing in several pairs holds several experimental ids, so the
stacked cohorts are independent by construction.
"""

from __future__ import annotations

import warnings

import numpy as np
import pandas as pd

from medshock._validation import DataError, require_columns
from medshock.innovation import InnovationSeries
from medshock.matching import MatchResult
from medshock.registry import CHAPTER_OF, OUTCOME_COLUMNS, Registry

EVENT_YEARS = (-3, -2, -1, 0, 1)

#: Pair-level attributes of the treated member, replicated onto both arms.
PAIR_ATTRIBUTES = [
    "gender",
    "birth_year",
    "schooling_years",
    "marital_flag",
    "liquidity_flag",
    "age_at_shock",
    "stay_days",
]

PANEL_KEY_COLUMNS = [
    "experimental_id",
    "pair_id",
    "person_id",
    "disease_group",
    "chapter",
    "shock_year",
    "event_year",
    "calendar_year",
    "treated",
    "post",
    "dd",
    "m_nme",
    "m_patent",
]


def build_panel(pairs, registry: Registry, series: InnovationSeries, outcomes=None) -> pd.DataFrame:
    """Expand matched pairs into stacked rows with model-ready outcomes.

    ``series`` must already be lagged: the innovation level attached to a
    cohort is the series value at (disease group, shock year). Outcome values
    are deflated to base-year terms and IHS-transformed here. Person-years
    absent from the register are omitted; pairs whose treated arm has no
    observable outcome year are dropped with a warning.
    """
    frame = pairs.pairs if isinstance(pairs, MatchResult) else pairs
    require_columns(frame, ("treated_id", "control_id", "disease_group", "shock_year", "gender"), "pairs")
    if frame.empty:
        raise DataError("build_panel: no pairs")
    outcomes = list(outcomes) if outcomes is not None else list(OUTCOME_COLUMNS)

    pairs_df = frame.reset_index(drop=True).copy()
    pairs_df["pair_id"] = np.arange(len(pairs_df), dtype=np.int64)

    # control shock two years after s lies outside the window [s-3, s+1]
    assert all(t_end < 2 for t_end in [max(EVENT_YEARS)])

    arms = []
    for treated_flag, id_col in ((1, "treated_id"), (0, "control_id")):
        arm = pairs_df[["pair_id", id_col, "disease_group", "shock_year", "gender"]].rename(columns={id_col: "person_id"})
        arm["treated"] = treated_flag
        arm["experimental_id"] = arm["pair_id"] * 2 + (1 - treated_flag)
        arms.append(arm)
    arms = pd.concat(arms, ignore_index=True)

    n_ev = len(EVENT_YEARS)
    rows = arms.loc[arms.index.repeat(n_ev)].reset_index(drop=True)
    rows["event_year"] = np.tile(np.array(EVENT_YEARS, dtype=np.int64), len(arms))
    rows["calendar_year"] = rows["shock_year"] + rows["event_year"]

    observed = registry.outcomes[["person_id", "year"] + outcomes].rename(columns={"year": "calendar_year"})
    panel = rows.merge(observed, on=["person_id", "calendar_year"], how="inner")

    # drop pairs whose treated arm has no observable outcome years at all
    treated_pairs = set(panel.loc[panel["treated"] == 1, "pair_id"].unique())
    missing = len(pairs_df) - len(treated_pairs)
    if missing:
        warnings.warn(f"dropped {missing} pair(s) whose treated unit has no observable outcome years", stacklevel=2)
        panel = panel.loc[panel["pair_id"].isin(treated_pairs)]

    panel = panel.copy()
    panel["post"] = (panel["event_year"] >= 0).astype(np.int64)
    panel["dd"] = panel["treated"] * panel["post"]
    panel["chapter"] = panel["disease_group"].map(CHAPTER_OF)
    g = panel["disease_group"].to_numpy()
    s = panel["shock_year"].to_numpy()
    panel["m_nme"] = series.value(g, s, "nme")
    panel["m_patent"] = series.value(g, s, "patent")

    index_values = {y: registry.deflator.index_for(y) for y in panel["calendar_year"].unique()}
    deflator_idx = panel["calendar_year"].map(index_values).to_numpy()
    for col in outcomes:
        values = panel[col].to_numpy(dtype=np.float64)
        with np.errstate(invalid="ignore"):
            panel[col] = np.arcsinh(values / deflator_idx)

    attrs = registry.persons.set_index("person_id")
    treated_ids = pairs_df.set_index("pair_id")["treated_id"]
    for col in ("birth_year", "schooling_years", "marital_flag", "liquidity_flag"):
        panel[col] = attrs.loc[treated_ids.loc[panel["pair_id"]], col].to_numpy()
    panel["age_at_shock"] = panel["shock_year"] - panel["birth_year"]
    if "stay_days" in registry.shocks.columns:
        stays = registry.shocks.set_index(["person_id", "shock_year"])["stay_days"]
        key = pd.MultiIndex.from_arrays([treated_ids.loc[panel["pair_id"]], panel["shock_year"]])
        panel["stay_days"] = stays.reindex(key).to_numpy()
    else:
        panel["stay_days"] = np.nan

    ordered = PANEL_KEY_COLUMNS + [c for c in PAIR_ATTRIBUTES if c not in PANEL_KEY_COLUMNS] + outcomes
    panel = panel[ordered].sort_values(["experimental_id", "event_year"]).reset_index(drop=True)
    return panel


def attach_event_dummies(panel: pd.DataFrame) -> pd.DataFrame:
    """Add event-year indicators and their treated interactions.

    Event years -3 and -1 are the reference categories, so indicators exist
    for t in {-2, 0, +1} only.
    """
    if panel.empty:
        raise DataError("attach_event_dummies: empty panel")
    require_columns(panel, ("event_year", "treated"), "panel")
    out = panel.copy()
    for t, tag in ((-2, "m2"), (0, "0"), (1, "1")):
        ind = (out["event_year"] == t).astype(np.int64)
        out[f"ev_{tag}"] = ind
        out[f"dd_ev_{tag}"] = ind * out["treated"]
    return out


def write_panel(panel: pd.DataFrame, path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        panel.to_csv(fh, index=False, lineterminator="\n")


def read_panel(path) -> pd.DataFrame:
    panel = pd.read_csv(path, comment="#")
    require_columns(panel, PANEL_KEY_COLUMNS, "panel")
    return panel
