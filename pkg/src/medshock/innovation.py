"""Per-disease medical-innovation stock series and its transforms.

The stock for a disease group in a year is the cumulative net count of
approvals minus withdrawals (drug compounds) or grants minus lapses
(procedure patents), reported in hundreds and thousands respectively.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from medshock._validation import DataError
from medshock.registry import N_DISEASE_GROUPS

NME_SCALE = 100.0
PATENT_SCALE = 1000.0

#: kind -> (measure, delta applied to the raw running stock)
EVENT_KINDS = {
    "nme_approved": ("nme", 1),
    "nme_withdrawn": ("nme", -1),
    "patent_granted": ("patent", 1),
    "patent_lapsed": ("patent", -1),
}

ORIGINS = ("domestic", "international")
MEASURES = ("nme", "patent")
_SCALE = {"nme": NME_SCALE, "patent": PATENT_SCALE}


@dataclass(frozen=True)
class InnovationEvent:
    disease_group: int
    year: int
    kind: str
    origin: str = "domestic"

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise DataError(f"unknown innovation event kind {self.kind!r}")
        if self.origin not in ORIGINS:
            raise DataError(f"unknown innovation origin {self.origin!r}")
        if not 1 <= self.disease_group <= N_DISEASE_GROUPS:
            raise DataError(f"disease_group {self.disease_group} outside 1..{N_DISEASE_GROUPS}")


class InnovationSeries:
    """Stock values per (disease group, year), one panel per measure.

    Internally keeps raw counts; :meth:`value` returns model units (NMEs per
    100, patents per 1000). After :func:`detrend` the panel holds residuals
    rather than counts, on the same scale.
    """

    def __init__(self, years: np.ndarray, raw: dict[str, np.ndarray]):
        self.years = np.asarray(years, dtype=np.int64)
        if len(self.years) == 0:
            raise DataError("innovation series needs a non-empty year range")
        if not np.all(np.diff(self.years) == 1):
            raise DataError("innovation series years must be consecutive")
        self._raw = {m: np.asarray(raw[m], dtype=np.float64) for m in MEASURES}
        for m, arr in self._raw.items():
            if arr.shape != (N_DISEASE_GROUPS, len(self.years)):
                raise DataError(f"{m} panel must have shape (91, {len(self.years)})")

    @property
    def year_range(self) -> tuple[int, int]:
        return int(self.years[0]), int(self.years[-1])

    def raw(self, measure: str) -> np.ndarray:
        return self._raw[measure]

    def raw_value(self, group, year, measure: str):
        return self._lookup(group, year, self._raw[measure])

    def value(self, group, year, measure: str):
        """Scaled stock at (group, year); vectorized over array inputs."""
        return self._lookup(group, year, self._raw[measure] / _SCALE[measure])

    def _lookup(self, group, year, panel: np.ndarray):
        g = np.asarray(group, dtype=np.int64)
        y = np.asarray(year, dtype=np.int64)
        if np.any((g < 1) | (g > N_DISEASE_GROUPS)):
            raise DataError("disease_group outside 1..91")
        lo, hi = self.year_range
        if np.any((y < lo) | (y > hi)):
            bad = np.asarray(y)[np.argmax((y < lo) | (y > hi))]
            raise DataError(f"innovation series has no year {int(bad)} (range {lo}..{hi})")
        out = panel[g - 1, y - lo]
        if np.isscalar(group) and np.isscalar(year):
            return float(out)
        return out

    def frame(self) -> pd.DataFrame:
        """Long view: disease_group, year, nme_stock, patent_stock (scaled)."""
        groups = np.repeat(np.arange(1, N_DISEASE_GROUPS + 1), len(self.years))
        years = np.tile(self.years, N_DISEASE_GROUPS)
        return pd.DataFrame(
            {
                "disease_group": groups,
                "year": years,
                "nme_stock": (self._raw["nme"] / NME_SCALE).ravel(),
                "patent_stock": (self._raw["patent"] / PATENT_SCALE).ravel(),
            }
        )

    def _copy_with(self, raw: dict[str, np.ndarray]) -> "InnovationSeries":
        return InnovationSeries(self.years.copy(), raw)


def build_series(events, year_range: tuple[int, int]) -> InnovationSeries:
    """Accumulate events into net cumulative stocks per group and year.

    A removal that would drive a stock negative is clamped at zero with a
    warning: a knowledge stock cannot go below nothing, and such input is a
    malformed file rather than a modeling case.
    """
    lo, hi = int(year_range[0]), int(year_range[1])
    if hi < lo:
        raise DataError(f"invalid year_range {year_range}")
    n_years = hi - lo + 1
    deltas = {m: np.zeros((N_DISEASE_GROUPS, n_years)) for m in MEASURES}
    for ev in events:
        if not isinstance(ev, InnovationEvent):
            ev = InnovationEvent(**ev)
        if not lo <= ev.year <= hi:
            raise DataError(f"innovation event year {ev.year} outside configured range {lo}..{hi}")
        measure, step = EVENT_KINDS[ev.kind]
        deltas[measure][ev.disease_group - 1, ev.year - lo] += step

    raw = {}
    clamped_groups: set[int] = set()
    for m in MEASURES:
        stock = np.zeros((N_DISEASE_GROUPS, n_years))
        running = np.zeros(N_DISEASE_GROUPS)
        for j in range(n_years):
            running = running + deltas[m][:, j]
            negative = running < 0
            if negative.any():
                clamped_groups.update((np.flatnonzero(negative) + 1).tolist())
                running = np.maximum(running, 0.0)
            stock[:, j] = running
        raw[m] = stock
    if clamped_groups:
        warnings.warn(
            f"innovation stock clamped at 0 for group(s) {sorted(clamped_groups)}: removal exceeded prior stock",
            stacklevel=2,
        )
    return InnovationSeries(np.arange(lo, hi + 1), raw)


def lag(series: InnovationSeries, L: int) -> InnovationSeries:
    """Shift the series back by ``L`` years; years before the range start map to 0."""
    if L < 1:
        raise DataError(f"lag must be >= 1, got {L}")
    raw = {}
    for m in MEASURES:
        arr = series.raw(m)
        shifted = np.zeros_like(arr)
        if L < arr.shape[1]:
            shifted[:, L:] = arr[:, :-L]
        raw[m] = shifted
    return series._copy_with(raw)


def detrend(series: InnovationSeries) -> InnovationSeries:
    """Residuals from a per-group OLS fit of the stock on a linear year trend."""
    n_years = len(series.years)
    if n_years < 3:
        raise DataError(f"detrend needs >= 3 years per group, got {n_years}")
    t = (series.years - series.years.mean()).astype(np.float64)
    X = np.column_stack([np.ones(n_years), t])
    # annihilator of the trend space, applied to every group at once
    proj = X @ np.linalg.solve(X.T @ X, X.T)
    annihilator = np.eye(n_years) - proj
    raw = {m: series.raw(m) @ annihilator.T for m in MEASURES}
    return series._copy_with(raw)


def series_sd(series: InnovationSeries, sample_weights) -> dict[str, float]:
    """Population SD of the scaled stocks over the stacked estimation rows.

    ``sample_weights`` maps (disease_group, shock_year) to the number of rows
    that cohort contributes to the estimation panel.
    """
    items = list(sample_weights.items()) if hasattr(sample_weights, "items") else list(sample_weights)
    if not items:
        raise DataError("series_sd: empty sample")
    groups = np.array([k[0] for k, _ in items], dtype=np.int64)
    years = np.array([k[1] for k, _ in items], dtype=np.int64)
    w = np.array([v for _, v in items], dtype=np.float64)
    if w.sum() <= 0:
        raise DataError("series_sd: total weight is zero")
    out = {}
    for m in MEASURES:
        v = series.value(groups, years, m)
        mean = np.average(v, weights=w)
        out[m] = float(np.sqrt(np.average((v - mean) ** 2, weights=w)))
    return out


def effect_percent(beta: float, sd: float) -> float:
    """Effect of a one-SD change in the innovation stock, in percent."""
    if sd < 0:
        raise DataError(f"sd must be non-negative, got {sd}")
    return float(beta) * float(sd) * 100.0


def filter_international(events):
    """Keep only events of international origin (imported NMEs, foreign patents)."""
    return [ev for ev in events if ev.origin == "international"]


def events_to_frame(events) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "disease_group": [e.disease_group for e in events],
            "year": [e.year for e in events],
            "kind": [e.kind for e in events],
            "origin": [e.origin for e in events],
        }
    )


def load_events(path) -> list[InnovationEvent]:
    """Read innovations.csv (disease_group, year, kind, origin)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"innovations: file not found: {path}")
    frame = pd.read_csv(path, comment="#")
    for col in ("disease_group", "year", "kind", "origin"):
        if col not in frame.columns:
            raise DataError(f"innovations: {path} missing column {col}")
    return [
        InnovationEvent(
            disease_group=int(r.disease_group),
            year=int(r.year),
            kind=str(r.kind),
            origin=str(r.origin),
        )
        for r in frame.itertuples(index=False)
    ]
