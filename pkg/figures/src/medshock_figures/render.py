"""Figure rendering over the estimator's file contracts.

Rendering is read-only over its inputs and deterministic: the same input
yields the same plotted values and image dimensions. Blue marks the drug
series (NMEs), orange the patent series, by convention.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "medshock-figures"  # deterministic SVG ids

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

FIGURE_KINDS = ("event_study", "forest", "dose_response", "balance")

NME_COLOR = "#1f77b4"
PATENT_COLOR = "#ff7f0e"

BALANCE_THRESHOLD = 0.1
Z95 = 1.959963984540054

REQUIRED_COLUMNS = {
    "event_study": ("term", "estimate", "se"),
    "forest": ("subsample", "term", "estimate", "se"),
    "dose_response": ("subsample", "term", "estimate", "se"),
    "balance": ("scope", "covariate", "std_diff"),
}

EVENT_TERM = re.compile(r"^(dd|ddm)_ev_(m?)(\d+)$")
REFERENCE_YEARS = (-3, -1)


class SchemaError(ValueError):
    """The input file does not match the expected result-table contract."""


@dataclass
class FigureSpec:
    kind: str
    inputs: list[str]
    output: str
    title: str = ""
    term: str = ""

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; expected one of {', '.join(FIGURE_KINDS)}")
        if isinstance(self.inputs, (str, Path)):
            self.inputs = [self.inputs]
        if not self.inputs:
            raise SchemaError("no input files given")


@dataclass
class RenderResult:
    """What was drawn: the plotted values plus reference annotations."""

    data: pd.DataFrame
    output: str
    reference_lines: list[float] = field(default_factory=list)
    size_inches: tuple[float, float] = (0.0, 0.0)


def load_table(path, kind: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input file not found: {path}")
    try:
        frame = pd.read_csv(path, comment="#")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty results file") from None
    missing = [c for c in REQUIRED_COLUMNS[kind] if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    if frame.empty:
        raise SchemaError(f"{path}: empty results file")
    return frame


def _series_label(path) -> str:
    stem = Path(path).stem
    return stem


def _series_color(label: str, index: int) -> str:
    low = label.lower()
    if "patent" in low:
        return PATENT_COLOR
    if "nme" in low:
        return NME_COLOR
    return (NME_COLOR, PATENT_COLOR)[index % 2]


def _event_points(frame: pd.DataFrame, source: str) -> pd.DataFrame:
    rows = []
    for r in frame.itertuples(index=False):
        m = EVENT_TERM.match(str(r.term))
        if not m:
            continue
        t = int(m.group(3)) * (-1 if m.group(2) == "m" else 1)
        est = float(r.estimate)
        half = Z95 * float(r.se)
        rows.append({"source": source, "event_year": t, "estimate": est, "lo": est - half, "hi": est + half, "reference": False})
    if not rows:
        raise SchemaError(f"{source}: no event-study terms (dd_ev_* / ddm_ev_*) found in 'term'")
    for t in REFERENCE_YEARS:
        rows.append({"source": source, "event_year": t, "estimate": 0.0, "lo": 0.0, "hi": 0.0, "reference": True})
    return pd.DataFrame(rows).sort_values("event_year").reset_index(drop=True)


def _render_event_study(spec: FigureSpec, ax) -> pd.DataFrame:
    pieces = []
    for i, path in enumerate(spec.inputs):
        frame = load_table(path, "event_study")
        points = _event_points(frame, _series_label(path))
        color = _series_color(points["source"].iloc[0], i)
        solid = points[~points.reference]
        ax.errorbar(
            solid["event_year"],
            solid["estimate"],
            yerr=np.vstack([solid["estimate"] - solid["lo"], solid["hi"] - solid["estimate"]]),
            fmt="o",
            capsize=3,
            color=color,
            label=points["source"].iloc[0],
        )
        refs = points[points.reference]
        ax.plot(refs["event_year"], refs["estimate"], "o", mfc="none", color=color)
        pieces.append(points)
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("event year")
    ax.set_ylabel("estimate")
    ax.legend(frameon=False, fontsize=8)
    return pd.concat(pieces, ignore_index=True)


def _render_forest(spec: FigureSpec, ax, term: str) -> pd.DataFrame:
    frames = [load_table(path, "forest") for path in spec.inputs]
    frame = pd.concat(frames, ignore_index=True)
    terms = frame["term"].dropna().unique().tolist()
    use = term or ("dd" if "dd" in terms else "ddm" if "ddm" in terms else (terms[0] if terms else ""))
    rows = frame[(frame["term"] == use) & frame["estimate"].notna()].copy()
    if rows.empty:
        raise SchemaError(f"no rows with term {use!r} to plot")
    rows["lo"] = rows["estimate"] - Z95 * rows["se"]
    rows["hi"] = rows["estimate"] + Z95 * rows["se"]
    rows = rows.reset_index(drop=True)
    y = np.arange(len(rows))[::-1]
    ax.errorbar(
        rows["estimate"], y,
        xerr=np.vstack([rows["estimate"] - rows["lo"], rows["hi"] - rows["estimate"]]),
        fmt="o", capsize=2, color=NME_COLOR,
    )
    ax.axvline(0.0, color="grey", lw=0.8)
    ax.set_yticks(y)
    ax.set_yticklabels(rows["subsample"], fontsize=7)
    ax.set_xlabel(f"{use} estimate")
    return rows[["subsample", "term", "estimate", "lo", "hi"]]


_BUCKET_PREFIXES = ("stay_", "cohort_")


def _render_dose_response(spec: FigureSpec, ax, term: str) -> pd.DataFrame:
    frames = [load_table(path, "dose_response") for path in spec.inputs]
    frame = pd.concat(frames, ignore_index=True)
    use = term or "dd"
    rows = frame[(frame["term"] == use) & frame["estimate"].notna()].copy()
    rows = rows[rows["subsample"].astype(str).str.startswith(_BUCKET_PREFIXES)]
    if rows.empty:
        raise SchemaError(
            f"no ordered-bucket subsamples ({' / '.join(_BUCKET_PREFIXES)}*) with term {use!r} to plot"
        )
    rows["lo"] = rows["estimate"] - Z95 * rows["se"]
    rows["hi"] = rows["estimate"] + Z95 * rows["se"]
    rows = rows.reset_index(drop=True)
    x = np.arange(len(rows))
    ax.plot(x, rows["estimate"], "-o", color=NME_COLOR)
    ax.fill_between(x, rows["lo"], rows["hi"], color=NME_COLOR, alpha=0.2)
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(rows["subsample"], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel(f"{use} estimate")
    return rows[["subsample", "term", "estimate", "lo", "hi"]]


def _render_balance(spec: FigureSpec, ax, annotations: list[float]) -> pd.DataFrame:
    frames = [load_table(path, "balance") for path in spec.inputs]
    frame = pd.concat(frames, ignore_index=True).reset_index(drop=True)
    labels = frame["scope"].astype(str) + ": " + frame["covariate"].astype(str)
    y = np.arange(len(frame))[::-1]
    ax.plot(frame["std_diff"].abs(), y, "o", color=NME_COLOR)
    for x in (0.0, BALANCE_THRESHOLD):
        ax.axvline(x, color="grey" if x == 0.0 else "crimson", lw=0.8, ls="-" if x == 0.0 else "--")
        annotations.append(x)
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=6)
    ax.set_xlabel("|standardized difference|")
    return frame[["scope", "covariate", "std_diff"]]


def render(spec: FigureSpec) -> RenderResult:
    """Render one figure; returns the plotted values and drawn reference lines."""
    fig, ax = plt.subplots(figsize=(7.0, 4.5), dpi=150)
    annotations: list[float] = []
    try:
        if spec.kind == "event_study":
            data = _render_event_study(spec, ax)
        elif spec.kind == "forest":
            data = _render_forest(spec, ax, spec.term)
        elif spec.kind == "dose_response":
            data = _render_dose_response(spec, ax, spec.term)
        else:
            data = _render_balance(spec, ax, annotations)
        if spec.title:
            ax.set_title(spec.title, fontsize=10)
        fig.tight_layout()
        out = Path(spec.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_kwargs = {"metadata": {"Date": None}} if out.suffix.lower() == ".svg" else {}
        fig.savefig(out, **save_kwargs)
    finally:
        size = tuple(fig.get_size_inches())
        plt.close(fig)
    return RenderResult(data=data, output=str(spec.output), reference_lines=annotations, size_inches=size)
