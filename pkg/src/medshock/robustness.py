"""Robustness battery: specification and innovation-series variants.

Each variant re-estimates the mitigation coefficient under a perturbation of
the base design: extra fixed effects, an aggregation-based estimator, or a
transformed innovation series (detrended, international-only, longer lags).
Per-variant failures are recorded and the battery continues.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from medshock._validation import DataError, NumericError, RankError, require_columns
from medshock.estimator import EstimationResult, estimate_ddd, fit_fe_ols
from medshock.innovation import build_series, detrend, filter_international, lag
from medshock.stacking import attach_event_dummies

VARIANTS = (
    "base",
    "eventyear_icd_fe",
    "cohort_aggregated",
    "detrended",
    "international",
    "lag5",
    "lag10",
    "with_emergency",
)


def estimate_with_icd_eventyear_fe(panel: pd.DataFrame, outcome: str, measure: str = "nme") -> EstimationResult:
    """Triple difference with event-year-by-chapter fixed effects added.

    Dummies cover event years {-2, 0, +1} for every chapter except a
    reference chapter (lowest label); the reference event years and chapter
    keep the augmented design full rank alongside the post indicator. With a
    single chapter in the panel the dummies are collinear by construction and
    the rank error propagates.
    """
    require_columns(panel, ("chapter", "event_year", "post", "dd", f"m_{measure}"), "panel")
    work = attach_event_dummies(panel)
    m = work[f"m_{measure}"].to_numpy(dtype=np.float64)
    work["ddm"] = work["dd"] * m
    work["postm"] = work["post"] * m

    chapters = sorted(work["chapter"].dropna().unique())
    dummies = []
    for chapter in chapters[1:]:
        in_chapter = (work["chapter"] == chapter).to_numpy(dtype=np.int64)
        for tag in ("m2", "0", "1"):
            col = f"ev_{tag}_x_{chapter}"
            work[col] = work[f"ev_{tag}"].to_numpy() * in_chapter
            dummies.append(col)
    if not dummies:
        raise RankError(
            "event-year x chapter dummies are collinear with the event-year terms: panel has a single chapter",
            columns=["chapter"],
        )
    regressors = ["post", "dd", "ddm", "postm"] + dummies
    result = fit_fe_ols(work, outcome, regressors)
    result.spec = f"ddd:{measure}:eventyear_icd_fe"
    used = work.loc[~work[[outcome] + regressors].isna().any(axis=1), f"m_{measure}"]
    result.extra["measure"] = measure
    result.extra["sd_m"] = float(used.std(ddof=0))
    result.extra["effect_percent"] = result.coef["ddm"] * result.extra["sd_m"] * 100.0
    return result


def cohort_aggregated_att(panel: pd.DataFrame, outcome: str, measure: str | None = None) -> EstimationResult:
    """Cohort-level treatment-effect aggregation (not-yet-treated controls).

    Per experimental id, the outcome change is the mean of post rows minus
    the t=-1 base-period value; ids lacking the base period are dropped with
    a count. Per cohort (disease group x shock year), the effect is the
    treated-arm mean change minus the control-arm mean change. The aggregate
    weights cohorts by their panel row counts, with variance from
    cohort-level clustering. With ``measure`` set, the aggregate is a
    weighted least-squares fit of cohort effects on the cohort innovation
    level; its slope is the mitigation analogue.
    """
    require_columns(panel, ("experimental_id", "disease_group", "shock_year", "event_year", "treated", outcome), "panel")
    data = panel.loc[panel[outcome].notna(), ["experimental_id", "disease_group", "shock_year", "event_year", "treated", outcome]].copy()
    if measure is not None:
        data[f"m_{measure}"] = panel.loc[data.index, f"m_{measure}"]

    base = data.loc[data["event_year"] == -1].set_index("experimental_id")[outcome]
    post = data.loc[data["event_year"] >= 0].groupby("experimental_id")[outcome].mean()
    usable = base.index.intersection(post.index)
    n_dropped = data["experimental_id"].nunique() - len(usable)
    if len(usable) == 0:
        raise DataError("no experimental ids with both a base period and post rows")
    change = (post.loc[usable] - base.loc[usable]).rename("change")

    meta = data.drop_duplicates("experimental_id").set_index("experimental_id")
    meta = meta.loc[usable]
    rows_per_cohort = data.loc[data["experimental_id"].isin(usable)].groupby(["disease_group", "shock_year"]).size()

    cohort = pd.DataFrame({"change": change, "treated": meta["treated"], "disease_group": meta["disease_group"], "shock_year": meta["shock_year"]})
    if measure is not None:
        cohort["m"] = meta[f"m_{measure}"]
    grouped = cohort.groupby(["disease_group", "shock_year", "treated"])["change"].mean().unstack("treated")
    if 1 not in grouped.columns or 0 not in grouped.columns:
        raise DataError("cohort aggregation needs both arms")
    both = grouped.dropna(subset=[0, 1])
    n_one_armed = len(grouped) - len(both)
    theta = (both[1] - both[0]).rename("effect")
    weights = rows_per_cohort.loc[theta.index].to_numpy(dtype=np.float64)
    effects = theta.to_numpy(dtype=np.float64)
    C = len(effects)
    if C == 0:
        raise DataError("no cohorts with both arms and a base period")

    extra = {
        "n_cohorts": C,
        "n_ids_dropped_no_base": int(n_dropped),
        "n_cohorts_dropped_one_armed": int(n_one_armed),
    }
    n_rows = int(weights.sum())
    if measure is None:
        att = float(np.average(effects, weights=weights))
        if C > 1:
            resid = effects - att
            var = C / (C - 1.0) * float(np.sum((weights * resid) ** 2)) / float(weights.sum()) ** 2
        else:
            var = float("nan")
        return EstimationResult(
            terms=["dd"],
            coef={"dd": att},
            vcov=np.array([[var]]),
            n_rows=n_rows,
            n_clusters=C,
            r2_within=float("nan"),
            outcome=outcome,
            spec="cohort_att",
            extra=extra,
        )

    m_values = cohort.groupby(["disease_group", "shock_year"])["m"].first().loc[theta.index].to_numpy(dtype=np.float64)
    if np.ptp(m_values) == 0.0:
        raise RankError("cohort innovation level is constant; mitigation slope unidentified", columns=["ddm"])
    X = np.column_stack([np.ones(C), m_values])
    W = weights
    xtwx = X.T @ (W[:, None] * X)
    beta = np.linalg.solve(xtwx, X.T @ (W * effects))
    resid = effects - X @ beta
    bread = np.linalg.inv(xtwx)
    meat = (X * (W * resid)[:, None]).T @ (X * (W * resid)[:, None])
    scale = C / max(C - 2.0, 1.0)
    vcov = scale * bread @ meat @ bread
    sd_m = float(np.sqrt(np.average((m_values - np.average(m_values, weights=W)) ** 2, weights=W)))
    extra.update({"measure": measure, "sd_m": sd_m, "effect_percent": float(beta[1]) * sd_m * 100.0})
    return EstimationResult(
        terms=["dd", "ddm"],
        coef={"dd": float(beta[0]), "ddm": float(beta[1])},
        vcov=vcov,
        n_rows=n_rows,
        n_clusters=C,
        r2_within=float("nan"),
        outcome=outcome,
        spec=f"cohort_att:{measure}",
        extra=extra,
    )


def _variant_series(events, year_range, variant: str, lag_years: int):
    if variant == "international":
        events = filter_international(events)
    series = build_series(events, year_range)
    if variant == "detrended":
        series = detrend(series)
    return lag(series, lag_years)


def _remap_m(panel: pd.DataFrame, series) -> pd.DataFrame:
    out = panel.copy()
    g = out["disease_group"].to_numpy()
    s = out["shock_year"].to_numpy()
    out["m_nme"] = series.value(g, s, "nme")
    out["m_patent"] = series.value(g, s, "patent")
    return out


def run_battery(
    panel: pd.DataFrame,
    *,
    events=None,
    year_range: tuple[int, int] | None = None,
    lag_years: int = 1,
    outcome: str = "family_income",
    measures=("nme", "patent"),
    variants="all",
    emergency_panel: pd.DataFrame | None = None,
) -> pd.DataFrame:
    """Run the requested variants and tabulate the mitigation row per measure.

    Series-based variants (detrended, international, lag5, lag10) need the
    raw ``events`` and their ``year_range`` to rebuild the stock. The
    ``with_emergency`` variant estimates on ``emergency_panel`` when given.
    Output order is canonical (variant then measure) regardless of request
    order, and one failed variant never aborts the battery.
    """
    requested = list(VARIANTS) if variants == "all" else [v for v in VARIANTS if v in set(variants)]
    unknown = [] if variants == "all" else [v for v in variants if v not in VARIANTS]
    if unknown:
        raise DataError(f"unknown robustness variant(s): {', '.join(sorted(unknown))}")

    rows = []
    for variant in requested:
        for measure in measures:
            entry = {
                "variant": variant,
                "measure": measure,
                "beta3": np.nan,
                "se": np.nan,
                "sd_m": np.nan,
                "effect_percent": np.nan,
                "n": 0,
                "clusters": 0,
                "note": "",
            }
            try:
                if variant in ("detrended", "international", "lag5", "lag10"):
                    if events is None or year_range is None:
                        raise DataError(f"variant {variant} needs innovation events and a year range")
                    lag_l = {"lag5": 5, "lag10": 10}.get(variant, lag_years)
                    series = _variant_series(events, year_range, variant, lag_l)
                    result = estimate_ddd(_remap_m(panel, series), outcome, measure=measure)
                elif variant == "eventyear_icd_fe":
                    result = estimate_with_icd_eventyear_fe(panel, outcome, measure=measure)
                elif variant == "cohort_aggregated":
                    result = cohort_aggregated_att(panel, outcome, measure=measure)
                elif variant == "with_emergency":
                    if emergency_panel is None:
                        raise DataError("no emergency-augmented panel available")
                    result = estimate_ddd(emergency_panel, outcome, measure=measure)
                else:
                    result = estimate_ddd(panel, outcome, measure=measure)
                entry.update(
                    {
                        "beta3": result.coef["ddm"],
                        "se": result.se("ddm"),
                        "sd_m": result.extra.get("sd_m", np.nan),
                        "effect_percent": result.extra.get("effect_percent", np.nan),
                        "n": result.n_rows,
                        "clusters": result.n_clusters,
                    }
                )
            except (DataError, NumericError) as exc:
                entry["note"] = str(exc)
            rows.append(entry)
    out = pd.DataFrame(rows)
    return out.sort_values(["variant", "measure"], key=lambda s: s.map({v: i for i, v in enumerate(VARIANTS)}) if s.name == "variant" else s).reset_index(drop=True)
