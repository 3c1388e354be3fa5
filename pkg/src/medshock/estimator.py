"""Fixed-effects OLS with cluster-robust inference for the stacked panel.

The individual (experimental-id) fixed effects are absorbed by within-group
demeaning; the covariance is the CR1 cluster sandwich

    (G/(G-1)) * (N-1)/(N-k) * (X'X)^-1 (sum_g Xg' ug ug' Xg) (X'X)^-1

with clusters g at the experimental-id level unless requested otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from medshock._validation import DataError, NumericError, RankError, require_columns
from medshock.stacking import attach_event_dummies


@dataclass
class WithinResult:
    frame: pd.DataFrame
    group_means: pd.DataFrame
    n_singletons_dropped: int


def within_transform(panel: pd.DataFrame, columns, group_key: str = "experimental_id") -> WithinResult:
    """Demean ``columns`` within ``group_key``; singleton groups are dropped.

    Group means are retained so levels can be reconstructed.
    """
    require_columns(panel, [group_key] + list(columns), "panel")
    codes, _ = pd.factorize(panel[group_key], sort=True)
    counts = np.bincount(codes)
    singleton = counts[codes] < 2
    n_dropped = int(np.unique(codes[singleton]).size)
    keep = ~singleton
    sub = panel.loc[keep].copy()
    codes = codes[keep]
    codes = pd.factorize(codes, sort=True)[0]
    counts = np.bincount(codes)

    means = {}
    for col in columns:
        values = sub[col].to_numpy(dtype=np.float64)
        gmean = np.bincount(codes, weights=values) / counts
        means[col] = gmean
        sub[col] = values - gmean[codes]
    means_df = pd.DataFrame(means)
    means_df[group_key] = np.sort(sub[group_key].unique())
    return WithinResult(frame=sub, group_means=means_df, n_singletons_dropped=n_dropped)


@dataclass
class EstimationResult:
    """Coefficients, cluster-robust covariance, and sample metadata."""

    terms: list[str]
    coef: dict[str, float]
    vcov: np.ndarray
    n_rows: int
    n_clusters: int
    r2_within: float
    outcome: str
    spec: str
    n_singletons_dropped: int = 0
    extra: dict = field(default_factory=dict)

    def se(self, term: str) -> float:
        i = self.terms.index(term)
        return float(np.sqrt(self.vcov[i, i]))

    def tstat(self, term: str) -> float:
        return self.coef[term] / self.se(term)

    def pvalue(self, term: str) -> float:
        df = max(self.n_clusters - 1, 1)
        return float(2.0 * stats.t.sf(abs(self.tstat(term)), df))

    def conf_int(self, term: str, level: float = 0.95) -> tuple[float, float]:
        df = max(self.n_clusters - 1, 1)
        crit = float(stats.t.ppf(0.5 + level / 2.0, df))
        half = crit * self.se(term)
        return self.coef[term] - half, self.coef[term] + half

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "term": self.terms,
                "estimate": [self.coef[t] for t in self.terms],
                "se": [self.se(t) for t in self.terms],
                "p": [self.pvalue(t) for t in self.terms],
                "n": self.n_rows,
                "clusters": self.n_clusters,
            }
        )

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "outcome": self.outcome,
            "terms": {
                t: {"estimate": self.coef[t], "se": self.se(t), "p": self.pvalue(t)} for t in self.terms
            },
            "n_rows": self.n_rows,
            "n_clusters": self.n_clusters,
            "r2_within": self.r2_within,
            "n_singletons_dropped": self.n_singletons_dropped,
            **self.extra,
        }

    def summary(self) -> str:
        lines = [f"{self.spec} on {self.outcome}: n={self.n_rows}, clusters={self.n_clusters}, R2(within)={self.r2_within:.4f}"]
        for t in self.terms:
            lines.append(f"  {t:<12} {self.coef[t]:>10.4f}  ({self.se(t):.4f})  p={self.pvalue(t):.4f}")
        return "\n".join(lines)


class FixedEffectsOLS(BaseEstimator):
    """Within-transformed OLS with a CR1 cluster sandwich covariance."""

    def __init__(self, group_key: str = "experimental_id", cluster_key: str | None = None):
        self.group_key = group_key
        self.cluster_key = cluster_key

    def fit(self, panel: pd.DataFrame, y: str, regressors) -> "FixedEffectsOLS":
        regressors = list(regressors)
        cluster_key = self.cluster_key or self.group_key
        require_columns(panel, [self.group_key, cluster_key, y] + regressors, "panel")

        cols = [y] + regressors
        data = panel[list(dict.fromkeys([self.group_key, cluster_key] + cols))]
        data = data.loc[~data[cols].isna().any(axis=1)]
        if data.empty:
            raise DataError(f"no usable rows for outcome {y!r}")

        group = pd.factorize(data[self.group_key], sort=True)[0]
        counts = np.bincount(group)
        keep = counts[group] >= 2
        n_singletons = int(np.unique(group[~keep]).size)
        data = data.loc[keep]
        group = np.unique(group[keep], return_inverse=True)[1]
        counts = np.bincount(group)

        cluster = pd.factorize(data[cluster_key], sort=True)[0]
        G = int(cluster.max()) + 1 if len(cluster) else 0
        if G < 2:
            raise NumericError(f"need >= 2 clusters, got {G}")

        Y = data[y].to_numpy(dtype=np.float64)
        X = data[regressors].to_numpy(dtype=np.float64)
        Y = Y - (np.bincount(group, weights=Y) / counts)[group]
        for j in range(X.shape[1]):
            X[:, j] -= (np.bincount(group, weights=X[:, j]) / counts)[group]

        self.result_ = cluster_ols_demeaned(
            X, Y, cluster, regressors, outcome=y, spec="fe_ols", n_singletons=n_singletons
        )
        return self

    @property
    def coef_(self) -> np.ndarray:
        if not hasattr(self, "result_"):
            raise NotFittedError("FixedEffectsOLS is not fitted")
        return np.array([self.result_.coef[t] for t in self.result_.terms])


def cluster_ols_demeaned(
    X: np.ndarray,
    Y: np.ndarray,
    cluster: np.ndarray,
    terms: list[str],
    outcome: str = "",
    spec: str = "fe_ols",
    n_singletons: int = 0,
) -> EstimationResult:
    """OLS with the CR1 sandwich on already-demeaned data.

    ``cluster`` must be integer codes 0..G-1.
    """
    G = int(cluster.max()) + 1 if len(cluster) else 0
    if G < 2:
        raise NumericError(f"need >= 2 clusters, got {G}")
    n, k = X.shape
    if n <= k:
        raise NumericError(f"too few rows ({n}) for {k} regressors")
    _check_rank(X, terms)

    xtx = X.T @ X
    beta = np.linalg.solve(xtx, X.T @ Y)
    resid = Y - X @ beta
    rss = float(resid @ resid)
    tss = float(Y @ Y)

    bread = np.linalg.inv(xtx)
    scores = X * resid[:, None]
    S = np.column_stack([np.bincount(cluster, weights=scores[:, j], minlength=G) for j in range(k)])
    meat = S.T @ S
    scale = (G / (G - 1.0)) * ((n - 1.0) / (n - k))
    vcov = scale * bread @ meat @ bread
    vcov = (vcov + vcov.T) / 2.0

    return EstimationResult(
        terms=list(terms),
        coef={t: float(b) for t, b in zip(terms, beta)},
        vcov=vcov,
        n_rows=n,
        n_clusters=G,
        r2_within=1.0 - rss / tss if tss > 0 else float("nan"),
        outcome=outcome,
        spec=spec,
        n_singletons_dropped=n_singletons,
        extra={"rss": rss},
    )


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(X.shape) * np.finfo(np.float64).eps if diag.size and diag[0] > 0 else 0.0
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        collinear = sorted(names[p] for p in piv[rank:])
        raise RankError(f"design matrix is rank deficient; collinear column(s): {', '.join(collinear)}", columns=collinear)


def fit_fe_ols(panel: pd.DataFrame, y: str, regressors, cluster_key: str = "experimental_id", group_key: str = "experimental_id") -> EstimationResult:
    """Functional front end to :class:`FixedEffectsOLS`."""
    return FixedEffectsOLS(group_key=group_key, cluster_key=cluster_key).fit(panel, y, regressors).result_


def estimate_dd(panel: pd.DataFrame, outcome: str, by_event_year: bool = False, dynamic: bool = False, cluster_key: str = "experimental_id") -> EstimationResult:
    """Two-group event-study DD: y ~ post + dd with individual fixed effects.

    ``by_event_year`` replaces dd with dd x (t=0) and dd x (t=1);
    ``dynamic`` fits the full event-study with reference years -3 and -1.
    """
    require_columns(panel, ("post", "dd", "event_year", "treated"), "panel")
    if dynamic:
        work = attach_event_dummies(panel)
        regressors = ["ev_m2", "ev_0", "ev_1", "dd_ev_m2", "dd_ev_0", "dd_ev_1"]
        spec = "dd:dynamic"
    elif by_event_year:
        work = panel.copy()
        work["dd_ev_0"] = work["dd"] * (work["event_year"] == 0).astype(np.int64)
        work["dd_ev_1"] = work["dd"] * (work["event_year"] == 1).astype(np.int64)
        regressors = ["post", "dd_ev_0", "dd_ev_1"]
        spec = "dd:event"
    else:
        work = panel
        regressors = ["post", "dd"]
        spec = "dd"
    result = fit_fe_ols(work, outcome, regressors, cluster_key=cluster_key)
    result.spec = spec
    return result


def estimate_ddd(
    panel: pd.DataFrame,
    outcome: str,
    measure: str = "nme",
    by_event_year: bool = False,
    cluster_key: str = "experimental_id",
) -> EstimationResult:
    """Triple-difference: y ~ post + dd + dd*m + post*m, m the lagged stock.

    The main effect of m is constant within an experimental id and therefore
    absorbed by the fixed effects; that constancy is asserted, not assumed.
    """
    m_col = f"m_{measure}"
    require_columns(panel, ("post", "dd", "event_year", m_col), "panel")
    m = panel[m_col].to_numpy(dtype=np.float64)
    if np.ptp(m) == 0.0:
        raise RankError(f"{m_col} is identical for all cohorts; dd x m is collinear with dd", columns=[f"ddm"])
    _assert_cohort_constant(panel, m_col)

    work = panel.copy()
    work["ddm"] = work["dd"] * m
    work["postm"] = work["post"] * m
    if by_event_year:
        ev0 = (work["event_year"] == 0).astype(np.int64)
        ev1 = (work["event_year"] == 1).astype(np.int64)
        work["ddm_ev_0"] = work["ddm"] * ev0
        work["ddm_ev_1"] = work["ddm"] * ev1
        regressors = ["post", "dd", "ddm_ev_0", "ddm_ev_1", "postm"]
        spec = f"ddd:{measure}:event"
    else:
        regressors = ["post", "dd", "ddm", "postm"]
        spec = f"ddd:{measure}"
    result = fit_fe_ols(work, outcome, regressors, cluster_key=cluster_key)
    result.spec = spec
    used = work.loc[~work[[outcome] + regressors].isna().any(axis=1), m_col].to_numpy(dtype=np.float64)
    sd_m = float(used.std(ddof=0))
    result.extra["measure"] = measure
    result.extra["sd_m"] = sd_m
    main = "ddm" if not by_event_year else "ddm_ev_1"
    result.extra["effect_percent"] = result.coef[main] * sd_m * 100.0
    return result


def _assert_cohort_constant(panel: pd.DataFrame, col: str) -> None:
    values = panel[col].to_numpy(dtype=np.float64)
    codes = pd.factorize(panel["experimental_id"], sort=False)[0]
    first = np.full(codes.max() + 1, np.nan)
    first[codes[::-1]] = values[::-1]
    if not np.allclose(values, first[codes], rtol=0.0, atol=0.0, equal_nan=True):
        raise DataError(f"{col} varies within an experimental id; cohort-level constancy violated")


@dataclass
class PreTrendTest:
    """Single remaining pre-period coefficient and scale-free balance of pre-outcomes."""

    coefficient: float
    se: float
    p_value: float
    std_diff: float
    n_rows: int
    n_clusters: int
    disease_group: int | None = None

    @property
    def passes_wald(self) -> bool:
        return self.p_value >= 0.05

    @property
    def passes_balance(self) -> bool:
        return abs(self.std_diff) < 0.1


def pretrend_test(panel: pd.DataFrame, outcome: str) -> PreTrendTest:
    """Event-study pre-trend check with t=-3 and t=-1 omitted as references.

    The test statistic is the Wald test of the treated x (t=-2) coefficient
    being zero under the clustered covariance, plus the standardized
    difference of pre-period outcomes between arms.
    """
    pre = panel.loc[panel["event_year"] == -2]
    if pre.empty or pre["treated"].nunique() < 2:
        raise DataError("pretrend_test: no t=-2 support for both arms")
    result = estimate_dd(panel, outcome, dynamic=True)
    mask = (panel["event_year"] < 0) & panel[outcome].notna()
    treated = panel.loc[mask & (panel["treated"] == 1), outcome]
    control = panel.loc[mask & (panel["treated"] == 0), outcome]
    from medshock.matching import standardized_difference

    return PreTrendTest(
        coefficient=result.coef["dd_ev_m2"],
        se=result.se("dd_ev_m2"),
        p_value=result.pvalue("dd_ev_m2"),
        std_diff=standardized_difference(treated, control),
        n_rows=result.n_rows,
        n_clusters=result.n_clusters,
    )


def pretrend_by_group(panel: pd.DataFrame, outcome: str) -> pd.DataFrame:
    """Run the pre-trend test separately for every disease group."""
    rows = []
    for group, sub in panel.groupby("disease_group"):
        try:
            t = pretrend_test(sub, outcome)
            rows.append((int(group), t.coefficient, t.se, t.p_value, t.std_diff, t.passes_wald, t.passes_balance, ""))
        except (DataError, NumericError) as exc:
            rows.append((int(group), np.nan, np.nan, np.nan, np.nan, False, False, str(exc)))
    return pd.DataFrame(
        rows,
        columns=["disease_group", "coefficient", "se", "p_value", "std_diff", "passes_wald", "passes_balance", "note"],
    )
