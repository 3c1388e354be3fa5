"""Not-yet-treated counterfactual construction.

Each treated unit (shock in year s) is matched within its exact stratum
(disease group, gender, candidate shocked in s+2) to the nearest pool unit on
the logit propensity scale, greedily and without replacement, subject to a
caliper of ``caliper_mult`` standard deviations of the logit scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from medshock._validation import (
    ConvergenceError,
    DataError,
    PerfectSeparationError,
    as_float_array,
    require_columns,
)
from medshock.registry import CHAPTER_OF, Registry

#: Covariates entering the propensity score, in design order after the intercept.
MATCH_COVARIATES = ("birth_year", "schooling_years", "ihs_earnings_38_39")

_KEY_COLUMNS = ("person_id", "disease_group", "shock_year", "gender")


class PropensityModel(BaseEstimator):
    """Logistic regression of treatment on matching covariates, fit by IRLS.

    Covariates are standardized internally for numerical stability; reported
    coefficients are on the original scale, intercept first. Convergence
    requires the score norm on the standardized design to fall below ``tol``.
    """

    def __init__(self, max_iter: int = 100, tol: float = 1e-8):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y) -> "PropensityModel":
        X = as_float_array(X, "covariates", ndim=2)
        y = as_float_array(y, "treatment indicator", ndim=1)
        if X.shape[0] != y.shape[0]:
            raise DataError("covariates and treatment indicator differ in length")
        if not np.isin(y, (0.0, 1.0)).all():
            raise DataError("treatment indicator must be 0/1")
        n1 = int(y.sum())
        n0 = len(y) - n1
        if min(n0, n1) < 10:
            raise DataError(f"need >= 10 observations per class, got treated={n1}, pool={n0}")

        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd == 0.0, 1.0, sd)
        Z = np.column_stack([np.ones(len(y)), (X - mu) / sd])

        beta = np.zeros(Z.shape[1])
        grad_norm = np.inf
        converged = False
        for it in range(1, self.max_iter + 1):
            eta = np.clip(Z @ beta, -35.0, 35.0)
            p = 1.0 / (1.0 + np.exp(-eta))
            # a perfectly classified sample means an unbounded likelihood, even
            # though saturation makes the score norm vanish numerically
            if np.max(np.abs(eta)) >= 15.0 and self._separated(p, y):
                raise PerfectSeparationError(
                    "perfect separation between treated and pool covariates; "
                    "drop the propensity score and match on the exact keys only"
                )
            grad = Z.T @ (y - p)
            grad_norm = float(np.linalg.norm(grad))
            if grad_norm < self.tol:
                converged = True
                break
            w = np.sqrt(np.clip(p * (1.0 - p), 1e-12, None))
            step, *_ = np.linalg.lstsq(w[:, None] * Z, (y - p) / w, rcond=None)
            beta = beta + step
        else:
            it = self.max_iter
        if not converged:
            p = 1.0 / (1.0 + np.exp(-np.clip(Z @ beta, -35.0, 35.0)))
            if self._separated(p, y):
                raise PerfectSeparationError(
                    "perfect separation between treated and pool covariates; "
                    "drop the propensity score and match on the exact keys only"
                )
            raise ConvergenceError(
                f"IRLS did not converge in {self.max_iter} iterations (score norm {grad_norm:.3g})"
            )

        slopes = beta[1:] / sd
        self.coef_ = np.concatenate([[beta[0] - float(slopes @ mu)], slopes])
        self.scaled_coef_ = beta
        self.center_ = mu
        self.scale_ = sd
        self.n_iter_ = it
        self.score_norm_ = grad_norm
        self.n_treated_ = n1
        self.n_pool_ = n0
        return self

    @staticmethod
    def _separated(p: np.ndarray, y: np.ndarray) -> bool:
        eps = 1e-8
        return bool(p[y == 1.0].min(initial=1.0) > 1.0 - eps and p[y == 0.0].max(initial=0.0) < eps)

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise NotFittedError("PropensityModel is not fitted")

    def decision_function(self, X) -> np.ndarray:
        """Logit-scale propensity scores on the original covariate scale."""
        self._check_fitted()
        X = as_float_array(X, "covariates", ndim=2)
        return self.coef_[0] + X @ self.coef_[1:]

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        p = 1.0 / (1.0 + np.exp(-np.clip(self.decision_function(X), -35.0, 35.0)))
        return np.column_stack([1.0 - p, p])


def fit_propensity(treated_covariates, pool_covariates, **kwargs) -> PropensityModel:
    """Fit the treated-vs-pool propensity model on the three matching covariates."""
    t = _covariate_matrix(treated_covariates)
    c = _covariate_matrix(pool_covariates)
    X = np.vstack([t, c])
    y = np.concatenate([np.ones(len(t)), np.zeros(len(c))])
    return PropensityModel(**kwargs).fit(X, y)


def _covariate_matrix(data) -> np.ndarray:
    if isinstance(data, pd.DataFrame):
        require_columns(data, MATCH_COVARIATES, "covariates")
        return data.loc[:, list(MATCH_COVARIATES)].to_numpy(dtype=np.float64)
    return as_float_array(data, "covariates", ndim=2)


@dataclass(frozen=True)
class MatchedPair:
    treated_person_id: int
    control_person_id: int
    disease_group: int
    shock_year: int
    gender: int
    propensity_distance: float


@dataclass
class MatchResult:
    pairs: pd.DataFrame
    n_treated: int
    caliper: float
    unmatched: pd.DataFrame
    model: PropensityModel | None = None

    @property
    def n_matched(self) -> int:
        return len(self.pairs)

    @property
    def match_rate(self) -> float:
        return self.n_matched / self.n_treated if self.n_treated else 0.0

    def iter_pairs(self):
        for r in self.pairs.itertuples(index=False):
            yield MatchedPair(
                treated_person_id=int(r.treated_id),
                control_person_id=int(r.control_id),
                disease_group=int(r.disease_group),
                shock_year=int(r.shock_year),
                gender=int(r.gender),
                propensity_distance=float(r.distance),
            )


PAIR_COLUMNS = ["treated_id", "control_id", "disease_group", "shock_year", "gender", "distance"]


class CaliperMatcher(BaseEstimator):
    """Greedy nearest-neighbor caliper matching without replacement.

    Treated units are processed in descending propensity score (ties broken
    by person id) so the run is deterministic; each control person is
    consumed at most once across the whole run.
    """

    def __init__(self, caliper_mult: float = 0.2):
        self.caliper_mult = caliper_mult

    def fit(self, treated: pd.DataFrame, pool: pd.DataFrame, model: PropensityModel) -> "CaliperMatcher":
        if self.caliper_mult < 0:
            raise DataError(f"caliper_mult must be >= 0, got {self.caliper_mult}")
        for name, frame in (("treated", treated), ("pool", pool)):
            require_columns(frame, _KEY_COLUMNS + MATCH_COVARIATES, name)
        if treated.empty:
            raise DataError("no treated units to match")

        t_scores = model.decision_function(_covariate_matrix(treated))
        p_scores = model.decision_function(_covariate_matrix(pool)) if len(pool) else np.empty(0)
        all_scores = np.concatenate([t_scores, p_scores])
        score_sd = float(all_scores.std(ddof=1)) if len(all_scores) > 1 else 0.0
        caliper = self.caliper_mult * score_sd

        # pool entry with its own shock in year s serves treated shocked in s-2
        pool_key = pd.MultiIndex.from_arrays(
            [pool["disease_group"], pool["gender"], pool["shock_year"] - 2]
        )
        strata: dict[tuple, dict] = {}
        for pos, key in enumerate(pool_key):
            strata.setdefault(key, {"pos": []})["pos"].append(pos)

        t_order = np.lexsort((treated["person_id"].to_numpy(), -t_scores))
        used_controls: set[int] = set()
        pairs: list[tuple] = []
        unmatched: list[tuple] = []
        pool_ids = pool["person_id"].to_numpy()
        for stratum in strata.values():
            pos = np.asarray(stratum["pos"])
            order = np.lexsort((pool_ids[pos], p_scores[pos]))
            stratum["pos"] = pos[order]
            stratum["scores"] = p_scores[pos][order]
            stratum["alive"] = np.ones(len(pos), dtype=bool)

        for i in t_order:
            row = treated.iloc[i]
            key = (row["disease_group"], row["gender"], row["shock_year"])
            stratum = strata.get(key)
            best = None
            if stratum is not None:
                best = self._nearest(stratum, float(t_scores[i]), pool_ids, used_controls)
            if best is None or best[1] > caliper:
                unmatched.append((int(row["person_id"]), int(row["disease_group"]), int(row["shock_year"]), int(row["gender"])))
                continue
            j, dist = best
            stratum["alive"][j] = False
            cid = int(pool_ids[stratum["pos"][j]])
            used_controls.add(cid)
            pairs.append(
                (
                    int(row["person_id"]),
                    cid,
                    int(row["disease_group"]),
                    int(row["shock_year"]),
                    int(row["gender"]),
                    float(dist),
                )
            )

        pairs_df = pd.DataFrame(pairs, columns=PAIR_COLUMNS)
        pairs_df = pairs_df.sort_values(["disease_group", "shock_year", "gender", "treated_id"]).reset_index(drop=True)
        self.result_ = MatchResult(
            pairs=pairs_df,
            n_treated=len(treated),
            caliper=caliper,
            unmatched=pd.DataFrame(unmatched, columns=["person_id", "disease_group", "shock_year", "gender"]),
            model=model,
        )
        return self

    @staticmethod
    def _nearest(stratum, score: float, pool_ids: np.ndarray, used: set):
        """Closest alive control by |logit gap|; scan outward from the insertion point."""
        scores = stratum["scores"]
        alive = stratum["alive"]
        n = len(scores)
        k = int(np.searchsorted(scores, score))
        left, right = k - 1, k
        best = None
        while left >= 0 or right < n:
            d_left = score - scores[left] if left >= 0 else np.inf
            d_right = scores[right] - score if right < n else np.inf
            if best is not None and best[1] <= min(d_left, d_right):
                break
            if d_left <= d_right:
                j, d = left, d_left
                left -= 1
            else:
                j, d = right, d_right
                right += 1
            if not alive[j] or int(pool_ids[stratum["pos"][j]]) in used:
                continue
            if best is None or d < best[1]:
                best = (j, d)
        return best


def match(treated: pd.DataFrame, pool: pd.DataFrame, model: PropensityModel, caliper_mult: float = 0.2) -> MatchResult:
    """Match treated units to pool units; returns pairs and match-rate metadata.

    Treated units with an empty stratum or no pool unit inside the caliper are
    recorded as unmatched, not fatal.
    """
    return CaliperMatcher(caliper_mult=caliper_mult).fit(treated, pool, model).result_


def build_match_inputs(registry: Registry) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Derive the treated list and the not-yet-treated pool from the register.

    Every shock defines a treated unit. The same shock also makes its person a
    pool candidate for units shocked two years earlier, unless the person has
    another admission inside that earlier unit's event window [s-3, s+1].
    """
    shocks = registry.shocks.merge(
        registry.persons[["person_id"] + list(MATCH_COVARIATES) + ["gender"]]
        if "gender" not in MATCH_COVARIATES
        else registry.persons[["person_id"] + list(MATCH_COVARIATES)],
        on="person_id",
        how="left",
    )
    treated = shocks[list(_KEY_COLUMNS) + list(MATCH_COVARIATES)].copy()

    pool = shocks.copy()
    counts = registry.shocks.groupby("person_id").size()
    multi = set(counts[counts > 1].index)
    if multi:
        keep = np.ones(len(pool), dtype=bool)
        by_person = registry.shocks.groupby("person_id")["shock_year"].agg(list)
        for i, r in enumerate(pool.itertuples(index=False)):
            if r.person_id in multi:
                s = r.shock_year - 2  # the served treated unit's clock
                others = [y for y in by_person[r.person_id] if y != r.shock_year]
                if any(s - 3 <= y <= s + 1 for y in others):
                    keep[i] = False
        pool = pool.loc[keep]
    pool = pool[list(_KEY_COLUMNS) + list(MATCH_COVARIATES)].reset_index(drop=True)
    return treated, pool


def standardized_difference(x_treated, x_control) -> float:
    """Scale-free mean gap: (mean_t - mean_c) / sqrt((var_t + var_c) / 2)."""
    t = as_float_array(x_treated, "treated sample", ndim=1)
    c = as_float_array(x_control, "control sample", ndim=1)
    if len(t) == 0 or len(c) == 0:
        raise DataError("standardized_difference: empty sample")
    var_t = t.var(ddof=1) if len(t) > 1 else 0.0
    var_c = c.var(ddof=1) if len(c) > 1 else 0.0
    pooled = (var_t + var_c) / 2.0
    gap = float(t.mean() - c.mean())
    if pooled <= 0.0:
        if gap == 0.0:
            return 0.0
        warnings.warn("standardized_difference: zero pooled variance with unequal means", stacklevel=2)
        return float(np.inf) if gap > 0 else float(-np.inf)
    return gap / float(np.sqrt(pooled))


BALANCE_THRESHOLD = 0.1


@dataclass
class BalanceReport:
    table: pd.DataFrame
    passed: bool = field(default=False)

    def __post_init__(self):
        overall = self.table[self.table["scope"] == "overall"]
        self.passed = bool((overall["std_diff"].abs() < BALANCE_THRESHOLD).all())


def balance_report(pairs, persons: pd.DataFrame, covariates=MATCH_COVARIATES) -> BalanceReport:
    """Standardized differences per covariate, overall and by diagnosis chapter."""
    frame = pairs.pairs if isinstance(pairs, MatchResult) else pairs
    if frame.empty:
        raise DataError("balance_report: no matched pairs")
    require_columns(frame, ("treated_id", "control_id", "disease_group"), "pairs")
    require_columns(persons, ("person_id",) + tuple(covariates), "persons")

    cov = persons.set_index("person_id")[list(covariates)]
    t = cov.loc[frame["treated_id"]].reset_index(drop=True)
    c = cov.loc[frame["control_id"]].reset_index(drop=True)
    chapters = frame["disease_group"].map(CHAPTER_OF)

    rows = []
    for name in covariates:
        d = standardized_difference(t[name], c[name])
        rows.append(("overall", name, d, abs(d) < BALANCE_THRESHOLD))
    for chapter in sorted(chapters.unique()):
        mask = (chapters == chapter).to_numpy()
        for name in covariates:
            d = standardized_difference(t.loc[mask, name], c.loc[mask, name])
            rows.append((chapter, name, d, abs(d) < BALANCE_THRESHOLD))
    return BalanceReport(table=pd.DataFrame(rows, columns=["scope", "covariate", "std_diff", "balanced"]))
