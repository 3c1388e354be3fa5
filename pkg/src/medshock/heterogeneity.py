"""Subsample effect estimation and model-based recursive partitioning.

Subsamples are keyed on the treated member's attributes so both arms of a
pair move together and the matched design stays balanced. The partitioner
fits the triple-difference model per node, tests parameter stability across
shock-year categories with a score-based chi-square, splits at the
RSS-minimizing binary cutpoint over ordered years, and post-prunes on BIC.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from medshock._validation import DataError, NumericError, require_columns
from medshock.estimator import EstimationResult, cluster_ols_demeaned, estimate_dd, estimate_ddd


@dataclass(frozen=True)
class SubsampleSpec:
    """Named pair-level predicate over the panel's treated-member attributes."""

    name: str
    mask: Callable[[pd.DataFrame], pd.Series]


def default_subsample_specs(panel: pd.DataFrame) -> list[SubsampleSpec]:
    """The standard heterogeneity dimensions available in this panel."""
    specs = [
        SubsampleSpec("men", lambda p: p["gender"] == 1),
        SubsampleSpec("women", lambda p: p["gender"] == 0),
        SubsampleSpec("single", lambda p: p["marital_flag"] == 0),
        SubsampleSpec("married", lambda p: p["marital_flag"] == 1),
        SubsampleSpec("below_60", lambda p: p["age_at_shock"] < 60),
        SubsampleSpec("above_60", lambda p: p["age_at_shock"] >= 60),
        SubsampleSpec("compulsory_education", lambda p: p["schooling_years"] <= 9),
        SubsampleSpec("higher_education", lambda p: p["schooling_years"] > 9),
        SubsampleSpec("liquidity_constrained", lambda p: p["liquidity_flag"] == 1),
        SubsampleSpec("not_constrained", lambda p: p["liquidity_flag"] == 0),
        SubsampleSpec("cancer", lambda p: p["disease_group"] <= 24),
        SubsampleSpec("other_than_cancer", lambda p: p["disease_group"] > 24),
    ]
    specs = [s for s in specs if _columns_of(s) <= set(panel.columns)]
    for chapter in sorted(panel["chapter"].dropna().unique()) if "chapter" in panel.columns else []:
        specs.append(SubsampleSpec(f"chapter_{chapter}", lambda p, c=chapter: p["chapter"] == c))
    if "stay_days" in panel.columns and panel["stay_days"].notna().any():
        for lo, hi in ((0, 3), (3, 7), (7, 14), (14, np.inf)):
            label = f"stay_{lo}_{'' if np.isinf(hi) else hi}".rstrip("_") + ("plus" if np.isinf(hi) else "")
            specs.append(SubsampleSpec(label, lambda p, a=lo, b=hi: (p["stay_days"] > a) & (p["stay_days"] <= b)))
    if "shock_year" in panel.columns:
        y0 = int(panel["shock_year"].min())
        y1 = int(panel["shock_year"].max())
        for start in range(y0 - y0 % 5, y1 + 1, 5):
            end = start + 4
            specs.append(
                SubsampleSpec(
                    f"cohort_{start}_{end}",
                    lambda p, a=start, b=end: (p["shock_year"] >= a) & (p["shock_year"] <= b),
                )
            )
    return specs


_SPEC_COLUMNS = {
    "men": {"gender"},
    "women": {"gender"},
    "single": {"marital_flag"},
    "married": {"marital_flag"},
    "below_60": {"age_at_shock"},
    "above_60": {"age_at_shock"},
    "compulsory_education": {"schooling_years"},
    "higher_education": {"schooling_years"},
    "liquidity_constrained": {"liquidity_flag"},
    "not_constrained": {"liquidity_flag"},
    "cancer": {"disease_group"},
    "other_than_cancer": {"disease_group"},
}


def _columns_of(spec: SubsampleSpec) -> set:
    return _SPEC_COLUMNS.get(spec.name, set())


def subsample_estimates(
    panel: pd.DataFrame,
    specs,
    *,
    estimator: str = "dd",
    outcome: str = "family_income",
    measure: str = "nme",
    by_event_year: bool = False,
) -> pd.DataFrame:
    """One estimation per subsample; unidentified subsamples are recorded, not fatal."""
    rows = []
    for spec in specs:
        try:
            mask = spec.mask(panel).fillna(False).to_numpy(dtype=bool)
            sub = panel.loc[mask]
            if sub.empty:
                raise DataError("subsample matched zero rows")
            if estimator == "dd":
                result = estimate_dd(sub, outcome, by_event_year=by_event_year)
            else:
                result = estimate_ddd(sub, outcome, measure=measure, by_event_year=by_event_year)
            for term in result.terms:
                rows.append(
                    {
                        "subsample": spec.name,
                        "term": term,
                        "estimate": result.coef[term],
                        "se": result.se(term),
                        "p": result.pvalue(term),
                        "n": result.n_rows,
                        "clusters": result.n_clusters,
                        "note": "",
                    }
                )
        except (DataError, NumericError) as exc:
            rows.append(
                {
                    "subsample": spec.name,
                    "term": "",
                    "estimate": np.nan,
                    "se": np.nan,
                    "p": np.nan,
                    "n": 0,
                    "clusters": 0,
                    "note": str(exc),
                }
            )
    return pd.DataFrame(rows)


@dataclass
class PartitionNode:
    """Node of the shock-year partition tree; leaves have no split year."""

    node_id: int
    year_min: int
    year_max: int
    n_rows: int
    n_pairs: int
    instability_p: float | None = None
    split_year: int | None = None
    children: list = field(default_factory=list)
    fit: EstimationResult | None = None
    rss: float = float("nan")
    reason: str = ""

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def leaves(self) -> list:
        if self.is_leaf:
            return [self]
        return [leaf for child in self.children for leaf in child.leaves()]

    def depth(self) -> int:
        if self.is_leaf:
            return 1
        return 1 + max(child.depth() for child in self.children)

    def describe(self, indent: int = 0) -> str:
        pad = "  " * indent
        beta = self.fit.coef.get("ddm") if self.fit else None
        beta_txt = f" ddm={beta:.4f}" if beta is not None else ""
        p_txt = f" p={self.instability_p:.3g}" if self.instability_p is not None else ""
        if self.is_leaf:
            why = f" [{self.reason}]" if self.reason else ""
            return f"{pad}leaf years {self.year_min}-{self.year_max} pairs={self.n_pairs}{beta_txt}{p_txt}{why}"
        lines = [f"{pad}split at {self.split_year} (years {self.year_min}-{self.year_max}, pairs={self.n_pairs}){beta_txt}{p_txt}"]
        lines += [child.describe(indent + 1) for child in self.children]
        return "\n".join(lines)


_MOB_TERMS = ["post", "dd", "ddm", "postm"]


class MobPartitioner(BaseEstimator):
    """Model-based recursive partitioning of the mitigation model over shock year.

    Per node: (1) fit the triple-difference model on demeaned data; (2) form
    per-observation score contributions (regressor times residual), summed to
    the experimental-id level so serial correlation within a person cannot
    distort the test; (3) aggregate id scores by shock-year category and form
    the chi-square statistic sum_c S_c' (G_c V)^-1 S_c with V the outer
    product of id-level scores and (C-1)*k degrees of freedom; (4) if its
    p-value is below ``alpha``, split at the binary cutpoint over ordered
    years minimizing the children's total RSS, requiring ``min_node`` pairs
    per child; (5) recurse; (6) post-prune any split whose segmented model
    raises BIC, with BIC = n*ln(RSS/n) + params*ln(n).
    """

    def __init__(
        self,
        alpha: float = 0.001,
        min_node: int = 30,
        measure: str = "nme",
        outcome: str = "family_income",
    ):
        self.alpha = alpha
        self.min_node = min_node
        self.measure = measure
        self.outcome = outcome

    def fit(self, panel: pd.DataFrame) -> "MobPartitioner":
        m_col = f"m_{self.measure}"
        require_columns(panel, ["experimental_id", "pair_id", "shock_year", "post", "dd", m_col, self.outcome], "panel")
        work = panel[["experimental_id", "pair_id", "shock_year", "post", "dd", m_col, self.outcome]].copy()
        work = work.loc[work[self.outcome].notna()]
        if work.empty:
            raise DataError(f"no usable rows for outcome {self.outcome!r}")

        ids, _ = pd.factorize(work["experimental_id"], sort=True)
        counts = np.bincount(ids)
        keep = counts[ids] >= 2
        work = work.loc[keep]
        ids = pd.factorize(ids[keep], sort=True)[0]
        counts = np.bincount(ids)

        m = work[m_col].to_numpy(dtype=np.float64)
        X = np.column_stack(
            [
                work["post"].to_numpy(dtype=np.float64),
                work["dd"].to_numpy(dtype=np.float64),
                work["dd"].to_numpy(dtype=np.float64) * m,
                work["post"].to_numpy(dtype=np.float64) * m,
            ]
        )
        Y = work[self.outcome].to_numpy(dtype=np.float64)
        Y = Y - (np.bincount(ids, weights=Y) / counts)[ids]
        for j in range(X.shape[1]):
            X[:, j] -= (np.bincount(ids, weights=X[:, j]) / counts)[ids]

        years_row = work["shock_year"].to_numpy(dtype=np.int64)
        order = np.lexsort((ids, years_row))
        X = X[order]
        Y = Y[order]
        ids = ids[order]
        years_row = years_row[order]
        pair_row = work["pair_id"].to_numpy()[order]

        years = np.unique(years_row)
        starts = np.searchsorted(years_row, years)
        bounds = np.append(starts, len(years_row))
        k = X.shape[1]
        n_years = len(years)
        gram = np.empty((n_years, k, k))
        xty = np.empty((n_years, k))
        yty = np.empty(n_years)
        n_pairs_year = np.empty(n_years, dtype=np.int64)
        for v in range(n_years):
            sl = slice(bounds[v], bounds[v + 1])
            Xv = X[sl]
            gram[v] = Xv.T @ Xv
            xty[v] = Xv.T @ Y[sl]
            yty[v] = float(Y[sl] @ Y[sl])
            n_pairs_year[v] = len(np.unique(pair_row[sl]))

        state = _MobState(
            X=X, Y=Y, ids=ids, years_row=years_row, years=years, bounds=bounds,
            gram=gram, xty=xty, yty=yty, n_pairs_year=n_pairs_year,
            alpha=self.alpha, min_node=self.min_node, outcome=self.outcome, measure=self.measure,
        )
        self._counter = 0
        root = self._grow(state, 0, n_years)
        self._prune(root)
        self._renumber(root)
        self.tree_ = root
        return self

    # -- growing -----------------------------------------------------------

    def _grow(self, state: "_MobState", a: int, b: int) -> PartitionNode:
        node_rows = slice(state.bounds[a], state.bounds[b])
        n_rows = node_rows.stop - node_rows.start
        n_pairs = int(state.n_pairs_year[a:b].sum())
        node = PartitionNode(
            node_id=self._next_id(),
            year_min=int(state.years[a]),
            year_max=int(state.years[b - 1]),
            n_rows=n_rows,
            n_pairs=n_pairs,
        )
        G = state.gram[a:b].sum(axis=0)
        h = state.xty[a:b].sum(axis=0)
        q = float(state.yty[a:b].sum())
        try:
            beta = np.linalg.solve(G, h)
        except np.linalg.LinAlgError:
            node.reason = "degenerate design"
            return node
        node.rss = max(q - float(h @ beta), 0.0)
        try:
            node.fit = self._node_result(state, node_rows, beta)
        except NumericError as exc:
            node.reason = str(exc)
            return node

        if b - a < 2:
            node.reason = "single shock year"
            return node
        if n_pairs < 2 * self.min_node:
            node.reason = "below minimum size"
            return node

        p_value = self._instability_p(state, a, b, beta, node_rows)
        node.instability_p = p_value
        if not (p_value < self.alpha):
            node.reason = "no instability"
            return node

        cut = self._best_cut(state, a, b)
        if cut is None:
            node.reason = "no admissible cutpoint"
            return node
        node.split_year = int(state.years[cut])
        node.children = [self._grow(state, a, cut), self._grow(state, cut, b)]
        return node

    def _node_result(self, state: "_MobState", rows: slice, beta: np.ndarray) -> EstimationResult:
        ids = state.ids[rows]
        local = pd.factorize(ids, sort=True)[0]
        result = cluster_ols_demeaned(
            state.X[rows], state.Y[rows], local, _MOB_TERMS, outcome=state.outcome, spec=f"ddd:{state.measure}"
        )
        return result

    def _instability_p(self, state: "_MobState", a: int, b: int, beta: np.ndarray, rows: slice) -> float:
        X = state.X[rows]
        resid = state.Y[rows] - X @ beta
        scores = X * resid[:, None]
        local_ids, uniq = pd.factorize(state.ids[rows], sort=True)
        G = len(uniq)
        k = X.shape[1]
        id_scores = np.column_stack([np.bincount(local_ids, weights=scores[:, j], minlength=G) for j in range(k)])
        # id -> year category: shock year is constant within an id
        first_row = np.full(G, -1, dtype=np.int64)
        first_row[local_ids[::-1]] = np.arange(len(local_ids) - 1, -1, -1)
        id_year = state.years_row[rows][first_row]
        cats = np.searchsorted(state.years[a:b], id_year)
        C = b - a
        V = (id_scores.T @ id_scores) / G
        Vinv = scipy.linalg.pinvh(V)
        lm = 0.0
        for c in range(C):
            sel = cats == c
            g_c = int(sel.sum())
            if g_c == 0:
                continue
            S_c = id_scores[sel].sum(axis=0)
            lm += float(S_c @ Vinv @ S_c) / g_c
        df = (C - 1) * k
        if df <= 0:
            return 1.0
        return float(stats.chi2.sf(lm, df))

    def _best_cut(self, state: "_MobState", a: int, b: int):
        pair_prefix = np.concatenate([[0], np.cumsum(state.n_pairs_year[a:b])])
        best = None
        for c in range(a + 1, b):
            left_pairs = pair_prefix[c - a]
            right_pairs = pair_prefix[b - a] - left_pairs
            if left_pairs < self.min_node or right_pairs < self.min_node:
                continue
            rss = 0.0
            ok = True
            for lo, hi in ((a, c), (c, b)):
                G = state.gram[lo:hi].sum(axis=0)
                h = state.xty[lo:hi].sum(axis=0)
                q = float(state.yty[lo:hi].sum())
                try:
                    beta = np.linalg.solve(G, h)
                except np.linalg.LinAlgError:
                    ok = False
                    break
                rss += max(q - float(h @ beta), 0.0)
            if ok and (best is None or rss < best[1]):
                best = (c, rss)
        return best[0] if best else None

    # -- pruning -----------------------------------------------------------

    def _prune(self, node: PartitionNode) -> None:
        if node.is_leaf:
            return
        for child in node.children:
            self._prune(child)
        leaves = node.leaves()
        rss_sub = sum(leaf.rss for leaf in leaves)
        n = node.n_rows
        k = len(_MOB_TERMS)
        bic_single = n * np.log(max(node.rss, 1e-300) / n) + k * np.log(n)
        bic_sub = n * np.log(max(rss_sub, 1e-300) / n) + k * len(leaves) * np.log(n)
        if bic_sub > bic_single:
            node.children = []
            node.split_year = None
            node.reason = "pruned by BIC"

    def _renumber(self, root: PartitionNode) -> None:
        counter = 0
        stack = [root]
        while stack:
            node = stack.pop()
            node.node_id = counter
            counter += 1
            stack.extend(reversed(node.children))

    def _next_id(self) -> int:
        self._counter += 1
        return self._counter - 1

    @property
    def root_(self) -> PartitionNode:
        if not hasattr(self, "tree_"):
            raise NotFittedError("MobPartitioner is not fitted")
        return self.tree_


@dataclass
class _MobState:
    X: np.ndarray
    Y: np.ndarray
    ids: np.ndarray
    years_row: np.ndarray
    years: np.ndarray
    bounds: np.ndarray
    gram: np.ndarray
    xty: np.ndarray
    yty: np.ndarray
    n_pairs_year: np.ndarray
    alpha: float
    min_node: int
    outcome: str
    measure: str


def mob_partition(
    panel: pd.DataFrame,
    alpha: float = 0.001,
    min_node: int = 30,
    measure: str = "nme",
    outcome: str = "family_income",
) -> PartitionNode:
    """Fit the partition tree for one disease group's panel; returns the root."""
    return MobPartitioner(alpha=alpha, min_node=min_node, measure=measure, outcome=outcome).fit(panel).tree_


def partition_by_group(
    panel: pd.DataFrame,
    alpha: float = 0.001,
    min_node: int = 30,
    measure: str = "nme",
    outcome: str = "family_income",
    threads: int = 1,
) -> dict[int, PartitionNode]:
    """Run the partitioner independently for every disease group."""
    groups = sorted(int(g) for g in panel["disease_group"].unique())

    def _one(group: int) -> tuple[int, PartitionNode]:
        sub = panel.loc[panel["disease_group"] == group]
        try:
            return group, mob_partition(sub, alpha=alpha, min_node=min_node, measure=measure, outcome=outcome)
        except (DataError, NumericError) as exc:
            leaf = PartitionNode(
                node_id=0,
                year_min=int(sub["shock_year"].min()),
                year_max=int(sub["shock_year"].max()),
                n_rows=len(sub),
                n_pairs=int(sub["pair_id"].nunique()) if "pair_id" in sub.columns else 0,
                reason=str(exc),
            )
            return group, leaf

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one, groups))
    else:
        results = [_one(g) for g in groups]
    return dict(sorted(results))


def report_partition(trees: dict[int, PartitionNode]) -> pd.DataFrame:
    """Tabulate the root split year (or 'No instability') per disease group."""
    rows = []
    for group in sorted(trees):
        root = trees[group]
        split = str(root.split_year) if root.split_year is not None else "No instability"
        rows.append(
            {
                "disease_group": group,
                "split": split,
                "instability_p": root.instability_p if root.instability_p is not None else np.nan,
                "depth": root.depth(),
                "n_leaves": len(root.leaves()),
                "n_pairs": root.n_pairs,
            }
        )
    return pd.DataFrame(rows)
