"""Matched event-study engine for health-shock economics.

Builds not-yet-treated counterfactuals by caliper propensity matching,
stacks matched pairs into aligned event-year panels, estimates DD/DDD
fixed-effects models with cluster-robust inference, and verifies the whole
chain against a seeded synthetic register with planted effects.
"""

__version__ = "0.1.0"

from medshock.registry import Deflator, HealthShock, PersonRecord, Registry, deflate, ihs, load_registry
from medshock.innovation import (
    InnovationEvent,
    InnovationSeries,
    build_series,
    detrend,
    effect_percent,
    filter_international,
    lag,
    series_sd,
)
from medshock.matching import (
    CaliperMatcher,
    MatchedPair,
    MatchResult,
    PropensityModel,
    balance_report,
    fit_propensity,
    match,
    standardized_difference,
)
from medshock.stacking import attach_event_dummies, build_panel
from medshock.estimator import (
    EstimationResult,
    FixedEffectsOLS,
    PreTrendTest,
    estimate_dd,
    estimate_ddd,
    fit_fe_ols,
    pretrend_test,
    within_transform,
)
from medshock.heterogeneity import (
    MobPartitioner,
    PartitionNode,
    SubsampleSpec,
    mob_partition,
    partition_by_group,
    report_partition,
    subsample_estimates,
)
from medshock.robustness import cohort_aggregated_att, estimate_with_icd_eventyear_fe, run_battery
from medshock.simulator import DgpConfig, oracle_compare, simulate, simulate_panel

__all__ = [
    "CaliperMatcher",
    "Deflator",
    "DgpConfig",
    "EstimationResult",
    "FixedEffectsOLS",
    "HealthShock",
    "InnovationEvent",
    "InnovationSeries",
    "MatchResult",
    "MatchedPair",
    "MobPartitioner",
    "PartitionNode",
    "PersonRecord",
    "PreTrendTest",
    "PropensityModel",
    "Registry",
    "SubsampleSpec",
    "attach_event_dummies",
    "balance_report",
    "build_panel",
    "build_series",
    "cohort_aggregated_att",
    "deflate",
    "detrend",
    "effect_percent",
    "estimate_dd",
    "estimate_ddd",
    "estimate_with_icd_eventyear_fe",
    "filter_international",
    "fit_fe_ols",
    "fit_propensity",
    "ihs",
    "lag",
    "load_registry",
    "match",
    "mob_partition",
    "oracle_compare",
    "partition_by_group",
    "pretrend_test",
    "report_partition",
    "run_battery",
    "series_sd",
    "simulate",
    "simulate_panel",
    "standardized_difference",
    "subsample_estimates",
    "within_transform",
]
