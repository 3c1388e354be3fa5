"""Pipeline orchestration: simulate -> ingest -> match -> stack -> estimate
-> diagnose -> partition -> robust, with file handoff between stages.

Every output CSV starts with a comment header recording version, seed, and
config hash. Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure; errors print a single machine-parseable line.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import pandas as pd

from medshock import __version__
from medshock._validation import DataError, NumericError
from medshock.estimator import estimate_dd, estimate_ddd, pretrend_by_group
from medshock.heterogeneity import default_subsample_specs, partition_by_group, report_partition, subsample_estimates
from medshock.innovation import build_series, detrend, filter_international, lag, load_events
from medshock.matching import balance_report, build_match_inputs, fit_propensity, match
from medshock.registry import load_registry
from medshock.robustness import VARIANTS, run_battery
from medshock.simulator import DgpConfig, oracle_compare, simulate
from medshock.stacking import build_panel, read_panel, write_panel

_USAGE_EXIT = 1
_DATA_EXIT = 2
_NUMERIC_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, with the parseable prefix
        print(f"medshock: error[usage]: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        raise SystemExit(_USAGE_EXIT)


class _Context:
    def __init__(self, args):
        self.out = Path(args.out)
        self.seed = args.seed
        self.threads = max(int(getattr(args, "threads", 1) or 1), 1)
        options = {
            k: v
            for k, v in sorted(vars(args).items())
            if k not in ("func", "out", "config") and not callable(v)
        }
        payload = json.dumps(options, sort_keys=True, default=str).encode("utf-8")
        self.config_hash = hashlib.sha256(payload).hexdigest()[:12]

    def header(self) -> str:
        return f"medshock {__version__} seed={self.seed} config={self.config_hash}"

    def write_csv(self, frame: pd.DataFrame, name: str, float_format: str | None = None) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# {self.header()}\n")
            frame.to_csv(fh, index=False, lineterminator="\n", float_format=float_format)
        return path

    def write_json(self, payload: dict, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        meta = {"version": __version__, "seed": self.seed, "config": self.config_hash}
        path.write_text(json.dumps({"_meta": meta, **payload}, indent=2, sort_keys=True), encoding="utf-8")
        return path

    def write_text(self, text: str, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(f"# {self.header()}\n{text}\n", encoding="utf-8")
        return path


def _require_file(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path.name}: {hint}")
    return path


def _load_registry(ctx: _Context, include_emergency: bool = False):
    out = ctx.out
    persons = _require_file(out / "persons.csv", "run `medshock simulate` or place register files in the out directory")
    return load_registry(
        persons,
        _require_file(out / "outcomes.csv", "outcomes.csv must sit beside persons.csv"),
        _require_file(out / "shocks.csv", "shocks.csv must sit beside persons.csv"),
        out / "deflator.csv" if (out / "deflator.csv").exists() else None,
        include_emergency=include_emergency,
    )


def _run_match(registry, caliper: float):
    treated, pool = build_match_inputs(registry)
    model = fit_propensity(
        treated[["birth_year", "schooling_years", "ihs_earnings_38_39"]],
        pool[["birth_year", "schooling_years", "ihs_earnings_38_39"]],
    )
    return match(treated, pool, model, caliper_mult=caliper)


def _build_series(ctx: _Context, lag_years: int, detrended: bool, international: bool):
    events = load_events(_require_file(ctx.out / "innovations.csv", "run `medshock simulate` first"))
    years = [e.year for e in events]
    year_range = (min(years), max(years))
    if international:
        events = filter_international(events)
    series = build_series(events, year_range)
    if detrended:
        series = detrend(series)
    return lag(series, lag_years), events, year_range


# --- stages ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    ctx = _Context(args)
    if args.config:
        config = DgpConfig.from_file(args.config, seed=args.seed)
    else:
        config = DgpConfig(seed=args.seed)
    paths = simulate(config, ctx.out)
    truth = json.loads(Path(paths["truth.json"]).read_text(encoding="utf-8"))
    print(f"simulate: {truth['n_persons']} persons, {truth['n_shocks']} shocks, {truth['n_innovation_events']} innovation events -> {ctx.out}")
    return 0


def cmd_ingest(args) -> int:
    ctx = _Context(args)
    registry = _load_registry(ctx)
    summary = {
        "n_persons": int(registry.n_persons),
        "n_index_persons": int((registry.persons["role"] == "index").sum()),
        "n_outcome_rows": int(len(registry.outcomes)),
        "n_shocks": int(registry.n_shocks),
        "deflator_base_year": registry.deflator.base_year,
    }
    ctx.write_json(summary, "registry_summary.json")
    print(f"ingest: {summary['n_persons']} persons, {summary['n_shocks']} shocks validated")
    return 0


def cmd_match(args) -> int:
    ctx = _Context(args)
    registry = _load_registry(ctx)
    result = _run_match(registry, args.caliper)
    ctx.write_csv(result.pairs, "pairs.csv")
    report = balance_report(result, registry.persons)
    ctx.write_csv(report.table, "balance.csv")
    print(
        f"match: {result.n_matched}/{result.n_treated} treated matched "
        f"({100 * result.match_rate:.1f}%), caliper {result.caliper:.4f}, balance {'pass' if report.passed else 'FAIL'}"
    )
    return 0


def cmd_stack(args) -> int:
    ctx = _Context(args)
    registry = _load_registry(ctx)
    pairs_path = _require_file(ctx.out / "pairs.csv", "run `medshock match` first")
    pairs = pd.read_csv(pairs_path, comment="#")
    series, _, _ = _build_series(ctx, args.lag, args.detrend, args.international)
    panel = build_panel(pairs, registry, series)
    write_panel(panel, ctx.out / "panel.csv", header=ctx.header())
    made_emergency = False
    shocks_raw = pd.read_csv(ctx.out / "shocks.csv", comment="#")
    if "emergency" in shocks_raw.columns and shocks_raw["emergency"].astype(bool).any():
        registry_em = _load_registry(ctx, include_emergency=True)
        result_em = _run_match(registry_em, args.caliper)
        panel_em = build_panel(result_em, registry_em, series)
        write_panel(panel_em, ctx.out / "panel_emergency.csv", header=ctx.header())
        made_emergency = True
    print(f"stack: {len(panel)} rows, {panel['pair_id'].nunique()} pairs{' (+emergency panel)' if made_emergency else ''}")
    return 0


def _panel(ctx: _Context) -> pd.DataFrame:
    path = ctx.out / "panel.csv"
    if not path.exists():
        if not (ctx.out / "pairs.csv").exists():
            raise DataError("missing pairs.csv: run `medshock match` before estimating")
        raise DataError("missing panel.csv: run `medshock stack` before estimating")
    return read_panel(path)


def _with_cluster(panel: pd.DataFrame, cluster: str) -> tuple[pd.DataFrame, str]:
    if cluster == "experimental":
        return panel, "experimental_id"
    work = panel.copy()
    work["cohort_id"] = work.groupby(["disease_group", "shock_year"]).ngroup()
    return work, "cohort_id"


def cmd_estimate(args) -> int:
    ctx = _Context(args)
    panel, cluster_key = _with_cluster(_panel(ctx), args.cluster)
    if args.spec == "dd":
        result = estimate_dd(panel, args.outcome, by_event_year=args.by_event_year, dynamic=args.dynamic, cluster_key=cluster_key)
    else:
        result = estimate_ddd(panel, args.outcome, measure=args.measure, by_event_year=args.by_event_year, cluster_key=cluster_key)
    ctx.write_csv(result.to_frame(), "results.csv")
    payload = result.to_dict()
    if args.spec == "ddd":
        payload["measure"] = args.measure
    ctx.write_json(payload, "results.json")
    if args.subsamples:
        table = subsample_estimates(
            panel,
            default_subsample_specs(panel),
            estimator=args.spec,
            outcome=args.outcome,
            measure=args.measure,
        )
        ctx.write_csv(table, "subsamples.csv")
    print(result.summary())
    return 0


def cmd_diagnose(args) -> int:
    ctx = _Context(args)
    panel = _panel(ctx)
    table = pretrend_by_group(panel, args.outcome)
    ctx.write_csv(table, "pretrend.csv")
    n_pass = int(table["passes_wald"].sum())
    truth = ctx.out / "truth.json"
    results = ctx.out / "results.json"
    if truth.exists() and results.exists():
        report = oracle_compare(truth, results)
        (ctx.out / "oracle.json").write_text(report.to_json(), encoding="utf-8")
        print(f"diagnose: {n_pass}/{len(table)} groups pass the pre-trend test; oracle {'pass' if report.passed else 'FAIL'}")
    else:
        print(f"diagnose: {n_pass}/{len(table)} groups pass the pre-trend test")
    return 0


def cmd_partition(args) -> int:
    ctx = _Context(args)
    panel = _panel(ctx)
    trees = partition_by_group(
        panel,
        alpha=args.alpha,
        min_node=args.min_node,
        measure=args.measure,
        outcome=args.outcome,
        threads=ctx.threads,
    )
    table = report_partition(trees)
    ctx.write_csv(table, "partition.csv")
    dump = "\n".join(f"group {g}:\n{tree.describe(1)}" for g, tree in sorted(trees.items()))
    ctx.write_text(dump, "trees.txt")
    n_split = int((table["split"] != "No instability").sum())
    print(f"partition: {n_split}/{len(table)} groups split (alpha={args.alpha}, min_node={args.min_node})")
    return 0


def cmd_robust(args) -> int:
    ctx = _Context(args)
    panel = _panel(ctx)
    series, events, year_range = _build_series(ctx, args.lag, False, False)
    emergency_path = ctx.out / "panel_emergency.csv"
    emergency_panel = read_panel(emergency_path) if emergency_path.exists() else None
    variants = "all" if args.variants == "all" else [v.strip() for v in args.variants.split(",") if v.strip()]
    table = run_battery(
        panel,
        events=events,
        year_range=year_range,
        lag_years=args.lag,
        outcome=args.outcome,
        variants=variants,
        emergency_panel=emergency_panel,
    )
    ctx.write_csv(table, "robust.csv")
    n_ok = int(table["note"].eq("").sum())
    print(f"robust: {n_ok}/{len(table)} variant runs completed")
    return 0


def cmd_pipeline(args) -> int:
    rc = cmd_simulate(args)
    if rc:
        return rc
    for fn in (cmd_ingest, cmd_match, cmd_stack):
        rc = fn(args)
        if rc:
            return rc
    ctx = _Context(args)
    panel = _panel(ctx)

    dd = estimate_dd(panel, args.outcome)
    ctx.write_csv(dd.to_frame(), "results_dd.csv")
    ctx.write_json(dd.to_dict(), "results_dd.json")
    dyn = estimate_dd(panel, args.outcome, dynamic=True)
    ctx.write_csv(dyn.to_frame(), "results_eventstudy.csv")
    for measure in ("nme", "patent"):
        ddd = estimate_ddd(panel, args.outcome, measure=measure)
        ctx.write_csv(ddd.to_frame(), f"results_ddd_{measure}.csv")
        payload = ddd.to_dict()
        payload["measure"] = measure
        ctx.write_json(payload, f"results_ddd_{measure}.json")
    table = subsample_estimates(panel, default_subsample_specs(panel), estimator="dd", outcome=args.outcome)
    ctx.write_csv(table, "subsamples.csv")
    print(f"estimate: dd={dd.coef['dd']:.4f} (se {dd.se('dd'):.4f}); event-study and ddd written")

    pretrend = pretrend_by_group(panel, args.outcome)
    ctx.write_csv(pretrend, "pretrend.csv")
    report = oracle_compare(ctx.out / "truth.json", ctx.out / f"results_ddd_{args.measure}.json")
    (ctx.out / "oracle.json").write_text(report.to_json(), encoding="utf-8")
    print(f"diagnose: {int(pretrend['passes_wald'].sum())}/{len(pretrend)} groups pass; oracle {'pass' if report.passed else 'FAIL'}")

    rc = cmd_partition(args)
    if rc:
        return rc
    return cmd_robust(args)


# --- argument wiring ---------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="medshock", description=__doc__)
    parser.add_argument("--version", action="version", version=f"medshock {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(p):
        p.add_argument("--out", default=".", help="working directory for stage files")
        p.add_argument("--seed", type=int, default=0, help="run seed, echoed into output headers")
        p.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages")
        p.add_argument("--config", default=None, help="plain-text key=value generator config")

    estimators = dict(
        outcome="family_income",
        measure="nme",
    )

    p = sub.add_parser("simulate", help="generate a synthetic register with planted effects")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="validate register files and summarize them")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("match", help="construct not-yet-treated matched pairs")
    common(p)
    p.add_argument("--caliper", type=float, default=0.2, help="caliper in SDs of the logit propensity score")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("stack", help="expand pairs into the stacked event-year panel")
    common(p)
    p.add_argument("--caliper", type=float, default=0.2)
    p.add_argument("--lag", type=int, default=1, help="lag of the innovation stock")
    p.add_argument("--detrend", action="store_true", help="use detrended innovation stocks")
    p.add_argument("--international", action="store_true", help="use international-origin events only")
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("estimate", help="fixed-effects DD/DDD estimation")
    common(p)
    p.add_argument("--spec", choices=("dd", "ddd"), default="dd")
    p.add_argument("--outcome", default=estimators["outcome"])
    p.add_argument("--measure", choices=("nme", "patent"), default=estimators["measure"])
    p.add_argument("--by-event-year", action="store_true", dest="by_event_year")
    p.add_argument("--dynamic", action="store_true", help="full event-study with reference years -3 and -1")
    p.add_argument("--cluster", choices=("experimental", "cohort"), default="experimental")
    p.add_argument("--subsamples", action="store_true", help="also emit subsample estimates")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("diagnose", help="pre-trend tests per disease group (+ oracle check)")
    common(p)
    p.add_argument("--outcome", default=estimators["outcome"])
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("partition", help="model-based recursive partitioning over shock year")
    common(p)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--min-node", type=int, default=30, dest="min_node")
    p.add_argument("--measure", choices=("nme", "patent"), default=estimators["measure"])
    p.add_argument("--outcome", default=estimators["outcome"])
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("robust", help="robustness battery")
    common(p)
    p.add_argument("--variants", default="all", help="'all' or comma-separated subset of: " + ",".join(VARIANTS))
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--outcome", default=estimators["outcome"])
    p.set_defaults(func=cmd_robust)

    p = sub.add_parser("pipeline", help="simulate through robust in one run")
    common(p)
    p.add_argument("--caliper", type=float, default=0.2)
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--detrend", action="store_true")
    p.add_argument("--international", action="store_true")
    p.add_argument("--outcome", default=estimators["outcome"])
    p.add_argument("--measure", choices=("nme", "patent"), default=estimators["measure"])
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--min-node", type=int, default=30, dest="min_node")
    p.add_argument("--variants", default="all")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"medshock: error[data]: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except NumericError as exc:
        print(f"medshock: error[numeric]: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
