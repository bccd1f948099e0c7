"""Command-line pipeline: synth, qc, train, validate, impute, aggregate,
report, export-dot.

Settings come from defaults, then an optional config file of flat dotted
keys (``cart.cp = 0.001``), then flags; flags win. Every failure prints a
single machine-parseable ``ERROR <kind>: <detail>`` line on stderr and
exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from datetime import date
from typing import Optional

from fleetemit import analytics, impute as impute_mod, model_io, synth
from fleetemit.features import POLLUTANTS, new_tree
from fleetemit.fleet import (
    DEFAULT_WINDOW,
    FLEETS,
    Window,
    classify,
    read_fleet_observations,
    write_fleet_observations,
)
from fleetemit.ingest import (
    parse_certifications,
    parse_inspections,
    qc_filter,
    write_inspections,
)
from fleetemit.matching import (
    build_index,
    build_training_tables,
    match_records,
    split_by_group,
    write_match_stats,
)

SHORT_NAMES = {"co2_g_km": "co2", "nox_mg_km": "nox", "thc_mg_km": "thc",
               "co_mg_km": "co", "mpg": "mpg"}

REPORT_SECTIONS = ["fleet_summary.csv", "daily_series.csv", "region_gaps.csv",
                   "compliance.csv", "accuracy_tables.csv"]


@dataclass
class Settings:
    seed: int = 0
    window: Window = DEFAULT_WINDOW
    cp: float = 1e-4
    minsplit: Optional[int] = None
    minbucket: Optional[int] = None
    xval: int = 10
    lowess_span: float = analytics.DEFAULT_LOWESS_SPAN
    euro_standards: Optional[str] = None
    region_min_n: int = analytics.DEFAULT_REGION_MIN_N
    policy: str = "tree-imputed"


SETTING_KEYS = {
    "seed": ("seed", int),
    "window.start": ("window_start", str),
    "window.end": ("window_end", str),
    "cart.cp": ("cp", float),
    "cart.minsplit": ("minsplit", int),
    "cart.minbucket": ("minbucket", int),
    "cart.xval": ("xval", int),
    "lowess.span": ("lowess_span", float),
    "euro.standards": ("euro_standards", str),
    "region.min_n": ("region_min_n", int),
    "impute.policy": ("policy", str),
}


def load_config(path: str) -> dict:
    """Flat dotted-key config: ``key = value`` lines, ``#`` comments."""
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            key = key.strip()
            if key not in SETTING_KEYS:
                raise ValueError(f"{path}:{line_no}: unknown setting {key!r}")
            values[key] = value.strip()
    return values


def resolve_settings(args) -> Settings:
    raw = {}
    if getattr(args, "config", None):
        raw.update(load_config(args.config))
    fields = {}
    window_start, window_end = None, None
    for key, (attr, cast) in SETTING_KEYS.items():
        if key in raw:
            if attr == "window_start":
                window_start = raw[key]
            elif attr == "window_end":
                window_end = raw[key]
            else:
                fields[attr] = cast(raw[key])
    # flags override the file
    for attr in ("seed", "cp", "minsplit", "minbucket", "xval",
                 "lowess_span", "euro_standards", "region_min_n", "policy"):
        flag = getattr(args, attr, None)
        if flag is not None:
            fields[attr] = flag
    if getattr(args, "window_start", None):
        window_start = args.window_start
    if getattr(args, "window_end", None):
        window_end = args.window_end
    settings = Settings(**fields)
    if window_start or window_end:
        settings.window = Window(
            date.fromisoformat(window_start) if window_start else DEFAULT_WINDOW.start,
            date.fromisoformat(window_end) if window_end else DEFAULT_WINDOW.end,
        )
    return settings


def _tree_path(outdir: str, pollutant: str) -> str:
    return os.path.join(outdir, f"{SHORT_NAMES[pollutant]}_tree.json")


def _load_trees(models_dir: str) -> dict:
    trees = {}
    for pollutant in POLLUTANTS:
        path = _tree_path(models_dir, pollutant)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing model file {path}")
        trees[pollutant] = model_io.read_tree(path)
    return trees


def _prepared_inputs(args):
    records, diagnostics = parse_inspections(args.inspections)
    clean, qc = qc_filter(records)
    measurements, cert_diags = parse_certifications(args.certifications)
    return clean, qc, measurements, diagnostics + cert_diags


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, settings: Settings) -> int:
    spec = synth.GeneratorSpec(
        seed=settings.seed,
        vehicles=args.vehicles,
        window=settings.window,
        n_regions=args.regions,
        region_positive_fraction=args.region_positive_fraction,
        sparse_regions=args.sparse_regions,
        retest_r=None if args.no_noise else args.retest_r,
        match_rate=args.match_rate,
        cert_repeats=args.cert_repeats,
        models_per_class=args.models_per_class,
        inject_dual=args.inject_dual,
        inject_impossible=args.inject_impossible,
        inject_overage=args.inject_overage,
    )
    if args.co2_offset is not None:
        spec.fleet_offsets["co2_g_km"] = args.co2_offset
    if args.co2_base is not None:
        spec.base_levels["co2_g_km"] = args.co2_base
    paths = synth.write_corpus(synth.generate(spec), args.out)
    print(f"wrote {paths['inspections']}, {paths['certifications']}, {paths['manifest']}")
    return 0


def cmd_qc(args, settings: Settings) -> int:
    records, diagnostics = parse_inspections(args.inspections)
    clean, report = qc_filter(records, backdating_window_days=args.backdating_window_days)
    os.makedirs(args.out, exist_ok=True)
    write_inspections(clean, os.path.join(args.out, "clean_inspections.csv"))
    with open(os.path.join(args.out, "qc_report.json"), "w", encoding="utf-8") as f:
        json.dump({
            "total_input": report.total_input,
            "total_retained": report.total_retained,
            "counts": report.counts,
            "parse_diagnostics": [[d.line, d.message] for d in diagnostics],
        }, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"retained {report.total_retained} of {report.total_input} records")
    return 0


def _fit_all(tables, settings: Settings) -> dict:
    trees = {}
    for pollutant, table in tables.items():
        tree = new_tree(
            pollutant, cp=settings.cp, minsplit=settings.minsplit,
            minbucket=settings.minbucket, xval=settings.xval, seed=settings.seed,
        )
        trees[pollutant] = tree.fit(table.X, table.y)
    return trees


def cmd_train(args, settings: Settings) -> int:
    clean, _, measurements, _ = _prepared_inputs(args)
    index = build_index(measurements)
    result = match_records(clean, index)
    tables = build_training_tables(clean, measurements)
    if not tables:
        raise ValueError("no matched training rows; cannot train")
    os.makedirs(args.out, exist_ok=True)
    write_match_stats(result.stats, os.path.join(args.out, "match_stats.csv"))
    trees = _fit_all(tables, settings)
    for pollutant, tree in trees.items():
        model_io.write_tree(tree, _tree_path(args.out, pollutant))
        model_io.write_cp_table(tree, os.path.join(
            args.out, f"{SHORT_NAMES[pollutant]}_cp_table.csv"))
        print(f"{pollutant}: {len(tables[pollutant])} rows, "
              f"{tree.n_splits()} splits, rel_error {tree.cp_table_[-1].rel_error:.4f}")
    return 0


def cmd_validate(args, settings: Settings) -> int:
    clean, _, measurements, _ = _prepared_inputs(args)
    tables = build_training_tables(clean, measurements)
    if not tables:
        raise ValueError("no matched training rows; cannot validate")
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for pollutant, table in tables.items():
        train, holdout = split_by_group(table, args.holdout_fraction, settings.seed)
        tree = new_tree(pollutant, cp=settings.cp, minsplit=settings.minsplit,
                        minbucket=settings.minbucket, xval=settings.xval,
                        seed=settings.seed).fit(train.X, train.y)
        report = analytics.holdout_accuracy(
            tree, holdout.X, holdout.y, groups=holdout.groups,
            training_groups=train.groups, pollutant=pollutant)
        entries.append((SHORT_NAMES[pollutant], tree, report))
        r_text = "nan" if report.diagnostic else f"{report.pearson_r:.4f}"
        print(f"{pollutant}: holdout r {r_text} over {report.holdout_groups} groups")
    analytics.write_accuracy_tables(entries, os.path.join(args.out, "accuracy_tables.csv"))
    return 0


def cmd_impute(args, settings: Settings) -> int:
    records, _ = parse_inspections(args.inspections)
    clean, _ = qc_filter(records)
    trees = _load_trees(args.models)
    index = None
    if args.certifications:
        measurements, _ = parse_certifications(args.certifications)
        index = build_index(measurements)
    if settings.policy == "prefer-measured" and index is None:
        raise ValueError("prefer-measured policy needs --certifications")
    result = impute_mod.impute_fleet(clean, trees, index=index, policy=settings.policy)
    by_vehicle = {e.vehicle_id: e for e in result.imputed}
    observations = classify(clean, settings.window, seed=settings.seed)
    for obs in observations:
        obs.emissions = by_vehicle.get(obs.vehicle_id)
    os.makedirs(args.out, exist_ok=True)
    write_fleet_observations(observations, os.path.join(args.out, "fleet_observations.csv"))
    impute_mod.write_imputed_emissions(
        observations, os.path.join(args.out, "imputed_emissions.csv"))
    skips = ", ".join(f"{k}={v}" for k, v in result.skipped.items())
    print(f"imputed {len(result.imputed)} vehicles ({skips}); "
          f"{len(observations)} observations")
    return 0


def cmd_aggregate(args, settings: Settings) -> int:
    observations = read_fleet_observations(args.observations)
    os.makedirs(args.out, exist_ok=True)
    analytics.write_fleet_summary(observations, os.path.join(args.out, "fleet_summary.csv"))
    analytics.write_daily_series(
        observations, os.path.join(args.out, "daily_series.csv"),
        metric=args.metric, window=settings.window, span=settings.lowess_span)
    report = analytics.region_gap_report(observations, metric=args.metric,
                                         min_n=settings.region_min_n)
    analytics.write_region_gaps(report, os.path.join(args.out, "region_gaps.csv"))
    standards = analytics.load_euro_standards(settings.euro_standards)
    compliance = []
    for name in sorted(standards):
        for fleet in FLEETS:
            rows = [(obs.fuel_type, obs.emissions.values)
                    for obs in observations
                    if obs.fleet == fleet and obs.emissions is not None
                    and obs.fuel_type is not None]
            compliance.append(analytics.compliance_rates(rows, standards[name], fleet=fleet))
    analytics.write_compliance(compliance, os.path.join(args.out, "compliance.csv"))
    print(f"aggregates written to {args.out} "
          f"(region fraction positive: {report.fraction_positive:.4f})")
    return 0


def cmd_report(args, settings: Settings) -> int:
    chunks = []
    for name in REPORT_SECTIONS:
        path = os.path.join(args.dir, name)
        if not os.path.exists(path):
            continue
        with open(path, "r", encoding="utf-8") as f:
            chunks.append(f"## {name}\n{f.read()}")
    if not chunks:
        raise FileNotFoundError(f"no analytics CSVs found in {args.dir}")
    text = "\n".join(chunks)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_dot(args, settings: Settings) -> int:
    tree = model_io.read_tree(args.model)
    text = model_io.export_dot(tree)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat dotted-key settings file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--window-start")
    shared.add_argument("--window-end")
    shared.add_argument("--cp", type=float)
    shared.add_argument("--minsplit", type=int)
    shared.add_argument("--minbucket", type=int)
    shared.add_argument("--xval", type=int)
    shared.add_argument("--lowess-span", type=float, dest="lowess_span")
    shared.add_argument("--euro-standards", dest="euro_standards")
    shared.add_argument("--region-min-n", type=int, dest="region_min_n")
    shared.add_argument("--policy", choices=impute_mod.POLICIES)

    parser = argparse.ArgumentParser(
        prog="fleetemit",
        description="Vehicle fleet emissions imputation and aggregation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--vehicles", type=int, default=10_000)
    p.add_argument("--regions", type=int, default=20)
    p.add_argument("--region-positive-fraction", type=float, default=1.0,
                   dest="region_positive_fraction")
    p.add_argument("--sparse-regions", type=int, default=0, dest="sparse_regions")
    p.add_argument("--retest-r", type=float, default=0.9, dest="retest_r")
    p.add_argument("--no-noise", action="store_true", dest="no_noise")
    p.add_argument("--match-rate", type=float, default=1.0, dest="match_rate")
    p.add_argument("--cert-repeats", type=int, default=2, dest="cert_repeats")
    p.add_argument("--models-per-class", type=int, default=30, dest="models_per_class")
    p.add_argument("--inject-dual", type=int, default=0, dest="inject_dual")
    p.add_argument("--inject-impossible", type=int, default=0, dest="inject_impossible")
    p.add_argument("--inject-overage", type=int, default=0, dest="inject_overage")
    p.add_argument("--co2-offset", type=float, dest="co2_offset")
    p.add_argument("--co2-base", type=float, dest="co2_base")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("qc", parents=[shared], help="quality-control an inspections file")
    p.add_argument("--inspections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backdating-window-days", type=int, dest="backdating_window_days")
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("train", parents=[shared], help="fit the five pollutant trees")
    p.add_argument("--inspections", required=True)
    p.add_argument("--certifications", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("validate", parents=[shared],
                       help="group-disjoint holdout accuracy")
    p.add_argument("--inspections", required=True)
    p.add_argument("--certifications", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout-fraction", type=float, default=0.2,
                   dest="holdout_fraction")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("impute", parents=[shared],
                       help="classify fleets and impute emissions")
    p.add_argument("--inspections", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--certifications")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("aggregate", parents=[shared],
                       help="summaries, series, region gaps, compliance")
    p.add_argument("--observations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="co2_g_km")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("report", parents=[shared], help="concatenate the analytics CSV set")
    p.add_argument("--dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-dot", parents=[shared], help="tree diagram as DOT text")
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_dot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve_settings(args)
        return args.func(args, settings)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single machine-parseable failure line
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
