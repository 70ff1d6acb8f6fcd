"""Command-line entry point: ``prudex <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from . import __version__
from .config import load_config
from .errors import MissingInputError, PrudexError, ValidationError
from .fetch import default_cache_dir, fetch_remote_csv
from .market_data import compute_features, export_embedding_samples, make_rolling_splits, normalize_features, \
    parse_ohlcv_csv
from .metrics import read_metrics_csv
from .pipeline import (RANK_METRICS, _backtest_job, evaluate_records, extreme_records, load_records, plan_jobs,
                       run_jobs, run_pipeline, score_outputs, write_text)
from .reporting import (average_portfolios, emit_compass, emit_heatmap, packaged_template, read_compass_csv,
                        spec_from_axis_scores)
from .scoring import performance_profile, profile_frame, rank_distribution, rank_frame, run_scores, to_csv
from .synthetic import synthetic_market

log = logging.getLogger("prudex")

EXIT_CODES = """exit codes:
  0  success
  1  unexpected internal error
  2  bad command-line usage
  3  missing input file or artifact
  4  schema, parse or validation error (including template mismatch)
  5  training aborted on a non-finite value (checkpoint kept)
  6  network transport failure (fetch)
"""


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{path} not found")
    return p


def _pairs(items, what: str) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"{what} {item!r} must look like NAME=VALUE")
        out[key.strip()] = value.strip()
    return out


def _emit_plan(steps) -> int:
    print(json.dumps({"dry_run": True, "steps": steps}, indent=2))
    return 0


def _cfg(args):
    overrides = list(args.set or ())
    if getattr(args, "out", None):
        overrides.append(f"pipeline.out={Path(args.out).resolve()}")
    return load_config(args.config, overrides)


# commands

def cmd_synth(args) -> int:
    if args.dry_run:
        return _emit_plan([{"write": args.out}])
    write_text(args.out, synthetic_market(args.assets, args.steps, args.drift, 0, args.sigma, args.seed, args.start))
    return 0


def cmd_fetch(args) -> int:
    symbols = [s for s in args.symbols.split(",") if s]
    cache = Path(args.cache_dir) if args.cache_dir else default_cache_dir()
    if args.dry_run:
        return _emit_plan([{"fetch": s, "cache": str(cache)} for s in symbols] + [{"write": args.out}])
    data = fetch_remote_csv(args.endpoint, symbols, args.start, args.end, cache, args.timeout)
    write_text(args.out, data.decode())
    return 0


def cmd_ingest(args) -> int:
    src = _existing(args.input)
    out = Path(args.out)
    if args.dry_run:
        return _emit_plan([{"read": str(src)}, {"write": str(out / "prices.csv")}, {"write": str(out / "ingest.json")}])
    panel = parse_ohlcv_csv(src)
    write_text(out / "prices.csv", panel.to_csv())
    summary = {"tickers": list(panel.tickers), "dropped": list(panel.dropped), "length": len(panel),
               "start": panel.calendar[0].isoformat(), "end": panel.calendar[-1].isoformat()}
    write_text(out / "ingest.json", json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_features(args) -> int:
    src = _existing(args.input)
    out = Path(args.out)
    names = ["features.csv", "embedding.csv"] + (["features_normalized.csv"] if args.normalize_phase else [])
    if args.dry_run:
        return _emit_plan([{"read": str(src)}] + [{"write": str(out / n)} for n in names])
    panel = parse_ohlcv_csv(src)
    raw = compute_features(panel)
    write_text(out / "features.csv", raw.to_csv())
    write_text(out / "embedding.csv", to_csv(export_embedding_samples(raw, args.stride, args.market)))
    if args.normalize_phase:
        plan = make_rolling_splits(panel.calendar, args.phases, args.span)
        write_text(out / "features_normalized.csv",
                   normalize_features(raw, plan.phase(args.normalize_phase).train).to_csv())
    return 0


def cmd_split(args) -> int:
    src = _existing(args.input)
    if args.dry_run:
        return _emit_plan([{"read": str(src)}, {"write": args.out}])
    panel = parse_ohlcv_csv(src)
    plan = make_rolling_splits(panel.calendar, args.phases, args.span)
    write_text(args.out, json.dumps(plan.to_dict(), indent=2) + "\n")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg(args)
    jobs = plan_jobs(cfg, args.market, args.phase, args.seed, args.method)
    if args.dry_run:
        return _emit_plan([{"train": vars(j), "record": str(j.run_path(cfg.out)),
                            "checkpoint": str(j.checkpoint_dir(cfg.out) or "")} for j in jobs])
    run_jobs(cfg, jobs, args.jobs)
    return 0


def cmd_backtest(args) -> int:
    cfg = _cfg(args)
    jobs = plan_jobs(cfg, args.market, args.phase, args.seed, args.method)
    target = Path(cfg.out) / "backtest" / args.segment
    paths = [target / j.market / j.method / f"{j.stem}.json" for j in jobs]
    if args.dry_run:
        return _emit_plan([{"backtest": vars(j), "segment": args.segment, "write": str(p)} for j, p in zip(jobs, paths)])
    for job, path in zip(jobs, paths):
        ck = job.checkpoint_dir(cfg.out)
        if ck is not None and not ck.is_dir():
            raise MissingInputError(f"checkpoint {ck} not found; run train first")
        write_text(path, _backtest_job(cfg, job, args.segment).to_json() + "\n")
    return 0


def _panels(args) -> dict:
    paths = _pairs(args.prices, "--prices")
    if args.config:
        paths = {**{k: str(v) for k, v in load_config(args.config).markets.items()}, **paths}
    return {m: parse_ohlcv_csv(_existing(p)) for m, p in paths.items()}


def cmd_evaluate(args) -> int:
    runs = [_existing(r) for r in args.runs]
    out = Path(args.out)
    windows = {k: tuple(v.split(",")) for k, v in _pairs(args.extreme, "--extreme").items()}
    if args.dry_run:
        steps = [{"read": str(r)} for r in runs] + [{"write": str(out)}]
        if windows:
            steps.append({"write": str(out.with_name("extreme.csv"))})
        return _emit_plan(steps)
    records = load_records(runs)
    panels = _panels(args)
    write_text(out, evaluate_records(records, panels, args.entropy_form, args.enb_power))
    if windows:
        text = extreme_records(records, windows, panels, args.reference, args.entropy_form, args.enb_power)
        if text is None:
            raise ValidationError("no record overlaps the extreme windows (or the reference method is absent)")
        write_text(out.with_name("extreme.csv"), text)
    return 0


def _metrics(path) -> pd.DataFrame:
    return read_metrics_csv(_existing(path))


def cmd_score(args) -> int:
    out = Path(args.out)
    names = ["axis_scores.csv", "pride_star.csv", "profile.csv", "ranks.csv", "scores_long.csv"]
    if args.dry_run:
        return _emit_plan([{"read": args.metrics}] + [{"write": str(out / n)} for n in names])
    outputs = score_outputs(_metrics(args.metrics), args.reference, args.k_pct, args.n_boot, args.boot_seed)
    for n in names:
        write_text(out / n, outputs[n])
    return 0


def cmd_profile(args) -> int:
    if args.dry_run:
        return _emit_plan([{"read": args.metrics}, {"write": args.out}])
    runs = run_scores(_metrics(args.metrics), args.reference, args.k_pct)
    if args.metric not in runs.columns:
        raise ValidationError(f"no normalized score for metric {args.metric!r}")
    curves = {}
    for method, grp in runs.groupby("method", sort=True):
        grp = grp.dropna(subset=[args.metric])
        curves[method] = performance_profile(grp[args.metric].to_numpy(), list(zip(grp["market"], grp["phase"])),
                                             n_boot=args.n_boot, seed=args.boot_seed)
    write_text(args.out, to_csv(profile_frame(curves)))
    return 0


def cmd_rank(args) -> int:
    metrics = args.metric or list(RANK_METRICS)
    if args.dry_run:
        return _emit_plan([{"read": args.metrics}, {"rank": metrics}, {"write": args.out}])
    table = _metrics(args.metrics)
    write_text(args.out, to_csv(rank_frame({m: rank_distribution(table, m) for m in metrics})))
    return 0


def cmd_heatmap(args) -> int:
    runs = [_existing(r) for r in args.runs]
    if args.dry_run:
        return _emit_plan([{"read": str(r)} for r in runs] + [{"write": args.out}])
    records = [r for r in load_records(runs)
               if (args.market is None or r.market == args.market) and (args.phase is None or r.phase == args.phase)]
    if not records:
        raise MissingInputError("no run records match the market/phase filter")
    n_assets = records[0].weights.shape[1] - 1
    if args.assets:
        assets = args.assets.split(",")
    else:
        panels = _panels(args)
        market = records[0].market
        assets = list(panels[market].tickers) if market in panels else [f"asset{i}" for i in range(1, n_assets + 1)]
    write_text(args.out, emit_heatmap(average_portfolios(records), assets))
    return 0


def cmd_compass(args) -> int:
    out = Path(args.out)
    if args.dry_run:
        return _emit_plan([{"read": args.results or args.scores}, {"write": str(out / "compass.tex")},
                           {"write": str(out / "compass.json")}])
    if args.results:
        spec = read_compass_csv(_existing(args.results))
    elif args.scores:
        axes = pd.read_csv(_existing(args.scores), dtype={"method": str}, float_precision="round_trip")
        spec = spec_from_axis_scores(axes)
    else:
        raise ValidationError("pass --results or --scores")
    if args.template:
        template = _existing(args.template).read_text()
    else:
        template = packaged_template() if len(spec.methods) == 8 else None
    doc, companion = emit_compass(spec, template)
    write_text(out / "compass.tex", doc)
    write_text(out / "compass.json", companion)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _cfg(args)
    jobs = plan_jobs(cfg)
    if args.dry_run:
        stages = ["embedding", "train", "evaluate", "extreme", "score", "profile", "rank", "heatmap", "equity",
                  "compass"]
        return _emit_plan([{"out": str(cfg.out)}, {"stages": stages},
                           *({"train": vars(j)} for j in jobs)])
    run_pipeline(cfg, args.jobs)
    return 0


# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prudex", description="Portfolio RL training and evaluation toolkit.",
                                     epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=EXIT_CODES,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--dry-run", action="store_true", help="print the execution plan and exit")
        p.set_defaults(func=func)
        return p

    def runs_opts(p, out_required=True, config_required=True):
        p.add_argument("--config", required=config_required, help="pipeline INI file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--market")
        p.add_argument("--phase", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--method")
        p.add_argument("--out", required=out_required, help="output directory (overrides the config)")

    def split_opts(p):
        p.add_argument("--phases", type=int, default=3)
        p.add_argument("--span", default="1Y", help="test/valid span, e.g. 1Y, 6M, 90D")

    def boot_opts(p):
        p.add_argument("--reference", default="market_average")
        p.add_argument("--k-pct", type=float, default=20.0)
        p.add_argument("--n-boot", type=int, default=2000)
        p.add_argument("--boot-seed", type=int, default=0)

    p = add("synth", cmd_synth, "write a synthetic OHLCV market (one drifting asset)")
    p.add_argument("--out", required=True)
    p.add_argument("--assets", type=int, default=3)
    p.add_argument("--steps", type=int, default=830)
    p.add_argument("--drift", type=float, default=0.001)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", default="2015-01-01")

    p = add("fetch", cmd_fetch, "download OHLCV CSVs from a remote endpoint into the cache")
    p.add_argument("--endpoint", required=True, help="URL template with {symbol}, {start}, {end}")
    p.add_argument("--symbols", required=True, help="comma-separated tickers")
    p.add_argument("--start", required=True)
    p.add_argument("--end", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir", help="defaults to $PRUDEX_CACHE_DIR")
    p.add_argument("--timeout", type=float, default=30.0)

    p = add("ingest", cmd_ingest, "validate a raw OHLCV CSV and write the aligned panel")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = add("features", cmd_features, "compute the 11 per-asset features and embedding samples")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--market", default="")
    p.add_argument("--stride", type=int, default=30)
    p.add_argument("--normalize-phase", type=int, help="also write features z-scored on this phase's train range")
    split_opts(p)

    p = add("split", cmd_split, "compute rolling train/valid/test phases")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    split_opts(p)

    p = add("train", cmd_train, "train methods over (market x phase x seed) and backtest on test segments")
    runs_opts(p, out_required=False)
    p.add_argument("--jobs", type=int, default=None, help="parallel runs (default: CPU count)")

    p = add("backtest", cmd_backtest, "re-run stored policies on a segment")
    runs_opts(p, out_required=False)
    p.add_argument("--segment", choices=("train", "valid", "test"), default="test")

    p = add("evaluate", cmd_evaluate, "compute the metric table from run records")
    p.add_argument("--runs", nargs="+", required=True, help="record files or directories")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--config", help="take market price files from this config (for ENB)")
    p.add_argument("--prices", action="append", metavar="MARKET=CSV")
    p.add_argument("--extreme", action="append", metavar="MARKET=START,END")
    p.add_argument("--reference", default="market_average")
    p.add_argument("--entropy-form", choices=("shannon", "exponential"), default="shannon")
    p.add_argument("--enb-power", type=int, choices=(1, 2), default=2)

    p = add("score", cmd_score, "axis scores, PRIDE scores, profiles and rank matrices")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    boot_opts(p)

    p = add("profile", cmd_profile, "performance profile with stratified bootstrap bands")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="tr")
    boot_opts(p)

    p = add("rank", cmd_rank, "rank distributions per metric")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", action="append", help="repeatable; default: all point-wise metrics")

    p = add("heatmap", cmd_heatmap, "average portfolio per method")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--market")
    p.add_argument("--phase", type=int)
    p.add_argument("--assets", help="comma-separated asset labels (cash excluded)")
    p.add_argument("--config")
    p.add_argument("--prices", action="append", metavar="MARKET=CSV")

    p = add("compass", cmd_compass, "fill the compass template and its JSON companion")
    p.add_argument("--results", help="CSV: method, six axes, 17 measure columns (0/1)")
    p.add_argument("--scores", help="axis_scores.csv from 'score' (every measure marked)")
    p.add_argument("--template")
    p.add_argument("--out", required=True)

    p = add("pipeline", cmd_pipeline, "run every stage from the config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PrudexError as exc:
        code = exc.exit_code
        err = exc
    except FileNotFoundError as exc:
        code, err = 3, exc
    except Exception as exc:  # noqa: BLE001 - report anything else as an internal error
        log.debug("internal error", exc_info=True)
        code, err = 1, exc
    report = {"error": type(err).__name__, "message": str(err), "exit_code": code, "command": args.command}
    print(json.dumps(report), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
