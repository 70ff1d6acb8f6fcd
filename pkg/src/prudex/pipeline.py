"""End-to-end orchestration: train runs, compute metrics and scores, emit reports.

Output layout under ``out``::

    runs/<market>/<method>/phase<P>_seed<S>.json
    checkpoints/<market>/<method>/phase<P>_seed<S>/expert_<i>.json
    metrics.csv  extreme.csv  axis_scores.csv  pride_star.csv  profile.csv  ranks.csv
    heatmap_<market>_phase<P>.csv  equity_<market>_phase<P>.csv  embedding_<market>.csv
    compass.tex  compass.json  config.ini

Every file is a pure function of the config, so re-running reproduces the tree byte for byte.
"""

from __future__ import annotations

import configparser
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd

from .config import PipelineConfig
from .env import RunRecord
from .errors import ValidationError
from .market_data import AssetPanel, compute_features, export_embedding_samples, make_rolling_splits, parse_ohlcv_csv
from .metrics import compute_metrics, metrics_rows, read_metrics_csv, slice_record, write_metrics_csv
from .reporting import (average_portfolios, emit_compass, emit_equity_curves, emit_heatmap, emit_pride_star,
                        packaged_template, spec_from_axis_scores)
from .scoring import (axis_scores, extreme_table, performance_profile, pride_scores, profile_frame, rank_distribution,
                      rank_frame, run_scores, score_table, to_csv)
from .training import DataBundle, backtest, train_agent

log = logging.getLogger(__name__)

RANK_METRICS = ("tr", "sr", "cr", "sor", "vol", "mdd", "ent", "enb")


@dataclass(frozen=True)
class Job:
    market: str
    method: str
    phase: int
    seed: int

    @property
    def stem(self) -> str:
        return f"phase{self.phase}_seed{self.seed}"

    def run_path(self, out: Path) -> Path:
        return Path(out) / "runs" / self.market / self.method / f"{self.stem}.json"

    def checkpoint_dir(self, out: Path) -> Path | None:
        if self.method not in ("alphamix", "sac"):
            return None
        return Path(out) / "checkpoints" / self.market / self.method / self.stem


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@lru_cache(maxsize=8)
def _bundle(market: str, path: str, phases: int, span: str) -> DataBundle:
    panel = parse_ohlcv_csv(path)
    plan = make_rolling_splits(panel.calendar, phases, span)
    return DataBundle(market, panel, compute_features(panel), plan)


def load_bundle(cfg: PipelineConfig, market: str) -> DataBundle:
    if market not in cfg.markets:
        raise ValidationError(f"market {market!r} not in config; known: {sorted(cfg.markets)}")
    return _bundle(market, str(cfg.markets[market]), cfg.phases, cfg.span)


def plan_jobs(cfg: PipelineConfig, market=None, phase=None, seed=None, method=None) -> list[Job]:
    markets = [market] if market else sorted(cfg.markets)
    phases = [phase] if phase else range(1, cfg.phases + 1)
    seeds = [seed] if seed is not None else cfg.seeds
    methods = [method] if method else cfg.methods
    for m in markets:
        if m not in cfg.markets:
            raise ValidationError(f"market {m!r} not in config")
    return [Job(mk, me, p, s) for mk in markets for p in phases for me in methods for s in seeds]


def _run_job(cfg: PipelineConfig, job: Job) -> str:
    bundle = load_bundle(cfg, job.market)
    agent = type(cfg.agent)(**{**vars(cfg.agent), "seed": job.seed})
    rec = train_agent(job.method, bundle, job.phase, job.seed, agent, job.checkpoint_dir(cfg.out))
    path = job.run_path(cfg.out)
    write_text(path, rec.to_json() + "\n")
    return str(path)


def _backtest_job(cfg: PipelineConfig, job: Job, segment: str) -> RunRecord:
    bundle = load_bundle(cfg, job.market)
    return backtest(job.method, bundle, job.phase, job.seed, cfg.agent, job.checkpoint_dir(cfg.out), segment)


def run_jobs(cfg: PipelineConfig, jobs, n_jobs: int | None = None) -> list[str]:
    """Train (or run) every job; parallel across jobs, each job sequential inside."""
    n_jobs = n_jobs or os.cpu_count() or 1
    if n_jobs == 1 or len(jobs) <= 1:
        return [_run_job(cfg, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_job, [cfg] * len(jobs), jobs))


def load_records(paths) -> list[RunRecord]:
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.rglob("*.json")) if p.is_dir() else [p])
    if not files:
        raise FileNotFoundError(f"no run records under {[str(p) for p in paths]}")
    return [RunRecord.from_json(f.read_text()) for f in files]


def record_asset_returns(record: RunRecord, panel: AssetPanel) -> np.ndarray:
    """(steps, M) close-to-close returns over the record's own dates."""
    pos = panel.calendar.get_indexer(pd.DatetimeIndex(record.dates))
    if np.any(pos < 0):
        raise ValidationError(f"{record.key}: dates not in the {record.market} price calendar")
    close = panel.close[:, pos]
    return (close[:, 1:] / close[:, :-1] - 1).T


def evaluate_records(records, panels: dict, entropy_form: str = "shannon", enb_power: int = 2) -> str:
    reports = []
    for rec in records:
        rets = record_asset_returns(rec, panels[rec.market]) if rec.market in panels else None
        reports.append(compute_metrics(rec, rets, entropy_form, enb_power))
    return write_metrics_csv(metrics_rows(records, reports))


def extreme_records(records, windows: dict, panels: dict, reference: str, entropy_form: str = "shannon",
                    enb_power: int = 2) -> str | None:
    """Extreme-window m_score table, or None when no record overlaps a window."""
    sliced = []
    for rec in records:
        if rec.market not in windows:
            continue
        try:
            sliced.append(slice_record(rec, *windows[rec.market]))
        except ValidationError:
            continue
    if not sliced:
        return None
    table = read_metrics_csv(io.StringIO(evaluate_records(sliced, panels, entropy_form, enb_power)))
    if reference not in set(table["method"]):
        return None
    return to_csv(extreme_table(table, reference))


def score_outputs(metrics: pd.DataFrame, reference: str = "market_average", k_pct: float = 20,
                  n_boot: int = 2000, seed: int = 0) -> dict:
    """Axis scores, PRIDE scores, pooled TR profiles and rank matrices, all as CSV text."""
    axes = axis_scores(metrics, reference, k_pct, n_boot, seed)
    runs = run_scores(metrics, reference, k_pct)
    curves = {}
    for method, grp in runs.groupby("method", sort=True):
        curves[method] = performance_profile(grp["tr"].to_numpy(), list(zip(grp["market"], grp["phase"])),
                                             n_boot=n_boot, seed=seed)
    ranks = {m: rank_distribution(metrics, m) for m in RANK_METRICS}
    return {
        "axis_scores.csv": to_csv(axes),
        "pride_star.csv": emit_pride_star(pride_scores(metrics, reference, k_pct)),
        "profile.csv": to_csv(profile_frame(curves)),
        "ranks.csv": to_csv(rank_frame(ranks)),
        "scores_long.csv": to_csv(score_table(metrics, reference)),
        "_axes": axes,
    }


def plot_outputs(records, panels: dict) -> dict:
    out = {}
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.market, rec.phase), []).append(rec)
    for (market, phase), recs in sorted(groups.items()):
        out[f"heatmap_{market}_phase{phase}.csv"] = emit_heatmap(average_portfolios(recs), panels[market].tickers)
        out[f"equity_{market}_phase{phase}.csv"] = emit_equity_curves(recs)
    return out


def pipeline_marks(cfg: PipelineConfig, has_extreme: bool) -> tuple:
    """Which of the 17 measures this pipeline run actually reports, in the fixed order."""
    several = len(cfg.markets) > 1
    return (True, False, True,              # profit, alpha decay, equity curve
            True, True, has_extreme,        # risk, risk-adjusted profit, extreme market
            several, several, False,        # country, asset type, time-scale
            True, True, True, True,         # embedding samples, entropy, correlation (ENB), heatmap
            True, len(cfg.seeds) > 1, cfg.phases > 1, True)  # profile, variability, rolling window, rank


def config_text(cfg: PipelineConfig) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    mapping = cfg.to_mapping()
    # drop absolute locations so the snapshot does not depend on where the tree lives
    del mapping["pipeline"]["out"]
    mapping["markets"] = {k: Path(v).name for k, v in mapping["markets"].items()}
    cp.read_dict(mapping)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def run_pipeline(cfg: PipelineConfig, n_jobs: int | None = None) -> list[Path]:
    """Every stage from raw CSVs to the compass; returns the written paths."""
    out = Path(cfg.out)
    written = []

    def emit(name, text):
        write_text(out / name, text)
        written.append(out / name)

    emit("config.ini", config_text(cfg))
    bundles = {m: load_bundle(cfg, m) for m in sorted(cfg.markets)}
    panels = {m: b.prices for m, b in bundles.items()}
    for m, b in bundles.items():
        emit(f"embedding_{m}.csv", to_csv(export_embedding_samples(b.raw_features, market=m)))
    jobs = plan_jobs(cfg)
    written.extend(Path(p) for p in run_jobs(cfg, jobs, n_jobs))
    records = load_records([j.run_path(out) for j in jobs])
    metrics_text = evaluate_records(records, panels, cfg.entropy_form, cfg.enb_power)
    emit("metrics.csv", metrics_text)
    extreme = extreme_records(records, cfg.extreme, panels, cfg.reference, cfg.entropy_form, cfg.enb_power)
    if extreme is not None:
        emit("extreme.csv", extreme)
    metrics = read_metrics_csv(io.StringIO(metrics_text))
    scores = score_outputs(metrics, cfg.reference, cfg.k_pct, cfg.n_boot)
    for name, text in scores.items():
        if not name.startswith("_"):
            emit(name, text)
    for name, text in plot_outputs(records, panels).items():
        emit(name, text)
    marks = pipeline_marks(cfg, extreme is not None)
    spec = spec_from_axis_scores(scores["_axes"], {m: marks for m in cfg.methods})
    template = packaged_template() if len(spec.methods) == 8 else None
    doc, companion = emit_compass(spec, template)
    emit("compass.tex", doc)
    emit("compass.json", companion)
    return written
