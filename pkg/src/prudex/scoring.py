"""Normalize metric tables into 0-100 axis scores, profiles and rank distributions.

The reference strategy (market average by default) defines score 50; a
method ``k_pct`` percent better scores 100 and ``k_pct`` percent worse
scores 0, with clipping at both ends.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import MissingDataError, SchemaError, ValidationError
from .metrics import METRIC_NAMES, extreme_score

AXES = ("profitability", "risk_control", "universality", "diversity", "reliability", "explainability")
PROFIT_METRICS = ("tr", "sr", "cr", "sor")
RISK_METRICS = ("vol", "mdd")
PRIDE_ORDER = ("tr", "sr", "cr", "sor", "mdd", "vol", "ent", "enb")
HIGHER_BETTER = {"tr": True, "sr": True, "cr": True, "sor": True, "ent": True, "enb": True,
                 "vol": False, "mdd": False, "dd": False}
CELL = ["market", "phase", "seed"]
STRATUM = ["market", "phase"]
TAUS = np.arange(101, dtype=float)
EXPLAINABILITY = 50


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clip_round(x: float) -> int:
    return round_half_up(min(100.0, max(0.0, x)))


def _ramp(rel: float, k_pct: float) -> float:
    k = k_pct / 100.0
    return (rel - (1.0 - k)) * (100.0 / (2.0 * k))


def relative_profit(m_rl: float, m_ave: float) -> tuple[float, bool]:
    """m_rl / m_ave, or 1 + (m_rl - m_ave) / |m_ave| when m_ave <= 0 (flagged)."""
    if m_ave > 0:
        return m_rl / m_ave, False
    if m_ave == 0:
        return (math.inf if m_rl > 0 else -math.inf if m_rl < 0 else 1.0), True
    return 1.0 + (m_rl - m_ave) / abs(m_ave), True


def profit_score_flagged(m_rl: float, m_ave: float, k_pct: float = 20) -> tuple[float, bool]:
    if math.isnan(m_rl) or math.isnan(m_ave):
        return math.nan, False
    rel, flagged = relative_profit(m_rl, m_ave)
    return _clip_round(_ramp(rel, k_pct)), flagged


def profit_score(m_rl: float, m_ave: float, k_pct: float = 20):
    """Integer in [0, 100]; 50 at the reference, 100 at (1 + k_pct%) times it."""
    return profit_score_flagged(m_rl, m_ave, k_pct)[0]


def risk_score(m_rl: float, m_ave: float, k_pct: float = 20):
    """Integer in [0, 100]; lower risk than the reference scores higher. NaN if m_ave is 0."""
    if math.isnan(m_rl) or math.isnan(m_ave) or m_ave == 0:
        return math.nan
    return _clip_round(_ramp(2.0 - m_rl / m_ave, k_pct))


def diversity_score(ent_rl: float, ent_uniform: float, enb_rl: float = math.nan, enb_uniform: float = math.nan):
    """Mean of the entropy term (uniform = 100) and the ENB term (uniform = 50)."""
    terms = []
    if not math.isnan(ent_rl) and ent_uniform > 0:
        terms.append(min(100.0, max(0.0, ent_rl / ent_uniform * 100.0)))
    if not (math.isnan(enb_rl) or math.isnan(enb_uniform)) and enb_uniform > 0:
        terms.append(min(100.0, max(0.0, enb_rl / enb_uniform * 50.0)))
    if not terms:
        return math.nan
    return _clip_round(sum(terms) / len(terms))


def reference_values(metrics: pd.DataFrame, reference: str = "market_average") -> pd.DataFrame:
    """One m_ave row per (market, phase): the reference method's mean over seeds."""
    ref = metrics[metrics["method"] == reference]
    strata = metrics[STRATUM].drop_duplicates()
    have = ref[STRATUM].drop_duplicates()
    missing = strata.merge(have, how="left", indicator=True)
    missing = missing[missing["_merge"] == "left_only"]
    if len(missing):
        raise MissingDataError([(r.market, r.phase, reference) for r in missing.itertuples()])
    return ref.groupby(STRATUM, sort=True)[list(METRIC_NAMES)].mean()


def score_table(metrics: pd.DataFrame, reference: str = "market_average") -> pd.DataFrame:
    """Long table: method, market, phase, seed, metric, value, m_ave."""
    ave = reference_values(metrics, reference)
    long = metrics.melt(id_vars=["method", *CELL], value_vars=list(METRIC_NAMES), var_name="metric")
    ave_long = ave.reset_index().melt(id_vars=STRATUM, var_name="metric", value_name="m_ave")
    out = long.merge(ave_long, on=[*STRATUM, "metric"], how="left")
    return out.sort_values(["method", *CELL, "metric"], kind="mergesort").reset_index(drop=True)


def run_scores(metrics: pd.DataFrame, reference: str, k_pct: float) -> pd.DataFrame:
    ave = reference_values(metrics, reference)
    rows = []
    for r in metrics.itertuples(index=False):
        a = ave.loc[(r.market, r.phase)]
        d = {"method": r.method, "market": r.market, "phase": r.phase, "seed": r.seed}
        flagged = False
        for m in PROFIT_METRICS:
            d[m], f = profit_score_flagged(getattr(r, m), a[m], k_pct)
            flagged |= f
        for m in RISK_METRICS:
            d[m] = risk_score(getattr(r, m), a[m], k_pct)
        ent_term = math.nan if a["ent"] <= 0 else min(100.0, max(0.0, r.ent / a["ent"] * 100))
        enb_term = math.nan if not a["enb"] > 0 else min(100.0, max(0.0, r.enb / a["enb"] * 50))
        d["ent"] = math.nan if math.isnan(ent_term) else _clip_round(ent_term)
        d["enb"] = math.nan if math.isnan(enb_term) else _clip_round(enb_term)
        d["diversity"] = diversity_score(r.ent, a["ent"], r.enb, a["enb"])
        d["flagged"] = flagged
        rows.append(d)
    return pd.DataFrame(rows)


def pride_scores(metrics: pd.DataFrame, reference: str = "market_average", k_pct: float = 20) -> pd.DataFrame:
    """Per-method normalized score of each of the 8 star-plot metrics (mean over runs)."""
    runs = run_scores(metrics, reference, k_pct)
    rows = []
    for method, grp in runs.groupby("method", sort=True):
        for m in PRIDE_ORDER:
            vals = grp[m].dropna()
            rows.append({"method": method, "metric": m,
                         "score": round_half_up(vals.mean()) if len(vals) else math.nan})
    return pd.DataFrame(rows)


def _check_cells(table: pd.DataFrame, methods) -> None:
    cells = table[CELL].drop_duplicates()
    missing = []
    for c in cells.itertuples(index=False):
        present = set(table.loc[(table["market"] == c.market) & (table["phase"] == c.phase)
                                & (table["seed"] == c.seed), "method"])
        missing.extend((c.market, c.phase, c.seed, m) for m in methods if m not in present)
    if missing:
        raise MissingDataError(missing)


def rank_distribution(table: pd.DataFrame, metric: str, higher_is_better: bool | None = None,
                      methods=None) -> pd.DataFrame:
    """Probability of each method landing on each rank, over (market, phase, seed) cells.

    Tied methods split their mass evenly over the rank bins the tie spans.
    NaN values rank below everything else.
    """
    if metric not in table.columns:
        raise SchemaError(f"metric {metric!r} not in table")
    hib = HIGHER_BETTER.get(metric, True) if higher_is_better is None else higher_is_better
    methods = sorted(table["method"].unique()) if methods is None else list(methods)
    table = table[table["method"].isin(methods)]
    _check_cells(table, methods)
    n = len(methods)
    pos = {m: i for i, m in enumerate(methods)}
    counts = np.zeros((n, n))
    n_cells = 0
    for _, cell in table.groupby(CELL, sort=True):
        cell = cell.groupby("method")[metric].mean()
        vals = np.array([cell[m] for m in methods], dtype=float)
        key = np.where(np.isnan(vals), -np.inf, vals if hib else -vals)
        order = np.argsort(-key, kind="mergesort")
        sorted_key = key[order]
        start = 0
        while start < n:
            stop = start + 1
            while stop < n and sorted_key[stop] == sorted_key[start]:
                stop += 1
            for j in order[start:stop]:
                counts[j, start:stop] += 1.0 / (stop - start)
            start = stop
        n_cells += 1
    probs = counts / n_cells
    return pd.DataFrame(probs, index=pd.Index(methods, name="method"), columns=range(1, n + 1))


def rank_scores(n: int) -> np.ndarray:
    """Linear rank score: 100 for rank 1 down to 0 for rank n."""
    return 100.0 * (n - np.arange(1, n + 1)) / (n - 1)


def universality_scores(table: pd.DataFrame, measures=PROFIT_METRICS, methods=None) -> dict:
    methods = sorted(table["method"].unique()) if methods is None else list(methods)
    if len(methods) < 2:
        return {m: math.nan for m in methods}
    per_measure = []
    for metric in measures:
        rm = rank_distribution(table, metric, True, methods)
        per_measure.append(rm.to_numpy() @ rank_scores(len(methods)))
    mean = np.mean(per_measure, axis=0)
    return {m: round_half_up(s) for m, s in zip(methods, mean)}


@dataclass(frozen=True)
class ProfileCurve:
    taus: np.ndarray
    point: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_boot: int


def tail_fraction(scores, taus=TAUS) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    return (s[:, None] > np.asarray(taus)[None, :]).mean(axis=0)


def performance_profile(scores, strata=None, taus=TAUS, n_boot: int = 2000, level: float = 0.95,
                        seed: int = 0) -> ProfileCurve:
    """Fraction of runs scoring above each threshold, with stratified percentile-bootstrap bands."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValidationError("performance profile needs at least one run")
    taus = np.asarray(taus, dtype=float)
    labels = np.zeros(s.size, dtype=int) if strata is None else pd.factorize(pd.Series(list(strata)))[0]
    if len(labels) != s.size:
        raise ValidationError("one stratum label per score is required")
    point = tail_fraction(s, taus)
    rng = np.random.default_rng(seed)
    idx = np.empty((n_boot, s.size), dtype=np.int64)
    col = 0
    for g in range(labels.max() + 1):
        members = np.flatnonzero(labels == g)
        idx[:, col:col + members.size] = members[rng.integers(0, members.size, (n_boot, members.size))]
        col += members.size
    boot = s[idx]
    boot.sort(axis=1)
    above = s.size - np.stack([np.searchsorted(row, taus, side="right") for row in boot])
    fracs = above / s.size
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(fracs, [100 * alpha, 100 * (1 - alpha)], axis=0)
    return ProfileCurve(taus, point, np.minimum(lo, point), np.maximum(hi, point), n_boot)


def reliability_score(profile: ProfileCurve) -> int:
    """Trapezoidal area under the point curve over the threshold grid."""
    y, x = profile.point, profile.taus
    return round_half_up(float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0))


def axis_scores(metrics: pd.DataFrame, reference: str = "market_average", k_pct: float = 20,
                n_boot: int = 2000, seed: int = 0) -> pd.DataFrame:
    """Six integer axis scores per method from a wide metrics table."""
    runs = run_scores(metrics, reference, k_pct)
    uni = universality_scores(metrics)
    rows = []
    for method, grp in runs.groupby("method", sort=True):
        prof = performance_profile(grp["tr"].to_numpy(), list(zip(grp["market"], grp["phase"])),
                                   n_boot=n_boot, seed=seed)
        profit = grp[list(PROFIT_METRICS)].mean(axis=1, skipna=True).dropna()
        risk = grp[list(RISK_METRICS)].mean(axis=1, skipna=True).dropna()
        div = grp["diversity"].dropna()
        rows.append({
            "method": method,
            "profitability": round_half_up(profit.mean()) if len(profit) else math.nan,
            "risk_control": round_half_up(risk.mean()) if len(risk) else math.nan,
            "universality": uni.get(method, math.nan),
            "diversity": round_half_up(div.mean()) if len(div) else math.nan,
            "reliability": reliability_score(prof),
            "explainability": EXPLAINABILITY,
            "fallback_runs": int(grp["flagged"].sum()),
        })
    return pd.DataFrame(rows)


def extreme_table(metrics: pd.DataFrame, reference: str = "market_average", k: float = 1.0,
                  measures=("tr", "sr")) -> pd.DataFrame:
    """Extreme-window scores m_score for each run and measure."""
    ave = reference_values(metrics, reference)
    rows = []
    for r in metrics.itertuples(index=False):
        for m in measures:
            m_ave = ave.loc[(r.market, r.phase), m]
            val = getattr(r, m)
            score = math.nan if (m_ave == 0 or math.isnan(m_ave) or math.isnan(val)) else extreme_score(val, m_ave, k)
            rows.append({"method": r.method, "market": r.market, "phase": r.phase, "seed": r.seed,
                         "metric": m, "value": val, "m_ave": m_ave, "m_score": score})
    return pd.DataFrame(rows)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return str(int(x)) if x.is_integer() else format(x, ".6g")


def to_csv(df: pd.DataFrame) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(df.columns)
    for row in df.itertuples(index=False):
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    return buf.getvalue()


def profile_frame(curves: dict) -> pd.DataFrame:
    rows = []
    for method in sorted(curves):
        c = curves[method]
        for t, p, lo, hi in zip(c.taus, c.point, c.lo, c.hi):
            rows.append({"method": method, "tau": t, "point": p, "lo": lo, "hi": hi})
    return pd.DataFrame(rows)


def rank_frame(matrices: dict) -> pd.DataFrame:
    rows = []
    for metric in matrices:
        rm = matrices[metric]
        for method in rm.index:
            for rank in rm.columns:
                rows.append({"metric": metric, "method": method, "rank": int(rank),
                             "probability": float(rm.loc[method, rank])})
    return pd.DataFrame(rows)
