"""Point-wise financial metrics computed from run records.

All ratios are per period; nothing is annualized unless an explicit
``periods_per_year`` is passed. Metrics that cannot be defined for a series
(zero denominators, too few negative returns) come back as NaN.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .env import RunRecord
from .errors import NumericDomainError, ValidationError

METRIC_NAMES = ("tr", "vol", "mdd", "dd", "sr", "sor", "cr", "ent", "enb")
EIGEN_FLOOR = 1e-12

# black-swan windows used for stress evaluation, keyed by market
EXTREME_WINDOWS = {
    "China": ("2021-02-01", "2021-03-31"),
    "US": ("2020-03-01", "2020-04-30"),
    "Crypto": ("2021-04-01", "2021-05-31"),
}


def _positive_series(equity) -> np.ndarray:
    n = np.asarray(equity, dtype=float)
    if n.ndim != 1 or n.size < 2:
        raise NumericDomainError("need at least two values")
    if not np.all(n > 0):
        raise NumericDomainError("values must be positive")
    return n


def total_return(equity) -> float:
    n = _positive_series(equity)
    return float((n[-1] - n[0]) / n[0])


def volatility_and_dd(returns) -> tuple[float, float]:
    """Sample std of all returns, and of the strictly negative ones."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise NumericDomainError("need at least two returns")
    vol = float(np.std(r, ddof=1))
    neg = r[r < 0]
    dd = float(np.std(neg, ddof=1)) if neg.size >= 2 else math.nan
    return vol, dd


def max_drawdown(equity) -> float:
    n = _positive_series(equity)
    peak = np.maximum.accumulate(n)
    return float(np.max((peak - n) / peak))


def _ratio(num, den) -> float:
    if not np.isfinite(den) or den == 0:
        return math.nan
    return float(num / den)


def risk_adjusted(returns, equity) -> tuple[float, float, float]:
    """Sharpe, Sortino and Calmar ratios (mean return over Vol, DD, MDD)."""
    r = np.asarray(returns, dtype=float)
    vol, dd = volatility_and_dd(r)
    mean = float(np.mean(r))
    return _ratio(mean, vol), _ratio(mean, dd), _ratio(mean, max_drawdown(equity))


def entropy(weights, form: str = "shannon") -> float:
    w = np.asarray(weights, dtype=float)
    nz = w[w > 0]
    h = float(-np.sum(nz * np.log(nz)))
    if form == "shannon":
        return h
    if form == "exponential":
        return math.exp(h)
    raise ValueError(f"unknown entropy form {form!r}")


def effective_bets(weights, cov, power: int = 2) -> float:
    """Exponential entropy of the eigen-space risk contribution distribution.

    ``weights`` are risky-asset weights (cash already removed); they are
    renormalized here. ``power`` selects lambda^2 (default) or lambda
    weighting of each principal component.
    """
    w = np.asarray(weights, dtype=float)
    S = np.asarray(cov, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] != w.size:
        raise ValidationError(f"covariance shape {S.shape} does not match {w.size} weights")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-14):
        raise ValidationError("covariance matrix is not symmetric")
    total = w.sum()
    if total <= 0:
        return math.nan
    w = w / total
    lam, E = np.linalg.eigh(S)
    lam = np.maximum(lam, EIGEN_FLOOR)
    wf = E.T @ w
    contrib = wf ** 2 * lam ** power
    if contrib.sum() <= 0:
        return math.nan
    p = contrib / contrib.sum()
    nz = p[p > 0]
    return float(math.exp(-np.sum(nz * np.log(nz))))


def average_portfolio(weights, window: slice | tuple | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if window is not None:
        w = w[slice(*window) if isinstance(window, tuple) else window]
    if w.shape[0] == 0:
        raise ValidationError("empty averaging window")
    mean = w.mean(axis=0)
    return mean / mean.sum()


def extreme_score(m_rl: float, m_ave: float, k: float = 1.0) -> float:
    if m_ave == 0:
        raise NumericDomainError("market-average metric is zero")
    return (m_ave / abs(m_ave)) * (m_rl / m_ave - 1) * k + 1


@dataclass(frozen=True)
class MetricsReport:
    tr: float
    vol: float
    mdd: float
    dd: float
    sr: float
    sor: float
    cr: float
    ent: float
    enb: float
    start: str = ""
    end: str = ""
    annualized: bool = False

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def asset_returns(prices: pd.DataFrame | np.ndarray) -> np.ndarray:
    """Per-step simple returns from a (time, asset) price matrix."""
    p = np.asarray(prices, dtype=float)
    return p[1:] / p[:-1] - 1


def compute_metrics(record: RunRecord, asset_rets: np.ndarray | None = None, entropy_form: str = "shannon",
                    enb_power: int = 2, periods_per_year: float | None = None) -> MetricsReport:
    """Full metric suite for one run.

    ``asset_rets`` are the (time, M) risky-asset returns over the same
    window as the record; without them ENB is NaN.
    """
    eq, r = record.equity, record.returns
    vol, dd = volatility_and_dd(r)
    sr, sor, cr = risk_adjusted(r, eq)
    if periods_per_year:
        f = math.sqrt(periods_per_year)
        vol, dd, sr, sor = vol * f, dd * f, sr * f, sor * f
    wbar = average_portfolio(record.weights)
    enb = math.nan
    if asset_rets is not None and len(asset_rets) >= 2:
        cov = np.atleast_2d(np.cov(np.asarray(asset_rets), rowvar=False))
        enb = effective_bets(wbar[1:], cov, enb_power)
    return MetricsReport(
        tr=total_return(eq), vol=vol, mdd=max_drawdown(eq), dd=dd, sr=sr, sor=sor, cr=cr,
        ent=entropy(wbar, entropy_form), enb=enb,
        start=record.dates[0] if record.dates else "", end=record.dates[-1] if record.dates else "",
        annualized=bool(periods_per_year),
    )


def slice_record(record: RunRecord, start: str, end: str) -> RunRecord:
    """Sub-record whose equity points fall within [start, end] (inclusive dates)."""
    dates = pd.DatetimeIndex(record.dates)
    idx = np.flatnonzero((dates >= pd.Timestamp(start)) & (dates <= pd.Timestamp(end) + pd.Timedelta(days=1) - pd.Timedelta(1)))
    if idx.size < 3:
        raise ValidationError(f"window {start}..{end} covers fewer than 3 points of {record.key}")
    a, b = idx[0], idx[-1]
    return RunRecord(record.method, record.market, record.phase, record.seed, record.dates[a:b + 1],
                     record.equity[a:b + 1], record.returns[a:b], record.weights[a:b])


METRICS_COLUMNS = ("method", "market", "phase", "seed") + METRIC_NAMES


def fmt(x: float) -> str:
    """Full-precision, deterministic float text; NaN as 'nan'."""
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def metrics_rows(records, reports) -> list[dict]:
    rows = []
    for rec, rep in zip(records, reports):
        rows.append({"method": rec.method, "market": rec.market, "phase": rec.phase, "seed": rec.seed,
                     **rep.values()})
    rows.sort(key=lambda d: (d["market"], d["phase"], d["method"], d["seed"]))
    return rows


def write_metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for d in rows:
        w.writerow([d["method"], d["market"], d["phase"], d["seed"], *(fmt(d[m]) for m in METRIC_NAMES)])
    return buf.getvalue()


def read_metrics_csv(source) -> pd.DataFrame:
    df = pd.read_csv(source, dtype={"method": str, "market": str}, float_precision="round_trip")
    missing = [c for c in METRICS_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"metrics table missing columns {missing}")
    return df


def report_dict(report: MetricsReport) -> dict:
    return asdict(report)
