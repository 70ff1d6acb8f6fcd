"""OHLCV ingestion, the 11 temporal features, z-score normalization and rolling splits."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import IO, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyPanelError, InsufficientHistoryError, ParseError, ValidationError

FEATURE_NAMES = (
    "z_open", "z_high", "z_low", "z_close", "z_adj_close",
    "z_d_5", "z_d_10", "z_d_15", "z_d_20", "z_d_25", "z_d_30",
)
MA_WINDOWS = (5, 10, 15, 20, 25, 30)
WARMUP = max(MA_WINDOWS) - 1
CONSTANT_STD = 1e-12

REQUIRED_COLUMNS = ("date", "ticker", "open", "high", "low", "close", "volume")
PRICE_FIELDS = ("open", "high", "low", "close", "adj_close")


@dataclass(frozen=True)
class OhlcvBar:
    timestamp: pd.Timestamp
    open: float
    high: float
    low: float
    close: float
    volume: float
    adj_close: float | None = None

    def __post_init__(self):
        prices = [self.open, self.high, self.low, self.close]
        if self.adj_close is not None:
            prices.append(self.adj_close)
        if not all(np.isfinite(p) and p > 0 for p in prices):
            raise ValidationError(f"non-positive price at {self.timestamp}")
        if not self.volume >= 0:
            raise ValidationError(f"negative volume at {self.timestamp}")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise ValidationError(f"inconsistent high/low at {self.timestamp}")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AssetPanel:
    """Rectangular M x L grid of bars; field arrays are indexed [asset, time]."""

    tickers: tuple[str, ...]
    calendar: pd.DatetimeIndex
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray
    has_adj_close: bool = False
    dropped: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        shape = (len(self.tickers), len(self.calendar))
        for name in ("open", "high", "low", "close", "adj_close", "volume"):
            arr = _frozen(getattr(self, name))
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if not self.calendar.is_monotonic_increasing or not self.calendar.is_unique:
            raise ValidationError("calendar must be strictly increasing")

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    def __len__(self) -> int:
        return len(self.calendar)

    def bar(self, asset: int, t: int) -> OhlcvBar:
        return OhlcvBar(
            self.calendar[t], self.open[asset, t], self.high[asset, t], self.low[asset, t],
            self.close[asset, t], self.volume[asset, t],
            self.adj_close[asset, t] if self.has_adj_close else None,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["date", "ticker", "open", "high", "low", "close"]
        cols += ["adj_close"] if self.has_adj_close else []
        w.writerow(cols + ["volume"])
        for i, tic in enumerate(self.tickers):
            for t, ts in enumerate(self.calendar):
                row = [ts.isoformat(), tic] + [repr(float(getattr(self, f)[i, t])) for f in cols[2:]]
                w.writerow(row + [repr(float(self.volume[i, t]))])
        return buf.getvalue()


def _read_source(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    if isinstance(data, str):
        return data
    return data.decode("utf-8-sig")


def parse_ohlcv_csv(source: bytes | str | os.PathLike | IO, schema: Mapping[str, str] | None = None) -> AssetPanel:
    """Parse a long-format OHLCV CSV into a rectangular panel.

    ``schema`` maps canonical column names (date, ticker, open, high, low,
    close, adj_close, volume) to the header names used in the file. Tickers
    missing any date of the union calendar are dropped and listed in
    ``panel.dropped``.
    """
    schema = dict(schema or {})
    text = _read_source(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyPanelError("empty CSV") from None
    header = [h.strip() for h in header]
    col = {}
    for name in REQUIRED_COLUMNS + ("adj_close",):
        actual = schema.get(name, name)
        if actual in header:
            col[name] = header.index(actual)
        elif name != "adj_close":
            raise ParseError(f"missing column {actual!r}", line=1)
    has_adj = "adj_close" in col

    rows: dict[str, dict[pd.Timestamp, tuple]] = {}
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
        try:
            ts = pd.Timestamp(datetime.fromisoformat(row[col["date"]].strip()))
        except ValueError:
            raise ParseError(f"bad date {row[col['date']]!r}", line=line) from None
        ticker = row[col["ticker"]].strip()
        if not ticker:
            raise ParseError("empty ticker", line=line)
        vals = {}
        for name in ("open", "high", "low", "close", "volume", "adj_close"):
            if name not in col:
                continue
            raw = row[col[name]].strip()
            if name == "adj_close" and raw == "":
                vals[name] = None
                continue
            try:
                vals[name] = float(raw)
            except ValueError:
                raise ParseError(f"bad {name} value {raw!r}", line=line) from None
        for name in PRICE_FIELDS:
            v = vals.get(name)
            if v is not None and not (np.isfinite(v) and v > 0):
                raise ValidationError(f"non-positive {name} {v} for {ticker} on {ts.date()}")
        if not (np.isfinite(vals["volume"]) and vals["volume"] >= 0):
            raise ValidationError(f"negative volume for {ticker} on {ts.date()}")
        o, h, lo, c = vals["open"], vals["high"], vals["low"], vals["close"]
        if lo > min(o, c) or h < max(o, c):
            raise ValidationError(f"high/low inconsistent with open/close for {ticker} on {ts.date()}")
        per = rows.setdefault(ticker, {})
        if ts in per:
            raise ParseError(f"duplicate row for {ticker} on {ts}", line=line)
        adj = vals.get("adj_close")
        per[ts] = (o, h, lo, c, c if adj is None else adj, vals["volume"])

    if not rows:
        raise EmptyPanelError("CSV contains no data rows")
    union = sorted(set().union(*(r.keys() for r in rows.values())))
    keep, dropped = [], []
    for ticker in sorted(rows):
        missing = len(union) - len(rows[ticker])
        if missing:
            dropped.append((ticker, missing))
        else:
            keep.append(ticker)
    if not keep:
        raise EmptyPanelError("no ticker covers the full calendar; intersection is empty")
    calendar = pd.DatetimeIndex(union)
    grid = np.array([[rows[tic][ts] for ts in union] for tic in keep], dtype=float)
    return AssetPanel(
        tickers=tuple(keep), calendar=calendar,
        open=grid[..., 0], high=grid[..., 1], low=grid[..., 2], close=grid[..., 3],
        adj_close=grid[..., 4], volume=grid[..., 5],
        has_adj_close=has_adj, dropped=tuple(dropped),
    )


@dataclass(frozen=True)
class FeaturePanel:
    """Asset x time x 11 tensor. Rows before ``warmup`` hold NaN and are never served."""

    tickers: tuple[str, ...]
    calendar: pd.DatetimeIndex
    values: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES
    warmup: int = WARMUP
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    constant: np.ndarray | None = None
    fit_range: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def normalized(self) -> bool:
        return self.mean is not None

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["date", "ticker", *self.names])
        for i, tic in enumerate(self.tickers):
            for t in range(self.warmup, len(self.calendar)):
                w.writerow([self.calendar[t].isoformat(), tic, *(repr(float(x)) for x in self.values[i, t])])
        return buf.getvalue()


def compute_features(panel: AssetPanel) -> FeaturePanel:
    """Raw (unnormalized) features; entries before the warmup index are NaN."""
    L = len(panel)
    if L < WARMUP + 1:
        raise InsufficientHistoryError(f"need at least {WARMUP + 1} time steps, got {L}")
    close = panel.close
    out = np.full((panel.n_assets, L, len(FEATURE_NAMES)), np.nan)
    out[:, :, 0] = panel.open / close - 1
    out[:, :, 1] = panel.high / close - 1
    out[:, :, 2] = panel.low / close - 1
    out[:, 1:, 3] = close[:, 1:] / close[:, :-1] - 1
    out[:, 1:, 4] = panel.adj_close[:, 1:] / panel.adj_close[:, :-1] - 1
    for j, k in enumerate(MA_WINDOWS):
        window_mean = np.lib.stride_tricks.sliding_window_view(close, k, axis=1).mean(axis=-1)
        out[:, k - 1:, 5 + j] = window_mean / close[:, k - 1:] - 1
    out[:, :WARMUP, :] = np.nan
    return FeaturePanel(panel.tickers, panel.calendar, out)


def normalize_features(raw: FeaturePanel, fit_range: tuple[int, int]) -> FeaturePanel:
    """Z-score each feature with statistics pooled over assets in ``fit_range`` only."""
    start, stop = fit_range
    L = len(raw.calendar)
    if not (raw.warmup <= start < stop <= L):
        raise ValidationError(f"fit range {fit_range} must be non-empty, past warmup {raw.warmup}, inside [0, {L})")
    fit = raw.values[:, start:stop, :].reshape(-1, raw.values.shape[-1])
    mean = fit.mean(axis=0)
    std = fit.std(axis=0)
    constant = std < CONSTANT_STD
    safe = np.where(constant, 1.0, std)
    z = (raw.values - mean) / safe
    z[:, :, constant] = 0.0
    z[:, :raw.warmup, :] = np.nan
    return FeaturePanel(
        raw.tickers, raw.calendar, z, raw.names, raw.warmup,
        mean=_frozen(mean), std=_frozen(std), constant=constant, fit_range=(start, stop),
    )


@dataclass(frozen=True)
class Phase:
    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def segment(self, name: str) -> tuple[int, int]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown segment {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class SplitPlan:
    phases: tuple[Phase, ...]
    span: str = "1Y"
    calendar: pd.DatetimeIndex | None = field(default=None, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.phases)

    def phase(self, number: int) -> Phase:
        """1-based phase lookup to match the usual phase numbering."""
        if not 1 <= number <= len(self.phases):
            raise ValueError(f"phase {number} not in 1..{len(self.phases)}")
        return self.phases[number - 1]

    def to_dict(self) -> dict:
        d = {"span": self.span, "phases": [
            {"phase": i + 1, "train": list(p.train), "valid": list(p.valid), "test": list(p.test)}
            for i, p in enumerate(self.phases)
        ]}
        if self.calendar is not None:
            d["dates"] = [[self.calendar[i].isoformat() for i in (p.train[0], p.test[1] - 1)] for p in self.phases]
        return d


def parse_span(span) -> pd.DateOffset:
    """Accept a DateOffset, a timedelta, or strings like '1Y', '6M', '90D'."""
    if isinstance(span, pd.DateOffset):
        return span
    if isinstance(span, (pd.Timedelta,)) or hasattr(span, "total_seconds"):
        return pd.DateOffset(days=pd.Timedelta(span).days, seconds=pd.Timedelta(span).seconds)
    s = str(span).strip().upper()
    units = {"Y": "years", "M": "months", "W": "weeks", "D": "days", "H": "hours"}
    if s and s[-1] in units:
        return pd.DateOffset(**{units[s[-1]]: int(s[:-1] or 1)})
    raise ValueError(f"cannot parse span {span!r}")


def make_rolling_splits(calendar: Sequence, phases: int = 3, span="1Y", warmup: int = WARMUP) -> SplitPlan:
    """Rolling train/valid/test plan; the last phase tests on the final span.

    Phase p's valid and test windows sit (phases - p) spans before the last
    phase's; every phase trains on everything from ``warmup`` up to its valid
    window.
    """
    cal = pd.DatetimeIndex(calendar)
    offset = parse_span(span)
    if phases < 1:
        raise ValueError("phase count must be >= 1")
    L = len(cal)
    end = cal[-1]

    def idx(j):
        return L if j == 0 else int(np.searchsorted(cal.values, (end - j * offset).to_datetime64(), side="right"))

    out = []
    for p in range(1, phases + 1):
        shift = phases - p
        test = (idx(shift + 1), idx(shift))
        valid = (idx(shift + 2), idx(shift + 1))
        train = (warmup, valid[0])
        if not (train[1] - train[0] >= 1 and valid[1] > valid[0] and test[1] > test[0]):
            raise InsufficientHistoryError(
                f"{phases} phases with span {span!r} need more than {phases + 1} spans of calendar "
                f"plus {warmup + 1} warmup/training rows; calendar covers {cal[0].date()}..{end.date()} ({L} rows)"
            )
        out.append(Phase(train, valid, test))
    return SplitPlan(tuple(out), str(span), cal)


def export_embedding_samples(panel: FeaturePanel, stride: int = 30, market: str = "") -> pd.DataFrame:
    """Rows for an external 2-D embedder: every ``stride``-th post-warmup step, asset-major."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ts = np.arange(panel.warmup, len(panel.calendar), stride)
    records = []
    for i, tic in enumerate(panel.tickers):
        for t in ts:
            records.append([market, tic, int(t), *panel.values[i, t]])
    cols = ["market", "asset", "t"] + [f"f{j + 1}" for j in range(len(panel.names))]
    return pd.DataFrame.from_records(records, columns=cols)
