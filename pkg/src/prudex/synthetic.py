"""Synthetic OHLCV markets for smoke tests and demos."""

from __future__ import annotations

import numpy as np
import pandas as pd


def synthetic_market(n_assets: int = 3, n_steps: int = 830, drift: float = 0.001, drift_asset: int = 0,
                     sigma: float = 0.01, seed: int = 0, start: str = "2015-01-01", freq: str = "D") -> str:
    """Long-format OHLCV CSV text of geometric random walks.

    Asset ``drift_asset`` gains ``drift`` per step on average; the others are
    driftless. Every step has Gaussian log-return noise of scale ``sigma``.
    """
    rng = np.random.default_rng(seed)
    dates = pd.date_range(start, periods=n_steps, freq=freq)
    mu = np.zeros(n_assets)
    mu[drift_asset] = drift
    log_ret = mu[:, None] + sigma * rng.standard_normal((n_assets, n_steps))
    log_ret[:, 0] = 0.0
    close = 100.0 * np.exp(np.cumsum(log_ret, axis=1))
    open_ = close * np.exp(0.002 * rng.standard_normal((n_assets, n_steps)))
    hi = np.maximum(open_, close) * (1 + 0.003 * rng.random((n_assets, n_steps)))
    lo = np.minimum(open_, close) * (1 - 0.003 * rng.random((n_assets, n_steps)))
    vol = rng.integers(1_000, 10_000, (n_assets, n_steps))
    lines = ["date,ticker,open,high,low,close,volume"]
    for i in range(n_assets):
        tic = f"SYN{i}"
        for t, d in enumerate(dates):
            lines.append(f"{d.date().isoformat()},{tic},{float(open_[i, t])!r},{float(hi[i, t])!r},{float(lo[i, t])!r},{float(close[i, t])!r},{vol[i, t]}")
    return "\n".join(lines) + "\n"
