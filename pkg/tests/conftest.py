import sys

import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, settings

from prudex.env import RunRecord
from prudex.market_data import compute_features, make_rolling_splits, parse_ohlcv_csv
from prudex.synthetic import synthetic_market

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def long_csv(closes: dict, start="2020-01-01", adj: dict | None = None) -> bytes:
    """Tiny OHLCV CSV where open=high=low=close unless overridden."""
    lines = ["date,ticker,open,high,low,close" + (",adj_close" if adj else "") + ",volume"]
    for tic, series in closes.items():
        dates = pd.date_range(start, periods=len(series), freq="D")
        for i, (d, c) in enumerate(zip(dates, series)):
            c = float(c)
            extra = f",{float(adj[tic][i])!r}" if adj else ""
            lines.append(f"{d.date()},{tic},{c!r},{c!r},{c!r},{c!r}{extra},1000")
    return ("\n".join(lines) + "\n").encode()


@pytest.fixture(scope="session")
def syn_panel():
    return parse_ohlcv_csv(synthetic_market(n_assets=3, n_steps=200, seed=3).encode())


@pytest.fixture(scope="session")
def syn_features(syn_panel):
    return compute_features(syn_panel)


@pytest.fixture(scope="session")
def syn_plan(syn_panel):
    return make_rolling_splits(syn_panel.calendar, 1, "40D")


def make_record(method="m", market="X", phase=1, seed=0, n=20, n_assets=2, rng=None, weights=None):
    rng = rng or np.random.default_rng(0)
    r = rng.normal(0.001, 0.01, n)
    eq = np.concatenate([[1.0], np.cumprod(1 + r)])
    w = rng.dirichlet(np.ones(n_assets + 1), n) if weights is None else np.asarray(weights)
    dates = [d.isoformat() for d in pd.date_range("2021-01-01", periods=n + 1, freq="D")]
    return RunRecord(method, market, phase, seed, dates, eq, eq[1:] / eq[:-1] - 1, w)


def metrics_table(methods, markets=("A", "B"), phases=(1, 2), seeds=(0, 1, 2), rng=None, reference="market_average"):
    """Random wide metrics table covering every cell.

    The reference method is deterministic, as the real market-average
    policy is: its metrics repeat across seeds.
    """
    rng = rng or np.random.default_rng(0)
    rows = []
    for mk in markets:
        for p in phases:
            for me in methods:
                for s in seeds:
                    if me == reference and s != seeds[0]:
                        rows.append({**rows[-1], "seed": s})
                        continue
                    rows.append({"method": me, "market": mk, "phase": p, "seed": s,
                                 "tr": rng.uniform(0.01, 0.3), "vol": rng.uniform(0.005, 0.03),
                                 "mdd": rng.uniform(0.05, 0.4), "dd": rng.uniform(0.003, 0.02),
                                 "sr": rng.uniform(0.01, 0.2), "sor": rng.uniform(0.01, 0.3),
                                 "cr": rng.uniform(0.001, 0.05), "ent": rng.uniform(0.5, 1.6),
                                 "enb": rng.uniform(1.0, 3.0)})
    return pd.DataFrame(rows)


def compass_csv(n_methods=8, seed=0) -> str:
    """Results CSV in the compass input format with random axes and marks."""
    from prudex.reporting import MEASURE_COLUMNS
    from prudex.scoring import AXES
    rng = np.random.default_rng(seed)
    names = ["AlphaMix+", "SAC", "PPO", "A2C", "EIIE", "SARL", "DeepTrader", "IMIT"]
    names += [f"method_{i}" for i in range(len(names), n_methods)]
    lines = [",".join(["method", *AXES, *MEASURE_COLUMNS])]
    for name in names[:n_methods]:
        axes = [str(int(v)) for v in rng.integers(0, 101, len(AXES) - 1)] + ["50"]
        marks = [str(int(v)) for v in rng.integers(0, 2, len(MEASURE_COLUMNS))]
        lines.append(",".join([name, *axes, *marks]))
    return "\n".join(lines) + "\n"


TINY_PIPELINE = """\
[pipeline]
out = out
seeds = 0, 1
n_boot = 200

[markets]
SYN = syn.csv

[split]
phases = 2
span = 60D

[agent]
n_experts = 2
warmup_steps = 50
buffer_size = 200
epochs = 1
hidden_sizes = 8,8
batch_size = 16

[extreme]
SYN = 2015-12-01, 2016-01-15
"""


def write_tiny_pipeline(directory) -> "Path":
    """Small synthetic market plus a matching pipeline config; returns the config path."""
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "syn.csv").write_text(synthetic_market(n_steps=400, seed=1))
    (d / "cfg.ini").write_text(TINY_PIPELINE)
    return d / "cfg.ini"


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance PASS/FAIL lines at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
