"""Time-driven portfolio-management environment over historical bars."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidActionError, NumericDomainError, ValidationError
from .market_data import AssetPanel, FeaturePanel, SplitPlan

SIMPLEX_TOL = 1e-6
STACK = 3


@dataclass(frozen=True)
class PortfolioWeights:
    """Cash-first simplex vector; renormalized exactly on construction."""

    values: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.values, dtype=float).copy()
        if w.ndim != 1 or w.size < 1 or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be a finite 1-D vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"weights not on the simplex (min {w.min():.3g}, sum {w.sum():.9g})")
        w /= w.sum()
        w.setflags(write=False)
        object.__setattr__(self, "values", w)

    @classmethod
    def all_cash(cls, n_assets: int) -> "PortfolioWeights":
        w = np.zeros(n_assets + 1)
        w[0] = 1.0
        return cls(w)

    @property
    def cash(self) -> float:
        return float(self.values[0])

    def __len__(self):
        return len(self.values)


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def on_simplex(a: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    return bool(np.all(a >= 0) and abs(a.sum() - 1.0) <= tol)


def project_action(action) -> PortfolioWeights:
    """Map a raw action to portfolio weights.

    Vectors already on the simplex are used as-is; anything else goes
    through a softmax.
    """
    a = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidActionError("action contains NaN or inf")
    if on_simplex(a):
        return PortfolioWeights(a)
    return PortfolioWeights(softmax(a))


def value_step(v: float, w, p_t, p_next, commission: float = 0.0, prev=None) -> float:
    """Portfolio value after one price move.

    ``p_t`` and ``p_next`` are risky-asset prices (cash is implicit with a
    constant price). With a commission, the risky turnover relative to
    ``prev`` (all cash when omitted) is charged before prices move.
    """
    w = np.asarray(getattr(w, "values", w), dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    p_next = np.asarray(p_next, dtype=float)
    if np.any(~(p_t > 0)) or np.any(~(p_next > 0)):
        raise NumericDomainError("prices must be strictly positive")
    if not 0.0 <= commission < 1.0:
        raise NumericDomainError("commission must lie in [0, 1)")
    growth = w[0] + np.dot(w[1:], p_next / p_t)
    if commission > 0:
        prev_w = np.zeros_like(w) if prev is None else np.asarray(getattr(prev, "values", prev), dtype=float)
        v = v * (1.0 - commission * np.abs(w[1:] - prev_w[1:]).sum())
    return float(v * growth)


@dataclass(frozen=True)
class EnvState:
    obs: np.ndarray
    weights: PortfolioWeights
    cash: float
    t: int
    v: float


@dataclass(frozen=True)
class StepOutcome:
    state: EnvState
    reward: float
    done: bool
    weights: PortfolioWeights


def obs_dim(n_assets: int, n_features: int = 11, stack: int = STACK) -> int:
    return n_assets * n_features * stack + 2


class PortfolioEnv:
    """Single-owner episode runner over one calendar segment ``[start, stop)``."""

    def __init__(self, features: FeaturePanel, prices: AssetPanel, segment: tuple[int, int],
                 initial_value: float = 1.0, commission: float = 0.0, stack: int = STACK):
        start, stop = segment
        if features.tickers != prices.tickers or len(features.calendar) != len(prices.calendar):
            raise ValidationError("features and prices cover different assets or calendars")
        if start < features.warmup:
            raise ValidationError(f"segment starts at {start}, inside the warmup ({features.warmup})")
        if stop - start <= stack + 1:
            raise ValidationError(f"segment of length {stop - start} too short for stack {stack}")
        if not initial_value > 0:
            raise NumericDomainError("initial value must be positive")
        self.features = features
        self.prices = prices.close
        self.calendar = prices.calendar
        self.start, self.stop = start, stop
        self.stack = stack
        self.initial_value = float(initial_value)
        self.commission = commission
        self.n_assets = prices.n_assets
        self.state: EnvState | None = None

    @property
    def horizon(self) -> int:
        return self.stop - self.start - self.stack

    @property
    def action_dim(self) -> int:
        return self.n_assets + 1

    @property
    def obs_dim(self) -> int:
        return obs_dim(self.n_assets, self.features.values.shape[-1], self.stack)

    def _observe(self, t: int, weights: PortfolioWeights, v: float) -> EnvState:
        frames = self.features.values[:, t - self.stack + 1:t + 1, :].transpose(1, 0, 2).ravel()
        obs = np.concatenate([frames, [weights.cash, v / self.initial_value]])
        obs.setflags(write=False)
        return EnvState(obs, weights, weights.cash, t, v)

    def reset(self) -> EnvState:
        self.state = self._observe(self.start + self.stack - 1, PortfolioWeights.all_cash(self.n_assets),
                                   self.initial_value)
        return self.state

    def step(self, action) -> StepOutcome:
        s = self.state
        if s is None or s.t >= self.stop - 1:
            raise ValidationError("step called on a terminal or un-reset environment")
        w = project_action(action)
        if len(w) != self.action_dim:
            raise InvalidActionError(f"action has length {len(w)}, expected {self.action_dim}")
        p_t, p_next = self.prices[:, s.t], self.prices[:, s.t + 1]
        v_next = value_step(s.v, w, p_t, p_next, self.commission, prev=s.weights)
        held = w.values * np.concatenate([[1.0], p_next / p_t])
        drifted = PortfolioWeights(held / held.sum())
        self.state = self._observe(s.t + 1, drifted, v_next)
        return StepOutcome(self.state, v_next - s.v, s.t + 1 == self.stop - 1, w)


def make_env(features: FeaturePanel, prices: AssetPanel, plan: SplitPlan, phase: int, segment: str,
             initial_value: float = 1.0, **kwargs) -> PortfolioEnv:
    return PortfolioEnv(features, prices, plan.phase(phase).segment(segment), initial_value, **kwargs)


@dataclass
class RunRecord:
    method: str
    market: str
    phase: int
    seed: int
    dates: list[str]
    equity: np.ndarray
    returns: np.ndarray
    weights: np.ndarray
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.equity = np.asarray(self.equity, dtype=float)
        self.returns = np.asarray(self.returns, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float).reshape(len(self.returns), -1)
        if len(self.equity) != len(self.returns) + 1 or len(self.dates) != len(self.equity):
            raise ValidationError("run record has inconsistent lengths")

    @property
    def key(self) -> tuple:
        return (self.method, self.market, self.phase, self.seed)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "market": self.market, "phase": int(self.phase), "seed": int(self.seed),
            "dates": list(self.dates), "equity": self.equity.tolist(), "returns": self.returns.tolist(),
            "weights": self.weights.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        missing = {"method", "market", "phase", "seed", "dates", "equity", "returns", "weights"} - set(d)
        if missing:
            raise ValidationError(f"run record missing fields {sorted(missing)}")
        return cls(d["method"], d["market"], int(d["phase"]), int(d["seed"]), list(d["dates"]),
                   d["equity"], d["returns"], d["weights"])

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))


Policy = Callable[[EnvState], np.ndarray]


def run_episode(policy: Policy, env: PortfolioEnv, method: str = "", market: str = "", phase: int = 0,
                seed: int = 0) -> RunRecord:
    state = env.reset()
    equity, weights = [state.v], []
    done = False
    while not done:
        out = env.step(policy(state))
        weights.append(out.weights.values)
        equity.append(out.state.v)
        state, done = out.state, out.done
    equity = np.array(equity)
    dates = [env.calendar[t].isoformat() for t in range(env.start + env.stack - 1, env.stop)]
    return RunRecord(method, market, phase, seed, dates, equity, equity[1:] / equity[:-1] - 1, np.array(weights))


def market_average_policy(n_assets: int) -> Policy:
    uniform = np.full(n_assets + 1, 1.0 / (n_assets + 1))
    return lambda state: uniform


def random_policy(n_assets: int, rng: np.random.Generator) -> Policy:
    return lambda state: rng.dirichlet(np.ones(n_assets + 1))
