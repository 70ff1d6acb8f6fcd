"""Training loops and test-segment backtests for every supported method.

Seed scheme: ``SeedSequence(seed)`` is spawned into four children, used in
order for network initialization, environment-side sampling (masks and
exploration noise), replay sampling and update noise, and the random
policy.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import (ExpertEnsemble, ReplayBuffer, SacAgent, alphamix_update, ensemble_act, policy_head,
                     sac_update)
from .env import PortfolioEnv, RunRecord, market_average_policy, random_policy, run_episode, softmax
from .errors import NonFiniteError, TrainingAbort, ValidationError
from .market_data import AssetPanel, FeaturePanel, SplitPlan, normalize_features
from .nn import write_json_atomic

log = logging.getLogger(__name__)

METHODS = ("alphamix", "sac", "random", "market_average")


@dataclass
class AgentConfig:
    n_experts: int = 3
    beta: float = 0.5
    weight_k: float = 0.5
    weight_T: float = 20.0
    alpha: float = 0.2
    gamma: float = 0.99
    rho: float = 0.995
    lr_actor: float = 7e-4
    lr_critic: float = 7e-4
    batch_size: int = 256
    buffer_size: int = 10000
    warmup_steps: int = 10000
    epochs: int = 10
    hidden_sizes: tuple = (128, 128)
    seed: int = 0
    # starting capital; rewards are value changes, so this also sets the reward scale
    # relative to the entropy temperature
    initial_value: float = 10000.0
    commission: float = 0.0

    @classmethod
    def from_mapping(cls, values: dict) -> "AgentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in fields:
                raise ValidationError(f"unknown agent config key {key!r}")
            default = fields[key].default
            if key == "hidden_sizes":
                kw[key] = raw if isinstance(raw, tuple) else tuple(int(x) for x in str(raw).replace(" ", "").split(",") if x)
            elif isinstance(default, bool):
                kw[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[key] = int(raw)
            else:
                kw[key] = float(raw)
        return cls(**kw)

    def to_mapping(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = ",".join(str(h) for h in self.hidden_sizes)
        return d


@dataclass
class DataBundle:
    """Raw features plus prices and a split plan for one market."""

    market: str
    prices: AssetPanel
    raw_features: FeaturePanel
    plan: SplitPlan
    _norm: dict = field(default_factory=dict, repr=False)

    def features_for(self, phase: int) -> FeaturePanel:
        """Features normalized on the training range of ``phase``."""
        if phase not in self._norm:
            self._norm[phase] = normalize_features(self.raw_features, self.plan.phase(phase).train)
        return self._norm[phase]

    def env(self, phase: int, segment: str, cfg: AgentConfig) -> PortfolioEnv:
        return PortfolioEnv(self.features_for(phase), self.prices, self.plan.phase(phase).segment(segment),
                            cfg.initial_value, cfg.commission)


def _checkpoint(path, agents, meta) -> None:
    if path is None:
        return
    path = Path(path)
    for i, agent in enumerate(agents):
        write_json_atomic(path / f"expert_{i}.json", {"meta": meta, **agent.to_dict()})


def load_experts(path) -> list[SacAgent]:
    files = sorted(Path(path).glob("expert_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no expert checkpoints in {path}")
    return [SacAgent.from_dict(json.loads(f.read_text())) for f in files]


def exploit_policy(experts):
    def policy(state):
        return softmax(np.mean([policy_head(e, state.obs)[0].mean for e in experts], axis=0))
    return policy


def _snapshot(agent: SacAgent) -> dict:
    # updates rebind attributes to fresh objects, so holding references is enough
    return {k: (list(v) if isinstance(v, list) else v) for k, v in vars(agent).items()}


def _restore(agent: SacAgent, snap: dict) -> None:
    vars(agent).update(snap)


def train_agent(method: str, bundle: DataBundle, phase: int, seed: int, cfg: AgentConfig | None = None,
                checkpoint_dir=None) -> RunRecord:
    """Train ``method`` on the phase's training segment, then backtest on its test segment."""
    cfg = cfg or AgentConfig()
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    init_ss, env_ss, update_ss, policy_ss = np.random.SeedSequence(seed).spawn(4)
    test_env = bundle.env(phase, "test", cfg)
    M = test_env.n_assets
    tag = dict(method=method, market=bundle.market, phase=phase, seed=seed)

    if method == "market_average":
        return run_episode(market_average_policy(M), test_env, **tag)
    if method == "random":
        return run_episode(random_policy(M, np.random.default_rng(policy_ss)), test_env, **tag)

    agent_kw = dict(alpha=cfg.alpha, gamma=cfg.gamma, rho=cfg.rho, lr_actor=cfg.lr_actor, lr_critic=cfg.lr_critic)
    if method == "alphamix":
        ens = ExpertEnsemble(test_env.obs_dim, M + 1, cfg.n_experts, cfg.hidden_sizes, init_ss,
                             T=cfg.weight_T, k=cfg.weight_k, beta=cfg.beta, **agent_kw)
    else:
        ens = ExpertEnsemble(test_env.obs_dim, M + 1, 1, cfg.hidden_sizes, init_ss, beta=1.0, **agent_kw)
    experts = ens.experts
    train_env = bundle.env(phase, "train", cfg)
    buffer = ReplayBuffer(cfg.buffer_size, train_env.obs_dim, M + 1, len(ens))
    env_rng = np.random.default_rng(env_ss)
    upd_rng = np.random.default_rng(update_ss)
    meta = {**tag, "config": cfg.to_mapping()}

    steps = 0
    for epoch in range(cfg.epochs):
        state = train_env.reset()
        done = False
        while not done:
            if steps < cfg.warmup_steps:
                u = env_rng.standard_normal(M + 1)
            else:
                u = ensemble_act(ens, state.obs, "explore", env_rng)
            out = train_env.step(softmax(u))
            buffer.add(state.obs, u, out.reward, out.state.obs, out.done, ens.sample_masks(env_rng))
            state, done = out.state, out.done
            steps += 1
            if steps >= cfg.warmup_steps and len(buffer) >= 1:
                snapshot = [_snapshot(e) for e in experts]
                try:
                    if method == "alphamix":
                        alphamix_update(ens, buffer, upd_rng, cfg.batch_size)
                    else:
                        sac_update(experts[0], buffer.sample(cfg.batch_size, upd_rng), upd_rng)
                except NonFiniteError as exc:
                    for e, snap in zip(experts, snapshot):
                        _restore(e, snap)
                    _checkpoint(checkpoint_dir, experts, meta)
                    raise TrainingAbort(f"{exc} at step {steps} (epoch {epoch})", checkpoint_dir) from exc
        log.debug("%s seed %d epoch %d done (%d steps)", method, seed, epoch, steps)

    _checkpoint(checkpoint_dir, experts, meta)
    return run_episode(exploit_policy(experts), test_env, **tag)


def backtest(method: str, bundle: DataBundle, phase: int, seed: int, cfg: AgentConfig | None = None,
             checkpoint_dir=None, segment: str = "test") -> RunRecord:
    """Re-run a stored policy (or a non-learning one) on a segment."""
    cfg = cfg or AgentConfig()
    env = bundle.env(phase, segment, cfg)
    tag = dict(method=method, market=bundle.market, phase=phase, seed=seed)
    if method == "market_average":
        return run_episode(market_average_policy(env.n_assets), env, **tag)
    if method == "random":
        policy_ss = np.random.SeedSequence(seed).spawn(4)[3]
        return run_episode(random_policy(env.n_assets, np.random.default_rng(policy_ss)), env, **tag)
    if checkpoint_dir is None or not os.path.isdir(checkpoint_dir):
        raise FileNotFoundError(f"checkpoint directory {checkpoint_dir} not found")
    return run_episode(exploit_policy(load_experts(checkpoint_dir)), env, **tag)
