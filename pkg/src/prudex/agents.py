"""SAC experts, the risk-aware weighted ensemble, and the replay buffer.

Critics score a raw action through its softmax portfolio, ``Q(s, softmax(u))``,
so gradients with respect to ``u`` pass through the softmax Jacobian. The
entropy term uses the Gaussian log-density of ``u`` itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import softmax
from .errors import NonFiniteError, NumericDomainError, ValidationError
from .nn import (AdamState, GaussianHead, Mlp, adam_step, gaussian_sample, mlp_backward, mlp_forward, mlp_init,
                 sigmoid)


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    masks: np.ndarray

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """Ring buffer of transitions with one Bernoulli mask column per expert."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int, n_experts: int = 1):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.masks = np.zeros((capacity, n_experts))
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done, masks) -> None:
        masks = np.asarray(masks, dtype=float)
        if not np.all((masks == 0) | (masks == 1)):
            raise ValidationError("bootstrap masks must be 0/1")
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i], self.masks[i] = s, a, r, s2, float(done), masks
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValidationError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx], self.masks[idx])


class SacAgent:
    """Gaussian actor, twin critics and their delayed (EMA) targets."""

    def __init__(self, obs_dim: int, action_dim: int, hidden=(128, 128), seed=0, alpha: float = 0.2,
                 gamma: float = 0.99, rho: float = 0.995, lr_actor: float = 7e-4, lr_critic: float = 7e-4):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_actor, s_c1, s_c2 = ss.spawn(3)
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.alpha, self.gamma, self.rho = alpha, gamma, rho
        self.actor = mlp_init((obs_dim, *hidden, 2 * action_dim), s_actor)
        self.critics = [mlp_init((obs_dim + action_dim, *hidden, 1), s) for s in (s_c1, s_c2)]
        self.targets = [c.copy() for c in self.critics]
        self.actor_opt = AdamState.for_params(self.actor, lr_actor)
        self.critic_opts = [AdamState.for_params(c, lr_critic) for c in self.critics]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "gamma": self.gamma, "rho": self.rho,
            "actor": self.actor.to_dict(), "actor_adam": self.actor_opt.to_dict(),
            "critics": [c.to_dict() for c in self.critics], "targets": [t.to_dict() for t in self.targets],
            "critic_adam": [o.to_dict() for o in self.critic_opts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SacAgent":
        agent = cls.__new__(cls)
        agent.alpha, agent.gamma, agent.rho = d["alpha"], d["gamma"], d["rho"]
        agent.actor = Mlp.from_dict(d["actor"])
        agent.actor_opt = AdamState.from_dict(d["actor_adam"])
        agent.critics = [Mlp.from_dict(c) for c in d["critics"]]
        agent.targets = [Mlp.from_dict(t) for t in d["targets"]]
        agent.critic_opts = [AdamState.from_dict(o) for o in d["critic_adam"]]
        agent.obs_dim = agent.actor.sizes[0]
        agent.action_dim = agent.actor.sizes[-1] // 2
        return agent


def policy_head(agent: SacAgent, s: np.ndarray):
    out, cache = mlp_forward(agent.actor, s)
    return GaussianHead.from_output(out), cache


def q_forward(critic: Mlp, s: np.ndarray, u: np.ndarray):
    w = softmax(u)
    q, cache = mlp_forward(critic, np.concatenate([s, w], axis=-1))
    return q[..., 0], cache, w


def q_backward(critic: Mlp, cache, w: np.ndarray, grad_q: np.ndarray):
    """Parameter gradients and dL/du for dL/dQ = ``grad_q``."""
    grads, gx = mlp_backward(critic, cache, grad_q[..., None])
    gw = gx[..., -w.shape[-1]:]
    gu = w * (gw - np.sum(w * gw, axis=-1, keepdims=True))
    return grads, gu


def target_min_q(agent: SacAgent, s: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(q_forward(agent.targets[0], s, u)[0], q_forward(agent.targets[1], s, u)[0])


def _noise(rng, noise, shape):
    if noise is not None:
        return np.asarray(noise, dtype=float)
    if rng is None:
        raise ValueError("pass either rng or noise")
    return rng.standard_normal(shape)


def next_action(agent: SacAgent, s2: np.ndarray, rng=None, noise=None):
    head, _ = policy_head(agent, s2)
    u2, logp2, _ = gaussian_sample(head, noise=_noise(rng, noise, head.mean.shape))
    return u2, logp2


def soft_target_value(agent: SacAgent, s2: np.ndarray, rng=None, noise=None) -> np.ndarray:
    """min-twin target Q at a fresh actor sample, minus alpha * log-density."""
    u2, logp2 = next_action(agent, s2, rng, noise)
    return target_min_q(agent, s2, u2) - agent.alpha * logp2


def _check_finite(loss, what):
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite {what} loss")


def critic_loss_and_grads(agent: SacAgent, s, a, y, coef=None, denom=None):
    """Sum over twins of sum_b coef_b (Q_j(s_b, a_b) - y_b)^2 / denom.

    Returns ``(total_loss, [grad_critic1, grad_critic2], per_twin_losses)``.
    """
    B = len(y)
    coef = np.ones(B) if coef is None else coef
    denom = float(B) if denom is None else float(denom)
    total, grads, parts = 0.0, [], []
    for critic in agent.critics:
        q, cache, w = q_forward(critic, s, a)
        resid = q - y
        loss = float(np.sum(coef * resid * resid) / denom)
        _check_finite(loss, "critic")
        g, _ = q_backward(critic, cache, w, 2.0 * coef * resid / denom)
        total += loss
        grads.append(g)
        parts.append(loss)
    return total, grads, parts


def bellman_target(agent: SacAgent, batch: Batch, v_next: np.ndarray) -> np.ndarray:
    return batch.r + agent.gamma * (1.0 - batch.done) * v_next


def sac_critic_loss(agent: SacAgent, batch: Batch, rng=None, noise=None):
    """Plain soft Bellman residual averaged over the batch, for both twins."""
    y = bellman_target(agent, batch, soft_target_value(agent, batch.s2, rng, noise))
    loss, grads, _ = critic_loss_and_grads(agent, batch.s, batch.a, y)
    return loss, grads


def sac_actor_loss(agent: SacAgent, s: np.ndarray, rng=None, noise=None, coef=None, denom=None):
    """Mean of alpha * log pi(u|s) - min-twin Q(s, u) with u reparameterized.

    Critics are held fixed; only actor gradients are returned.
    """
    head, cache = policy_head(agent, s)
    xi = _noise(rng, noise, head.mean.shape)
    u, logp, _ = gaussian_sample(head, noise=xi)
    B = len(s)
    coef = np.ones(B) if coef is None else coef
    denom = float(B) if denom is None else float(denom)
    qs = [q_forward(c, s, u) for c in agent.critics]
    pick = qs[0][0] <= qs[1][0]
    qmin = np.where(pick, qs[0][0], qs[1][0])
    loss = float(np.sum(coef * (agent.alpha * logp - qmin)) / denom)
    _check_finite(loss, "actor")
    gu = np.zeros_like(u)
    for (q, qcache, w), critic, sel in zip(qs, agent.critics, (pick, ~pick)):
        _, g = q_backward(critic, qcache, w, np.where(sel, -coef / denom, 0.0))
        gu += g
    scale = (coef / denom)[:, None]
    g_mean = gu
    g_log_std = (gu * head.std * xi - agent.alpha * scale) * ~head.clamped
    grads, _ = mlp_backward(agent.actor, cache, np.concatenate([g_mean, g_log_std], axis=-1))
    return loss, grads


def confidence_weight(q_std, T: float = 20.0, k: float = 0.5):
    """sigmoid(-q_std * T) + k, bounded in [k, k + 0.5]."""
    q = np.asarray(q_std, dtype=float)
    if np.any(q < 0) or np.any(np.isnan(q)):
        raise NumericDomainError("q_std must be non-negative")
    if T <= 0 or k <= 0:
        raise NumericDomainError("T and k must be positive")
    x = -q * T
    w = np.exp(x) / (1.0 + np.exp(x)) + k
    return float(w) if w.ndim == 0 else w


def ema_update(target: Mlp, online: Mlp, rho: float) -> Mlp:
    return Mlp(target.sizes,
               [rho * t + (1 - rho) * o for t, o in zip(target.weights, online.weights)],
               [rho * t + (1 - rho) * o for t, o in zip(target.biases, online.biases)])


class ExpertEnsemble:
    """N independently seeded SAC experts sharing one temperature alpha."""

    def __init__(self, obs_dim: int, action_dim: int, n_experts: int = 3, hidden=(128, 128), seed=0,
                 T: float = 20.0, k: float = 0.5, beta: float = 0.5, **agent_kw):
        if n_experts < 1 or T <= 0 or k <= 0 or not 0 < beta <= 1:
            raise ValidationError("need n_experts >= 1, T > 0, k > 0, beta in (0, 1]")
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.experts = [SacAgent(obs_dim, action_dim, hidden, s, **agent_kw) for s in ss.spawn(n_experts)]
        self.T, self.k, self.beta = T, k, beta

    def __len__(self):
        return len(self.experts)

    def sample_masks(self, rng: np.random.Generator) -> np.ndarray:
        return (rng.random(len(self)) < self.beta).astype(float)


def _q_from_pre(critic: Mlp, pre: np.ndarray, w: np.ndarray, obs_dim: int) -> np.ndarray:
    h = sigmoid(pre + w @ critic.weights[0][obs_dim:])
    last = len(critic.weights) - 1
    for i in range(1, last + 1):
        h = h @ critic.weights[i] + critic.biases[i]
        if i < last:
            h = sigmoid(h)
    return h[..., 0]


def ensemble_targets(ens: ExpertEnsemble, batch: Batch, rng=None, noise=None):
    """Per-expert Bellman targets and confidence weights.

    For expert i the next action comes from its own actor; the disagreement
    is the sample std over all experts' min-twin target critics at that
    action (zero for a single expert).
    """
    N = len(ens)
    ys, ws = [], []
    # the state half of each target's first layer does not depend on the action
    pre = [[batch.s2 @ t.weights[0][:e.obs_dim] + t.biases[0] for t in e.targets] for e in ens.experts]
    for i, expert in enumerate(ens.experts):
        u2, logp2 = next_action(expert, batch.s2, rng, None if noise is None else noise[i])
        w2 = softmax(u2)
        tq = np.stack([np.minimum(*(_q_from_pre(t, p, w2, e.obs_dim) for t, p in zip(e.targets, pe)))
                       for e, pe in zip(ens.experts, pre)])
        v_next = tq[i] - expert.alpha * logp2
        ys.append(bellman_target(expert, batch, v_next))
        q_std = tq.std(axis=0, ddof=1) if N > 1 else np.zeros(len(batch))
        ws.append(confidence_weight(q_std, ens.T, ens.k))
    return ys, ws


def weighted_critic_loss(ens: ExpertEnsemble, i: int, batch: Batch, rng=None, noise=None, targets=None):
    """Confidence-weighted, mask-gated residual for expert ``i``.

    Averaged over the transitions whose mask is on. Returns ``None`` when
    every mask is zero (nothing to update).
    """
    m = batch.masks[:, i]
    if not m.any():
        return None
    ys, ws = targets if targets is not None else ensemble_targets(ens, batch, rng, noise)
    loss, grads, _ = critic_loss_and_grads(ens.experts[i], batch.s, batch.a, ys[i], coef=ws[i] * m, denom=m.sum())
    return loss, grads


def _apply_critic_step(agent: SacAgent, grads) -> None:
    for j in range(2):
        agent.critics[j], agent.critic_opts[j] = adam_step(agent.critics[j], grads[j], agent.critic_opts[j])


def _apply_actor_step(agent: SacAgent, grads) -> None:
    agent.actor, agent.actor_opt = adam_step(agent.actor, grads, agent.actor_opt)


def _apply_ema(agent: SacAgent) -> None:
    agent.targets = [ema_update(t, c, agent.rho) for t, c in zip(agent.targets, agent.critics)]


def sac_update(agent: SacAgent, batch: Batch, rng: np.random.Generator) -> dict:
    critic_loss, cgrads = sac_critic_loss(agent, batch, rng)
    _apply_critic_step(agent, cgrads)
    actor_loss, agrads = sac_actor_loss(agent, batch.s, rng)
    _apply_actor_step(agent, agrads)
    _apply_ema(agent)
    return {"critic": critic_loss, "actor": actor_loss}


def alphamix_update(ens: ExpertEnsemble, buffer: ReplayBuffer, rng: np.random.Generator, batch_size: int = 256):
    """One batch; per expert a weighted critic step, a masked actor step and an EMA step."""
    batch = buffer.sample(batch_size, rng)
    targets = ensemble_targets(ens, batch, rng)
    critic_steps = [weighted_critic_loss(ens, i, batch, targets=targets) for i in range(len(ens))]
    losses = []
    for i, (expert, step) in enumerate(zip(ens.experts, critic_steps)):
        if step is None:
            losses.append({"critic": None, "actor": None})
            continue
        _apply_critic_step(expert, step[1])
        m = batch.masks[:, i]
        actor_loss, agrads = sac_actor_loss(expert, batch.s, rng, coef=m, denom=m.sum())
        _apply_actor_step(expert, agrads)
        _apply_ema(expert)
        losses.append({"critic": step[0], "actor": actor_loss})
    return losses


def ensemble_act(ens: ExpertEnsemble, obs: np.ndarray, mode: str = "exploit", rng=None) -> np.ndarray:
    """Raw (pre-softmax) action.

    exploit: average of the experts' Gaussian means. explore: one expert
    picked uniformly, then a sample from its Gaussian.
    """
    if mode == "exploit":
        return np.mean([policy_head(e, obs)[0].mean for e in ens.experts], axis=0)
    if mode == "explore":
        expert = ens.experts[int(rng.integers(len(ens)))]
        head, _ = policy_head(expert, obs)
        return gaussian_sample(head, rng)[0]
    raise ValueError(f"unknown mode {mode!r}")
