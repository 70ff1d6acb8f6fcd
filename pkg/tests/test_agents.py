import json

import numpy as np
import pytest

from prudex.agents import (Batch, ExpertEnsemble, ReplayBuffer, SacAgent, alphamix_update, confidence_weight,
                           critic_loss_and_grads, ema_update, ensemble_act, ensemble_targets, policy_head,
                           sac_actor_loss, sac_critic_loss, soft_target_value, weighted_critic_loss)
from prudex.errors import NonFiniteError, NumericDomainError, TrainingAbort, ValidationError
from prudex.nn import HALF_LOG_2PI, Mlp
from prudex import training
from prudex.training import AgentConfig, DataBundle, backtest, load_experts, train_agent

OBS, ACT = 5, 3


def constant_net(sizes, c):
    """MLP whose output is the constant ``c`` for every input."""
    weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    biases[-1][:] = c
    return Mlp(sizes, weights, biases)


def make_batch(rng, n=8, obs=OBS, act=ACT, n_experts=1, masks=None):
    return Batch(rng.normal(size=(n, obs)), rng.normal(size=(n, act)), rng.normal(size=n), rng.normal(size=(n, obs)),
                 (rng.random(n) < 0.2).astype(float),
                 np.ones((n, n_experts)) if masks is None else np.asarray(masks, dtype=float))


def small_agent(seed=0, **kw):
    return SacAgent(OBS, ACT, (6, 5), seed, **kw)


def test_soft_target_constant_critics():
    agent = small_agent(alpha=0.0)
    agent.targets = [constant_net(agent.targets[0].sizes, 2.5), constant_net(agent.targets[0].sizes, 2.5)]
    s2 = np.random.default_rng(0).normal(size=(4, OBS))
    np.testing.assert_allclose(soft_target_value(agent, s2, np.random.default_rng(1)), 2.5)
    agent.targets = [constant_net(agent.targets[0].sizes, 1.0), constant_net(agent.targets[0].sizes, 3.0)]
    np.testing.assert_allclose(soft_target_value(agent, s2, np.random.default_rng(1)), 1.0)


def test_soft_target_entropy_term():
    agent = small_agent(alpha=1.0)
    agent.targets = [constant_net(agent.targets[0].sizes, 0.0)] * 2
    # actor outputs mean 0 and log-std -3 everywhere; sample at the mean
    actor = constant_net(agent.actor.sizes, 0.0)
    actor.biases[-1][ACT:] = -3.0
    agent.actor = actor
    v = soft_target_value(agent, np.zeros((1, OBS)), noise=np.zeros((1, ACT)))
    logp = ACT * (3.0 - HALF_LOG_2PI)
    assert v[0] == pytest.approx(-logp, rel=1e-14)


def test_critic_loss_examples():
    agent = small_agent()
    agent.critics = [constant_net(agent.critics[0].sizes, 1.0)] * 2
    s, a = np.zeros((1, OBS)), np.zeros((1, ACT))
    total, _, parts = critic_loss_and_grads(agent, s, a, np.array([3.0]))
    assert parts == [4.0, 4.0] and total == 8.0
    total, grads, _ = critic_loss_and_grads(agent, s, a, np.array([1.0]))
    assert total == 0.0 and all(np.all(g.flat() == 0) for g in grads)
    with pytest.raises(NonFiniteError):
        critic_loss_and_grads(agent, s, a, np.array([np.inf]))


def test_sac_critic_loss_target_is_constant():
    rng = np.random.default_rng(0)
    agent = small_agent()
    batch = make_batch(rng)
    xi = rng.normal(size=(8, ACT))
    loss, grads = sac_critic_loss(agent, batch, noise=xi)
    assert grads[0].sizes == agent.critics[0].sizes
    # changing the target networks changes the loss but gradient shapes stay critic-only
    agent.targets = [constant_net(agent.targets[0].sizes, 0.0)] * 2
    loss2, _ = sac_critic_loss(agent, batch, noise=xi)
    assert loss2 != loss


def test_actor_loss_constant_critic():
    agent = small_agent(alpha=0.0)
    agent.critics = [constant_net(agent.critics[0].sizes, 4.0)] * 2
    s = np.random.default_rng(2).normal(size=(6, OBS))
    loss, grads = sac_actor_loss(agent, s, noise=np.random.default_rng(3).normal(size=(6, ACT)))
    assert loss == pytest.approx(-4.0)
    assert np.all(grads.flat() == 0)


def test_actor_loss_direct_evaluation():
    agent = small_agent(alpha=0.7)
    rng = np.random.default_rng(4)
    s = rng.normal(size=(5, OBS))
    xi = rng.normal(size=(5, ACT))
    loss, _ = sac_actor_loss(agent, s, noise=xi)
    head, _ = policy_head(agent, s)
    u = head.mean + head.std * xi
    logp = np.sum(-0.5 * xi ** 2 - head.log_std - HALF_LOG_2PI, axis=1)
    from prudex.agents import q_forward
    q = np.minimum(q_forward(agent.critics[0], s, u)[0], q_forward(agent.critics[1], s, u)[0])
    assert loss == pytest.approx(np.mean(0.7 * logp - q), rel=1e-13)
    # sharper policy means higher density at the sample, hence a larger entropy term
    agent2 = small_agent(alpha=0.7)
    agent2.actor.biases[-1][ACT:] -= 1.0
    loss2, _ = sac_actor_loss(agent2, s, noise=xi)
    head2, _ = policy_head(agent2, s)
    u2 = head2.mean + head2.std * xi
    q2 = np.minimum(q_forward(agent2.critics[0], s, u2)[0], q_forward(agent2.critics[1], s, u2)[0])
    assert loss2 - np.mean(-q2) > loss - np.mean(-q)


def _fd(f, net, h=1e-6):
    flat = net.flat()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        vals = []
        for sgn in (1, -1):
            p = flat.copy()
            p[i] += sgn * h
            vals.append(f(_unflat(net, p)))
        out[i] = (vals[0] - vals[1]) / (2 * h)
    return out


def _unflat(like, flat):
    arrs, pos = [], 0
    for a in like.arrays():
        arrs.append(flat[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    k = len(like.weights)
    return Mlp(like.sizes, arrs[:k], arrs[k:])


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_critic_gradient_finite_differences():
    rng = np.random.default_rng(5)
    agent = small_agent(1)
    batch = make_batch(rng, 6)
    y = rng.normal(size=6)
    coef = rng.uniform(0.5, 1.0, 6)
    _, grads, _ = critic_loss_and_grads(agent, batch.s, batch.a, y, coef, 4.0)

    def loss_for(net):
        a = small_agent(1)
        a.critics = [net, agent.critics[1]]
        return critic_loss_and_grads(a, batch.s, batch.a, y, coef, 4.0)[2][0]

    assert _rel_err(grads[0].flat(), _fd(loss_for, agent.critics[0])) < 1e-4


def test_actor_gradient_finite_differences():
    rng = np.random.default_rng(6)
    agent = small_agent(2, alpha=0.3)
    s, xi = rng.normal(size=(6, OBS)), rng.normal(size=(6, ACT))
    coef = rng.uniform(0, 1, 6)
    _, grads = sac_actor_loss(agent, s, noise=xi, coef=coef, denom=3.0)

    def loss_for(net):
        a = small_agent(2, alpha=0.3)
        a.actor = net
        return sac_actor_loss(a, s, noise=xi, coef=coef, denom=3.0)[0]

    assert _rel_err(grads.flat(), _fd(loss_for, agent.actor)) < 1e-4


def test_confidence_weight_examples():
    assert confidence_weight(0.0) == 1.0
    assert confidence_weight(1e6) == pytest.approx(0.5)
    w = confidence_weight(np.random.default_rng(0).exponential(0.1, 1000))
    assert np.all((w >= 0.5) & (w <= 1.0))
    for bad in (-0.1, np.nan):
        with pytest.raises(NumericDomainError):
            confidence_weight(bad)
    with pytest.raises(NumericDomainError):
        confidence_weight(0.1, T=0)
    with pytest.raises(NumericDomainError):
        confidence_weight(0.1, k=0)


def test_q_std_two_experts():
    ens = ExpertEnsemble(OBS, ACT, 2, (6, 5), 0, T=20, k=0.5, alpha=0.0)
    for e, c in zip(ens.experts, (1.0, 3.0)):
        e.targets = [constant_net(e.targets[0].sizes, c)] * 2
    batch = make_batch(np.random.default_rng(0), 4, n_experts=2)
    ys, ws = ensemble_targets(ens, batch, np.random.default_rng(1))
    expect = 1 / (1 + np.exp(np.sqrt(2) * 20)) + 0.5
    for w in ws:
        np.testing.assert_allclose(w, expect, rtol=1e-12)
    np.testing.assert_allclose(ys[0], batch.r + 0.99 * (1 - batch.done) * 1.0)


def test_identical_experts_scale_loss():
    ens = ExpertEnsemble(OBS, ACT, 3, (6, 5), 0, k=0.5)
    base = ens.experts[0]
    ens.experts = [SacAgent.from_dict(base.to_dict()) for _ in range(3)]
    rng = np.random.default_rng(2)
    batch = make_batch(rng, 8, n_experts=3)
    xi = rng.normal(size=(3, 8, ACT))
    xi[:] = xi[0]
    loss, _ = weighted_critic_loss(ens, 0, batch, noise=xi)
    plain, _ = sac_critic_loss(base, batch, noise=xi[0])
    assert loss == pytest.approx(1.0 * plain, rel=1e-12)


def test_all_masks_zero_skips_update():
    ens = ExpertEnsemble(OBS, ACT, 2, (6, 5), 0)
    rng = np.random.default_rng(3)
    buf = ReplayBuffer(50, OBS, ACT, 2)
    for _ in range(20):
        buf.add(rng.normal(size=OBS), rng.normal(size=ACT), 0.1, rng.normal(size=OBS), False, [1, 0])
    batch = buf.sample(8, rng)
    assert weighted_critic_loss(ens, 1, batch, rng) is None
    before = ens.experts[1].to_dict()
    out = alphamix_update(ens, buf, rng, 8)
    assert out[1] == {"critic": None, "actor": None} and out[0]["critic"] is not None
    assert json.dumps(ens.experts[1].to_dict()) == json.dumps(before)


def test_mask_linearity():
    ens = ExpertEnsemble(OBS, ACT, 2, (6, 5), 4)
    rng = np.random.default_rng(4)
    batch = make_batch(rng, 6, n_experts=2, masks=rng.integers(0, 2, (6, 2)))
    batch.masks[0] = [1, 1]
    xi = rng.normal(size=(2, 6, ACT))
    # append a copy of transition 0 with its mask zeroed
    ext = Batch(*(np.concatenate([x, x[:1]]) for x in (batch.s, batch.a, batch.r, batch.s2, batch.done, batch.masks)))
    ext.masks[-1] = 0
    xi_ext = np.concatenate([xi, rng.normal(size=(2, 1, ACT))], axis=1)
    for i in range(2):
        l1, g1 = weighted_critic_loss(ens, i, batch, noise=xi)
        l2, g2 = weighted_critic_loss(ens, i, ext, noise=xi_ext)
        assert l1 == pytest.approx(l2, rel=1e-12)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a.flat(), b.flat(), rtol=1e-11, atol=1e-15)
        m, me = batch.masks[:, i], ext.masks[:, i]
        a1, ga = sac_actor_loss(ens.experts[i], batch.s, noise=xi[i], coef=m, denom=m.sum())
        a2, gb = sac_actor_loss(ens.experts[i], ext.s, noise=xi_ext[i], coef=me, denom=me.sum())
        assert a1 == pytest.approx(a2, rel=1e-12)
        np.testing.assert_allclose(ga.flat(), gb.flat(), rtol=1e-11, atol=1e-15)


def test_ema_contraction():
    t, o = small_agent(0).critics[0], small_agent(1).critics[0]
    new = ema_update(t, o, 0.995)
    before = np.linalg.norm(t.flat() - o.flat())
    after = np.linalg.norm(new.flat() - o.flat())
    assert after == pytest.approx(0.995 * before, rel=1e-12)


def test_expert_diversity_at_init():
    ens = ExpertEnsemble(OBS, ACT, 3, (6, 5), 0)
    flats = [e.actor.flat() for e in ens.experts]
    assert all(np.linalg.norm(flats[i] - flats[j]) > 0 for i in range(3) for j in range(i + 1, 3))
    again = ExpertEnsemble(OBS, ACT, 3, (6, 5), 0)
    np.testing.assert_array_equal(again.experts[2].actor.flat(), flats[2])
    with pytest.raises(ValidationError):
        ExpertEnsemble(OBS, ACT, 0)
    with pytest.raises(ValidationError):
        ExpertEnsemble(OBS, ACT, 2, beta=0.0)


def test_masks_follow_beta():
    ens = ExpertEnsemble(OBS, ACT, 4, (6, 5), 0, beta=1.0)
    rng = np.random.default_rng(0)
    assert all((ens.sample_masks(rng) == 1).all() for _ in range(20))
    ens.beta = 0.5
    draws = np.array([ens.sample_masks(rng) for _ in range(2000)])
    assert abs(draws.mean() - 0.5) < 0.03


def test_ensemble_act():
    ens = ExpertEnsemble(OBS, ACT, 2, (6, 5), 0)
    obs = np.random.default_rng(0).normal(size=OBS)
    ens.experts[1] = SacAgent.from_dict(ens.experts[0].to_dict())
    mean0 = policy_head(ens.experts[0], obs)[0].mean
    np.testing.assert_allclose(ensemble_act(ens, obs), mean0, rtol=1e-15)
    # negate the mean half of the second actor's output layer
    a = ens.experts[1].actor
    a.weights[-1][:, :ACT] *= -1
    a.biases[-1][:ACT] *= -1
    np.testing.assert_allclose(ensemble_act(ens, obs), 0, atol=1e-15)
    x1 = ensemble_act(ens, obs, "explore", np.random.default_rng(7))
    x2 = ensemble_act(ens, obs, "explore", np.random.default_rng(7))
    np.testing.assert_array_equal(x1, x2)
    with pytest.raises(ValueError):
        ensemble_act(ens, obs, "greedy")


def test_sac_reduction_single_expert():
    k = 0.5
    ens = ExpertEnsemble(OBS, ACT, 1, (6, 5), 3, k=k, beta=1.0)
    rng = np.random.default_rng(8)
    batch = make_batch(rng, 10)
    xi = rng.normal(size=(1, 10, ACT))
    _, g_w = weighted_critic_loss(ens, 0, batch, noise=xi)
    _, g_s = sac_critic_loss(ens.experts[0], batch, noise=xi[0])
    for a, b in zip(g_w, g_s):
        np.testing.assert_allclose(a.flat(), (k + 0.5) * b.flat(), rtol=1e-12, atol=1e-15)


def test_alphamix_update_is_deterministic():
    def run():
        ens = ExpertEnsemble(OBS, ACT, 3, (6, 5), 11)
        rng = np.random.default_rng(1)
        buf = ReplayBuffer(100, OBS, ACT, 3)
        for _ in range(40):
            buf.add(rng.normal(size=OBS), rng.normal(size=ACT), rng.normal(), rng.normal(size=OBS), False,
                    ens.sample_masks(rng))
        return [alphamix_update(ens, buf, rng, 16) for _ in range(3)]
    assert run() == run()


def test_replay_buffer():
    buf = ReplayBuffer(3, 2, 2, 1)
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        buf.sample(2, rng)
    for i in range(5):
        buf.add([i, i], [0, 0], float(i), [i + 1, i + 1], False, [1])
    assert len(buf) == 3 and sorted(buf.r.tolist()) == [2.0, 3.0, 4.0]
    with pytest.raises(ValidationError):
        buf.add([0, 0], [0, 0], 0.0, [0, 0], False, [0.5])
    assert len(buf.sample(7, rng)) == 7


def test_agent_serialization_round_trip():
    agent = small_agent(9)
    back = SacAgent.from_dict(json.loads(json.dumps(agent.to_dict())))
    np.testing.assert_array_equal(back.actor.flat(), agent.actor.flat())
    assert back.obs_dim == OBS and back.action_dim == ACT


# ---- training loop on a tiny market ----

TINY = AgentConfig(n_experts=2, batch_size=16, buffer_size=200, warmup_steps=40, epochs=1, hidden_sizes=(8, 8))


@pytest.fixture(scope="module")
def bundle(syn_panel, syn_features, syn_plan):
    return DataBundle("SYN", syn_panel, syn_features, syn_plan)


def test_train_is_deterministic_and_checkpoints(bundle, tmp_path):
    r1 = train_agent("alphamix", bundle, 1, 0, TINY, tmp_path / "a")
    r2 = train_agent("alphamix", bundle, 1, 0, TINY, tmp_path / "b")
    assert r1.to_json() == r2.to_json()
    assert len(load_experts(tmp_path / "a")) == 2
    again = backtest("alphamix", bundle, 1, 0, TINY, tmp_path / "a")
    assert again.to_json() == r1.to_json()
    sac = train_agent("sac", bundle, 1, 0, TINY)
    assert sac.method == "sac" and np.allclose(sac.weights.sum(axis=1), 1)


def test_baseline_methods(bundle):
    ma = train_agent("market_average", bundle, 1, 3, TINY)
    np.testing.assert_allclose(ma.weights, 0.25)
    assert ma.to_json() == backtest("market_average", bundle, 1, 3, TINY).to_json()
    rnd = train_agent("random", bundle, 1, 3, TINY)
    assert rnd.to_json() == backtest("random", bundle, 1, 3, TINY).to_json()
    with pytest.raises(ValidationError):
        train_agent("ppo", bundle, 1, 0, TINY)
    with pytest.raises(FileNotFoundError):
        backtest("sac", bundle, 1, 0, TINY, None)


def test_non_finite_loss_aborts_with_checkpoint(bundle, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteError("non-finite critic loss")
    monkeypatch.setattr(training, "alphamix_update", boom)
    with pytest.raises(TrainingAbort) as exc:
        train_agent("alphamix", bundle, 1, 0, TINY, tmp_path / "ck")
    assert exc.value.checkpoint == tmp_path / "ck"
    assert len(load_experts(tmp_path / "ck")) == 2


def test_agent_config_mapping():
    cfg = AgentConfig.from_mapping({"n_experts": "5", "beta": "0.3", "hidden_sizes": "64, 32"})
    assert cfg.n_experts == 5 and cfg.beta == 0.3 and cfg.hidden_sizes == (64, 32)
    assert AgentConfig.from_mapping(cfg.to_mapping()) == cfg
    with pytest.raises(ValidationError):
        AgentConfig.from_mapping({"gamma_prime": 1})
