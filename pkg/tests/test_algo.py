import inspect

import numpy as np
import pytest
from scipy import stats

from kgrl import grid_env as G
from kgrl import knowledge as K
from kgrl import point_env as P
from kgrl.actor import BaselineActor, KGRLActor
from kgrl.algo import ppo as PPO
from kgrl.algo import sac as SAC
from kgrl.approx import Adam
from kgrl.policy import GridArch, PointArch


def grid_actor(seed=0, kind="kgrl"):
    rng = np.random.default_rng(seed)
    if kind == "baseline":
        return BaselineActor(GridArch(), rng)
    ks = K.KnowledgeSet(8, "grid7")
    for n in ("KG1", "KG2", "KG3"):
        ks.add(n, K.scripted(n), rng.standard_normal(8))
    return KGRLActor(GridArch(), ks, 8, rng)


def point_actor(seed=0, kind="kgrl", arch=PointArch()):
    rng = np.random.default_rng(seed)
    if kind == "baseline":
        return BaselineActor(arch, rng)
    ks = K.KnowledgeSet(4, "cont4")
    ks.add("KG1", K.scripted("CKG1", 0.03), rng.standard_normal(4))
    ks.add("KG2", K.scripted("CKG2", 0.03), rng.standard_normal(4))
    return KGRLActor(arch, ks, 4, rng)


# -- GAE -------------------------------------------------------------------------
def gae_oracle(rewards, values, dones, last_values, gamma, lam):
    """Direct nested sums: A_t = sum_l (gamma lam)^l delta_{t+l}, truncated at episode ends."""
    T_, N = rewards.shape
    v_next = np.vstack([values[1:], last_values[None]])
    delta = rewards + gamma * (1 - dones) * v_next - values
    adv = np.zeros_like(rewards)
    for n in range(N):
        for t in range(T_):
            total, coef = 0.0, 1.0
            for l in range(t, T_):
                total += coef * delta[l, n]
                if dones[l, n]:
                    break
                coef *= gamma * lam
            adv[t, n] = total
    return adv


def test_gae_matches_nested_sum_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T_, N = 17, 3
        r = rng.normal(size=(T_, N))
        v = rng.normal(size=(T_, N))
        d = rng.random((T_, N)) < 0.15
        last = rng.normal(size=N)
        g, lam = rng.uniform(0.8, 0.999), rng.uniform(0, 1)
        adv, ret = PPO.gae_advantages(r, v, d, last, g, lam)
        assert np.abs(adv - gae_oracle(r, v, d, last, g, lam)).max() < 1e-10
        np.testing.assert_allclose(ret, adv + v)


def test_gae_single_terminal_reward():
    r = np.zeros((5, 1))
    r[-1] = 1.0
    d = np.zeros((5, 1))
    d[-1] = 1
    adv, _ = PPO.gae_advantages(r, np.zeros((5, 1)), d, np.zeros(1), 1.0 - 1e-12, 1.0)
    np.testing.assert_allclose(adv, 1.0, atol=1e-9)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    d = np.zeros((6, 2))
    last = rng.normal(size=2)
    adv, _ = PPO.gae_advantages(r, v, d, last, 0.9, 0.0)
    v_next = np.vstack([v[1:], last[None]])
    np.testing.assert_allclose(adv, r + 0.9 * v_next - v, atol=1e-12)


def test_normalize():
    x = np.random.default_rng(0).normal(3, 5, 1000)
    z = PPO.normalize(x)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-6


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PPO.PPOConfig(gamma=1.0)
    with pytest.raises(ValueError):
        PPO.PPOConfig(clip=0)
    with pytest.raises(ValueError):
        PPO.PPOConfig(batch_size=0)
    with pytest.raises(ValueError):
        PPO.PPOConfig(inner_distill=-1)


# -- rollouts / PPO -----------------------------------------------------------------
def _rollout(seed=0, n_steps=16, kind="kgrl"):
    actor = grid_actor(seed, kind)
    pool = PPO.GridPool(G.PRESETS["doorkey-5x5"], 4, seed)
    return actor, PPO.collect_rollouts(pool, actor, n_steps, np.random.default_rng(seed))


def test_rollouts_deterministic_and_shaped():
    _, a = _rollout(3)
    _, b = _rollout(3)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.log_probs, b.log_probs)
    assert a.raw.shape == (16, 4, 4) and a.weights.shape == (16, 4, 4)
    assert np.all(np.isfinite(a.log_probs))
    np.testing.assert_allclose(a.weights.sum(-1), 1.0, atol=1e-9)
    # sparse reward: nonzero only on successful terminal steps
    assert np.all(a.rewards[~a.dones] == 0.0)


def test_ppo_zero_advantage_policy_loss_zero():
    actor, ro = _rollout(0)
    n = ro.n_frames
    cfg = PPO.PPOConfig()
    flat = lambda x: x.reshape(n, *x.shape[2:])
    _, parts = PPO.ppo_loss(
        actor, flat(ro.onehot), flat(ro.know), flat(ro.actions), flat(ro.log_probs),
        np.zeros(n), flat(ro.values), flat(ro.values), cfg,
    )
    assert parts["policy_loss"] == 0.0


def test_ppo_step_raises_advantage_weighted_likelihood():
    actor, ro = _rollout(1, 32)
    n = ro.n_frames
    flat = lambda x: x.reshape(n, *x.shape[2:])
    adv = np.random.default_rng(0).normal(size=n)
    cfg = PPO.PPOConfig(entropy_coef=0.0, value_coef=0.0, inner_distill=0.0)

    def objective():
        out = actor.discrete_forward(flat(ro.onehot), flat(ro.know))
        lp = out.log_mix.data[np.arange(n), flat(ro.actions)]
        return float(np.mean(np.maximum(adv, 0) * lp) + np.mean(np.minimum(adv, 0) * lp))

    before = objective()
    loss, _ = PPO.ppo_loss(actor, flat(ro.onehot), flat(ro.know), flat(ro.actions), flat(ro.log_probs), adv,
                           flat(ro.values), flat(ro.values), cfg)
    actor.params.zero_grad()
    loss.backward()
    assert np.linalg.norm(actor.params["keys"].grad) > 0
    Adam(1e-4).step(actor.params, names=actor.trainable_names())
    assert objective() > before


def _loss_grads(actor, ro, cfg, adv):
    n = ro.n_frames
    flat = lambda x: x.reshape(n, *x.shape[2:])
    loss, parts = PPO.ppo_loss(actor, flat(ro.onehot), flat(ro.know), flat(ro.actions), flat(ro.log_probs), adv,
                               flat(ro.values), flat(ro.values), cfg)
    actor.params.zero_grad()
    loss.backward()
    return loss.item(), parts, {k: t.grad.copy() for k, t in actor.params.items() if t.grad is not None}


def test_inner_distill_is_cross_entropy_to_detached_mixture():
    actor, ro = _rollout(3, 16)
    n = ro.n_frames
    adv = np.random.default_rng(1).normal(size=n)
    l0, _, g0 = _loss_grads(actor, ro, PPO.PPOConfig(inner_distill=0.0), adv)
    l1, parts, g1 = _loss_grads(actor, ro, PPO.PPOConfig(inner_distill=1.0), adv)
    out = actor.discrete_forward(ro.onehot.reshape(n, *ro.onehot.shape[2:]), ro.know.reshape(n, *ro.know.shape[2:]))
    brute = -np.mean(np.sum(np.exp(out.log_mix.data) * out.logp_in.data, axis=-1))
    assert parts["inner_distill"] == pytest.approx(brute, rel=1e-12)
    assert l1 - l0 == pytest.approx(brute, rel=1e-9)
    # the mixture is detached: keys and query receive nothing extra, the inner head does
    np.testing.assert_allclose(g1["keys"], g0["keys"], atol=1e-12)
    np.testing.assert_allclose(g1["query.l0.w"], g0["query.l0.w"], atol=1e-12)
    assert np.abs(g1["pi.l0.w"] - g0["pi.l0.w"]).max() > 1e-6


def test_inner_distill_inactive_for_baseline():
    actor, ro = _rollout(4, 16, "baseline")
    adv = np.random.default_rng(2).normal(size=ro.n_frames)
    l0, _, g0 = _loss_grads(actor, ro, PPO.PPOConfig(inner_distill=0.0), adv)
    l1, parts, g1 = _loss_grads(actor, ro, PPO.PPOConfig(inner_distill=1.0), adv)
    assert l0 == l1 and parts["inner_distill"] == 0.0
    for k in g0:
        np.testing.assert_array_equal(g0[k], g1[k])


def test_ppo_update_runs_and_keeps_params_finite():
    for kind in ("kgrl", "baseline"):
        actor, ro = _rollout(2, 32, kind)
        cfg = PPO.PPOConfig(batch_size=32, epochs=2)
        stats = PPO.ppo_update(actor, ro, cfg, Adam(cfg.lr, max_grad_norm=cfg.max_grad_norm), np.random.default_rng(0))
        assert all(np.isfinite(v) for v in stats.values())
        assert all(np.all(np.isfinite(t.data)) for _, t in actor.params.items())
        if kind == "kgrl":
            assert stats["key_grad_norm"] > 0


def test_ppo_nan_guard():
    actor, ro = _rollout(0)
    ro.log_probs[:] = np.nan
    cfg = PPO.PPOConfig(batch_size=64, epochs=1)
    before = actor.params.numpy()
    with pytest.raises(PPO.NonFiniteLoss):
        PPO.ppo_update(actor, ro, cfg, Adam(1e-3), np.random.default_rng(0))
    for name, v in before.items():
        np.testing.assert_array_equal(actor.params[name].data, v)


def test_trainers_share_actor_interface():
    # both trainers only touch attributes every actor kind provides
    for cls in (BaselineActor, KGRLActor):
        for attr in ("act", "act_discrete", "discrete_forward", "value", "sample_continuous", "trainable_names",
                     "params", "arch", "attention"):
            assert hasattr(cls, attr) or attr in ("params", "arch")
    assert inspect.signature(PPO.ppo_update).parameters.keys() == {"actor", "rollout", "config", "optimizer", "rng"}


def test_grid_evaluate_batched_matches_single():
    actor = grid_actor(0)
    r1, s1, _ = PPO.grid_evaluate(actor, G.PRESETS["empty-5x5"], 6, seed=4, max_batch=6)
    r2, s2, _ = PPO.grid_evaluate(actor, G.PRESETS["empty-5x5"], 6, seed=4, max_batch=2)
    np.testing.assert_allclose(r1, r2)


# -- replay / HER ------------------------------------------------------------------
def test_replay_ring_and_uniform_sampling():
    buf = SAC.ReplayBuffer(50, 2, 1)
    for i in range(70):
        buf.add(np.full((1, 2), i), [[0.0]], [0.0], np.zeros((1, 2)), [0.0])
    assert len(buf) == 50
    assert set(buf.obs[:, 0].astype(int)) == set(range(20, 70))
    counts = np.bincount(buf.sample_indices(100_000, np.random.default_rng(0)), minlength=50)
    chi2, p = stats.chisquare(counts)
    assert p > 0.001


def _episode(variant="pick_place", seed=0):
    rng = np.random.default_rng(seed)
    obs, acts, _, _ = SAC.collect_episode(P.PointConfig(variant), seed, lambda o: rng.uniform(-1, 1, 4), rng)
    return obs, acts


def test_her_k_zero_is_plain_storage():
    obs, acts = _episode()
    tr = SAC.her_relabel(obs, acts, "pick_place", 0, np.random.default_rng(0))
    np.testing.assert_array_equal(tr["obs"], obs[:-1])
    np.testing.assert_array_equal(tr["next_obs"], obs[1:])
    expect = P.compute_reward(obs[1:, P.OBJ_POS], obs[1:, P.GOAL])
    np.testing.assert_array_equal(tr["rewards"], expect)


def test_her_rewards_match_env_predicate():
    rng = np.random.default_rng(0)
    checked = 0
    for seed in range(25):
        variant = ("reach", "pick_place")[seed % 2]
        obs, acts = _episode(variant, seed)
        tr = SAC.her_relabel(obs, acts, variant, 4, rng)
        assert len(tr["obs"]) == 5 * len(acts)
        achieved = P.achieved_goal(tr["next_obs"], variant)
        expect = np.where(np.linalg.norm(achieved - tr["next_obs"][:, P.GOAL], axis=1) < P.SUCCESS_TOL, 0.0, -1.0)
        np.testing.assert_array_equal(tr["rewards"], expect)
        np.testing.assert_array_equal(tr["obs"][:, P.GOAL], tr["next_obs"][:, P.GOAL])
        checked += len(tr["rewards"]) - len(acts)
    assert checked >= 1000


def test_her_goal_equal_to_achieved_is_success():
    obs, acts = _episode("reach", 1)
    rng = np.random.default_rng(0)
    tr = SAC.her_relabel(obs[:2], acts[:1], "reach", 3, rng)  # one step: future is that same step
    assert np.all(tr["rewards"][1:] == 0.0) and np.all(tr["dones"][1:] == 1.0)


# -- SAC ---------------------------------------------------------------------------
def _filled_buffer(seed=0):
    buf = SAC.ReplayBuffer(10_000, 25, 4)
    rng = np.random.default_rng(seed)
    for s in range(10):
        obs, acts = _episode("pick_place", seed * 100 + s)
        buf.add(**SAC.her_relabel(obs, acts, "pick_place", 4, rng))
    return buf


def test_sac_config_validation():
    with pytest.raises(ValueError):
        SAC.SACConfig(gamma=0.0)
    with pytest.raises(ValueError):
        SAC.SACConfig(tau=0.0)


def test_critic_regression_decreases():
    rng = np.random.default_rng(0)
    sac = SAC.SAC(point_actor(0), SAC.SACConfig(lr=1e-4), rng)
    batch = _filled_buffer().sample(256, rng)
    losses = []
    for _ in range(11):
        sac.critic.zero_grad()
        loss = sac.critic_loss(batch, np.random.default_rng(5))
        losses.append(loss.item())
        loss.backward()
        sac.critic_opt.step(sac.critic)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_target_polyak_update():
    rng = np.random.default_rng(0)
    sac = SAC.SAC(point_actor(0), SAC.SACConfig(), rng)
    for _, t in sac.critic.items():
        t.data = t.data + rng.normal(size=t.data.shape)
    before = sac.target.numpy()
    SAC.polyak(sac.target, sac.critic, 0.005)
    for name, t in sac.critic.items():
        np.testing.assert_allclose(sac.target[name].data, 0.005 * t.data + 0.995 * before[name], atol=1e-15)


def test_actor_ascends_critic_without_entropy():
    rng = np.random.default_rng(0)
    actor = point_actor(1, kind="baseline")
    sac = SAC.SAC(actor, SAC.SACConfig(lr=1e-4), rng)
    sac.log_alpha["log_alpha"].data = np.array(-np.inf)
    batch = _filled_buffer(1).sample(256, rng)
    loss0, _ = sac.actor_loss(batch, np.random.default_rng(9))
    actor.params.zero_grad()
    loss0.backward()
    sac.actor_opt.step(actor.params)
    loss1, _ = sac.actor_loss(batch, np.random.default_rng(9))
    assert loss1.item() < loss0.item()


def test_sac_update_reaches_keys_and_stays_finite():
    rng = np.random.default_rng(0)
    actor = point_actor(2)
    sac = SAC.SAC(actor, SAC.SACConfig(), rng)
    buf = _filled_buffer(2)
    keys0 = actor.params["keys"].data.copy()
    for _ in range(5):
        stats = sac.update(buf.sample(64, rng), rng)
    assert all(np.isfinite(v) for v in stats.values())
    assert np.abs(actor.params["keys"].data - keys0).max() > 0
    assert all(np.all(np.isfinite(t.data)) for _, t in actor.params.items())


def test_point_evaluate_adapter_zero_fills():
    seen = []

    class Spy:
        def act(self, obs, rng, greedy=True):
            seen.append(obs.copy())
            return np.zeros((len(obs), 4))

    SAC.point_evaluate(Spy(), P.PointConfig("reach", max_steps=2), 3, 0, adapter=True)
    assert all(np.all(o[:, P.OBJECT_SLOTS] == 0) for o in seen)
