"""Off-policy training for continuous tasks: replay, hindsight relabeling and SAC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from kgrl import point_env as P
from kgrl.approx import Adam, MLPSpec, ParameterStore, Tensor, forward, init_mlp, no_grad
from kgrl.approx import tensor as T
from kgrl.policy import PointArch


@dataclass(frozen=True)
class SACConfig:
    lr: float = 1e-3
    batch_size: int = 256
    gamma: float = 0.95
    tau: float = 0.005
    buffer_size: int = 1_000_000
    her_k: int = 4
    init_alpha: float = 0.1
    target_entropy: float | None = None  # None: -(action dim)
    start_steps: int = 1000  # uniform random actions before the policy takes over
    update_every: int = 1  # env steps per gradient update
    clip_target: bool = True  # keep critic targets inside [-1/(1-gamma), 0]
    # also train the inner policy on its own draw so it learns while unselected
    inner_objective: bool = True

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.batch_size < 1 or self.buffer_size < 1:
            raise ValueError("batch_size and buffer_size must be >= 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.her_k < 0 or self.update_every < 1:
            raise ValueError("her_k must be >= 0 and update_every >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """Ring buffer of (obs, action, reward, next_obs, done) transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, rewards, next_obs, dones) -> None:
        obs = np.atleast_2d(obs)
        n = len(obs)
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.actions[idx] = np.atleast_2d(actions)
        self.rewards[idx] = rewards
        self.next_obs[idx] = np.atleast_2d(next_obs)
        self.dones[idx] = dones
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        i = self.sample_indices(batch_size, rng)
        return {
            "obs": self.obs[i],
            "actions": self.actions[i],
            "rewards": self.rewards[i],
            "next_obs": self.next_obs[i],
            "dones": self.dones[i],
        }


def her_relabel(obs: np.ndarray, actions: np.ndarray, variant: str, k: int, rng: np.random.Generator) -> dict:
    """Original plus ``k`` "future" relabels per transition for one episode.

    ``obs`` holds T+1 observations, ``actions`` T actions. Relabeled goals are
    achieved positions at a uniformly drawn later step (the transition's own
    next state included); rewards come from the env reward function and a
    transition is terminal exactly when it is a success.
    """
    obs = np.asarray(obs, dtype=np.float64)
    n_steps = len(actions)
    cur, nxt = obs[:-1], obs[1:]
    achieved_next = P.achieved_goal(nxt, variant)
    parts = {"obs": [cur], "actions": [actions], "next_obs": [nxt]}
    goals = [cur[:, P.GOAL]]
    for _ in range(k):
        future = rng.integers(np.arange(n_steps), n_steps)
        g = achieved_next[future]
        parts["obs"].append(P.relabel(cur, g))
        parts["actions"].append(actions)
        parts["next_obs"].append(P.relabel(nxt, g))
        goals.append(g)
    out = {key: np.concatenate(v) for key, v in parts.items()}
    goal = np.concatenate(goals)
    out["rewards"] = P.compute_reward(np.tile(achieved_next, (k + 1, 1)), goal)
    out["dones"] = (out["rewards"] == 0.0).astype(np.float64)
    return out


# -- critics -----------------------------------------------------------------------
def init_critics(arch: PointArch, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    init_mlp(arch.critic, store, "q1", rng)
    init_mlp(arch.critic, store, "q2", rng)
    return store


def q_values(arch: PointArch, params: ParameterStore, obs, action) -> tuple[Tensor, Tensor]:
    x = T.concat([Tensor(np.asarray(obs) * arch.obs_scale), T.as_tensor(action)], axis=-1)
    return (
        forward(arch.critic, params, x, "q1").reshape(-1),
        forward(arch.critic, params, x, "q2").reshape(-1),
    )


def polyak(target: ParameterStore, online: ParameterStore, tau: float) -> None:
    for name, t in online.items():
        target[name].data = tau * t.data + (1.0 - tau) * target[name].data


class SAC:
    """Twin-critic soft actor-critic around any actor exposing ``sample_continuous``."""

    def __init__(self, actor, config: SACConfig, rng: np.random.Generator):
        self.actor = actor
        self.config = config
        self.arch = actor.arch
        self.critic = init_critics(self.arch, rng)
        self.target = self.critic.copy()
        self.log_alpha = ParameterStore({"log_alpha": np.array(np.log(config.init_alpha))})
        self.target_entropy = -float(self.arch.act_dim) if config.target_entropy is None else config.target_entropy
        self.actor_opt = Adam(config.lr)
        self.critic_opt = Adam(config.lr)
        self.alpha_opt = Adam(config.lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha["log_alpha"].data))

    def critic_loss(self, batch: dict, rng: np.random.Generator, params: ParameterStore | None = None):
        params = params or self.critic
        with no_grad():
            nxt = self.actor.sample_continuous(batch["next_obs"], rng)
            q1t, q2t = q_values(self.arch, self.target, batch["next_obs"], nxt.action.data)
            soft = np.minimum(q1t.data, q2t.data) - self.alpha * nxt.log_prob.data
            y = batch["rewards"] + self.config.gamma * (1.0 - batch["dones"]) * soft
            if self.config.clip_target:
                y = np.clip(y, -1.0 / (1.0 - self.config.gamma), 0.0)
        q1, q2 = q_values(self.arch, params, batch["obs"], batch["actions"])
        return ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()

    def actor_loss(self, batch: dict, rng: np.random.Generator, params: ParameterStore | None = None):
        sample = self.actor.sample_continuous(batch["obs"], rng, params)
        q1, q2 = q_values(self.arch, self.critic, batch["obs"], sample.action)
        loss = (self.alpha * sample.log_prob - T.minimum(q1, q2)).mean()
        if self.config.inner_objective and self.actor.attention and sample.inner_action is not None:
            i1, i2 = q_values(self.arch, self.critic, batch["obs"], sample.inner_action)
            loss = loss + (self.alpha * sample.inner_log_prob - T.minimum(i1, i2)).mean()
        return loss, sample

    def update(self, batch: dict, rng: np.random.Generator) -> dict:
        self.critic.zero_grad()
        closs = self.critic_loss(batch, rng)
        closs.backward()
        self.critic_opt.step(self.critic)

        self.actor.params.zero_grad()
        aloss, sample = self.actor_loss(batch, rng)
        aloss.backward()
        self.actor_opt.step(self.actor.params, names=self.actor.trainable_names())
        self.critic.zero_grad()

        # d/d(log alpha) of -log_alpha * (log_prob + target_entropy), measured on the
        # inner component: fixed-width knowledge components cannot reach the target
        logp = (sample.log_prob if sample.inner_log_prob is None else sample.inner_log_prob).data
        grad = -float(np.mean(logp + self.target_entropy))
        self.alpha_opt.step(self.log_alpha, grads={"log_alpha": np.array(grad)})
        polyak(self.target, self.critic, self.config.tau)
        self.updates += 1
        stats = {
            "critic_loss": closs.item(),
            "actor_loss": aloss.item(),
            "alpha": self.alpha,
            "entropy": float(-sample.log_prob.data.mean()),
            "inner_entropy": float(-logp.mean()),
        }
        if not all(np.isfinite(v) for v in stats.values()):
            raise FloatingPointError(f"non-finite SAC statistics {stats}")
        return stats


def collect_episode(env_config: P.PointConfig, seed: int, policy, rng: np.random.Generator):
    """Run one episode; ``policy(obs) -> (action, raw, weights, chosen)`` or action only."""
    state, obs = P.reset(env_config, seed)
    observations, actions, trace = [obs], [], []
    while not state.done:
        out = policy(obs)
        if isinstance(out, tuple):
            action = out[0]
            trace.append(out[1:])
        else:
            action = out
        state, _, _, obs = P.step(state, action)
        observations.append(obs)
        actions.append(np.asarray(action, dtype=np.float64))
    return np.stack(observations), np.stack(actions), state, trace


def point_evaluate(
    actor,
    env_config: P.PointConfig,
    episodes: int,
    seed: int,
    adapter: bool = False,
    greedy: bool = True,
    record: list | None = None,
):
    """Batched evaluation; returns per-episode (return, success).

    ``record`` collects the (possibly adapted) observation batches the actor saw.
    """
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2**31, size=episodes)
    pairs = [P.reset(env_config, int(s)) for s in seeds]
    states = [p[0] for p in pairs]
    obs = np.stack([p[1] for p in pairs])
    returns = np.zeros(episodes)
    alive = np.arange(episodes)
    while alive.size:
        x = P.reach_adapter(obs[alive]) if adapter else obs[alive]
        if record is not None:
            record.append(x.copy())
        acts = actor.act(x, rng, greedy=greedy)
        still = []
        for i, a in zip(alive, acts):
            states[i], r, done, obs[i] = P.step(states[i], a)
            returns[i] += r
            if not done:
                still.append(i)
        alive = np.array(still, dtype=int)
    return returns, np.array([s.success for s in states])
