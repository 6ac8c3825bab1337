"""On-policy training for grid tasks: rollouts, GAE and the clipped surrogate."""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from kgrl import grid_env as G
from kgrl.approx import Adam, Tensor
from kgrl.approx import tensor as T


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    n_envs: int = 16
    n_steps: int = 128
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    batch_size: int = 256
    lr: float = 1e-3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-8
    # KGRL only: pull the inner policy toward the (fixed) mixture on visited states,
    # so it learns the task even while the attention mostly selects knowledge
    inner_distill: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.inner_distill < 0:
            raise ValueError("inner_distill must be >= 0")
        if min(self.n_envs, self.n_steps, self.epochs, self.batch_size) < 1:
            raise ValueError("n_envs, n_steps, epochs and batch_size must be >= 1")

    @property
    def frames_per_update(self) -> int:
        return self.n_envs * self.n_steps

    def to_dict(self) -> dict:
        return asdict(self)


class GridPool:
    """Independent grid environments; episode seeds are drawn from one generator."""

    def __init__(self, config: G.GridConfig, n_envs: int, seed: int):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.states: list[G.GridState] = []
        self.obs: list[G.GridObservation] = []
        self.returns = np.zeros(n_envs)
        self.lengths = np.zeros(n_envs, dtype=int)
        for _ in range(n_envs):
            st, ob = G.reset(config, int(self.rng.integers(2**31)))
            self.states.append(st)
            self.obs.append(ob)

    def __len__(self) -> int:
        return len(self.states)

    def step(self, actions: np.ndarray):
        """Steps every env, auto-resetting finished ones.

        Returns (rewards, dones, finished) where ``finished`` lists
        (env index, return, length, success, events) for completed episodes.
        """
        rewards = np.zeros(len(self))
        dones = np.zeros(len(self), dtype=bool)
        finished = []
        for i, a in enumerate(actions):
            st, r, done, ob = G.step(self.states[i], int(a))
            rewards[i] = r
            self.returns[i] += r
            self.lengths[i] += 1
            if done:
                dones[i] = True
                finished.append((i, self.returns[i], int(self.lengths[i]), st.success))
                self.returns[i], self.lengths[i] = 0.0, 0
                st, ob = G.reset(self.config, int(self.rng.integers(2**31)))
            self.states[i], self.obs[i] = st, ob
        return rewards, dones, finished


@dataclass
class Rollout:
    onehot: np.ndarray  # (T, N, C, 5, 5)
    know: np.ndarray  # (T, N, n, 7) knowledge log-pmfs
    actions: np.ndarray  # (T, N)
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray  # (N,)
    raw: np.ndarray  # (T, N, m) attention dot products
    weights: np.ndarray  # (T, N, m)
    episodes: list = field(default_factory=list)  # (return, length, success)

    @property
    def n_frames(self) -> int:
        return self.actions.size


def collect_rollouts(pool: GridPool, actor, n_steps: int, rng: np.random.Generator) -> Rollout:
    onehots, knows, actions, logps, values, rewards, dones, raws, weights = ([] for _ in range(9))
    episodes = []
    for _ in range(n_steps):
        a, lp, v, out, onehot, know = actor.act_discrete(pool.obs, rng)
        r, d, finished = pool.step(a)
        onehots.append(onehot)
        knows.append(know)
        actions.append(a)
        logps.append(lp)
        values.append(v)
        rewards.append(r)
        dones.append(d)
        raws.append(out.raw.data)
        weights.append(out.weights)
        episodes.extend((ret, length, succ) for _, ret, length, succ in finished)
    _, _, last_v, _, _, _ = actor.act_discrete(pool.obs, rng, greedy=True)
    return Rollout(
        np.stack(onehots),
        np.stack(knows),
        np.stack(actions),
        np.stack(logps),
        np.stack(values),
        np.stack(rewards),
        np.stack(dones),
        last_v,
        np.stack(raws),
        np.stack(weights),
        episodes,
    )


def gae_advantages(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates and value targets, both (T, N), unnormalized.

    ``dones[t]`` marks that the episode ended after the action at step t.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    nonterminal = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    next_v = np.asarray(last_values, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * nonterminal[t] * next_v - values[t]
        running = delta + gamma * lam * nonterminal[t] * running
        adv[t] = running
        next_v = values[t]
    return adv, adv + values


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


def ppo_loss(actor, onehot, know, actions, old_logp, advantages, returns, old_values, config: PPOConfig, params=None):
    """Total loss and its parts for one minibatch."""
    params = params or actor.params
    out = actor.discrete_forward(onehot, know, params)
    n = len(actions)
    logp = out.log_mix[np.arange(n), actions]
    ratio = T.exp(logp - old_logp)
    surr = T.minimum(ratio * advantages, T.clip(ratio, 1 - config.clip, 1 + config.clip) * advantages)
    policy_loss = -surr.mean()
    entropy = out.entropy().mean()
    value = actor.value(out.feats, params)
    v_clipped = old_values + T.clip(value - old_values, -config.clip, config.clip)
    value_loss = T.maximum((value - returns) ** 2, (v_clipped - returns) ** 2).mean()
    total = policy_loss - config.entropy_coef * entropy + config.value_coef * value_loss
    distill = 0.0
    if config.inner_distill > 0 and actor.attention and actor.inner_on:
        # cross-entropy of the inner pmf under the detached mixture; zero gradient when they agree
        ce = -(Tensor(np.exp(out.log_mix.data)) * out.logp_in).sum(axis=-1).mean()
        total = total + config.inner_distill * ce
        distill = ce.item()
    return total, {
        "policy_loss": policy_loss.item(),
        "inner_distill": distill,
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": float(np.mean(old_logp - logp.data)),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1) > config.clip)),
    }


def ppo_update(actor, rollout: Rollout, config: PPOConfig, optimizer: Adam, rng: np.random.Generator) -> dict:
    adv, ret = gae_advantages(rollout.rewards, rollout.values, rollout.dones, rollout.last_values, config.gamma, config.lam)
    n = rollout.n_frames
    flat = {
        "onehot": rollout.onehot.reshape(n, *rollout.onehot.shape[2:]),
        "know": rollout.know.reshape(n, *rollout.know.shape[2:]),
        "actions": rollout.actions.reshape(n),
        "old_logp": rollout.log_probs.reshape(n),
        "adv": normalize(adv.reshape(n)),
        "ret": ret.reshape(n),
        "old_v": rollout.values.reshape(n),
    }
    names = actor.trainable_names()
    logs = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, parts = ppo_loss(
                actor,
                flat["onehot"][idx],
                flat["know"][idx],
                flat["actions"][idx],
                flat["old_logp"][idx],
                flat["adv"][idx],
                flat["ret"][idx],
                flat["old_v"][idx],
                config,
            )
            if not np.isfinite(loss.item()):
                raise NonFiniteLoss(
                    f"non-finite PPO loss {parts}; batch adv range "
                    f"[{flat['adv'][idx].min():.3g}, {flat['adv'][idx].max():.3g}]"
                )
            actor.params.zero_grad()
            loss.backward()
            parts["grad_norm"] = optimizer.step(actor.params, names=names)
            logs.append(parts)
    stats = {k: float(np.mean([l[k] for l in logs])) for k in logs[0]}
    if "keys" in actor.params and actor.params["keys"].grad is not None:
        stats["key_grad_norm"] = float(np.linalg.norm(actor.params["keys"].grad))
    return stats


class RecentReturns:
    """Rolling mean over the most recent completed training episodes."""

    def __init__(self, window: int = 32):
        self.buf: deque = deque(maxlen=window)

    def extend(self, episodes) -> None:
        self.buf.extend(ret for ret, _, _ in episodes)

    @property
    def full(self) -> bool:
        return len(self.buf) == self.buf.maxlen

    @property
    def mean(self) -> float:
        return float(np.mean(self.buf)) if self.buf else float("nan")


def grid_evaluate(
    actor, config: G.GridConfig, episodes: int, seed: int, greedy: bool = True, max_batch: int = 100, record: list | None = None
):
    """Runs ``episodes`` episodes (batched) and returns per-episode (return, success, length).

    Every observation the actor acts on is appended to ``record`` when given.
    """
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2**31, size=episodes)
    returns, successes, lengths = [], [], []
    for start in range(0, episodes, max_batch):
        batch = seeds[start : start + max_batch]
        pairs = [G.reset(config, int(s)) for s in batch]
        states = [p[0] for p in pairs]
        obs = [p[1] for p in pairs]
        ret = np.zeros(len(batch))
        alive = list(range(len(batch)))
        while alive:
            batch_obs = [obs[i] for i in alive]
            if record is not None:
                record.extend(batch_obs)
            acts = actor.act(batch_obs, rng, greedy=greedy)
            still = []
            for i, a in zip(alive, acts):
                states[i], r, done, obs[i] = G.step(states[i], int(a))
                ret[i] += r
                if not done:
                    still.append(i)
            alive = still
        returns.extend(ret)
        successes.extend(st.success for st in states)
        lengths.extend(st.step_count for st in states)
    return np.array(returns), np.array(successes, dtype=bool), np.array(lengths)
