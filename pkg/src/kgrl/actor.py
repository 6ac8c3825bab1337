"""Knowledge-grounded actor: an inner policy mixed with external knowledge.

A query vector u(s) attends over the inner key k_in(s) and one learnable key
per knowledge mapping. Raw scores are dot products u·k; softmax turns them
into mixture weights. Discrete actions are drawn from the exact mixture
categorical. Continuous actions pick a component with a straight-through
Gumbel-softmax sample and score the action under the full mixture density.

``BaselineActor`` has the same interface with a single (inner) component.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kgrl import grid_env as G
from kgrl.approx import ParameterStore, Tensor, forward, init_mlp, no_grad, unit_sphere_rows
from kgrl.approx import tensor as T
from kgrl.knowledge import KnowledgeSet
from kgrl.policy import GridArch, PointArch, grid_inner_logp, grid_trunk, init_grid_inner, init_point_inner, point_inner

INNER = "inner"
LOG_2PI = float(np.log(2.0 * np.pi))
ATANH_CLIP = 1.0 - 1e-6


class ActorConfigError(ValueError):
    pass


@dataclass
class DiscreteOutput:
    log_mix: Tensor  # (N, 7) mixture log-pmf
    log_w: Tensor  # (N, m) log attention weights
    raw: Tensor  # (N, m) dot products
    logp_in: Tensor  # (N, 7)
    feats: Tensor  # conv features feeding the critic

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w.data)

    def entropy(self) -> Tensor:
        return -(T.exp(self.log_mix) * self.log_mix).sum(axis=-1)


@dataclass
class ContinuousSample:
    action: Tensor  # (N, D); forward value is the chosen component's sample
    log_prob: Tensor  # (N,) mixture log-density of the action
    chosen: np.ndarray  # (N,) component index
    e: Tensor  # (N, m) straight-through one-hot
    raw: Tensor
    log_w: Tensor
    inner_action: Tensor | None = None  # (N, D) the inner component's own draw, chosen or not
    inner_log_prob: Tensor | None = None  # (N,) its density under the inner component

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w.data)


# -- density helpers -------------------------------------------------------------------
def gaussian_logpdf(x, mean, log_std) -> Tensor:
    """Sum over the last axis of a diagonal Gaussian log-density."""
    z = (T.as_tensor(x) - mean) * T.exp(-T.as_tensor(log_std))
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def tanh_log_jacobian(pre) -> Tensor:
    """sum log(1 - tanh(pre)^2), computed stably from the pre-squash value."""
    pre = T.as_tensor(pre)
    return (2.0 * (np.log(2.0) - pre - T.softplus(-2.0 * pre))).sum(axis=-1)


def squashed_logpdf(a, mean, log_std) -> Tensor:
    """Density of tanh(X), X ~ N(mean, std), at a point a inside (-1, 1)."""
    a = T.clip(T.as_tensor(a), -ATANH_CLIP, ATANH_CLIP)
    return gaussian_logpdf(T.atanh(a), mean, log_std) - T.log(1.0 - a * a).sum(axis=-1)


def mixture_logpdf(
    action,
    log_w,
    means: Sequence,
    log_stds: Sequence,
    squashed: Sequence[bool],
    pre_squash: dict[int, tuple[Tensor, np.ndarray]] | None = None,
) -> Tensor:
    """log sum_j w_j p_j(action).

    ``pre_squash`` maps a component index to (pre-tanh sample, rows mask); on
    those rows the squashed density is evaluated from the pre-tanh value,
    which stays accurate when tanh saturates.
    """
    pre_squash = pre_squash or {}
    terms = []
    for j, (m, s, sq) in enumerate(zip(means, log_stds, squashed)):
        if not sq:
            lp = gaussian_logpdf(action, m, s)
        else:
            lp = squashed_logpdf(action, m, s)
            if j in pre_squash:
                pre, rows = pre_squash[j]
                exact = gaussian_logpdf(pre, m, s) - tanh_log_jacobian(pre)
                lp = T.where(rows, exact, lp)
        terms.append(lp)
    return T.logsumexp(T.as_tensor(log_w) + T.stack(terms, axis=1), axis=1)


def gumbel_straight_through(log_w: Tensor, temperature: float, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    if temperature <= 0:
        raise ActorConfigError("Gumbel-softmax temperature must be > 0")
    g = -np.log(-np.log(rng.uniform(np.finfo(float).tiny, 1.0, size=log_w.shape)))
    soft = T.softmax((log_w + g) / temperature, axis=-1)
    idx = np.argmax(log_w.data + g, axis=-1)
    hard = np.eye(log_w.shape[-1])[idx]
    return soft + (hard - soft.data), idx


def sample_categorical(pmf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row."""
    cdf = np.cumsum(pmf, axis=-1)
    u = rng.random(pmf.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=-1), pmf.shape[-1] - 1)


# -- actors ------------------------------------------------------------------------
class KGRLActor:
    """Mixture actor for either grid (7 discrete actions) or point (4-d continuous) tasks."""

    attention = True

    def __init__(
        self,
        arch: GridArch | PointArch,
        knowledge: KnowledgeSet,
        d_k: int,
        rng: np.random.Generator,
        temperature: float = 1.0,
        freeze_keys: bool = False,
        with_critic: bool = True,
    ):
        self.arch = arch
        self.discrete = isinstance(arch, GridArch)
        space = "grid7" if self.discrete else "cont4"
        if knowledge.action_space != space:
            raise ActorConfigError(f"knowledge acts in {knowledge.action_space}, actor in {space}")
        if self.attention and knowledge.d_k != d_k:
            raise ActorConfigError(f"knowledge d_k {knowledge.d_k} != actor d_k {d_k}")
        if temperature <= 0:
            raise ActorConfigError("Gumbel-softmax temperature must be > 0")
        self.knowledge = knowledge
        self.d_k = d_k
        self.temperature = temperature
        self.freeze_keys = freeze_keys
        self.inner_on = True
        self.active = list(range(len(knowledge)))
        self.params = ParameterStore()
        if self.discrete:
            init_grid_inner(arch, self.params, rng)
            if with_critic:
                init_mlp(arch.critic, self.params, "critic", rng)
            if self.attention:
                init_mlp(arch.head(d_k), self.params, "key", rng)
                init_mlp(arch.head(d_k), self.params, "query", rng)
        else:
            init_point_inner(arch, self.params, rng)
            if self.attention:
                init_mlp(arch.key_net(d_k), self.params, "key", rng)
                init_mlp(arch.key_net(d_k), self.params, "query", rng)
        if self.attention and len(knowledge):
            keys = np.stack([e.key for e in knowledge.entries])
            if not np.any(keys):
                keys = unit_sphere_rows(len(knowledge), d_k, rng)
            self.params.add("keys", keys)

    # -- bookkeeping
    @property
    def component_names(self) -> list[str]:
        names = [INNER] if self.inner_on else []
        return names + [self.knowledge.entries[i].name for i in self.active]

    @property
    def n_components(self) -> int:
        return len(self.component_names)

    def trainable_names(self) -> list[str]:
        return [n for n in self.params.names() if not (self.freeze_keys and n == "keys")]

    def ablate(self, drop: Sequence[str]) -> KGRLActor:
        """View of this actor with some components removed; parameters are shared."""
        drop = set(drop)
        unknown = drop - set([INNER] + self.knowledge.names)
        if unknown:
            raise ActorConfigError(f"unknown component(s) {sorted(unknown)}")
        out = copy.copy(self)
        out.inner_on = self.inner_on and INNER not in drop
        out.active = [i for i in self.active if self.knowledge.entries[i].name not in drop]
        if not out.inner_on and not out.active:
            raise ActorConfigError("cannot drop every component")
        return out

    # -- attention
    def _heads(self, params: ParameterStore, obs):
        """Inner policy output plus (k_in, u); grid also returns the conv features."""
        if self.discrete:
            feats, hidden = grid_trunk(self.arch, params, obs)
            inner = grid_inner_logp(self.arch, params, hidden)
            if not self.attention:
                return inner, None, None, feats
            k_in = forward(self.arch.head(self.d_k), params, hidden, "key")
            u = forward(self.arch.head(self.d_k), params, hidden, "query")
            return inner, k_in, u, feats
        x = T.as_tensor(obs) * self.arch.obs_scale
        inner = point_inner(self.arch, params, obs)
        if not self.attention:
            return inner, None, None, None
        k_in = forward(self.arch.key_net(self.d_k), params, x, "key")
        u = forward(self.arch.key_net(self.d_k), params, x, "query")
        return inner, k_in, u, None

    def forward_keys_query(self, obs, params: ParameterStore | None = None):
        inner, k_in, u, _ = self._heads(params or self.params, obs)
        return inner, k_in, u

    def raw_scores(self, params: ParameterStore, k_in, u, n_rows: int) -> Tensor:
        if not self.attention:
            return Tensor(np.zeros((n_rows, 1)))
        cols = []
        if self.inner_on:
            cols.append((u * k_in).sum(axis=-1, keepdims=True))
        if self.active:
            keys = params["keys"][np.array(self.active)]
            cols.append(u @ keys.T)
        return T.concat(cols, axis=-1)

    # -- discrete
    def discrete_forward(self, obs_onehot, know_logp: np.ndarray, params: ParameterStore | None = None) -> DiscreteOutput:
        """``know_logp`` is (N, n, 7) for the full knowledge set (columns of dropped entries are ignored)."""
        params = params or self.params
        logp_in, k_in, u, feats = self._heads(params, obs_onehot)
        n = logp_in.shape[0]
        raw = self.raw_scores(params, k_in, u, n)
        log_w = T.log_softmax(raw, axis=-1)
        comps = []
        if self.inner_on:
            comps.append(T.reshape(logp_in, (n, 1, G.N_ACTIONS)))
        if self.active:
            comps.append(Tensor(np.asarray(know_logp)[:, self.active]))
        comp = T.concat(comps, axis=1)
        log_mix = T.logsumexp(T.reshape(log_w, (n, -1, 1)) + comp, axis=1)
        return DiscreteOutput(log_mix, log_w, raw, logp_in, feats)

    def value(self, feats: Tensor, params: ParameterStore | None = None) -> Tensor:
        params = params or self.params
        return forward(self.arch.critic, params, feats, "critic").reshape(-1)

    def act_discrete(self, observations: Sequence[G.GridObservation], rng: np.random.Generator, greedy: bool = False):
        """Returns (actions, log_probs, values, output, know_logp) without recording gradients."""
        onehot = G.encode_onehot(
            np.stack([o.view for o in observations]), np.array([o.carrying for o in observations])
        )
        know = self.knowledge.grid_logpmf(observations)
        with no_grad():
            out = self.discrete_forward(onehot, know)
            values = self.value(out.feats).data if "critic.l0.w" in self.params else np.zeros(len(observations))
        pmf = np.exp(out.log_mix.data)
        actions = pmf.argmax(axis=-1) if greedy else sample_categorical(pmf, rng)
        logp = out.log_mix.data[np.arange(len(actions)), actions]
        return actions, logp, values, out, onehot, know

    # -- continuous
    def _components(self, obs: np.ndarray, inner):
        mean_in, log_std_in = inner
        means, log_stds, squashed = [], [], []
        if self.inner_on:
            means.append(mean_in)
            log_stds.append(log_std_in)
            squashed.append(True)
        if self.active:
            km, ks, ksq = self.knowledge.gaussians(obs)
            for i in self.active:
                means.append(Tensor(km[:, i]))
                log_stds.append(Tensor(ks[:, i]))
                squashed.append(bool(ksq[i]))
        return means, log_stds, squashed

    def sample_continuous(self, obs, rng: np.random.Generator, params: ParameterStore | None = None) -> ContinuousSample:
        params = params or self.params
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        inner, k_in, u, _ = self._heads(params, obs)
        n = obs.shape[0]
        raw = self.raw_scores(params, k_in, u, n)
        log_w = T.log_softmax(raw, axis=-1)
        means, log_stds, squashed = self._components(obs, inner)
        e, chosen = gumbel_straight_through(log_w, self.temperature, rng)
        samples = []
        pre_in = None
        for j, (m, s, sq) in enumerate(zip(means, log_stds, squashed)):
            pre = m + T.exp(s) * rng.standard_normal(m.shape)
            if j == 0 and self.inner_on:
                pre_in = pre
            samples.append(T.tanh(pre) if sq else pre)
        action = (T.reshape(e, (n, -1, 1)) * T.stack(samples, axis=1)).sum(axis=1)
        pre_squash = {0: (pre_in, chosen == 0)} if self.inner_on else None
        log_prob = mixture_logpdf(action, log_w, means, log_stds, squashed, pre_squash)
        inner_a = inner_lp = None
        if self.inner_on:
            inner_a = samples[0]
            inner_lp = gaussian_logpdf(pre_in, means[0], log_stds[0]) - tanh_log_jacobian(pre_in)
        return ContinuousSample(action, log_prob, chosen, e, raw, log_w, inner_a, inner_lp)

    def continuous_log_prob(self, obs, action, params: ParameterStore | None = None) -> Tensor:
        params = params or self.params
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        inner, k_in, u, _ = self._heads(params, obs)
        raw = self.raw_scores(params, k_in, u, obs.shape[0])
        means, log_stds, squashed = self._components(obs, inner)
        return mixture_logpdf(action, T.log_softmax(raw, axis=-1), means, log_stds, squashed)

    def act_continuous(self, obs, rng: np.random.Generator, greedy: bool = False):
        """Returns (actions (N, 4), raw (N, m), weights (N, m), chosen (N,))."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        with no_grad():
            if not greedy:
                s = self.sample_continuous(obs, rng)
                return s.action.data, s.raw.data, s.weights, s.chosen
            inner, k_in, u, _ = self._heads(self.params, obs)
            raw = self.raw_scores(self.params, k_in, u, obs.shape[0])
            weights = np.exp(T.log_softmax(raw, axis=-1).data)
            means, _, squashed = self._components(obs, inner)
        chosen = weights.argmax(axis=-1)
        modes = np.stack([np.tanh(m.data) if sq else m.data for m, sq in zip(means, squashed)], axis=1)
        return modes[np.arange(len(chosen)), chosen], raw.data, weights, chosen

    # -- generic
    def act(self, observations, rng: np.random.Generator, greedy: bool = False):
        if self.discrete:
            return self.act_discrete(observations, rng, greedy)[0]
        return self.act_continuous(observations, rng, greedy)[0]


class BaselineActor(KGRLActor):
    """Plain policy: the inner actor alone, no keys, query or knowledge."""

    attention = False

    def __init__(self, arch: GridArch | PointArch, rng: np.random.Generator, with_critic: bool = True, **_):
        space = "grid7" if isinstance(arch, GridArch) else "cont4"
        super().__init__(arch, KnowledgeSet(0, space), 0, rng, with_critic=with_critic)

    def ablate(self, drop: Sequence[str]) -> KGRLActor:
        if drop:
            raise ActorConfigError("a baseline actor has no knowledge to drop")
        return self


def trace_rows(episode: int, step: int, names: Sequence[str], raw: np.ndarray, weights: np.ndarray, chosen: int) -> dict:
    """One weight-trace record; raw and normalized weights per component."""
    row = {"episode": episode, "step": step}
    row.update({f"raw_{n}": float(r) for n, r in zip(names, raw)})
    row.update({f"w_{n}": float(w) for n, w in zip(names, weights)})
    row["chosen"] = names[int(chosen)]
    return row
