"""Experiment orchestration: train, evaluate, transfer, trace and sweep.

Each seed writes to its own directory ``<out>/<name>/seed_<n>/``::

    run.json     RunRecord (validated against run.schema.json)
    curves.csv   step,source,mean_return,min_return,success_rate,episodes
    curves.svg   rendered from curves.csv
    log.jsonl    optimizer statistics, one JSON object per line
    actor.npz    full actor parameters (float64)
    packs/       the inner policy as a reusable knowledge pack

A finished run is reused when its cache key (config, package sources and any
referenced pack files) matches.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import deque
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from kgrl import grid_env as G
from kgrl import knowledge as K
from kgrl import point_env as P
from kgrl.actor import INNER, BaselineActor, KGRLActor, trace_rows
from kgrl.algo.ppo import GridPool, RecentReturns, collect_rollouts, grid_evaluate, ppo_update
from kgrl.algo.sac import SAC, ReplayBuffer, collect_episode, her_relabel, point_evaluate
from kgrl.approx import Adam, no_grad
from kgrl.harness import plots
from kgrl.harness.config import ExperimentConfig
from kgrl.harness.record import (
    CURVE_HEADER,
    RUN_FORMAT,
    RUN_VERSION,
    SWEEP_HEADER,
    code_hash,
    file_digest,
    git_describe,
    metrics,
    read_record,
    trace_header,
    write_csv,
    write_record,
)
from kgrl.policy import GRID_LAYOUT, POINT_LAYOUT

KEY_SAMPLE = 2000  # observations used to average the inner key for a pack
TRAIN_WINDOW = 32  # completed training episodes in the rolling curve


class PackMutated(RuntimeError):
    """A pack or checkpoint changed on disk while it was being evaluated."""


def _space(family: str) -> str:
    return "grid7" if family == "grid" else "cont4"


def _layout(family: str) -> str:
    return GRID_LAYOUT if family == "grid" else POINT_LAYOUT


def eval_seed(seed: int, step: int) -> int:
    """Episode-seed stream for an evaluation, independent of the training generator."""
    return int(np.random.SeedSequence([seed, step, 0xE7A1]).generate_state(1)[0])


# -- building blocks --------------------------------------------------------------------
def build_knowledge(cfg: ExperimentConfig, rng: np.random.Generator) -> K.KnowledgeSet:
    ks = K.KnowledgeSet(cfg.d_k, _space(cfg.family))
    for item in cfg.knowledge:
        item = {"rule": item} if isinstance(item, str) else item
        if "rule" in item:
            ks.add(item.get("name", item["rule"]), K.scripted(item["rule"], item.get("epsilon")), rng.standard_normal(cfg.d_k))
        else:
            name, mapping, key, _ = K.load_pack(
                cfg.pack_path(item["pack"]), expect_d_k=cfg.d_k, expect_layout=_layout(cfg.family)
            )
            ks.add(item.get("name", name), mapping, key)
    return ks


def build_actor(cfg: ExperimentConfig, rng: np.random.Generator):
    arch = cfg.arch()
    if cfg.actor["kind"] == "baseline":
        return BaselineActor(arch, rng)
    return KGRLActor(
        arch,
        build_knowledge(cfg, rng),
        cfg.d_k,
        rng,
        temperature=cfg.actor.get("temperature", 1.0),
        freeze_keys=cfg.actor.get("freeze_keys", False),
    )


def pack_files_of(cfg: ExperimentConfig) -> list[Path]:
    out = []
    for item in cfg.knowledge:
        if isinstance(item, dict) and "pack" in item:
            manifest, blob = K.pack_files(cfg.pack_path(item["pack"]))
            out += [manifest] + ([blob] if blob.exists() else [])
    return out


def cache_key(cfg: ExperimentConfig, seed: int) -> str:
    parts = [cfg.hash(), code_hash(), str(seed), file_digest(pack_files_of(cfg))]
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def evaluate(actor, family: str, env_config, episodes: int, seed: int, adapter: bool = False, record: list | None = None) -> dict:
    if family == "grid":
        returns, successes, _ = grid_evaluate(actor, env_config, episodes, seed, record=record)
    else:
        returns, successes = point_evaluate(actor, env_config, episodes, seed, adapter=adapter, record=record)
    return metrics(returns, successes)


def inner_key(actor, family: str, observations: list, d_k: int) -> np.ndarray:
    """Mean inner key over the given observations (zeros for actors without attention)."""
    if not actor.attention or not observations:
        return np.zeros(d_k)
    if family == "grid":
        x = np.stack([o.onehot() for o in observations])
    else:
        x = np.concatenate(observations)
    if len(x) > KEY_SAMPLE:
        x = x[np.linspace(0, len(x) - 1, KEY_SAMPLE).astype(int)]
    with no_grad():
        _, k_in, _ = actor.forward_keys_query(x)
    return k_in.data.mean(axis=0)


def _episode_return(obs: np.ndarray, variant: str) -> float:
    nxt = obs[1:]
    return float(P.compute_reward(P.achieved_goal(nxt, variant), nxt[:, P.GOAL]).sum())


class _Curves:
    def __init__(self):
        self.rows: list[dict] = []

    def train(self, step: int, episodes) -> None:
        if episodes:
            rets = [e[0] for e in episodes]
            succ = [e[1] for e in episodes]
            self.rows.append({"step": step, "source": "train", **metrics(rets, succ)})

    def eval(self, step: int, m: dict) -> None:
        self.rows.append({"step": step, "source": "eval", **m})


# -- training loops ----------------------------------------------------------------------
def _train_grid(cfg, actor, seed, rng, curves, log, evals):
    algo = cfg.algo_config()
    env = cfg.env_config()
    pool = GridPool(env, algo.n_envs, seed)
    opt = Adam(algo.lr, eps=algo.adam_eps, max_grad_norm=algo.max_grad_norm)
    recent = RecentReturns(TRAIN_WINDOW)
    window: deque = deque(maxlen=TRAIN_WINDOW)
    frames, next_eval, reached = 0, 0, None
    while True:
        if frames >= next_eval:
            evals.append({"step": frames, **evaluate(actor, "grid", env, cfg.eval_episodes, eval_seed(seed, frames))})
            curves.eval(frames, evals[-1])
            next_eval += cfg.eval_every
        ro = collect_rollouts(pool, actor, algo.n_steps, rng)
        stats = ppo_update(actor, ro, algo, opt, rng)
        frames += ro.n_frames
        recent.extend(ro.episodes)
        window.extend((ret, succ) for ret, _, succ in ro.episodes)
        curves.train(frames, list(window))
        w = ro.weights.reshape(-1, ro.weights.shape[-1]).mean(axis=0)
        log({"step": frames, "rolling_return": recent.mean, **stats, "weights": dict(zip(actor.component_names, w.tolist()))})
        if cfg.threshold is not None and reached is None and recent.full and recent.mean >= cfg.threshold:
            reached = frames
        if frames >= cfg.total_steps or (cfg.stop_at_threshold and reached is not None):
            return frames, reached


def _train_point(cfg, actor, seed, rng, curves, log, evals):
    algo = cfg.algo_config()
    env = cfg.env_config()
    sac = SAC(actor, algo, rng)
    buf = ReplayBuffer(min(algo.buffer_size, cfg.total_steps * (algo.her_k + 1)), P.OBS_DIM, 4)
    window: deque = deque(maxlen=TRAIN_WINDOW)
    total, next_eval, reached, episode = 0, 0, None, 0

    def explore(_):
        return rng.uniform(-1.0, 1.0, 4)

    def act(o):
        return actor.act_continuous(o, rng)[0][0]

    while True:
        if total >= next_eval:
            m = evaluate(actor, "point", env, cfg.eval_episodes, eval_seed(seed, total))
            evals.append({"step": total, **m})
            curves.eval(total, m)
            curves.train(total, list(window))
            next_eval += cfg.eval_every
            if cfg.threshold is not None and reached is None and m["success_rate"] >= cfg.threshold:
                reached = total
            if cfg.stop_at_threshold and reached is not None:
                return total, reached
        obs, acts, state, _ = collect_episode(env, int(rng.integers(2**31)), explore if total < algo.start_steps else act, rng)
        buf.add(**her_relabel(obs, acts, env.variant, algo.her_k, rng))
        total += len(acts)
        episode += 1
        window.append((_episode_return(obs, env.variant), state.success))
        if total >= algo.start_steps:
            for _ in range(max(1, len(acts) // algo.update_every)):
                stats = sac.update(buf.sample(algo.batch_size, rng), rng)
            if episode % 10 == 0:
                log({"step": total, "episode": episode, **stats})
        if total >= cfg.total_steps:
            return total, reached


def train_seed(cfg: ExperimentConfig, seed: int, out: str | Path | None = None, force: bool = False, echo: Callable | None = None) -> dict:
    """Train one seed, or return the cached record of an identical earlier run."""
    run_dir = Path(out or cfg.out_dir) / cfg.name / f"seed_{seed}"
    key = cache_key(cfg, seed)
    record_path = run_dir / "run.json"
    if not force and record_path.exists():
        try:
            cached = read_record(record_path)
        except (ValueError, json.JSONDecodeError):
            cached = None
        if cached is not None and cached.get("cache_key") == key:
            return cached
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    rng = np.random.default_rng(seed)
    actor = build_actor(cfg, rng)
    curves = _Curves()
    evals: list[dict] = []
    with open(run_dir / "log.jsonl", "w") as log_fh:

        def log(entry):
            log_fh.write(json.dumps(entry) + "\n")
            if echo is not None and "rolling_return" in entry:
                echo(f"[{cfg.name} seed {seed}] step {entry['step']} rolling return {entry['rolling_return']:.3f}")

        loop = _train_grid if cfg.family == "grid" else _train_point
        frames, reached = loop(cfg, actor, seed, rng, curves, log, evals)

    env = cfg.env_config()
    seen: list = []
    final = evaluate(actor, cfg.family, env, cfg.eval_episodes, eval_seed(seed, frames), record=seen)
    if evals and evals[-1]["step"] == frames:
        evals[-1] = {"step": frames, **final}
        curves.rows = [r for r in curves.rows if not (r["source"] == "eval" and r["step"] == frames)]
    else:
        evals.append({"step": frames, **final})
    curves.eval(frames, final)
    curves.rows.sort(key=lambda r: (r["step"], r["source"]))

    # the inner policy leaves as a pack: frozen snapshot plus its mean inner key
    pack_key = inner_key(actor, cfg.family, seen, cfg.d_k)
    mapping = K.snapshot_mapping(actor.params, actor.arch, _space(cfg.family))
    K.save_pack(
        run_dir / "packs" / "inner",
        f"{cfg.name}-inner",
        mapping,
        pack_key,
        metadata={"config_hash": cfg.hash(), "seed": seed, "env": cfg.env, "steps": frames},
    )
    np.savez(run_dir / "actor.npz", **actor.params.numpy())
    write_csv(run_dir / "curves.csv", CURVE_HEADER, curves.rows)
    plots.render_curves(run_dir / "curves.csv", run_dir / "curves.svg", f"{cfg.name} seed {seed}")

    record = {
        "format": RUN_FORMAT,
        "version": RUN_VERSION,
        "config": cfg.to_dict(),
        "config_base_dir": str(Path(cfg.base_dir).resolve()),
        "config_hash": cfg.hash(),
        "code_hash": code_hash(),
        "cache_key": key,
        "git_describe": git_describe(),
        "seed": seed,
        "components": actor.component_names,
        "evals": evals,
        "steps_to_threshold": reached,
        "total_env_steps": frames,
        "final": final,
        "packs": ["packs/inner.json"],
        "checkpoint": "actor.npz",
        "wall_seconds": round(time.time() - t0, 3),
    }
    write_record(record_path, record)
    return record


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, force: bool = False, echo: Callable | None = None) -> dict:
    """All seeds sequentially, plus a summary.json next to the seed directories."""
    records = [train_seed(cfg, s, out, force, echo) for s in cfg.seeds]
    summary = summarize(records)
    root = Path(out or cfg.out_dir) / cfg.name
    (root / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def summarize(records: Sequence[dict]) -> dict:
    steps = [r["steps_to_threshold"] for r in records]
    finite = [np.inf if s is None else s for s in steps]
    med = float(np.median(finite))
    return {
        "name": records[0]["config"]["name"],
        "seeds": [r["seed"] for r in records],
        "steps_to_threshold": steps,
        "median_steps_to_threshold": None if np.isinf(med) else med,
        "final_mean_return": [r["final"]["mean_return"] for r in records],
        "final_success_rate": [r["final"]["success_rate"] for r in records],
    }


# -- loading and evaluating finished runs ---------------------------------------------------
def load_run(run_dir: str | Path):
    """Returns (config, record, actor) for a finished seed directory."""
    run_dir = Path(run_dir)
    record = read_record(run_dir / "run.json")
    cfg = ExperimentConfig.from_dict(record["config"], base_dir=record.get("config_base_dir", "."))
    actor = build_actor(cfg, np.random.default_rng(record["seed"]))
    with np.load(run_dir / record["checkpoint"]) as values:
        actor.params.load({k: values[k] for k in values.files})
    return cfg, record, actor


def _guarded_files(run_dir: Path, cfg: ExperimentConfig) -> list[Path]:
    return sorted((run_dir / "packs").glob("*")) + [run_dir / "actor.npz"] + pack_files_of(cfg)


def resolve_env(family: str, env) -> object:
    """Env from a preset/variant name, a dict of overrides, a config object or None."""
    if env is None or not isinstance(env, str):
        return env
    if family == "grid":
        if env not in G.PRESETS:
            raise ValueError(f"unknown grid preset {env!r}; choose from {sorted(G.PRESETS)}")
        return G.PRESETS[env]
    return P.PointConfig(env)


class PackPolicy:
    """A knowledge pack acting alone: greedy pmf argmax or squashed Gaussian mean."""

    attention = False

    def __init__(self, mapping: K.KnowledgeMapping):
        self.mapping = mapping

    def act(self, observations, rng, greedy: bool = True):
        if self.mapping.action_space == "grid7":
            logp = self.mapping.grid_logpmf(observations)
            if greedy:
                return logp.argmax(axis=-1)
            p = np.exp(logp)
            return np.array([rng.choice(len(row), p=row / row.sum()) for row in p])
        mean, log_std = self.mapping.gaussian(np.atleast_2d(observations))
        if not greedy:
            mean = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return np.tanh(mean) if self.mapping.squashed else np.clip(mean, -1.0, 1.0)


def eval_pack(pack: str | Path, env, episodes: int = 100, seed: int = 0) -> dict:
    manifest, blob = K.pack_files(pack)
    guarded = [manifest] + ([blob] if blob.exists() else [])
    before = file_digest(guarded)
    name, mapping, _, meta = K.load_pack(pack)
    family = "grid" if mapping.action_space == "grid7" else "point"
    if env is None:
        raise ValueError("evaluating a bare pack needs an env")
    result = evaluate(PackPolicy(mapping), family, resolve_env(family, env), episodes, seed)
    if file_digest(guarded) != before:
        raise PackMutated(f"{manifest} changed during evaluation")
    return {**result, "components": [name]}


def eval_run(run_dir: str | Path, env=None, episodes: int = 100, drop: Sequence[str] = (), seed: int = 0, adapter: bool = False) -> dict:
    """Greedy evaluation with fresh episode seeds, optionally with components dropped."""
    run_dir = Path(run_dir)
    if (run_dir / "run.json").exists():
        cfg, _, actor = load_run(run_dir)
    elif str(run_dir).endswith(".json") or K.pack_files(run_dir)[0].exists():
        return eval_pack(run_dir, env, episodes, seed)
    else:
        raise FileNotFoundError(f"{run_dir} is neither a run directory nor a pack")
    guarded = _guarded_files(run_dir, cfg)
    before = file_digest(guarded)
    if drop:
        actor = actor.ablate(list(drop))
    env_config = resolve_env(cfg.family, env) or cfg.env_config()
    result = evaluate(actor, cfg.family, env_config, episodes, eval_seed(seed, 10**9), adapter=adapter)
    if file_digest(guarded) != before:
        raise PackMutated(f"files under {run_dir} changed during evaluation")
    return {**result, "components": actor.component_names}


def transfer(run_dir: str | Path, env, episodes: int = 100, seed: int = 0) -> dict:
    """Zero-shot evaluation on another env; pick-and-place policies see reach with object slots zeroed."""
    cfg, _, _ = load_run(run_dir)
    target = resolve_env(cfg.family, env)
    adapter = cfg.family == "point" and cfg.env.get("variant") == "pick_place" and target.variant == "reach"
    return {**eval_run(run_dir, target, episodes, seed=seed, adapter=adapter), "adapter": adapter}


# -- traces and sweeps -----------------------------------------------------------------------
def trace(run_dir: str | Path, env=None, episode_seed: int = 0, out: str | Path | None = None, drop: Sequence[str] = ()) -> list[dict]:
    """One greedy episode with per-step raw and normalized weights; writes trace.csv and trace.svg."""
    run_dir = Path(run_dir)
    cfg, _, actor = load_run(run_dir)
    if drop:
        actor = actor.ablate(list(drop))
    env_config = resolve_env(cfg.family, env) or cfg.env_config()
    rng = np.random.default_rng(episode_seed)
    names = actor.component_names
    rows = []
    if cfg.family == "grid":
        state, obs = G.reset(env_config, episode_seed)
        while not state.done:
            a, _, _, out_, _, _ = actor.act_discrete([obs], rng, greedy=True)
            raw, w = out_.raw.data[0], out_.weights[0]
            row = trace_rows(0, state.step_count, names, raw, w, int(np.argmax(w)))
            state, _, _, obs = G.step(state, int(a[0]))
            rows.append({**row, "action": G.ACTION_NAMES[int(a[0])], "events": ";".join(state.events)})
    else:
        state, obs = P.reset(env_config, episode_seed)
        while not state.done:
            a, raw, w, chosen = actor.act_continuous(obs, rng, greedy=True)
            row = trace_rows(0, state.step_count, names, raw[0], w[0], int(chosen[0]))
            state, _, _, obs = P.step(state, a[0])
            rows.append({**row, "action": " ".join(f"{v:.4f}" for v in a[0]), "events": ";".join(state.events)})
    out_dir = Path(out) if out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "trace.csv", trace_header(names), rows)
    plots.render_trace(out_dir / "trace.csv", out_dir / "trace.svg", f"{cfg.name} episode seed {episode_seed}")
    return rows


def dominant_switches(rows: Sequence[dict]) -> list[tuple[int, str, str]]:
    """(step, from, to) wherever the highest-weight component changes."""
    comps = [c[2:] for c in rows[0] if c.startswith("w_")]
    dom = [max(comps, key=lambda c: float(r[f"w_{c}"])) for r in rows]
    return [(int(rows[i]["step"]), dom[i - 1], dom[i]) for i in range(1, len(rows)) if dom[i] != dom[i - 1]]


def event_steps(rows: Sequence[dict], event: str) -> list[int]:
    """Steps whose action raised ``event``; the effect is visible from the next step on."""
    return [int(r["step"]) for r in rows if event in str(r["events"]).split(";")]


def sweep(run_dir: str | Path, scales: Sequence[float], episodes: int = 100, seed: int = 0, out: str | Path | None = None) -> list[dict]:
    """Success rate of a point-env run across goal range scales; writes sweep.csv and sweep.svg."""
    run_dir = Path(run_dir)
    cfg, _, actor = load_run(run_dir)
    if cfg.family != "point":
        raise ValueError("goal-range sweeps apply to point env runs")
    rows = []
    for s in scales:
        m = evaluate(actor, "point", cfg.env_config(goal_range_scale=float(s)), episodes, eval_seed(seed, 10**9))
        rows.append({"scale": float(s), **m})
    out_dir = Path(out) if out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "sweep.csv", SWEEP_HEADER, rows)
    plots.render_sweep(out_dir / "sweep.csv", out_dir / "sweep.svg", f"{cfg.name} goal range sweep")
    return rows


__all__ = [
    "INNER",
    "PackMutated",
    "PackPolicy",
    "build_actor",
    "build_knowledge",
    "cache_key",
    "dominant_switches",
    "eval_pack",
    "eval_run",
    "eval_seed",
    "evaluate",
    "event_steps",
    "inner_key",
    "load_run",
    "run_experiment",
    "summarize",
    "sweep",
    "trace",
    "train_seed",
    "transfer",
]
