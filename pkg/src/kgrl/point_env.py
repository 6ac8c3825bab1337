"""Kinematic reach / pick-and-place arm with sparse -1/0 rewards.

There is no contact physics: the end-effector moves by a commanded
displacement, a closed gripper near the object grabs it, and a held object
moves rigidly with the end-effector. Dropping an object sets it back on the
table plane.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

GAIN = 0.05  # metres per unit action per step
SUCCESS_TOL = 0.05
GRASP_TOL = 0.03
TABLE_Z = 0.0
GAP_MAX = 0.1
GAP_RATE = 0.02
EE_START = np.array([0.0, 0.0, 0.15])
# half-widths of the goal box at goal_range_scale == 1
REACH_GOAL_HALF = np.array([0.15, 0.15, 0.15])
PLACE_GOAL_HALF_XY = 0.15
PLACE_GOAL_MAX_HEIGHT = 0.2
OBJECT_RANGE = 0.15
OBJECT_MIN_XY_DIST = 0.1
VARIANTS = ("reach", "pick_place")

OBS_DIM = 25
# observation layout, documented in the README
EE_POS = slice(0, 3)
EE_VEL = slice(3, 6)
FINGER_POS = slice(6, 8)
FINGER_VEL = slice(8, 10)
OBJ_POS = slice(10, 13)
OBJ_ROT = slice(13, 16)
OBJ_VEL = slice(16, 19)
OBJ_REL = slice(19, 22)
GOAL = slice(22, 25)
OBJECT_SLOTS = slice(10, 22)


class PointConfigError(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class PointConfig:
    variant: str = "reach"
    goal_range_scale: float = 1.0
    max_steps: int = 50
    low: tuple[float, float, float] = (-0.3, -0.3, 0.0)
    high: tuple[float, float, float] = (0.3, 0.3, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PointConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.goal_range_scale <= 1.0:
            raise PointConfigError("goal_range_scale must lie in (0, 1]")
        if self.max_steps < 1:
            raise PointConfigError("max_steps must be >= 1")


@dataclass(frozen=True)
class PointState:
    config: PointConfig
    p_ee: np.ndarray
    v_ee: np.ndarray
    gripper_gap: float
    gap_vel: float
    p_obj: np.ndarray
    v_obj: np.ndarray
    object_held: bool
    p_goal: np.ndarray
    step_count: int = 0
    done: bool = False
    success: bool = False
    events: tuple[str, ...] = field(default=())

    @property
    def achieved(self) -> np.ndarray:
        return self.p_ee if self.config.variant == "reach" else self.p_obj


def goal_box(config: PointConfig) -> tuple[np.ndarray, np.ndarray]:
    s = config.goal_range_scale
    if config.variant == "reach":
        return EE_START - s * REACH_GOAL_HALF, EE_START + s * REACH_GOAL_HALF
    half = s * PLACE_GOAL_HALF_XY
    return (
        np.array([-half, -half, TABLE_Z]),
        np.array([half, half, TABLE_Z + s * PLACE_GOAL_MAX_HEIGHT]),
    )


def reset(config: PointConfig, seed: int | None = None) -> tuple[PointState, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(config.seed if seed is None else seed))
    lo, hi = goal_box(config)
    zeros = np.zeros(3)
    if config.variant == "reach":
        goal = rng.uniform(lo, hi)
        p_obj = zeros
    else:
        while True:
            xy = rng.uniform(-OBJECT_RANGE, OBJECT_RANGE, size=2)
            if np.linalg.norm(xy - EE_START[:2]) >= OBJECT_MIN_XY_DIST:
                break
        p_obj = np.array([xy[0], xy[1], TABLE_Z])
        goal = rng.uniform(lo, hi)
        if rng.random() < 0.5:
            goal[2] = TABLE_Z
    state = PointState(
        config, EE_START.copy(), zeros, GAP_MAX, 0.0, p_obj, zeros, False, goal
    )
    state = replace(state, success=bool(success_mask(state.achieved, goal)))
    return state, observe(state)


def success_mask(achieved: np.ndarray, goal: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(achieved) - np.asarray(goal), axis=-1) < SUCCESS_TOL


def compute_reward(achieved: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Vectorised sparse reward: 0 on success, -1 otherwise."""
    return np.where(success_mask(achieved, goal), 0.0, -1.0)


def achieved_goal(obs: np.ndarray, variant: str) -> np.ndarray:
    obs = np.asarray(obs)
    return obs[..., EE_POS] if variant == "reach" else obs[..., OBJ_POS]


def step(state: PointState, action) -> tuple[PointState, float, bool, np.ndarray]:
    if state.done:
        raise EpisodeFinished("episode already finished; call reset()")
    cfg = state.config
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(4), -1.0, 1.0)
    low, high = np.array(cfg.low), np.array(cfg.high)
    p_ee = np.clip(state.p_ee + GAIN * a[:3], low, high)
    v_ee = p_ee - state.p_ee
    grip = a[3]
    gap = float(np.clip(state.gripper_gap + GAP_RATE * grip, 0.0, GAP_MAX))
    gap_vel = gap - state.gripper_gap
    p_obj, held = state.p_obj, state.object_held
    events: list[str] = []
    if cfg.variant == "pick_place":
        if held and grip > 0:
            held = False
            p_obj = np.array([p_obj[0], p_obj[1], TABLE_Z])
            events.append("release")
        else:
            # the fingers close before the arm moves, so a grasp takes effect
            # at the pre-move position and the object follows this step's motion
            if not held and grip < 0 and np.linalg.norm(state.p_ee - p_obj) < GRASP_TOL:
                held = True
                events.append("grasp")
            if held:
                p_obj = np.clip(p_obj + v_ee, low, high)
    v_obj = p_obj - state.p_obj
    step_count = state.step_count + 1
    new = replace(
        state,
        p_ee=p_ee,
        v_ee=v_ee,
        gripper_gap=gap,
        gap_vel=gap_vel,
        p_obj=p_obj,
        v_obj=v_obj,
        object_held=held,
        step_count=step_count,
        events=tuple(events),
    )
    success = bool(success_mask(new.achieved, state.p_goal))
    done = success or step_count >= cfg.max_steps
    new = replace(new, success=success, done=done)
    return new, 0.0 if success else -1.0, done, observe(new)


def observe(state: PointState) -> np.ndarray:
    obs = np.zeros(OBS_DIM)
    obs[EE_POS] = state.p_ee
    obs[EE_VEL] = state.v_ee
    obs[FINGER_POS] = state.gripper_gap / 2
    obs[FINGER_VEL] = state.gap_vel / 2
    if state.config.variant == "pick_place":
        obs[OBJ_POS] = state.p_obj
        obs[OBJ_VEL] = state.v_obj
        obs[OBJ_REL] = state.p_obj - state.p_ee
    obs[GOAL] = state.p_goal
    return obs


def reach_adapter(obs: np.ndarray) -> np.ndarray:
    """Zero the object slots so a pick-and-place policy can act on reach."""
    out = np.array(obs, dtype=np.float64, copy=True)
    out[..., OBJECT_SLOTS] = 0.0
    return out


def relabel(obs: np.ndarray, goal: np.ndarray) -> np.ndarray:
    out = np.array(obs, dtype=np.float64, copy=True)
    out[..., GOAL] = goal
    return out


class PointEnv:
    def __init__(self, config: PointConfig):
        self.config = config
        self.state: PointState | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise EpisodeFinished("reset() must be called first")
        self.state, r, done, obs = step(self.state, action)
        return obs, r, done


def state_record(state: PointState, action, reward: float) -> dict:
    return {
        "step": state.step_count,
        "p_ee": state.p_ee.tolist(),
        "p_obj": state.p_obj.tolist(),
        "held": state.object_held,
        "p_goal": state.p_goal.tolist(),
        "action": np.asarray(action, dtype=float).tolist(),
        "reward": reward,
        "done": state.done,
    }


def dump_trajectory(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
