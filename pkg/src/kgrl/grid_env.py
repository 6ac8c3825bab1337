"""Partially observable gridworld: Empty, Empty-Random, Unlock and DoorKey layouts.

Coordinates are (x, y) with x growing east and y growing south. The outer
ring of cells is always wall. The agent sees a 5x5 egocentric window with
itself at the bottom-center, looking "up" the window.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

# object kinds
UNSEEN, EMPTY, WALL, DOOR, KEY, GOAL = range(6)
KIND_NAMES = ("unseen", "empty", "wall", "door", "key", "goal")
# colors
COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
NO_COLOR = -1
GREEN, GREY = COLORS.index("green"), COLORS.index("grey")
# door states
OPEN, CLOSED, LOCKED = range(3)
NO_STATE = -1

# actions
TURN_LEFT, TURN_RIGHT, FORWARD, PICKUP, DROP, TOGGLE, DONE = range(7)
ACTION_NAMES = ("turn_left", "turn_right", "forward", "pickup", "drop", "toggle", "done")
N_ACTIONS = 7

EAST, SOUTH, WEST, NORTH = range(4)
DIR_VEC = np.array([(1, 0), (0, 1), (-1, 0), (0, -1)])

VIEW = 5
AGENT_ROW, AGENT_COL = VIEW - 1, VIEW // 2
N_CHANNELS = len(KIND_NAMES) + len(COLORS) + 3 + 1  # kinds, colors, door states, carrying
VARIANTS = ("empty", "empty_random", "unlock", "doorkey")


class GridConfigError(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    """step() called on a state whose episode already ended."""


@dataclass(frozen=True)
class GridConfig:
    width: int = 5
    height: int = 5
    variant: str = "empty"
    max_steps: int | None = None  # default 4 * width * height
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise GridConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.width < 5 or self.height < 5:
            raise GridConfigError(f"grid must be at least 5x5, got {self.width}x{self.height}")
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 4 * self.width * self.height)
        if self.max_steps < 1:
            raise GridConfigError("max_steps must be >= 1")


PRESETS: dict[str, GridConfig] = {
    "empty-5x5": GridConfig(5, 5, "empty"),
    "empty-random-5x5": GridConfig(5, 5, "empty_random"),
    "empty-16x16": GridConfig(16, 16, "empty"),
    "unlock": GridConfig(5, 5, "unlock"),
    "doorkey-5x5": GridConfig(5, 5, "doorkey"),
    "doorkey-8x8": GridConfig(8, 8, "doorkey"),
}


@dataclass(frozen=True)
class GridState:
    config: GridConfig
    kind: np.ndarray  # (width, height) int8
    color: np.ndarray
    door: np.ndarray
    agent_pos: tuple[int, int]
    agent_dir: int
    carrying: int = NO_COLOR  # color of the carried key, or NO_COLOR
    step_count: int = 0
    done: bool = False
    success: bool = False
    events: tuple[str, ...] = field(default=())  # events raised by the last step

    @property
    def front_pos(self) -> tuple[int, int]:
        dx, dy = DIR_VEC[self.agent_dir]
        return self.agent_pos[0] + int(dx), self.agent_pos[1] + int(dy)

    def n_keys(self) -> int:
        return int(np.sum(self.kind == KEY)) + (self.carrying != NO_COLOR)

    def render(self) -> str:
        return render_ascii(self)


@dataclass(frozen=True)
class GridObservation:
    view: np.ndarray  # (5, 5, 3) int8: kind, color, door state; row 0 is farthest
    carrying: bool

    def kinds(self) -> np.ndarray:
        return self.view[:, :, 0]

    def onehot(self) -> np.ndarray:
        return encode_onehot(self.view[None], np.array([self.carrying]))[0]


# -- layout -------------------------------------------------------------------
def _empty_grid(w: int, h: int):
    kind = np.full((w, h), EMPTY, dtype=np.int8)
    kind[0, :] = kind[-1, :] = kind[:, 0] = kind[:, -1] = WALL
    color = np.full((w, h), NO_COLOR, dtype=np.int8)
    color[kind == WALL] = GREY
    door = np.full((w, h), NO_STATE, dtype=np.int8)
    return kind, color, door


def reset(config: GridConfig, seed: int | None = None) -> tuple[GridState, GridObservation]:
    rng = np.random.Generator(np.random.Philox(config.seed if seed is None else seed))
    w, h = config.width, config.height
    kind, color, door = _empty_grid(w, h)
    if config.variant in ("empty", "empty_random"):
        agent, direction = (1, 1), EAST
        if config.variant == "empty":
            goal = (w - 2, h - 2)
        else:
            cells = [(x, y) for x in range(1, w - 1) for y in range(1, h - 1) if (x, y) != agent]
            goal = cells[int(rng.integers(len(cells)))]
        kind[goal] = GOAL
        color[goal] = GREEN
    else:
        split = int(rng.integers(2, w - 2))
        kind[split, :] = WALL
        color[split, :] = GREY
        door_y = int(rng.integers(1, h - 2))
        key_color = int(rng.integers(len(COLORS) - 1))  # not grey
        kind[split, door_y] = DOOR
        color[split, door_y] = key_color
        door[split, door_y] = LOCKED
        left = [(x, y) for x in range(1, split) for y in range(1, h - 1)]
        i, j = rng.choice(len(left), size=2, replace=False)
        agent, key = left[int(i)], left[int(j)]
        kind[key] = KEY
        color[key] = key_color
        direction = int(rng.integers(4))
        if config.variant == "doorkey":
            kind[w - 2, h - 2] = GOAL
            color[w - 2, h - 2] = GREEN
    state = GridState(config, kind, color, door, agent, direction)
    return state, observe(state)


# -- dynamics -------------------------------------------------------------------
def success_reward(step_count: int, max_steps: int) -> float:
    return 1.0 - 0.9 * (step_count / max_steps)


def step(state: GridState, action: int) -> tuple[GridState, float, bool, GridObservation]:
    if state.done:
        raise EpisodeFinished("episode already finished; call reset()")
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"action {action} out of range")
    cfg = state.config
    kind, color, door = state.kind, state.color, state.door
    pos, direction, carrying = state.agent_pos, state.agent_dir, state.carrying
    fx, fy = state.front_pos
    events: list[str] = []
    success = False

    if action == TURN_LEFT:
        direction = (direction - 1) % 4
    elif action == TURN_RIGHT:
        direction = (direction + 1) % 4
    elif action == FORWARD:
        k = kind[fx, fy]
        if k in (EMPTY, GOAL) or (k == DOOR and door[fx, fy] == OPEN):
            pos = (fx, fy)
            if k == GOAL:
                success = True
                events.append("goal")
    elif action == PICKUP:
        if kind[fx, fy] == KEY and carrying == NO_COLOR:
            carrying = int(color[fx, fy])
            kind, color = kind.copy(), color.copy()
            kind[fx, fy], color[fx, fy] = EMPTY, NO_COLOR
            events.append("pickup")
    elif action == DROP:
        if carrying != NO_COLOR and kind[fx, fy] == EMPTY:
            kind, color = kind.copy(), color.copy()
            kind[fx, fy], color[fx, fy] = KEY, carrying
            carrying = NO_COLOR
            events.append("drop")
    elif action == TOGGLE:
        if kind[fx, fy] == DOOR:
            s = door[fx, fy]
            new = s
            if s == LOCKED:
                if carrying == color[fx, fy]:
                    new = OPEN
            elif s == CLOSED:
                new = OPEN
            else:
                new = CLOSED
            if new != s:
                door = door.copy()
                door[fx, fy] = new
                events.append("open" if new == OPEN else "close")
                if new == OPEN and cfg.variant == "unlock":
                    success = True

    step_count = state.step_count + 1
    reward = 0.0
    done = False
    if success:
        reward = success_reward(step_count, cfg.max_steps)
        done = True
    elif step_count >= cfg.max_steps:
        done = True
    new_state = replace(
        state,
        kind=kind,
        color=color,
        door=door,
        agent_pos=pos,
        agent_dir=direction,
        carrying=carrying,
        step_count=step_count,
        done=done,
        success=success,
        events=tuple(events),
    )
    return new_state, reward, done, observe(new_state)


# -- observation -------------------------------------------------------------
def _segment_crosses_open_box(tx: float, ty: float, cx: float, cy: float) -> bool:
    """Does the segment (0,0)->(tx,ty) pass through the open unit square at (cx, cy)?"""
    t0, t1 = 0.0, 1.0
    for p0, d, c in ((0.0, tx, cx), (0.0, ty, cy)):
        lo, hi = c - 0.5, c + 0.5
        if d == 0.0:
            if not (lo < p0 < hi):
                return False
            continue
        a, b = (lo - p0) / d, (hi - p0) / d
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
    return t1 - t0 > 1e-9


@lru_cache(maxsize=1)
def shadow_matrix() -> np.ndarray:
    """shadow[j, i] is True when an opaque view cell j hides view cell i.

    Cell i is hidden by j when the straight ray from the agent's cell center
    to i's center passes through the interior of j (grazing an edge or a
    corner does not count). Index = row * 5 + col.
    """
    n = VIEW * VIEW
    shadow = np.zeros((n, n), dtype=bool)
    for i in range(n):
        ri, ci = divmod(i, VIEW)
        tx, ty = ci - AGENT_COL, AGENT_ROW - ri  # lateral, forward
        for j in range(n):
            if j == i:
                continue
            rj, cj = divmod(j, VIEW)
            lx, fy = cj - AGENT_COL, AGENT_ROW - rj
            if (lx, fy) == (0, 0):
                continue
            if _segment_crosses_open_box(tx, ty, lx, fy):
                shadow[j, i] = True
    return shadow


@lru_cache(maxsize=4)
def _view_offsets(direction: int) -> tuple[np.ndarray, np.ndarray]:
    fwd = DIR_VEC[direction]
    right = DIR_VEC[(direction + 1) % 4]
    rows, cols = np.meshgrid(np.arange(VIEW), np.arange(VIEW), indexing="ij")
    f = AGENT_ROW - rows
    lat = cols - AGENT_COL
    dx = f * fwd[0] + lat * right[0]
    dy = f * fwd[1] + lat * right[1]
    return dx.reshape(-1), dy.reshape(-1)


def view_world_coords(state: GridState) -> tuple[np.ndarray, np.ndarray]:
    dx, dy = _view_offsets(state.agent_dir)
    return state.agent_pos[0] + dx, state.agent_pos[1] + dy


@lru_cache(maxsize=8192)
def _view_lookup(w: int, h: int, x: int, y: int, direction: int):
    dx, dy = _view_offsets(direction)
    xs, ys = x + dx, y + dy
    inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    flat = np.where(inside, xs * h + ys, 0)
    return inside, flat


@lru_cache(maxsize=1)
def _shadow_float() -> np.ndarray:
    return shadow_matrix().astype(np.float64)


def observe(state: GridState) -> GridObservation:
    cfg = state.config
    inside, flat = _view_lookup(cfg.width, cfg.height, *state.agent_pos, state.agent_dir)
    kind = np.where(inside, state.kind.ravel()[flat], UNSEEN)
    dstate = np.where(inside, state.door.ravel()[flat], NO_STATE)
    opaque = (kind == WALL) | ((kind == DOOR) & (dstate != OPEN))
    visible = inside & ~((opaque @ _shadow_float()) > 0)
    view = np.empty((VIEW * VIEW, 3), dtype=np.int8)
    view[:, 0] = np.where(visible, kind, UNSEEN)
    view[:, 1] = np.where(visible, state.color.ravel()[flat], NO_COLOR)
    view[:, 2] = np.where(visible, dstate, NO_STATE)
    return GridObservation(view.reshape(VIEW, VIEW, 3), state.carrying != NO_COLOR)


_EYE_KIND = np.eye(len(KIND_NAMES))
_EYE_COLOR = np.eye(len(COLORS) + 1)[:, 1:]  # row 0 (no color) is all zeros
_EYE_STATE = np.eye(4)[:, 1:]


def encode_onehot(views: np.ndarray, carrying: np.ndarray) -> np.ndarray:
    """Batch of (N, 5, 5, 3) views -> (N, N_CHANNELS, 5, 5) float one-hot."""
    views = views.astype(np.int64)
    planes = np.concatenate(
        [
            _EYE_KIND[views[..., 0]],
            _EYE_COLOR[views[..., 1] + 1],
            _EYE_STATE[views[..., 2] + 1],
            np.broadcast_to(
                np.asarray(carrying, dtype=float)[:, None, None, None], views.shape[:3] + (1,)
            ),
        ],
        axis=-1,
    )
    return planes.transpose(0, 3, 1, 2)


_GLYPH = {EMPTY: ".", WALL: "#", KEY: "K", GOAL: "G"}
_DOOR_GLYPH = {OPEN: "/", CLOSED: "d", LOCKED: "D"}
_AGENT_GLYPH = (">", "v", "<", "^")


def render_ascii(state: GridState) -> str:
    w, h = state.config.width, state.config.height
    lines = []
    for y in range(h):
        row = []
        for x in range(w):
            if (x, y) == state.agent_pos:
                row.append(_AGENT_GLYPH[state.agent_dir])
            elif state.kind[x, y] == DOOR:
                row.append(_DOOR_GLYPH[int(state.door[x, y])])
            else:
                row.append(_GLYPH[int(state.kind[x, y])])
        lines.append("".join(row))
    if state.carrying != NO_COLOR:
        lines.append(f"carrying: {COLORS[state.carrying]} key")
    return "\n".join(lines)


class GridEnv:
    """Stateful convenience wrapper around reset/step."""

    def __init__(self, config: GridConfig | str):
        self.config = PRESETS[config] if isinstance(config, str) else config
        self.state: GridState | None = None

    def reset(self, seed: int) -> GridObservation:
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, action: int) -> tuple[GridObservation, float, bool]:
        if self.state is None:
            raise EpisodeFinished("reset() must be called first")
        self.state, reward, done, obs = step(self.state, int(action))
        return obs, reward, done
