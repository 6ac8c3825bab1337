from collections import deque
from dataclasses import replace

import numpy as np
import pytest

from kgrl import grid_env as g


def _state(variant="empty", w=5, h=5, seed=0, **kw):
    return g.reset(g.GridConfig(w, h, variant, **kw), seed)


# -- reset ----------------------------------------------------------------------
def test_empty_layout():
    s, _ = _state()
    assert s.agent_pos == (1, 1) and s.agent_dir == g.EAST
    assert s.kind[3, 3] == g.GOAL
    assert s.step_count == 0


def test_empty_random_goal_uniform():
    counts = {}
    n = 10_000
    for seed in range(n):
        s, _ = _state("empty_random", seed=seed)
        pos = tuple(np.argwhere(s.kind == g.GOAL)[0])
        counts[pos] = counts.get(pos, 0) + 1
    assert len(counts) == 8 and (1, 1) not in counts
    p = 1 / 8
    sigma = np.sqrt(n * p * (1 - p))
    for c in counts.values():
        assert abs(c - n * p) < 3 * sigma


@pytest.mark.parametrize("variant", ["doorkey", "unlock"])
def test_doorkey_postconditions(variant):
    for seed in range(50):
        s, _ = _state(variant, seed=seed)
        assert np.sum(s.kind == g.DOOR) == 1
        assert np.sum(s.door == g.LOCKED) == 1
        assert np.sum(s.kind == g.KEY) == 1
        assert np.sum(s.kind == g.GOAL) == (1 if variant == "doorkey" else 0)
        split = int(np.argwhere(s.kind == g.DOOR)[0][0])
        key_x = int(np.argwhere(s.kind == g.KEY)[0][0])
        assert key_x < split and s.agent_pos[0] < split


def test_too_small_grid_rejected():
    with pytest.raises(g.GridConfigError):
        g.GridConfig(4, 5, "doorkey")
    with pytest.raises(g.GridConfigError):
        g.GridConfig(5, 5, "maze")


def test_default_max_steps():
    assert g.PRESETS["empty-5x5"].max_steps == 100


# -- step -----------------------------------------------------------------------
def test_forward_moves_east():
    s, _ = _state()
    s2, r, done, _ = g.step(s, g.FORWARD)
    assert s2.agent_pos == (2, 1) and r == 0.0 and not done
    assert s.agent_pos == (1, 1)  # previous state untouched


def test_success_reward_arithmetic():
    assert g.success_reward(10, 100) == pytest.approx(0.91)


def test_reaching_goal_rewards_and_ends():
    s, _ = _state()
    for a in [g.FORWARD, g.FORWARD, g.TURN_RIGHT, g.FORWARD, g.FORWARD]:
        s, r, done, _ = g.step(s, a)
    assert done and s.success
    assert r == pytest.approx(1 - 0.9 * 5 / 100)
    with pytest.raises(g.EpisodeFinished):
        g.step(s, g.FORWARD)


def test_wall_blocks_forward():
    s, _ = _state()
    s = replace(s, agent_dir=g.NORTH)
    s2, *_ = g.step(s, g.FORWARD)
    assert s2.agent_pos == (1, 1)


def test_timeout_gives_zero():
    s, _ = _state(max_steps=3)
    for _ in range(3):
        s, r, done, _ = g.step(s, g.TURN_LEFT)
    assert done and r == 0.0 and not s.success


def _facing(variant, target_kind, seed_range=200):
    """Find a doorkey/unlock state and rotate the agent to face ``target_kind`` if adjacent."""
    for seed in range(seed_range):
        s, _ = _state(variant, seed=seed)
        for d in range(4):
            s2 = replace(s, agent_dir=d)
            fx, fy = s2.front_pos
            if s2.kind[fx, fy] == target_kind:
                return s2
    raise AssertionError("no layout found")


def test_toggle_locked_door_without_key():
    s = _facing("doorkey", g.DOOR)
    s2, *_ = g.step(s, g.TOGGLE)
    fx, fy = s.front_pos
    assert s2.door[fx, fy] == g.LOCKED


def test_pickup_then_unlock():
    s = _facing("doorkey", g.KEY)
    s, *_ = g.step(s, g.PICKUP)
    assert s.carrying != g.NO_COLOR and s.n_keys() == 1
    # second pickup with full hands does nothing
    s2, *_ = g.step(s, g.PICKUP)
    assert s2.carrying == s.carrying
    door = tuple(np.argwhere(s.kind == g.DOOR)[0])
    # teleport next to the door facing it
    s = replace(s, agent_pos=(door[0] - 1, door[1]), agent_dir=g.EAST)
    s, r, done, _ = g.step(s, g.TOGGLE)
    assert s.door[door] == g.OPEN and "open" in s.events and not done


def test_unlock_opening_door_succeeds():
    s = _facing("unlock", g.KEY)
    s, *_ = g.step(s, g.PICKUP)
    door = tuple(np.argwhere(s.kind == g.DOOR)[0])
    s = replace(s, agent_pos=(door[0] - 1, door[1]), agent_dir=g.EAST)
    s, r, done, _ = g.step(s, g.TOGGLE)
    assert done and s.success and r == pytest.approx(1 - 0.9 * s.step_count / s.config.max_steps)


def test_drop_places_key():
    s = _facing("doorkey", g.KEY)
    s, *_ = g.step(s, g.PICKUP)
    # find an empty cell to face
    for d in range(4):
        s2 = replace(s, agent_dir=d)
        fx, fy = s2.front_pos
        if s2.kind[fx, fy] == g.EMPTY:
            s3, *_ = g.step(s2, g.DROP)
            assert s3.kind[fx, fy] == g.KEY and s3.carrying == g.NO_COLOR
            return
    pytest.skip("no empty neighbour")


# -- properties --------------------------------------------------------------------
@pytest.mark.parametrize("name", list(g.PRESETS))
def test_determinism_and_reward_range(name):
    cfg = g.PRESETS[name]
    actions = np.random.default_rng(1).integers(0, 7, 300)

    def run():
        s, obs = g.reset(cfg, 11)
        traj = []
        for a in actions:
            s, r, done, obs = g.step(s, int(a))
            traj.append((s.agent_pos, s.agent_dir, r, done, obs.view.tobytes()))
            assert 0.0 <= r <= 1.0
            assert r == 0.0 or done
            if cfg.variant in ("doorkey", "unlock"):
                assert s.n_keys() == 1
            assert s.kind[s.agent_pos] != g.WALL
            if done:
                break
        return traj

    assert run() == run()


def _solvable(state: g.GridState, max_depth=400) -> bool:
    """BFS over (pos, dir, carrying, door open, key position) with the real step()."""

    def key(s):
        return (s.agent_pos, s.agent_dir, s.carrying, s.door.tobytes(), s.kind.tobytes())

    seen = {key(state)}
    frontier = deque([(state, 0)])
    while frontier:
        s, depth = frontier.popleft()
        if depth > max_depth:
            continue
        for a in range(g.N_ACTIONS):
            s2, r, done, _ = g.step(s, a)
            if s2.success:
                return True
            if done:
                continue
            k = key(s2)
            if k not in seen:
                seen.add(k)
                frontier.append((s2, depth + 1))
    return False


@pytest.mark.parametrize("preset", ["doorkey-5x5", "doorkey-8x8", "unlock"])
def test_layouts_solvable_by_bfs(preset):
    cfg = replace(g.PRESETS[preset], max_steps=10_000)
    for seed in range(40):
        s, _ = g.reset(cfg, seed)
        assert _solvable(s), f"{preset} seed {seed} unsolvable:\n{s.render()}"


# -- observation ------------------------------------------------------------------
def test_wall_ahead_occludes():
    s, _ = _state()
    s = replace(s, agent_pos=(3, 1), agent_dir=g.EAST)  # wall at (4, 1) directly ahead
    obs = g.observe(s)
    k = obs.kinds()
    assert k[3, 2] == g.WALL
    assert np.all(k[:3, 2] == g.UNSEEN)


def test_rotation_gives_distinct_views():
    s, _ = _state()
    views = set()
    for _ in range(4):
        s, *_ = g.step(s, g.TURN_LEFT)
        views.add(g.observe(s).view.tobytes())
    assert len(views) == 4


def _raycast_oracle(state: g.GridState) -> np.ndarray:
    """Brute-force visibility: march each ray in world coordinates."""
    w, h = state.config.width, state.config.height
    ax, ay = state.agent_pos
    fwd = g.DIR_VEC[state.agent_dir]
    right = g.DIR_VEC[(state.agent_dir + 1) % 4]
    ts = np.linspace(0.0, 1.0, 4001)[1:-1]
    out = np.zeros((5, 5, 3), dtype=np.int8)
    for r in range(5):
        for c in range(5):
            f, lat = 4 - r, c - 2
            tx = ax + f * fwd[0] + lat * right[0]
            ty = ay + f * fwd[1] + lat * right[1]
            cell = (g.UNSEEN, g.NO_COLOR, g.NO_STATE)
            if 0 <= tx < w and 0 <= ty < h:
                blocked = False
                px = ax + ts * (tx - ax)
                py = ay + ts * (ty - ay)
                cx, cy = np.round(px), np.round(py)
                interior = (np.abs(px - cx) < 0.5 - 1e-12) & (np.abs(py - cy) < 0.5 - 1e-12)
                for x, y in set(zip(cx[interior].astype(int), cy[interior].astype(int))):
                    if (x, y) in ((ax, ay), (tx, ty)):
                        continue
                    k = state.kind[x, y]
                    if k == g.WALL or (k == g.DOOR and state.door[x, y] != g.OPEN):
                        blocked = True
                        break
                if not blocked:
                    cell = (state.kind[tx, ty], state.color[tx, ty], state.door[tx, ty])
            out[r, c] = cell
    return out


def _random_state(rng) -> g.GridState:
    w, h = int(rng.integers(5, 10)), int(rng.integers(5, 10))
    s, _ = g.reset(g.GridConfig(w, h, "empty"), 0)
    kind, color, door = s.kind.copy(), s.color.copy(), s.door.copy()
    for x in range(1, w - 1):
        for y in range(1, h - 1):
            u = rng.random()
            if u < 0.2:
                kind[x, y], color[x, y] = g.WALL, g.GREY
            elif u < 0.3:
                kind[x, y], color[x, y] = g.DOOR, int(rng.integers(5))
                door[x, y] = int(rng.integers(3))
            elif u < 0.35:
                kind[x, y], color[x, y] = g.KEY, int(rng.integers(5))
    interior = [(x, y) for x in range(1, w - 1) for y in range(1, h - 1)]
    ax, ay = interior[int(rng.integers(len(interior)))]
    kind[ax, ay], color[ax, ay], door[ax, ay] = g.EMPTY, g.NO_COLOR, g.NO_STATE
    return replace(s, kind=kind, color=color, door=door, agent_pos=(ax, ay), agent_dir=int(rng.integers(4)))


def test_observation_matches_raycast_oracle():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        s = _random_state(rng)
        got = g.observe(s).view
        expect = _raycast_oracle(s)
        assert np.array_equal(got, expect), f"\n{s.render()}\n{got[..., 0]}\n{expect[..., 0]}"


def test_onehot_encoding_shape_and_content():
    s, obs = _state("doorkey", seed=3)
    enc = obs.onehot()
    assert enc.shape == (g.N_CHANNELS, 5, 5)
    # exactly one kind channel per cell
    assert np.all(enc[: len(g.KIND_NAMES)].sum(axis=0) == 1)
    assert np.all(enc[-1] == float(obs.carrying))


def test_render_glyphs():
    s, _ = _state("doorkey", seed=0)
    text = s.render()
    assert "D" in text and "K" in text and "G" in text
    assert text.splitlines()[0] == "#####"
