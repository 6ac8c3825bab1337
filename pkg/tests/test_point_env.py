import json
from dataclasses import replace

import numpy as np
import pytest

from kgrl import knowledge as K
from kgrl import point_env as P


def _scripted_action(obs, variant):
    if variant == "reach":
        return K.cont_kg1_to_goal(obs)[0]
    if np.linalg.norm(obs[P.OBJ_REL]) >= K.PICK_EPSILON:
        return K.cont_kg2_to_object(obs)[0]
    return K.cont_kg1_to_goal(obs, K.PICK_EPSILON)[0]


def test_config_validation():
    with pytest.raises(P.PointConfigError):
        P.PointConfig("push")
    with pytest.raises(P.PointConfigError):
        P.PointConfig(goal_range_scale=0.0)
    with pytest.raises(P.PointConfigError):
        P.PointConfig(goal_range_scale=1.5)
    with pytest.raises(P.PointConfigError):
        P.PointConfig(max_steps=0)


@pytest.mark.parametrize("variant", P.VARIANTS)
def test_small_goal_range_bounds(variant):
    small = P.PointConfig(variant, goal_range_scale=0.1)
    full_lo, full_hi = P.goal_box(P.PointConfig(variant))
    center = (full_lo + full_hi) / 2 if variant == "reach" else np.array([0.0, 0.0, 0.0])
    for seed in range(500):
        st, _ = P.reset(small, seed)
        dev = np.abs(st.p_goal - center)
        assert np.all(dev <= 0.1 * (full_hi - full_lo) / (2 if variant == "reach" else 1) + 1e-12)


def test_reach_object_slots_zero():
    for seed in range(50):
        _, obs = P.reset(P.PointConfig("reach"), seed)
        assert obs.shape == (25,)
        assert np.all(obs[P.OBJECT_SLOTS] == 0.0)
        st, _ = P.reset(P.PointConfig("reach"), seed)
        st, _, _, obs = P.step(st, [0.3, -0.2, 0.1, -1])
        assert np.all(obs[P.OBJECT_SLOTS] == 0.0)


def test_goal_means_centered():
    cfg = P.PointConfig("reach")
    lo, hi = P.goal_box(cfg)
    goals = np.stack([P.reset(cfg, s)[0].p_goal for s in range(10_000)])
    # uniform on [lo, hi]: mean (lo+hi)/2, sd (hi-lo)/sqrt(12)
    se = (hi - lo) / np.sqrt(12) / np.sqrt(len(goals))
    assert np.all(np.abs(goals.mean(0) - (lo + hi) / 2) < 3 * se)


def test_pick_place_reset_layout():
    cfg = P.PointConfig("pick_place")
    on_table = 0
    for seed in range(2000):
        st, obs = P.reset(cfg, seed)
        assert st.p_obj[2] == 0.0
        assert np.linalg.norm(st.p_obj[:2] - st.p_ee[:2]) >= P.OBJECT_MIN_XY_DIST
        np.testing.assert_allclose(obs[P.OBJ_REL], st.p_obj - st.p_ee)
        on_table += st.p_goal[2] == 0.0
    assert abs(on_table / 2000 - 0.5) < 3 * 0.5 / np.sqrt(2000)


def test_ee_at_goal_is_success():
    st, _ = P.reset(P.PointConfig("reach"), 0)
    st = replace(st, p_goal=st.p_ee.copy())
    st, r, done, _ = P.step(st, [0, 0, 0, 0])
    assert r == 0.0 and done and st.success


def test_unit_action_moves_by_gain():
    st, _ = P.reset(P.PointConfig("reach"), 3)
    x0 = st.p_ee[0]
    st2, *_ = P.step(st, [1, 0, 0, 0])
    assert st2.p_ee[0] - x0 == pytest.approx(0.05, abs=1e-15)
    st3, *_ = P.step(st, [7, 0, 0, 0])  # clipped to 1
    assert st3.p_ee[0] - x0 == pytest.approx(0.05, abs=1e-15)


def test_grasp_threshold():
    st, _ = P.reset(P.PointConfig("pick_place"), 0)
    near = replace(st, p_obj=st.p_ee + np.array([0.01, 0, 0]))
    held, *_ = P.step(near, [0, 0, 0, -1])
    assert held.object_held and "grasp" in held.events
    far = replace(st, p_obj=st.p_ee + np.array([0.04, 0, 0]))
    assert not P.step(far, [0, 0, 0, -1])[0].object_held
    opened = P.step(near, [0, 0, 0, 1])[0]
    assert not opened.object_held


def test_held_object_tracks_and_releases():
    st, _ = P.reset(P.PointConfig("pick_place"), 0)
    st = replace(st, p_obj=st.p_ee.copy(), object_held=True)
    moved, *_ = P.step(st, [0, 1, 0, -1])
    np.testing.assert_allclose(moved.p_obj, moved.p_ee)
    dropped, *_ = P.step(moved, [0, 0, 0, 1])
    assert not dropped.object_held and dropped.p_obj[2] == 0.0


def test_stepping_finished_episode_raises():
    st, _ = P.reset(P.PointConfig("reach", max_steps=1), 0)
    st, *_ = P.step(st, [0, 0, 0, 0])
    assert st.done
    with pytest.raises(P.EpisodeFinished):
        P.step(st, [0, 0, 0, 0])


@pytest.mark.parametrize("variant", P.VARIANTS)
def test_rewards_sparse_and_positions_inside(variant):
    cfg = P.PointConfig(variant)
    rng = np.random.default_rng(0)
    low, high = np.array(cfg.low), np.array(cfg.high)
    for seed in range(20):
        st, _ = P.reset(cfg, seed)
        while not st.done:
            st, r, _, obs = P.step(st, rng.uniform(-1, 1, 4))
            assert r in (-1.0, 0.0)
            assert (r == 0.0) == bool(P.success_mask(st.achieved, st.p_goal))
            assert np.all(np.isfinite(obs))
            assert np.all(st.p_ee >= low - 1e-12) and np.all(st.p_ee <= high + 1e-12)
            assert 0.0 <= st.gripper_gap <= P.GAP_MAX


def test_compute_reward_matches_step():
    rng = np.random.default_rng(1)
    a = rng.uniform(-0.1, 0.1, (1000, 3))
    g = a + rng.normal(0, 0.04, (1000, 3))
    expected = np.array([0.0 if np.linalg.norm(x - y) < 0.05 else -1.0 for x, y in zip(a, g)])
    np.testing.assert_array_equal(P.compute_reward(a, g), expected)


def test_determinism():
    cfg = P.PointConfig("pick_place")
    runs = []
    for _ in range(2):
        st, obs = P.reset(cfg, 11)
        trace = [obs]
        rng = np.random.default_rng(5)
        while not st.done:
            st, _, _, obs = P.step(st, rng.uniform(-1, 1, 4))
            trace.append(obs)
        runs.append(np.stack(trace))
    np.testing.assert_array_equal(runs[0], runs[1])


@pytest.mark.parametrize("variant,threshold", [("reach", 1.0), ("pick_place", 0.95)])
def test_scripted_controller_solves(variant, threshold):
    cfg = P.PointConfig(variant)
    wins = 0
    for seed in range(200):
        st, obs = P.reset(cfg, seed)
        while not st.done:
            st, _, _, obs = P.step(st, _scripted_action(obs, variant))
        wins += st.success
    assert wins / 200 >= threshold


def test_trajectory_dump(tmp_path):
    st, _ = P.reset(P.PointConfig("pick_place"), 0)
    records = []
    for a in ([1, 0, 0, 1], [0, 1, 0, -1]):
        st, r, _, _ = P.step(st, a)
        records.append(P.state_record(st, a, r))
    path = tmp_path / "traj.jsonl"
    P.dump_trajectory(path, records)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["step"] for l in lines] == [1, 2]
    assert lines[1]["action"] == [0.0, 1.0, 0.0, -1.0]
