import numpy as np
import pytest

import pclast.maze as maze
from pclast.maze import (EpisodeContext, InvalidState, MazeWorld, cell_center,
                         cell_of_obs, cell_of_state, collect_dataset, render,
                         step)


def _seg_cross(a, b, x0, y0, x1, y1):
    """Independent segment-intersection predicate for test oracles."""
    if x0 == x1:  # vertical wall
        if a[0] == b[0]:
            return False
        if (a[0] - x0) * (b[0] - x0) > 0:
            return False
        if a[0] != x0 and b[0] != x0 and (a[0] - x0) * (b[0] - x0) == 0 and a[0] == x0:
            return False
        t = (x0 - a[0]) / (b[0] - a[0])
        if not (0.0 <= t <= 1.0):
            return False
        y = a[1] + t * (b[1] - a[1])
        return min(y0, y1) <= y <= max(y0, y1)
    if a[1] == b[1]:
        return False
    if (a[1] - y0) * (b[1] - y0) > 0:
        return False
    t = (y0 - a[1]) / (b[1] - a[1])
    if not (0.0 <= t <= 1.0):
        return False
    x = a[0] + t * (b[0] - a[0])
    return min(x0, x1) <= x <= max(x0, x1)


def march_oracle(world, state, action, fine=1e-5):
    """Brute-force fine-step march used as the collision oracle."""
    a = np.clip(np.asarray(action, float), -world.action_bound, world.action_bound)
    length = float(np.hypot(*a))
    if length == 0.0:
        return np.asarray(state, float)
    u = a / length
    segs = world.walls.segments()
    p = np.asarray(state, float)
    t = 0.0
    while t < length:
        t2 = min(t + fine, length)
        q1, q2 = p + t * u, p + t2 * u
        if np.any(q2 < 0) or np.any(q2 > 1):
            return np.clip(q1, 0, 1)
        if any(_seg_cross(q1, q2, s["x0"], s["y0"], s["x1"], s["y1"]) for s in segs):
            return q1
        t = t2
    return p + length * u


def test_step_open_space():
    w = MazeWorld.custom([])
    out = step(w, np.array([0.5, 0.5]), np.array([0.1, 0.0]))
    assert np.allclose(out.next_state, [0.6, 0.5])
    assert not out.collided


def test_step_clamps_action():
    w = MazeWorld.custom([])
    big = step(w, np.array([0.5, 0.5]), np.array([0.5, 0.0]))
    capped = step(w, np.array([0.5, 0.5]), np.array([0.2, 0.0]))
    assert np.allclose(big.next_state, capped.next_state)
    assert np.allclose(big.next_state, [0.7, 0.5])


def test_step_collision_matches_fine_march_oracle():
    w = MazeWorld.custom([{"x0": 0.55, "y0": 0.0, "x1": 0.55, "y1": 1.0}])
    out = step(w, np.array([0.5, 0.5]), np.array([0.2, 0.0]))
    oracle = march_oracle(w, [0.5, 0.5], [0.2, 0.0])
    assert out.collided
    assert abs(out.next_state[0] - oracle[0]) < 1e-3
    assert out.next_state[0] < 0.55


@pytest.mark.parametrize("seed", range(6))
def test_step_random_actions_match_oracle(spiral, seed):
    rng = np.random.default_rng(seed)
    state = maze.sample_free_state(spiral, rng)
    for _ in range(8):
        action = rng.uniform(-0.25, 0.25, 2)
        out = step(spiral, state, action)
        oracle = march_oracle(spiral, state, action)
        assert np.linalg.norm(out.next_state - oracle) < 1e-3
        state = out.next_state


def test_step_result_on_action_segment(spiral):
    rng = np.random.default_rng(4)
    state = maze.sample_free_state(spiral, rng)
    for _ in range(30):
        action = rng.uniform(-0.2, 0.2, 2)
        out = step(spiral, state, action)
        delta = out.next_state - state
        clamped = np.clip(action, -0.2, 0.2)
        # movement is along the action direction, never past it
        cross = delta[0] * clamped[1] - delta[1] * clamped[0]
        assert abs(cross) < 1e-9
        assert np.dot(delta, clamped) >= -1e-12
        assert np.linalg.norm(delta) <= np.linalg.norm(clamped) + 1e-12
        assert spiral.is_valid_state(out.next_state)
        state = out.next_state


def test_step_invalid_start_raises(hallway):
    with pytest.raises(InvalidState):
        step(hallway, np.array([0.5, 0.35]), np.array([0.1, 0.0]))


def test_dense_rewards_fire_once_per_episode():
    w = MazeWorld.custom([])
    goal = np.array([0.5, 0.5])
    ep = EpisodeContext(goal=goal)
    out = step(w, np.array([0.5, 0.58]), np.array([0.0, 0.0]), ep)  # d = 0.08
    assert out.reward == 0.25
    ep = EpisodeContext(goal=goal, fired=out.reached_flags)
    out = step(w, np.array([0.5, 0.58]), np.array([0.0, -0.01]), ep)  # d = 0.07
    assert out.reward == 0.0  # 0.1-ring already fired
    ep = EpisodeContext(goal=goal, fired=out.reached_flags)
    out = step(w, np.array([0.5, 0.57]), np.array([0.0, -0.03]), ep)  # d = 0.04
    assert out.reward == 0.5
    ep = EpisodeContext(goal=goal, fired=out.reached_flags)
    out = step(w, np.array([0.5, 0.54]), np.array([0.0, -0.02]), ep)  # d = 0.02
    assert out.reward == 1.0
    ep = EpisodeContext(goal=goal, fired=out.reached_flags)
    out = step(w, np.array([0.5, 0.52]), np.array([0.0, 0.005]), ep)  # still inside
    assert out.reward == 1.0  # goal ring pays every time


def test_sparse_reward():
    w = MazeWorld.custom([])
    goal = np.array([0.5, 0.5])
    ep = EpisodeContext(goal=goal)
    near = step(w, np.array([0.5, 0.52]), np.array([0.0, 0.0]), ep, reward_mode="sparse")
    far = step(w, np.array([0.5, 0.6]), np.array([0.0, 0.0]), ep, reward_mode="sparse")
    assert near.reward == 1.0 and far.reward == 0.0


def test_render_corner_and_center():
    w = MazeWorld.custom([])
    g = render(w, np.array([0.0, 0.0]))
    assert g.shape == (100, 100)
    assert g[0, 0] == 1 and g.sum() == 1
    g = render(w, np.array([0.5, 0.5]))
    assert g.sum() == 1
    assert g[50, 50] == 1
    assert cell_of_obs(g) == cell_of_state([0.5, 0.5], 100) == 5050


def test_render_single_pixel_for_random_states(spiral):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s = maze.sample_free_state(spiral, rng)
        g = render(spiral, s)
        assert g.sum() == 1


def test_cell_center_roundtrip():
    for cell in [0, 57, 5050, 9999]:
        c = cell_center(cell, 100)
        assert cell_of_state(c, 100) == cell


def test_collect_dataset_single_record(hallway):
    ds = collect_dataset(hallway, 1, seed=0)
    assert len(ds) == 1
    ds.check_invariants()
    assert ds.cells_t[0] == cell_of_state(ds.states[0], 100)


def test_collect_dataset_deterministic(hallway):
    a = collect_dataset(hallway, 400, seed=11)
    b = collect_dataset(hallway, 400, seed=11)
    assert a.content_hash() == b.content_hash()
    c = collect_dataset(hallway, 400, seed=12)
    assert a.content_hash() != c.content_hash()


def test_collect_dataset_chain_and_bounds(spiral):
    ds = collect_dataset(spiral, 700, seed=5, episode_length=50)
    ds.check_invariants()
    assert np.all(ds.states >= 0) and np.all(ds.states <= 1)
    assert np.all(np.abs(ds.actions) <= 0.2)


@pytest.mark.parametrize("layout", ["hallway", "spiral", "rooms"])
def test_named_layouts_connected(layout):
    """Flood fill over a fine grid: every free cell reaches every other."""
    w = MazeWorld.named(layout)
    n = 40
    centers = cell_center(np.arange(n * n), n)
    ok = np.array([w.is_valid_state(c) for c in centers])
    adj_reached = np.zeros(n * n, dtype=bool)
    start = int(np.flatnonzero(ok)[0])
    stack = [start]
    adj_reached[start] = True
    while stack:
        cur = stack.pop()
        cy, cx = divmod(cur, n)
        for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            ny, nx = cy + dy, cx + dx
            if not (0 <= ny < n and 0 <= nx < n):
                continue
            nxt = ny * n + nx
            if adj_reached[nxt] or not ok[nxt]:
                continue
            if maze.segment_hits_walls(centers[cur], centers[nxt], w.walls):
                continue
            adj_reached[nxt] = True
            stack.append(nxt)
    assert np.all(adj_reached[ok])


def test_walls_must_stay_inside_unit_square():
    with pytest.raises(ValueError):
        MazeWorld.custom([{"x0": -0.1, "y0": 0.0, "x1": 0.5, "y1": 0.0}])
    with pytest.raises(ValueError):
        MazeWorld.custom([{"x0": 0.1, "y0": 0.1, "x1": 0.5, "y1": 0.4}])  # diagonal
