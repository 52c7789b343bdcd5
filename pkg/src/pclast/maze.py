"""2D point-mass maze simulator with axis-aligned walls.

The world is the unit square. Actions are position displacements clamped to
an infinity-norm ball of radius ``action_bound``; motion proceeds along the
displacement direction and stops just short of the first wall hit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

LAYOUT_IDS = {"hallway": 0, "spiral": 1, "rooms": 2, "custom": 3}
LAYOUT_NAMES = {v: k for k, v in LAYOUT_IDS.items()}

DEFAULT_ACTION_BOUND = 0.2
DEFAULT_RESOLUTION = 100

# Dense-reward distance thresholds and their payouts; the two outer rings
# pay only on first crossing within an episode.
DENSE_THRESHOLDS = ((0.1, 0.25), (0.05, 0.5))
GOAL_RADIUS = 0.03

MARCH_STEP = 1e-3
REFINE_TOL = 1e-6
WALL_CLEARANCE = 1e-4


class InvalidState(ValueError):
    """Raised when a query state lies on a wall or outside the bounds."""


@dataclass(frozen=True)
class Walls:
    """Axis-aligned wall segments split by orientation for vectorized tests."""

    vx: np.ndarray  # (n_v,) x coordinate of each vertical wall
    vy0: np.ndarray
    vy1: np.ndarray
    hy: np.ndarray  # (n_h,) y coordinate of each horizontal wall
    hx0: np.ndarray
    hx1: np.ndarray

    @classmethod
    def from_segments(cls, segments: list[dict]) -> "Walls":
        vx, vy0, vy1, hy, hx0, hx1 = [], [], [], [], [], []
        for seg in segments:
            x0, y0, x1, y1 = (float(seg[k]) for k in ("x0", "y0", "x1", "y1"))
            for v in (x0, y0, x1, y1):
                if not (0.0 <= v <= 1.0):
                    raise ValueError(f"wall segment {seg} leaves the unit square")
            if x0 == x1 and y0 != y1:
                vx.append(x0)
                vy0.append(min(y0, y1))
                vy1.append(max(y0, y1))
            elif y0 == y1 and x0 != x1:
                hy.append(y0)
                hx0.append(min(x0, x1))
                hx1.append(max(x0, x1))
            else:
                raise ValueError(f"wall segment {seg} is not axis-aligned")
        return cls(
            np.asarray(vx), np.asarray(vy0), np.asarray(vy1),
            np.asarray(hy), np.asarray(hx0), np.asarray(hx1),
        )

    def segments(self) -> list[dict]:
        out = []
        for x, y0, y1 in zip(self.vx, self.vy0, self.vy1):
            out.append({"x0": x, "y0": y0, "x1": x, "y1": y1})
        for y, x0, x1 in zip(self.hy, self.hx0, self.hx1):
            out.append({"x0": x0, "y0": y, "x1": x1, "y1": y})
        return out

    def contains_point(self, p: np.ndarray) -> bool:
        """True when ``p`` lies exactly on some wall segment."""
        on_v = (p[0] == self.vx) & (self.vy0 <= p[1]) & (p[1] <= self.vy1)
        on_h = (p[1] == self.hy) & (self.hx0 <= p[0]) & (p[0] <= self.hx1)
        return bool(on_v.any() or on_h.any())


def segment_hits_walls(a: np.ndarray, b: np.ndarray, walls: Walls) -> bool:
    """Exact test: does the open segment (a, b] cross any wall?

    Crossing means the x (resp. y) coordinates straddle a vertical
    (horizontal) wall line with the intersection point inside the wall's
    span. Starting exactly on a wall line does not count as a crossing, so a
    point parked at clearance distance can move parallel to the wall.
    """
    ax, ay = a
    bx, by = b
    if walls.vx.size:
        dx = bx - ax
        side_a = ax - walls.vx
        side_b = bx - walls.vx
        straddle = ((side_a > 0) & (side_b <= 0)) | ((side_a < 0) & (side_b >= 0))
        if straddle.any() and dx != 0.0:
            t = (walls.vx - ax) / dx
            ycross = ay + t * (by - ay)
            hit = straddle & (walls.vy0 <= ycross) & (ycross <= walls.vy1)
            if hit.any():
                return True
    if walls.hy.size:
        dy = by - ay
        side_a = ay - walls.hy
        side_b = by - walls.hy
        straddle = ((side_a > 0) & (side_b <= 0)) | ((side_a < 0) & (side_b >= 0))
        if straddle.any() and dy != 0.0:
            t = (walls.hy - ay) / dy
            xcross = ax + t * (bx - ax)
            hit = straddle & (walls.hx0 <= xcross) & (xcross <= walls.hx1)
            if hit.any():
                return True
    return False


@dataclass(frozen=True)
class MazeWorld:
    layout: str
    walls: Walls
    action_bound: float = DEFAULT_ACTION_BOUND
    obs_resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.action_bound <= 0:
            raise ValueError("action_bound must be positive")
        if self.obs_resolution < 1:
            raise ValueError("obs_resolution must be a positive integer")
        if self.layout not in LAYOUT_IDS:
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def layout_id(self) -> int:
        return LAYOUT_IDS[self.layout]

    @classmethod
    def named(cls, layout: str, action_bound: float = DEFAULT_ACTION_BOUND,
              obs_resolution: int = DEFAULT_RESOLUTION) -> "MazeWorld":
        """Load one of the shipped layouts: hallway, spiral, rooms."""
        if layout not in ("hallway", "spiral", "rooms"):
            raise ValueError(f"no shipped layout named {layout!r}")
        text = resources.files("pclast.data").joinpath(f"{layout}.json").read_text()
        return cls(layout, Walls.from_segments(json.loads(text)),
                   action_bound, obs_resolution)

    @classmethod
    def custom(cls, segments: list[dict], action_bound: float = DEFAULT_ACTION_BOUND,
               obs_resolution: int = DEFAULT_RESOLUTION) -> "MazeWorld":
        return cls("custom", Walls.from_segments(segments), action_bound, obs_resolution)

    @classmethod
    def from_layout_file(cls, path, **kw) -> "MazeWorld":
        with open(path) as f:
            return cls.custom(json.load(f), **kw)

    def is_valid_state(self, p: np.ndarray) -> bool:
        p = np.asarray(p, dtype=np.float64)
        if not (0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0):
            return False
        return not self.walls.contains_point(p)


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reward: float
    reached_flags: frozenset
    collided: bool


@dataclass
class EpisodeContext:
    """Per-episode reward bookkeeping: goal position and fired thresholds."""

    goal: np.ndarray | None = None
    fired: frozenset = field(default_factory=frozenset)


def clamp_action(action: np.ndarray, bound: float) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64), -bound, bound)


def _bound_travel(p: np.ndarray, u: np.ndarray, length: float) -> float:
    """Largest travel distance keeping p + t*u inside the unit square."""
    t = length
    for i in range(2):
        if u[i] > 0:
            t = min(t, (1.0 - p[i]) / u[i])
        elif u[i] < 0:
            t = min(t, -p[i] / u[i])
    return max(t, 0.0)


def _first_crossing_segment(p: np.ndarray, u: np.ndarray, ts: np.ndarray,
                            walls: Walls) -> int | None:
    """Index of the first march segment [ts[i], ts[i+1]] crossing a wall.

    The march direction is constant, so each wall line is crossed at most
    once; the sign of the distance to each wall line at every march point
    decides crossings exactly as the per-segment test would.
    """
    pts = p[None, :] + ts[:, None] * u[None, :]
    hit_any = None
    if walls.vx.size and u[0] != 0.0:
        tw = (walls.vx - p[0]) / u[0]
        yw = p[1] + tw * u[1]
        span_ok = (walls.vy0 <= yw) & (yw <= walls.vy1)
        side = pts[:, 0:1] - walls.vx[None, :]
        straddle = (((side[:-1] > 0) & (side[1:] <= 0))
                    | ((side[:-1] < 0) & (side[1:] >= 0)))
        hits = straddle & span_ok[None, :]
        hit_any = hits.any(axis=1)
    if walls.hy.size and u[1] != 0.0:
        tw = (walls.hy - p[1]) / u[1]
        xw = p[0] + tw * u[0]
        span_ok = (walls.hx0 <= xw) & (xw <= walls.hx1)
        side = pts[:, 1:2] - walls.hy[None, :]
        straddle = (((side[:-1] > 0) & (side[1:] <= 0))
                    | ((side[:-1] < 0) & (side[1:] >= 0)))
        hits = (straddle & span_ok[None, :]).any(axis=1)
        hit_any = hits if hit_any is None else (hit_any | hits)
    if hit_any is None or not hit_any.any():
        return None
    return int(np.argmax(hit_any))


def slide_to_wall(world: MazeWorld, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, bool]:
    """March along the clamped action until a wall blocks the path.

    Coarse march with step ``MARCH_STEP``, binary-search refinement of the
    blocking parameter to ``REFINE_TOL``, final stop ``WALL_CLEARANCE``
    before the wall. The square's boundary clamps travel exactly (it is not
    treated as a colliding wall).
    """
    p = np.asarray(state, dtype=np.float64)
    a = clamp_action(action, world.action_bound)
    length = float(np.hypot(a[0], a[1]))
    if length == 0.0:
        return p.copy(), False
    u = a / length
    tmax = _bound_travel(p, u, length)
    if tmax <= 0.0:
        return p.copy(), False
    walls = world.walls

    n_steps = int(np.ceil(tmax / MARCH_STEP))
    ts = np.empty(n_steps + 1)
    ts[0] = 0.0
    ts[1:] = np.minimum(MARCH_STEP * np.arange(1, n_steps + 1), tmax)
    hit_seg = _first_crossing_segment(p, u, ts, walls)
    if hit_seg is None:
        return np.clip(p + tmax * u, 0.0, 1.0), tmax < length
    hit_lo, hit_hi = float(ts[hit_seg]), float(ts[hit_seg + 1])

    lo, hi = hit_lo, hit_hi
    while hi - lo > REFINE_TOL:
        mid = 0.5 * (lo + hi)
        if segment_hits_walls(p + lo * u, p + mid * u, walls):
            hi = mid
        else:
            lo = mid
    t_stop = max(hi - WALL_CLEARANCE, 0.0)
    return np.clip(p + t_stop * u, 0.0, 1.0), True


def compute_reward(next_state: np.ndarray, episode: EpisodeContext,
                   reward_mode: str) -> tuple[float, frozenset]:
    """Reward rules for a step landing at next_state with the episode's goal."""
    if episode.goal is None:
        return 0.0, episode.fired
    d = float(np.linalg.norm(next_state - np.asarray(episode.goal, dtype=np.float64)))
    fired = set(episode.fired)
    if reward_mode == "sparse":
        return (1.0 if d < GOAL_RADIUS else 0.0), frozenset(fired)
    if reward_mode != "dense":
        raise ValueError(f"unknown reward_mode {reward_mode!r}")
    reward = 0.0
    if d < GOAL_RADIUS:
        reward = 1.0
    elif d < 0.05 and 0.05 not in fired:
        reward = 0.5
    elif d < 0.1 and 0.1 not in fired:
        reward = 0.25
    for thr, _ in DENSE_THRESHOLDS:
        if d < thr:
            fired.add(thr)
    return reward, frozenset(fired)


def step(world: MazeWorld, state: np.ndarray, action: np.ndarray,
         episode: EpisodeContext | None = None,
         reward_mode: str = "dense") -> StepOutcome:
    """Advance one kinematic step; errors if the start state is invalid."""
    state = np.asarray(state, dtype=np.float64)
    if not world.is_valid_state(state):
        raise InvalidState(f"state {state} is on a wall or out of bounds")
    nxt, collided = slide_to_wall(world, state, action)
    episode = episode if episode is not None else EpisodeContext()
    reward, fired = compute_reward(nxt, episode, reward_mode)
    return StepOutcome(nxt, reward, fired, collided)


# ---------------------------------------------------------------------------
# Observations


def cell_of_state(state: np.ndarray, resolution: int) -> int:
    """Row-major cell index (row = y) of the grid cell containing state."""
    ix = min(int(state[0] * resolution), resolution - 1)
    iy = min(int(state[1] * resolution), resolution - 1)
    return iy * resolution + ix


def cell_center(cell: int | np.ndarray, resolution: int) -> np.ndarray:
    """Continuous (x, y) center of a cell index; vectorized over arrays."""
    cell = np.asarray(cell)
    iy, ix = np.divmod(cell, resolution)
    return np.stack([(ix + 0.5) / resolution, (iy + 0.5) / resolution], axis=-1)


def render(world: MazeWorld, state: np.ndarray) -> np.ndarray:
    """One-channel observation: a zero grid with a single 1 at the ball's cell."""
    state = np.asarray(state, dtype=np.float64)
    if not world.is_valid_state(state):
        raise InvalidState(f"state {state} is on a wall or out of bounds")
    res = world.obs_resolution
    grid = np.zeros((res, res), dtype=np.uint8)
    cell = cell_of_state(state, res)
    grid[cell // res, cell % res] = 1
    return grid


def cell_of_obs(grid: np.ndarray) -> int:
    iy, ix = np.unravel_index(int(np.argmax(grid)), grid.shape)
    return int(iy * grid.shape[1] + ix)


# ---------------------------------------------------------------------------
# Random-policy data collection


def sample_free_state(world: MazeWorld, rng: np.random.Generator) -> np.ndarray:
    while True:
        p = rng.uniform(0.0, 1.0, size=2)
        if world.is_valid_state(p):
            return p


def episode_rng(seed: int, episode_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, episode_id)))


def collect_dataset(world: MazeWorld, n_transitions: int, seed: int,
                    episode_length: int = 100):
    """Collect transitions under a uniform random policy.

    Episodes are ``episode_length`` steps with uniformly sampled free start
    states; each episode draws from its own RNG stream derived from
    (seed, episode_id), so collection order never affects content.
    """
    from .dataset import TransitionDataset

    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    res = world.obs_resolution
    cells_t = np.empty(n_transitions, dtype=np.uint32)
    cells_next = np.empty(n_transitions, dtype=np.uint32)
    states = np.empty((n_transitions, 2), dtype=np.float32)
    actions = np.empty((n_transitions, 2), dtype=np.float32)
    next_states = np.empty((n_transitions, 2), dtype=np.float32)
    episodes = np.empty(n_transitions, dtype=np.uint32)
    steps_col = np.empty(n_transitions, dtype=np.uint32)

    i = 0
    episode_id = 0
    while i < n_transitions:
        rng = episode_rng(seed, episode_id)
        pos = sample_free_state(world, rng)
        pos32 = pos.astype(np.float32)
        for t in range(episode_length):
            if i == n_transitions:
                break
            act = rng.uniform(-world.action_bound, world.action_bound, size=2)
            nxt, _ = slide_to_wall(world, pos, act)
            nxt32 = nxt.astype(np.float32)
            cells_t[i] = cell_of_state(pos32, res)
            cells_next[i] = cell_of_state(nxt32, res)
            states[i] = pos32
            actions[i] = act.astype(np.float32)
            next_states[i] = nxt32
            episodes[i] = episode_id
            steps_col[i] = t
            pos, pos32 = nxt, nxt32
            i += 1
        episode_id += 1

    return TransitionDataset(
        layout_id=world.layout_id, resolution=res, seed=seed,
        cells_t=cells_t, states=states, actions=actions,
        next_states=next_states, cells_next=cells_next,
        episodes=episodes, steps=steps_col,
    )
