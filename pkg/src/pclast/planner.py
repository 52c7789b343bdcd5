"""Hierarchical goal-conditioned planning: Dijkstra waypoint selection over
cluster graphs, cross-entropy-method trajectory optimization in latent
space, and a closed-loop MPC executor.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .maze import GOAL_RADIUS, MazeWorld, render, step


class NoPath(RuntimeError):
    """Goal cluster unreachable from the current cluster in the filtered graph."""


def dijkstra_next_hop(neighbors: list[list[int]], src: int, dst: int):
    """Shortest hop-count path on a directed graph; early stop at dst.

    Returns (next_hop_node, path_length, expansions) where expansions counts
    settled nodes. Ties break toward lower node indices.
    """
    if src == dst:
        return src, 0, 0
    dist = {src: 0}
    prev: dict[int, int] = {}
    heap = [(0, src)]
    settled = set()
    expansions = 0
    while heap:
        d, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        expansions += 1
        if node == dst:
            cur = dst
            while prev[cur] != src:
                cur = prev[cur]
            return cur, d, expansions
        for nxt in neighbors[node]:
            nd = d + 1
            if nd < dist.get(nxt, np.inf):
                dist[nxt] = nd
                prev[nxt] = node
                heapq.heappush(heap, (nd, nxt))
    raise NoPath(f"no path from cluster {src} to cluster {dst}")


@dataclass
class HighLevelInfo:
    src: int
    dst: int
    hops: int
    expansions: int


def high_level(s_t: np.ndarray, s_star: np.ndarray, psi_fn, clusters, graph):
    """One waypoint-refinement step: the latent centroid of the next cluster
    on the shortest path, or s_star itself when already in the goal cluster."""
    z = psi_fn(np.stack([s_t, s_star]))
    c = int(clusters.assign(z[0:1])[0])
    c_star = int(clusters.assign(z[1:2])[0])
    if c == c_star:
        return s_star, HighLevelInfo(c, c_star, 0, 0)
    nxt, hops, expansions = dijkstra_next_hop(graph.neighbor_lists(), c, c_star)
    return clusters.centroids_latent[nxt].copy(), HighLevelInfo(c, c_star, hops, expansions)


# ---------------------------------------------------------------------------
# Cross-entropy method


@dataclass
class CemConfig:
    iterations: int = 8
    samples: int = 256
    elites: int = 32
    horizon: int = 10
    cov_mode: str = "diagonal"  # "diagonal" | "full"
    var_floor: float = 1e-4
    action_bound: float = 0.2
    sample_final: bool = False  # False: return the final mean (deterministic)

    def __post_init__(self):
        if not (1 <= self.elites <= self.samples):
            raise ValueError("need 1 <= elites <= samples")
        if self.iterations < 1 or self.horizon < 1:
            raise ValueError("iterations and horizon must be >= 1")
        if self.cov_mode not in ("diagonal", "full"):
            raise ValueError(f"unknown cov_mode {self.cov_mode!r}")


@dataclass
class CemInfo:
    cost: float
    elite_curve: np.ndarray  # mean elite cost per iteration


def _rollout_costs(seqs: np.ndarray, s0: np.ndarray, psi_star: np.ndarray,
                   delta_fn, psi_fn) -> np.ndarray:
    """Cost of each action sequence: sum over the trajectory (including the
    start state) of squared psi-space distance to the target."""
    M, H, _ = seqs.shape
    states = np.empty((M, H + 1, s0.shape[-1]))
    states[:, 0] = s0
    cur = np.broadcast_to(s0, (M, s0.shape[-1])).copy()
    for t in range(H):
        cur = delta_fn(cur, seqs[:, t])
        states[:, t + 1] = cur
    z = psi_fn(states.reshape(M * (H + 1), -1)).reshape(M, H + 1, -1)
    d = z - psi_star
    return np.einsum("mtp,mtp->m", d, d)


def cem(s0: np.ndarray, s_star: np.ndarray, horizon: int, delta_fn, psi_fn,
        config: CemConfig, rng: np.random.Generator):
    """Iterative elite refitting of a Gaussian over action sequences.

    The distribution starts at N(0, I); samples are clamped to the action
    box before rollout, so the fitted distribution lives inside the box.
    Returns (actions (horizon, 2), CemInfo).
    """
    H = horizon
    adim = 2
    bound = config.action_bound
    mu = np.zeros((H, adim))
    psi_star = psi_fn(np.asarray(s_star)[None])[0]
    elite_curve = np.zeros(config.iterations)
    if config.cov_mode == "diagonal":
        var = np.ones((H, adim))
        for j in range(config.iterations):
            noise = rng.standard_normal((config.samples, H, adim))
            seqs = np.clip(mu + np.sqrt(var) * noise, -bound, bound)
            costs = _rollout_costs(seqs, s0, psi_star, delta_fn, psi_fn)
            elite_idx = np.argsort(costs, kind="stable")[: config.elites]
            elites = seqs[elite_idx]
            elite_curve[j] = float(costs[elite_idx].mean())
            mu = elites.mean(axis=0)
            var = elites.var(axis=0) + config.var_floor
    else:
        cov = np.eye(H * adim)
        for j in range(config.iterations):
            L = np.linalg.cholesky(cov)
            noise = rng.standard_normal((config.samples, H * adim))
            seqs = np.clip(mu.reshape(-1) + noise @ L.T, -bound, bound)
            seqs = seqs.reshape(config.samples, H, adim)
            costs = _rollout_costs(seqs, s0, psi_star, delta_fn, psi_fn)
            elite_idx = np.argsort(costs, kind="stable")[: config.elites]
            elites = seqs[elite_idx].reshape(config.elites, H * adim)
            elite_curve[j] = float(costs[elite_idx].mean())
            mu = elites.mean(axis=0).reshape(H, adim)
            cov = np.cov(elites, rowvar=False, bias=True) + config.var_floor * np.eye(H * adim)

    if config.sample_final:
        if config.cov_mode == "diagonal":
            final = mu + np.sqrt(var) * rng.standard_normal((H, adim))
        else:
            L = np.linalg.cholesky(cov)
            final = (mu.reshape(-1) + rng.standard_normal(H * adim) @ L.T).reshape(H, adim)
        final = np.clip(final, -bound, bound)
    else:
        final = np.clip(mu, -bound, bound)
    cost = float(_rollout_costs(final[None], s0, psi_star, delta_fn, psi_fn)[0])
    return final, CemInfo(cost=cost, elite_curve=elite_curve)


# ---------------------------------------------------------------------------
# n-level planning and MPC


@dataclass
class PlanRequest:
    obs_t: np.ndarray
    obs_goal: np.ndarray
    horizon: int
    n_levels: int

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")


@dataclass
class PlanResult:
    actions: np.ndarray
    waypoint: np.ndarray
    level_infos: list
    cem_info: CemInfo
    highlevel_ns: int
    cem_ns: int

    @property
    def expansions(self) -> int:
        return sum(info.expansions for info in self.level_infos)


def plan_latent(s_t: np.ndarray, s_goal: np.ndarray, model, levels,
                cem_config: CemConfig, rng: np.random.Generator,
                horizon: int | None = None) -> PlanResult:
    """Waypoint refinement from coarsest to finest level, then CEM.

    ``levels`` is the (cluster, graph) list for levels 2..n, finest first;
    empty means pure low-level planning.
    """
    t0 = time.perf_counter_ns()
    s_star = s_goal
    infos = []
    for clusters, graph in reversed(levels):
        s_star, info = high_level(s_t, s_star, model.psi_apply, clusters, graph)
        infos.append(info)
    t1 = time.perf_counter_ns()
    H = cem_config.horizon if horizon is None else horizon
    actions, cem_info = cem(s_t, s_star, H, model.delta_mean, model.psi_apply,
                            cem_config, rng)
    t2 = time.perf_counter_ns()
    return PlanResult(actions=actions, waypoint=s_star, level_infos=infos,
                      cem_info=cem_info, highlevel_ns=t1 - t0, cem_ns=t2 - t1)


def n_level_plan(request: PlanRequest, model, hierarchy, cem_config: CemConfig,
                 rng: np.random.Generator) -> PlanResult:
    s_t = model.encode_obs(request.obs_t)
    s_goal = model.encode_obs(request.obs_goal)
    levels = [] if request.n_levels == 1 else hierarchy.levels_for(request.n_levels)
    return plan_latent(s_t, s_goal, model, levels, cem_config, rng,
                       horizon=request.horizon)


@dataclass
class TraceStep:
    state: np.ndarray
    action: np.ndarray
    waypoint: np.ndarray
    hops_per_level: list
    expansions: int
    cem_cost: float
    elite_curve: np.ndarray
    highlevel_ns: int
    cem_ns: int


@dataclass
class PlanTrace:
    start: np.ndarray
    goal: np.ndarray
    success: bool
    steps_used: int
    final_distance: float
    final_state: np.ndarray | None = None
    rows: list = field(default_factory=list)


def mpc_execute(world: MazeWorld, start_state: np.ndarray, goal_state: np.ndarray,
                model, hierarchy, cem_config: CemConfig, step_budget: int,
                rng: np.random.Generator, n_levels: int = 2,
                horizon: int | None = None) -> PlanTrace:
    """Closed-loop MPC: replan every step, execute the first action.

    Success means the true state gets within the goal radius before the
    budget runs out. NoPath propagates to the caller.
    """
    start_state = np.asarray(start_state, dtype=np.float64)
    goal_state = np.asarray(goal_state, dtype=np.float64)
    goal_obs = render(world, goal_state)
    state = start_state.copy()
    rows = []
    steps_used = 0
    while True:
        dist = float(np.linalg.norm(state - goal_state))
        if dist < GOAL_RADIUS or steps_used >= step_budget:
            break
        request = PlanRequest(obs_t=render(world, state), obs_goal=goal_obs,
                              horizon=cem_config.horizon if horizon is None else horizon,
                              n_levels=n_levels)
        result = n_level_plan(request, model, hierarchy, cem_config, rng)
        action = result.actions[0]
        outcome = step(world, state, action)
        rows.append(TraceStep(
            state=state.copy(), action=np.asarray(action, dtype=np.float64),
            waypoint=result.waypoint,
            hops_per_level=[info.hops for info in result.level_infos],
            expansions=result.expansions, cem_cost=result.cem_info.cost,
            elite_curve=result.cem_info.elite_curve,
            highlevel_ns=result.highlevel_ns, cem_ns=result.cem_ns))
        state = outcome.next_state
        steps_used += 1
    final_distance = float(np.linalg.norm(state - goal_state))
    return PlanTrace(start=start_state, goal=goal_state,
                     success=final_distance < GOAL_RADIUS,
                     steps_used=steps_used, final_distance=final_distance,
                     final_state=state, rows=rows)
