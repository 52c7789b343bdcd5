"""Evaluation reports and SVG rendering of mazes, clusters, and trajectories."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .maze import MazeWorld


def mean_stderr(values) -> tuple[float, float]:
    """Mean and standard error (sample stddev / sqrt(n)) of per-seed values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class EvalReport:
    layout: str
    n_levels: int
    ks: tuple[int, ...]
    episodes_per_seed: int
    seeds: tuple[int, ...]
    success_per_seed: list[float]      # percentage per seed
    success_mean: float
    success_stderr: float
    nopath_episodes: int
    mean_steps_success: float
    mean_highlevel_ns: float
    mean_cem_ns: float

    def to_dict(self) -> dict:
        return {
            "layout": self.layout,
            "n_levels": self.n_levels,
            "ks": list(self.ks),
            "episodes_per_seed": self.episodes_per_seed,
            "seeds": list(self.seeds),
            "success_per_seed": self.success_per_seed,
            "success_mean": self.success_mean,
            "success_stderr": self.success_stderr,
            "nopath_episodes": self.nopath_episodes,
            "mean_steps_success": self.mean_steps_success,
            "timing": {
                "mean_highlevel_ns": self.mean_highlevel_ns,
                "mean_cem_ns": self.mean_cem_ns,
            },
        }


def build_eval_report(layout: str, n_levels: int, ks, episodes_per_seed: int,
                      seeds, traces_per_seed: list[list], nopath: int) -> EvalReport:
    per_seed = []
    steps_success = []
    hl_ns = []
    cem_ns = []
    for traces in traces_per_seed:
        wins = sum(1 for t in traces if t.success)
        denom = max(len(traces), 1)
        per_seed.append(100.0 * wins / denom)
        for t in traces:
            if t.success:
                steps_success.append(t.steps_used)
            for row in t.rows:
                hl_ns.append(row.highlevel_ns)
                cem_ns.append(row.cem_ns)
    mean, stderr = mean_stderr(per_seed)
    return EvalReport(
        layout=layout, n_levels=n_levels, ks=tuple(ks),
        episodes_per_seed=episodes_per_seed, seeds=tuple(seeds),
        success_per_seed=per_seed, success_mean=mean, success_stderr=stderr,
        nopath_episodes=nopath,
        mean_steps_success=float(np.mean(steps_success)) if steps_success else float("nan"),
        mean_highlevel_ns=float(np.mean(hl_ns)) if hl_ns else float("nan"),
        mean_cem_ns=float(np.mean(cem_ns)) if cem_ns else float("nan"),
    )


def write_json(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_trace_jsonl(path, traces: list) -> None:
    """One JSON record per MPC step, grouped by episode index."""
    with open(path, "w") as f:
        for ep, trace in enumerate(traces):
            for i, row in enumerate(trace.rows):
                rec = {
                    "episode": ep,
                    "step": i,
                    "state": [float(x) for x in row.state],
                    "action": [float(x) for x in row.action],
                    "hops_per_level": row.hops_per_level,
                    "expansions": row.expansions,
                    "cem_cost": row.cem_cost,
                    "highlevel_ns": row.highlevel_ns,
                    "cem_ns": row.cem_ns,
                }
                f.write(json.dumps(rec) + "\n")
            f.write(json.dumps({
                "episode": ep, "summary": True,
                "success": bool(trace.success), "steps_used": trace.steps_used,
                "final_distance": trace.final_distance,
            }) + "\n")


# ---------------------------------------------------------------------------
# SVG


_SIZE = 640
_PAD = 20


def _sx(x: float) -> float:
    return _PAD + x * (_SIZE - 2 * _PAD)


def _sy(y: float) -> float:
    return _SIZE - _PAD - y * (_SIZE - 2 * _PAD)


def _color(i: int) -> str:
    hue = (i * 137.508) % 360.0
    return f"hsl({hue:.1f}, 70%, 45%)"


@dataclass
class SvgScene:
    elements: list[str] = field(default_factory=list)

    def add_walls(self, world: MazeWorld) -> None:
        self.elements.append(
            f'<rect x="{_PAD}" y="{_PAD}" width="{_SIZE - 2 * _PAD}" '
            f'height="{_SIZE - 2 * _PAD}" fill="white" stroke="black" stroke-width="2"/>')
        for seg in world.walls.segments():
            self.elements.append(
                f'<line x1="{_sx(seg["x0"]):.1f}" y1="{_sy(seg["y0"]):.1f}" '
                f'x2="{_sx(seg["x1"]):.1f}" y2="{_sy(seg["y1"]):.1f}" '
                f'stroke="black" stroke-width="3"/>')

    def add_cluster_points(self, states: np.ndarray, labels: np.ndarray,
                           max_points: int = 4000) -> None:
        n = len(states)
        stride = max(1, n // max_points)
        for p, c in zip(states[::stride], labels[::stride]):
            self.elements.append(
                f'<circle cx="{_sx(p[0]):.1f}" cy="{_sy(p[1]):.1f}" r="2" '
                f'fill="{_color(int(c))}" fill-opacity="0.6"/>')

    def add_graph(self, centers: np.ndarray, edges) -> None:
        for i, j, _ in edges:
            a, b = centers[i], centers[j]
            self.elements.append(
                f'<line x1="{_sx(a[0]):.1f}" y1="{_sy(a[1]):.1f}" '
                f'x2="{_sx(b[0]):.1f}" y2="{_sy(b[1]):.1f}" '
                f'stroke="gray" stroke-width="1"/>')
        for i, c in enumerate(centers):
            self.elements.append(
                f'<circle cx="{_sx(c[0]):.1f}" cy="{_sy(c[1]):.1f}" r="5" '
                f'fill="{_color(i)}" stroke="black"/>')

    def add_trajectory(self, points: np.ndarray, color: str = "blue") -> None:
        pts = " ".join(f"{_sx(p[0]):.1f},{_sy(p[1]):.1f}" for p in points)
        self.elements.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        if len(points):
            s, g = points[0], points[-1]
            self.elements.append(
                f'<circle cx="{_sx(s[0]):.1f}" cy="{_sy(s[1]):.1f}" r="4" fill="black"/>')
            self.elements.append(
                f'<circle cx="{_sx(g[0]):.1f}" cy="{_sy(g[1]):.1f}" r="4" fill="red"/>')

    def write(self, path) -> None:
        body = "\n".join(self.elements)
        with open(path, "w") as f:
            f.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" '
                    f'height="{_SIZE}" viewBox="0 0 {_SIZE} {_SIZE}">\n{body}\n</svg>\n')


def trajectory_points(trace) -> np.ndarray:
    pts = [row.state for row in trace.rows]
    pts.append(trace.final_state if trace.final_state is not None else trace.start)
    return np.asarray(pts)
