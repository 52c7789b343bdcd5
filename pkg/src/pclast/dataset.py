"""Offline transition datasets and their versioned binary serialization."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PCL1"
_HEADER = struct.Struct("<4sBIQQ")

RECORD_DTYPE = np.dtype([
    ("obs", "<u4"),
    ("state", "<f4", 2),
    ("action", "<f4", 2),
    ("next_state", "<f4", 2),
    ("obs_next", "<u4"),
    ("episode", "<u4"),
    ("step", "<u4"),
])


@dataclass
class TransitionDataset:
    """Columnar store of <obs, state, action, next_state, next_obs> records.

    Observations are kept in sparse form as the index of the single marked
    grid cell; ``resolution`` recovers the dense grid when needed.
    """

    layout_id: int
    resolution: int
    seed: int
    cells_t: np.ndarray      # (n,) uint32
    states: np.ndarray       # (n, 2) float32
    actions: np.ndarray      # (n, 2) float32
    next_states: np.ndarray  # (n, 2) float32
    cells_next: np.ndarray   # (n,) uint32
    episodes: np.ndarray     # (n,) uint32
    steps: np.ndarray        # (n,) uint32

    def __len__(self) -> int:
        return len(self.cells_t)

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["obs"] = self.cells_t
        rec["state"] = self.states
        rec["action"] = self.actions
        rec["next_state"] = self.next_states
        rec["obs_next"] = self.cells_next
        rec["episode"] = self.episodes
        rec["step"] = self.steps
        return rec

    @classmethod
    def from_records(cls, layout_id: int, resolution: int, seed: int,
                     rec: np.ndarray) -> "TransitionDataset":
        return cls(
            layout_id=layout_id, resolution=resolution, seed=seed,
            cells_t=rec["obs"].copy(), states=rec["state"].copy(),
            actions=rec["action"].copy(), next_states=rec["next_state"].copy(),
            cells_next=rec["obs_next"].copy(), episodes=rec["episode"].copy(),
            steps=rec["step"].copy(),
        )

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, self.layout_id, self.resolution,
                                 len(self), self.seed))
            self.to_records().tofile(f)

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
            magic, layout_id, resolution, count, seed = _HEADER.unpack(head)
            if magic != MAGIC:
                raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
            rec = np.fromfile(f, dtype=RECORD_DTYPE, count=count)
        if len(rec) != count:
            raise ValueError(f"{path}: truncated, {len(rec)} of {count} records")
        return cls.from_records(layout_id, resolution, seed, rec)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(_HEADER.pack(MAGIC, self.layout_id, self.resolution,
                              len(self), self.seed))
        h.update(self.to_records().tobytes())
        return h.hexdigest()

    def check_invariants(self, action_bound: float = 0.2) -> None:
        """Raise AssertionError if the chain or action-bound invariants fail."""
        assert np.all(np.abs(self.actions) <= action_bound + 1e-6), \
            "action outside the infinity-norm bound"
        same_ep = self.episodes[1:] == self.episodes[:-1]
        chained = np.all(self.next_states[:-1][same_ep] == self.states[1:][same_ep])
        assert chained, "episode chain broken: next_state[i] != state[i+1]"
        assert np.all(self.steps[1:][same_ep] == self.steps[:-1][same_ep] + 1), \
            "step indices not consecutive within an episode"

    def episode_spans(self) -> np.ndarray:
        """(m, 2) start/end (exclusive) record index per episode, in order."""
        change = np.flatnonzero(self.episodes[1:] != self.episodes[:-1]) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [len(self)]])
        return np.stack([starts, ends], axis=1)


def coarse_coverage(dataset: TransitionDataset, grid: int = 20) -> float:
    """Fraction of coarse grid cells visited by any recorded state."""
    pts = np.concatenate([dataset.states, dataset.next_states], axis=0)
    ix = np.minimum((pts[:, 0] * grid).astype(int), grid - 1)
    iy = np.minimum((pts[:, 1] * grid).astype(int), grid - 1)
    visited = np.zeros((grid, grid), dtype=bool)
    visited[iy, ix] = True
    return float(visited.sum()) / (grid * grid)
