"""k-means state abstraction and nucleus-filtered transition graphs.

Clustering happens in the metric (psi) space; each cluster also stores the
mean latent (s_hat) of its members, which the planner hands to the low-level
optimizer as a waypoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import TransitionDataset
from .maze import MazeWorld, segment_hits_walls

NUCLEUS_MASS = 0.9


class TooFewPoints(ValueError):
    pass


class NonDecreasingKs(ValueError):
    pass


def _pairwise_sq(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # |p - c|^2 = |p|^2 - 2 p.c + |c|^2  (n, k) without materializing n*k*d
    p2 = np.einsum("nd,nd->n", points, points)[:, None]
    c2 = np.einsum("kd,kd->k", centroids, centroids)[None, :]
    return np.maximum(p2 - 2.0 * points @ centroids.T + c2, 0.0)


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 200):
    """Seeded k-means++ with Lloyd iterations to an assignment fixed point.

    Empty clusters are re-seeded to the point currently farthest from its
    assigned centroid. Returns (centroids, labels, objective_history).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k:
        raise TooFewPoints(f"{n} points < k={k}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = np.full(n, np.inf)
    for i in range(1, k):
        d = _pairwise_sq(points, centroids[i - 1:i])[:, 0]
        closest = np.minimum(closest, d)
        total = closest.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=closest / total)]

    labels = np.full(n, -1)
    history = []
    for _ in range(max_iter):
        d = _pairwise_sq(points, centroids)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        assigned_d = d[np.arange(n), new_labels]
        for j in range(k):
            members = new_labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                worst = int(np.argmax(assigned_d))
                centroids[j] = points[worst]
                new_labels[worst] = j
                assigned_d[worst] = 0.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids, labels, np.asarray(history)


@dataclass
class ClusterModel:
    k: int
    centroids_psi: np.ndarray     # (k, psi_dim)
    centroids_latent: np.ndarray  # (k, latent_dim) mean member latent

    def assign(self, psi_points: np.ndarray) -> np.ndarray:
        """Nearest psi-centroid per point; ties break to the lowest index."""
        return _pairwise_sq(np.atleast_2d(psi_points), self.centroids_psi).argmin(axis=1)


def fit_cluster_model(psi_points: np.ndarray, latent_points: np.ndarray,
                      k: int, seed: int) -> ClusterModel:
    centroids, labels, _ = kmeans(psi_points, k, seed)
    latent_centroids = np.empty((k, latent_points.shape[1]))
    for j in range(k):
        members = labels == j
        if members.any():
            latent_centroids[j] = latent_points[members].mean(axis=0)
        else:
            latent_centroids[j] = latent_points[
                int(_pairwise_sq(psi_points, centroids[j:j + 1])[:, 0].argmin())]
    return ClusterModel(k=k, centroids_psi=centroids,
                        centroids_latent=latent_centroids)


def nucleus_filter(ratios: np.ndarray, targets: np.ndarray,
                   mass: float = NUCLEUS_MASS):
    """Minimal prefix of descending-ratio edges whose cumulative mass >= mass.

    Equal ratios order by ascending target index for determinism. Returns
    (kept_targets, kept_ratios).
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    targets = np.asarray(targets)
    order = np.lexsort((targets, -ratios))
    cum = np.cumsum(ratios[order])
    # smallest prefix with cum >= mass; keep everything if the total falls short
    n_keep = min(int(np.searchsorted(cum, mass, side="left")) + 1, len(cum))
    keep = order[:n_keep]
    return targets[keep], ratios[keep]


@dataclass
class AbstractGraph:
    """Directed cluster-transition graph with nucleus-filtered adjacency."""

    k: int
    counts: np.ndarray          # (k, k) raw cross-cluster transition counts
    ratios: np.ndarray          # (k, k) outward ratios p_ij (rows sum to 1 or 0)
    adjacency: list             # per node: list of (target, ratio) kept edges

    def edges(self) -> list[tuple[int, int, float]]:
        return [(i, int(j), float(p))
                for i, adj in enumerate(self.adjacency) for j, p in adj]

    def neighbor_lists(self) -> list[list[int]]:
        return [[int(j) for j, _ in adj] for adj in self.adjacency]


def graph_from_counts(counts: np.ndarray, mass: float = NUCLEUS_MASS) -> AbstractGraph:
    k = counts.shape[0]
    counts = counts.copy()
    np.fill_diagonal(counts, 0)  # self transitions are not outward
    totals = counts.sum(axis=1, keepdims=True)
    ratios = np.divide(counts, totals, out=np.zeros_like(counts, dtype=np.float64),
                       where=totals > 0)
    adjacency = []
    for i in range(k):
        nz = np.flatnonzero(ratios[i])
        if len(nz) == 0:
            adjacency.append([])
            continue
        kept_t, kept_r = nucleus_filter(ratios[i, nz], nz, mass)
        adjacency.append(list(zip(kept_t.tolist(), kept_r.tolist())))
    return AbstractGraph(k=k, counts=counts, ratios=ratios, adjacency=adjacency)


def encode_dataset(dataset: TransitionDataset, model):
    """Latent and psi embeddings for every record endpoint, deduplicated.

    Observations repeat heavily (one per grid cell), so unique cells are
    encoded once. Returns (latent_t, psi_t, latent_next, psi_next).
    """
    all_cells = np.concatenate([dataset.cells_t, dataset.cells_next])
    uniq, inv = np.unique(all_cells, return_inverse=True)
    latents = model.encode_cells(uniq)
    psis = model.psi_apply(latents)
    n = len(dataset)
    return (latents[inv[:n]], psis[inv[:n]],
            latents[inv[n:]], psis[inv[n:]])


def build_graph(dataset: TransitionDataset, model, clusters: ClusterModel,
                mass: float = NUCLEUS_MASS) -> AbstractGraph:
    """Count cross-cluster transitions over the dataset, then nucleus-filter."""
    _, psi_t, _, psi_next = encode_dataset(dataset, model)
    src = clusters.assign(psi_t)
    dst = clusters.assign(psi_next)
    k = clusters.k
    counts = np.zeros((k, k), dtype=np.float64)
    np.add.at(counts, (src, dst), 1.0)
    return graph_from_counts(counts, mass)


@dataclass
class AbstractionHierarchy:
    """Levels 2..n, finest (largest k) first, all built from one dataset."""

    levels: list  # list of (ClusterModel, AbstractGraph)
    ks: tuple[int, ...]

    @property
    def n_levels(self) -> int:
        return len(self.levels) + 1

    def levels_for(self, n: int) -> list:
        """The (cluster, graph) pairs used by an n-level planner: levels 2..n."""
        if n - 1 > len(self.levels):
            raise ValueError(f"hierarchy has {self.n_levels} levels, asked for {n}")
        return self.levels[: n - 1]


def build_hierarchy(dataset: TransitionDataset, model, ks,
                    seed: int = 0) -> AbstractionHierarchy:
    ks = tuple(int(k) for k in ks)
    if any(k < 2 for k in ks):
        raise NonDecreasingKs("cluster counts must all be >= 2")
    if any(b >= a for a, b in zip(ks, ks[1:])):
        raise NonDecreasingKs(f"cluster counts must strictly decrease: {ks}")
    latent_t, psi_t, latent_next, psi_next = encode_dataset(dataset, model)
    psis = np.concatenate([psi_t, psi_next])
    latents = np.concatenate([latent_t, latent_next])
    levels = []
    for k in ks:
        clusters = fit_cluster_model(psis, latents, k, seed)
        src = clusters.assign(psi_t)
        dst = clusters.assign(psi_next)
        counts = np.zeros((k, k), dtype=np.float64)
        np.add.at(counts, (src, dst), 1.0)
        levels.append((clusters, graph_from_counts(counts)))
    return AbstractionHierarchy(levels=levels, ks=ks)


def cluster_quality(world: MazeWorld, states: np.ndarray, labels: np.ndarray,
                    n_pairs: int = 10_000, seed: int = 0) -> float:
    """Wall-violation rate: fraction of within-cluster state pairs whose
    straight segment in true space crosses a wall."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0A11)))
    states = np.asarray(states, dtype=np.float64)
    by_cluster = {}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) >= 2:
            by_cluster[int(c)] = idx
    if not by_cluster:
        raise ValueError("no cluster with at least two members")
    cluster_ids = list(by_cluster)
    sizes = np.array([len(by_cluster[c]) for c in cluster_ids], dtype=np.float64)
    probs = sizes / sizes.sum()

    violations = 0
    for _ in range(n_pairs):
        c = cluster_ids[rng.choice(len(cluster_ids), p=probs)]
        idx = by_cluster[c]
        i, j = rng.choice(len(idx), size=2, replace=True)
        if segment_hits_walls(states[idx[i]], states[idx[j]], world.walls):
            violations += 1
    return violations / n_pairs
