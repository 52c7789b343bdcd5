"""Experiment orchestration: configs, dataset/model IO, evaluation loops,
planning benchmarks, and ablations. The CLI in ``cli`` is a thin wrapper
around these functions.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import abstraction, planner, report
from .dataset import TransitionDataset, coarse_coverage
from .maze import MazeWorld, collect_dataset, render, sample_free_state
from .planner import CemConfig, NoPath
from .representation import ReprModel, TrainConfig, train_joint


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_transitions: int = 100_000
    episode_length: int = 100
    path: str | None = None


@dataclass
class EvalConfig:
    episodes: int = 50
    seeds: tuple[int, ...] = (0, 1, 2)
    step_budget: int = 200
    min_start_goal_dist: float = 0.3


@dataclass
class BenchConfig:
    ns: tuple[int, ...] = (2, 3, 4, 5)
    ks: tuple[int, ...] = (32, 16, 8, 4)
    pairs: int = 100


@dataclass
class AblateConfig:
    kmax_sweep: tuple[int, ...] = (1, 5, 10, 25, 50)
    cluster_sweep: tuple[int, ...] = (8, 16, 32, 64)
    episodes: int = 25
    seeds: tuple[int, ...] = (0,)


@dataclass
class ExperimentConfig:
    layout: str
    out_dir: str
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ks: tuple[int, ...] = (16,)
    n_levels: int = 2
    cem: CemConfig = field(default_factory=CemConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def dataset_path(self) -> str:
        return self.data.path or os.path.join(self.out_dir, "dataset.pcl1")

    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, "checkpoint.pclw")

    def manifest_path(self) -> str:
        return os.path.join(self.out_dir, "manifest.json")


def _build_section(cls, payload: dict, name: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in fields:
            raise ConfigError(f"unknown key {name}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {name} section: {e}") from e


def load_config(path, seed_override: int | None = None,
                out_override: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            payload = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    if "layout" not in payload:
        raise ConfigError("config needs a 'layout' key")
    layout = payload.pop("layout")
    if layout not in ("hallway", "spiral", "rooms"):
        raise ConfigError(f"unknown layout {layout!r}")
    out_dir = out_override or payload.pop("out_dir", os.path.join("runs", layout))
    if out_override:
        payload.pop("out_dir", None)
    seed = seed_override if seed_override is not None else payload.pop("seed", 0)
    if seed_override is not None:
        payload.pop("seed", None)

    sections = {}
    for name, cls in (("data", DataConfig), ("train", TrainConfig),
                      ("cem", CemConfig), ("eval", EvalConfig),
                      ("bench", BenchConfig), ("ablate", AblateConfig)):
        sections[name] = _build_section(cls, payload.pop(name, {}), name)
    ks = tuple(payload.pop("ks", (16,)))
    n_levels = payload.pop("n_levels", 2)
    if payload:
        raise ConfigError(f"unknown config keys: {sorted(payload)}")
    if seed_override is not None:
        sections["train"] = dataclasses.replace(sections["train"], seed=seed_override)
    cfg = ExperimentConfig(layout=layout, out_dir=out_dir, seed=seed,
                           ks=ks, n_levels=n_levels, **sections)
    if cfg.data.n_transitions < 1:
        raise ConfigError("data.n_transitions must be >= 1")
    if cfg.n_levels < 1:
        raise ConfigError("n_levels must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# Dataset and model persistence


def gen_data(cfg: ExperimentConfig) -> tuple[TransitionDataset, float]:
    world = MazeWorld.named(cfg.layout)
    dataset = collect_dataset(world, cfg.data.n_transitions, cfg.seed,
                              cfg.data.episode_length)
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset.save(cfg.dataset_path())
    return dataset, coarse_coverage(dataset)


def save_model(cfg: ExperimentConfig, model: ReprModel, dataset_hash: str,
               curves: dict) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    model.save(cfg.checkpoint_path())
    tc = model.config
    manifest = {
        "latent_dim": tc.latent_dim,
        "k_max": tc.k_max,
        "d_m": tc.d_m,
        "action_bins": tc.action_bins,
        "scales": {"mse": tc.mse_scale, "ce": tc.ce_scale},
        "seed": tc.seed,
        "dataset_hash": dataset_hash,
        "obs_resolution": model.obs_resolution,
        "train_config": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in dataclasses.asdict(tc).items()},
    }
    report.write_json(cfg.manifest_path(), manifest)
    rows = [[i, curves["inverse"][i], curves["contrastive"][i], curves["forward"][i]]
            for i in range(len(curves["inverse"]))]
    report.write_csv(os.path.join(cfg.out_dir, "loss.csv"),
                     ["step", "inverse", "contrastive", "forward"], rows)


def load_model(cfg: ExperimentConfig) -> ReprModel:
    with open(cfg.manifest_path()) as f:
        manifest = json.load(f)
    raw = manifest["train_config"]
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items()}
    tc = TrainConfig(**kwargs)
    return ReprModel.load(cfg.checkpoint_path(), manifest["obs_resolution"], tc)


def train_model(cfg: ExperimentConfig, dataset: TransitionDataset,
                log_every: int = 0) -> ReprModel:
    model, curves = train_joint(dataset, cfg.train, log_every=log_every)
    save_model(cfg, model, dataset.content_hash(), curves)
    return model


# ---------------------------------------------------------------------------
# Hierarchy persistence


def hierarchy_to_json(hierarchy, dataset_hash: str, model_hash: str) -> dict:
    levels = []
    for clusters, graph in hierarchy.levels:
        levels.append({
            "k": clusters.k,
            "centroids_psi": clusters.centroids_psi.tolist(),
            "centroids_latent": clusters.centroids_latent.tolist(),
            "edges": [[i, j, p] for i, j, p in graph.edges()],
        })
    return {"levels": levels, "dataset_hash": dataset_hash, "model_hash": model_hash}


def hierarchy_from_json(payload: dict):
    levels = []
    ks = []
    for lv in payload["levels"]:
        k = int(lv["k"])
        clusters = abstraction.ClusterModel(
            k=k,
            centroids_psi=np.asarray(lv["centroids_psi"], dtype=np.float64),
            centroids_latent=np.asarray(lv["centroids_latent"], dtype=np.float64))
        counts = np.zeros((k, k))
        ratios = np.zeros((k, k))
        adjacency = [[] for _ in range(k)]
        for i, j, p in lv["edges"]:
            adjacency[int(i)].append((int(j), float(p)))
            ratios[int(i), int(j)] = float(p)
        graph = abstraction.AbstractGraph(k=k, counts=counts, ratios=ratios,
                                          adjacency=adjacency)
        levels.append((clusters, graph))
        ks.append(k)
    return abstraction.AbstractionHierarchy(levels=levels, ks=tuple(ks))


# ---------------------------------------------------------------------------
# Evaluation


def sample_pair(world: MazeWorld, rng: np.random.Generator,
                min_dist: float) -> tuple[np.ndarray, np.ndarray]:
    while True:
        start = sample_free_state(world, rng)
        goal = sample_free_state(world, rng)
        if float(np.linalg.norm(start - goal)) >= min_dist:
            return start, goal


def run_eval(world: MazeWorld, dataset: TransitionDataset, model: ReprModel,
             ks, n_levels: int, cem_cfg: CemConfig, eval_cfg: EvalConfig,
             hierarchy=None, cluster_seed: int = 0, log=None):
    """MPC evaluation over random start/goal episodes for several seeds.

    Episodes are indexed by (seed, episode) so every planner variant sees
    the same task set. NoPath episodes count as failures.
    """
    if hierarchy is None:
        hierarchy = abstraction.build_hierarchy(dataset, model, ks, seed=cluster_seed)
    traces_per_seed = []
    nopath = 0
    for seed in eval_cfg.seeds:
        traces = []
        for ep in range(eval_cfg.episodes):
            pair_rng = np.random.default_rng(np.random.SeedSequence((seed, ep, 0xE9)))
            start, goal = sample_pair(world, pair_rng, eval_cfg.min_start_goal_dist)
            mpc_rng = np.random.default_rng(np.random.SeedSequence((seed, ep, 0x3C)))
            try:
                trace = planner.mpc_execute(
                    world, start, goal, model, hierarchy, cem_cfg,
                    eval_cfg.step_budget, mpc_rng, n_levels=n_levels)
            except NoPath:
                nopath += 1
                trace = planner.PlanTrace(start=start, goal=goal, success=False,
                                          steps_used=0,
                                          final_distance=float(np.linalg.norm(start - goal)),
                                          final_state=start, rows=[])
            traces.append(trace)
            if log:
                log(seed, ep, trace)
        traces_per_seed.append(traces)
    rep = report.build_eval_report(world.layout, n_levels, ks, eval_cfg.episodes,
                                   eval_cfg.seeds, traces_per_seed, nopath)
    return rep, traces_per_seed, hierarchy


# ---------------------------------------------------------------------------
# Planning benchmark (graph-search work vs. abstraction depth)


def run_bench(world: MazeWorld, dataset: TransitionDataset, model: ReprModel,
              bench_cfg: BenchConfig, seed: int = 0):
    """Fixed start/goal pairs planned once per abstraction depth.

    Uses a throwaway one-sample CEM config: only the waypoint-search work
    (node expansions and wall time) varies with n.
    """
    hierarchy = abstraction.build_hierarchy(dataset, model, bench_cfg.ks, seed=seed)
    tiny_cem = CemConfig(iterations=1, samples=2, elites=1, horizon=1)
    pairs = []
    for i in range(bench_cfg.pairs):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i, 0xBE)))
        pairs.append(sample_pair(world, rng, 0.3))
    latents = []
    for start, goal in pairs:
        s = model.encode_obs(render(world, start))
        g = model.encode_obs(render(world, goal))
        latents.append((s, g))

    rows = []
    for n in bench_cfg.ns:
        levels = hierarchy.levels_for(n) if n > 1 else []
        total_exp = 0
        total_ns = 0
        rng = np.random.default_rng(np.random.SeedSequence((seed, n, 0xCE)))
        for s, g in latents:
            result = planner.plan_latent(s, g, model, levels, tiny_cem, rng)
            total_exp += result.expansions
            total_ns += result.highlevel_ns
        rows.append({
            "n": n,
            "mean_expansions": total_exp / len(latents),
            "mean_highlevel_ns": total_ns / len(latents),
        })
    return rows


# ---------------------------------------------------------------------------
# Ablations


def ablate_kmax(cfg: ExperimentConfig, dataset: TransitionDataset,
                world: MazeWorld, sweep=None, log_every: int = 0):
    sweep = tuple(sweep) if sweep is not None else cfg.ablate.kmax_sweep
    eval_cfg = EvalConfig(episodes=cfg.ablate.episodes, seeds=cfg.ablate.seeds,
                          step_budget=cfg.eval.step_budget,
                          min_start_goal_dist=cfg.eval.min_start_goal_dist)
    rows = []
    for k_max in sweep:
        tc = dataclasses.replace(cfg.train, k_max=k_max, d_m=min(cfg.train.d_m, k_max))
        model, _ = train_joint(dataset, tc, log_every=log_every)
        rep, _, _ = run_eval(world, dataset, model, cfg.ks, cfg.n_levels,
                             cfg.cem, eval_cfg)
        rows.append({"k_max": k_max, "success_mean": rep.success_mean,
                     "success_stderr": rep.success_stderr})
    return rows


def ablate_clusters(cfg: ExperimentConfig, dataset: TransitionDataset,
                    world: MazeWorld, model: ReprModel, sweep=None):
    sweep = tuple(sweep) if sweep is not None else cfg.ablate.cluster_sweep
    eval_cfg = EvalConfig(episodes=cfg.ablate.episodes, seeds=cfg.ablate.seeds,
                          step_budget=cfg.eval.step_budget,
                          min_start_goal_dist=cfg.eval.min_start_goal_dist)
    rows = []
    for k in sweep:
        rep, _, _ = run_eval(world, dataset, model, (k,), 2, cfg.cem, eval_cfg)
        rows.append({"clusters": k, "success_mean": rep.success_mean,
                     "success_stderr": rep.success_stderr})
    return rows


def ablate_contrastive_target(cfg: ExperimentConfig, dataset: TransitionDataset,
                              world: MazeWorld, base_model: ReprModel,
                              log_every: int = 0):
    """Compare the default (separate psi) against pushing the contrastive
    gradient into the encoder as well."""
    eval_cfg = EvalConfig(episodes=cfg.ablate.episodes, seeds=cfg.ablate.seeds,
                          step_budget=cfg.eval.step_budget,
                          min_start_goal_dist=cfg.eval.min_start_goal_dist)
    rep_base, _, _ = run_eval(world, dataset, base_model, cfg.ks, cfg.n_levels,
                              cfg.cem, eval_cfg)
    tc = dataclasses.replace(cfg.train, contrastive_into_phi=True)
    variant, _ = train_joint(dataset, tc, log_every=log_every)
    rep_var, _, _ = run_eval(world, dataset, variant, cfg.ks, cfg.n_levels,
                             cfg.cem, eval_cfg)
    return [
        {"variant": "pclast", "success_mean": rep_base.success_mean,
         "success_stderr": rep_base.success_stderr},
        {"variant": "phi_contrastive", "success_mean": rep_var.success_mean,
         "success_stderr": rep_var.success_stderr},
    ]
