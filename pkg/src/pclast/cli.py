"""Command-line pipeline: gen-data, train, abstract, plan, eval, bench, ablate.

Exit codes: 0 success, 2 config/usage error, 3 evaluation dominated by
unreachable-goal (NoPath) failures.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import abstraction, harness, planner, report
from .dataset import TransitionDataset
from .harness import ConfigError, ExperimentConfig
from .maze import MazeWorld

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOPATH = 3


def _load_dataset(cfg: ExperimentConfig) -> TransitionDataset:
    path = cfg.dataset_path()
    if not os.path.exists(path):
        raise ConfigError(f"dataset {path} not found; run gen-data first")
    return TransitionDataset.load(path)


def _load_model(cfg: ExperimentConfig):
    if not os.path.exists(cfg.checkpoint_path()):
        raise ConfigError(f"checkpoint {cfg.checkpoint_path()} not found; run train first")
    return harness.load_model(cfg)


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    dataset, coverage = harness.gen_data(cfg)
    print(f"wrote {len(dataset)} transitions to {cfg.dataset_path()}")
    print(f"coverage of 20x20 coarse cells: {100.0 * coverage:.1f}%")
    print(f"dataset hash: {dataset.content_hash()}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    dataset = _load_dataset(cfg)
    model = harness.train_model(cfg, dataset, log_every=500)
    print(f"wrote checkpoint to {cfg.checkpoint_path()}")
    from .representation import probe_state_regression
    probe = probe_state_regression(model.encode_cells, dataset, seed=cfg.seed,
                                   steps=1500)
    print(f"state-probe held-out MSE: {probe:.6f}")
    return EXIT_OK


def cmd_abstract(cfg: ExperimentConfig) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg)
    hierarchy = abstraction.build_hierarchy(dataset, model, cfg.ks, seed=cfg.seed)
    payload = harness.hierarchy_to_json(hierarchy, dataset.content_hash(),
                                        model.param_hash())
    out = os.path.join(cfg.out_dir, "hierarchy.json")
    report.write_json(out, payload)
    for (clusters, graph), k in zip(hierarchy.levels, hierarchy.ks):
        n_edges = len(graph.edges())
        print(f"level k={k}: {n_edges} filtered edges")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_plan(cfg: ExperimentConfig) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg)
    world = MazeWorld.named(cfg.layout)
    hierarchy = abstraction.build_hierarchy(dataset, model, cfg.ks, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x91A)))
    start, goal = harness.sample_pair(world, rng, cfg.eval.min_start_goal_dist)
    try:
        trace = planner.mpc_execute(world, start, goal, model, hierarchy, cfg.cem,
                                    cfg.eval.step_budget, rng, n_levels=cfg.n_levels)
    except planner.NoPath as e:
        print(f"planning failed: {e}", file=sys.stderr)
        return EXIT_NOPATH
    os.makedirs(cfg.out_dir, exist_ok=True)
    report.write_trace_jsonl(os.path.join(cfg.out_dir, "trace.jsonl"), [trace])
    scene = report.SvgScene()
    scene.add_walls(world)
    scene.add_trajectory(report.trajectory_points(trace),
                         color="blue" if trace.success else "orange")
    scene.write(os.path.join(cfg.out_dir, "plan.svg"))
    print(f"success={trace.success} steps={trace.steps_used} "
          f"final_distance={trace.final_distance:.4f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg)
    world = MazeWorld.named(cfg.layout)
    rep, traces_per_seed, hierarchy = harness.run_eval(
        world, dataset, model, cfg.ks, cfg.n_levels, cfg.cem, cfg.eval,
        cluster_seed=cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report.write_json(os.path.join(cfg.out_dir, "report.json"), rep.to_dict())
    rows = [[s, r] for s, r in zip(rep.seeds, rep.success_per_seed)]
    rows.append(["mean", rep.success_mean])
    rows.append(["stderr", rep.success_stderr])
    report.write_csv(os.path.join(cfg.out_dir, "report.csv"),
                     ["seed", "success_percent"], rows)
    all_traces = [t for traces in traces_per_seed for t in traces]
    report.write_trace_jsonl(os.path.join(cfg.out_dir, "trace.jsonl"), all_traces)

    # cluster overlay for the finest level plus executed trajectories
    _, psi_t, _, _ = abstraction.encode_dataset(dataset, model)
    clusters, graph = hierarchy.levels[0]
    labels = clusters.assign(psi_t)
    scene = report.SvgScene()
    scene.add_walls(world)
    scene.add_cluster_points(dataset.states, labels)
    scene.write(os.path.join(cfg.out_dir, "clusters.svg"))
    scene = report.SvgScene()
    scene.add_walls(world)
    for trace in all_traces:
        scene.add_trajectory(report.trajectory_points(trace),
                             color="blue" if trace.success else "orange")
    scene.write(os.path.join(cfg.out_dir, "trajectories.svg"))

    print(f"success: {rep.success_mean:.1f}% +- {rep.success_stderr:.1f} "
          f"({len(rep.seeds)} seeds x {rep.episodes_per_seed} episodes)")
    if rep.nopath_episodes > (len(rep.seeds) * rep.episodes_per_seed) // 2:
        print("evaluation dominated by NoPath failures", file=sys.stderr)
        return EXIT_NOPATH
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig) -> int:
    dataset = _load_dataset(cfg)
    model = _load_model(cfg)
    world = MazeWorld.named(cfg.layout)
    rows = harness.run_bench(world, dataset, model, cfg.bench, seed=cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report.write_json(os.path.join(cfg.out_dir, "bench.json"), {"rows": rows})
    report.write_csv(os.path.join(cfg.out_dir, "bench.csv"),
                     ["n", "mean_expansions", "mean_highlevel_ns"],
                     [[r["n"], r["mean_expansions"], r["mean_highlevel_ns"]]
                      for r in rows])
    for r in rows:
        print(f"n={r['n']}: {r['mean_expansions']:.2f} expansions, "
              f"{r['mean_highlevel_ns'] / 1e6:.4f} ms high-level")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, which: str) -> int:
    dataset = _load_dataset(cfg)
    world = MazeWorld.named(cfg.layout)
    if which == "kmax":
        rows = harness.ablate_kmax(cfg, dataset, world)
        header = ["k_max", "success_mean", "success_stderr"]
    elif which == "clusters":
        model = _load_model(cfg)
        rows = harness.ablate_clusters(cfg, dataset, world, model)
        header = ["clusters", "success_mean", "success_stderr"]
    elif which == "contrastive_target":
        model = _load_model(cfg)
        rows = harness.ablate_contrastive_target(cfg, dataset, world, model)
        header = ["variant", "success_mean", "success_stderr"]
    else:
        raise ConfigError(f"unknown ablation {which!r}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = os.path.join(cfg.out_dir, f"ablation_{which}.csv")
    report.write_csv(out, header, [[r[h] for h in header] for r in rows])
    for r in rows:
        print("  ".join(f"{h}={r[h]}" for h in header))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pclast",
                                description="latent-state maze planning pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "abstract", "plan", "eval", "bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
    sp = sub.add_parser("ablate")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--which", required=True,
                    choices=["kmax", "clusters", "contrastive_target"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config, seed_override=args.seed,
                                  out_override=args.out)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "abstract":
            return cmd_abstract(cfg)
        if args.command == "plan":
            return cmd_plan(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.which)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
