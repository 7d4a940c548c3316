"""Command line entry point: ``biased-irl {generate,demo,train,eval,reproduce}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .demonstrators import BiasSpec, demonstrator_policy, rollout
from .experiment import (
    ALGORITHMS,
    ExperimentConfig,
    _shared_planners,
    cached_dataset,
    emit_results,
    run_algorithm,
    run_experiment,
    score_result,
    stream_seed,
)
from .grid_mdp import Dataset, generate_gridworld, load_dataset, save_dataset
from .inference import load_result, save_result

log = logging.getLogger("biased_irl")


def load_config(args) -> ExperimentConfig:
    base = ExperimentConfig.full_scale() if args.paper_scale else ExperimentConfig.desk()
    cfg = base
    if args.config:
        cfg = ExperimentConfig.from_json(json.loads(Path(args.config).read_text()), base)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def find_demonstrator(cfg: ExperimentConfig, name: str) -> BiasSpec:
    for spec in cfg.demonstrators:
        if spec.name == name:
            return spec
    raise SystemExit(f"unknown demonstrator {name!r}; choose from {[d.name for d in cfg.demonstrators]}")


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir) / "datasets"
    out.mkdir(parents=True, exist_ok=True)
    specs = [find_demonstrator(cfg, args.demonstrator)] if args.demonstrator else cfg.demonstrators
    for run in range(cfg.n_runs):
        for spec in specs:
            data = cached_dataset(spec, cfg.grid, cfg.n_total, stream_seed(cfg.seed, run, "data", spec),
                                  cfg.train.gamma, use_cache=not args.no_cache)
            path = out / f"run{run}-{spec.name}.json"
            save_dataset(data, path)
            print(path)
    return 0


def render_text(world, reward, path) -> str:
    visited = set(path)
    lines = []
    for y in range(world.height):
        row = []
        for x in range(world.width):
            if world.walls[y, x]:
                ch = "#"
            elif (x, y) == world.start:
                ch = "S"
            elif reward[y, x] > 0:
                ch = "+"
            elif reward[y, x] < 0:
                ch = "-"
            else:
                ch = "."
            if (x, y) in visited and ch in ".+-":
                ch = {".": "*", "+": "@", "-": "!"}[ch]
            row.append(ch)
        lines.append("".join(row))
    lines.append(f"end: {path[-1]}  reward collected at end cell: {reward[path[-1][1], path[-1][0]]:g}")
    return "\n".join(lines)


def render_svg_grid(world, reward, path, cell: int = 24) -> str:
    w, h = world.width * cell, world.height * cell
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">']
    vmax = max(np.abs(reward).max(), 1e-9)
    for y in range(world.height):
        for x in range(world.width):
            if world.walls[y, x]:
                fill = "#333333"
            elif reward[y, x] != 0:
                a = abs(reward[y, x]) / vmax
                fill = f"rgba(0,160,0,{a:.2f})" if reward[y, x] > 0 else f"rgba(200,0,0,{a:.2f})"
            else:
                fill = "#ffffff"
            out.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" height="{cell}" fill="{fill}" stroke="#cccccc"/>')
            if reward[y, x] != 0:
                out.append(f'<text x="{x * cell + cell / 2}" y="{y * cell + cell / 2 + 3}" text-anchor="middle">{reward[y, x]:g}</text>')
    pts = " ".join(f"{x * cell + cell / 2},{y * cell + cell / 2}" for x, y in path)
    out.append(f'<polyline points="{pts}" fill="none" stroke="#1f5fbf" stroke-width="3"/>')
    sx, sy = world.start
    out.append(f'<circle cx="{sx * cell + cell / 2}" cy="{sy * cell + cell / 2}" r="{cell / 4}" fill="#1f5fbf"/>')
    out.append("</svg>")
    return "\n".join(out)


def cmd_demo(args, cfg: ExperimentConfig) -> int:
    overrides = json.loads(args.params) if args.params else {}
    spec = BiasSpec.make(args.kind, args.noise, **overrides)
    world, reward = generate_gridworld(cfg.seed if args.world_seed is None else args.world_seed, cfg.grid)
    policy = demonstrator_policy(spec, world, reward, cfg.train.gamma)
    path = rollout(world, policy, args.steps or world.horizon, np.random.default_rng(cfg.seed))
    text = render_svg_grid(world, reward, path) if args.format == "svg" else render_text(world, reward, path)
    if args.file:
        Path(args.file).write_text(text)
        print(args.file)
    else:
        print(text)
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    spec = find_demonstrator(cfg, args.demonstrator)
    data = cached_dataset(spec, cfg.grid, cfg.n_total, stream_seed(cfg.seed, args.run, "data", spec),
                          cfg.train.gamma, use_cache=not args.no_cache)
    tcfg = replace(cfg.train, seed=stream_seed(cfg.seed, args.run, "train", spec))
    shared = _shared_planners(cfg, args.run, {args.algorithm})
    result, entries = run_algorithm(args.algorithm, data, cfg, tcfg, shared)
    out = Path(cfg.out_dir) / f"{args.algorithm}-{spec.name}-run{args.run}"
    save_result(result, out)
    save_dataset(Dataset(entries), out / "eval_set.json")
    (out / "cell.json").write_text(json.dumps({"algorithm": args.algorithm, "demonstrator": spec.to_json(),
                                               "run": args.run, "config": cfg.to_json()}, indent=1))
    print(out)
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    result_dir = Path(args.result)
    cell = json.loads((result_dir / "cell.json").read_text())
    cfg = ExperimentConfig.from_json(cell["config"])
    spec = BiasSpec.from_json(cell["demonstrator"])
    entries = load_dataset(result_dir / "eval_set.json")
    result = load_result(result_dir)
    pct, acc = score_result(result, entries, spec, cfg, stream_seed(cfg.seed, cell["run"], "accuracy", spec))
    record = {"algorithm": cell["algorithm"], "demonstrator": spec.name, "percent_reward": pct, "accuracy": acc}
    (result_dir / "metrics.json").write_text(json.dumps(record, indent=1))
    print(json.dumps(record))
    return 0


def cmd_reproduce(args, cfg: ExperimentConfig) -> int:
    table = run_experiment(cfg, jobs=args.jobs, use_cache=not args.no_cache)
    for path in emit_results(table, cfg.out_dir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields (see README)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    scale = common.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true", help="small preset (default)")
    scale.add_argument("--paper-scale", action="store_true", help="full-size preset; hours of compute")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--no-cache", action="store_true", help="do not read or write the dataset cache")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="biased-irl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write demonstrator datasets as JSON")
    g.add_argument("--demonstrator", help="only this demonstrator (e.g. naive, boltzmann-myopic)")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("demo", parents=[common], help="show one demonstrator's rollout")
    d.add_argument("kind", choices=["optimal", "naive", "sophisticated", "myopic", "overconfident", "underconfident"])
    d.add_argument("--noise", choices=["argmax", "boltzmann"], default="argmax")
    d.add_argument("--params", help='JSON overrides, e.g. \'{"k": 2.0}\'')
    d.add_argument("--world-seed", type=int)
    d.add_argument("--steps", type=int)
    d.add_argument("--format", choices=["text", "svg"], default="text")
    d.add_argument("--file", help="write here instead of stdout")
    d.set_defaults(func=cmd_demo)

    t = sub.add_parser("train", parents=[common], help="run one algorithm on one demonstrator")
    t.add_argument("algorithm", choices=ALGORITHMS)
    t.add_argument("demonstrator")
    t.add_argument("--run", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a directory written by `train`")
    e.add_argument("result")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reproduce", parents=[common], help="full results table, CSV and SVG")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args, load_config(args))


if __name__ == "__main__":
    sys.exit(main())
