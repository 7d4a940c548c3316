"""Experiment orchestration: datasets per demonstrator, every algorithm, both metrics.

Seeding rule: every random stream is a ``numpy.random.SeedSequence`` built
from the master seed, the run index and a fixed tag; per-demonstrator streams
also include a stable hash of the demonstrator's parameters, so adding or
reordering demonstrators never changes another cell's numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .demonstrators import BiasSpec, all_demonstrators, demonstrator_policy
from .diff_planners import SoftVIConfig, SoftVIPlanner, VINConfig, VINPlanner
from .evaluation import accuracy_on, perturbed_targets, pooled_percent, reward_obtained
from .grid_mdp import Dataset, Entry, GridConfig, generate_gridworld, load_dataset, save_dataset
from .inference import (
    InferenceResult,
    TrainConfig,
    algorithm1,
    algorithm2,
    assumed_model_inference,
    pretrain_optimal_planner,
    soft_vi_inference,
)

log = logging.getLogger(__name__)

ALGORITHMS = (
    "optimal-baseline",
    "boltzmann-baseline",
    "algorithm1",
    "algorithm2-joint-init",
    "algorithm2-joint-noinit",
    "algorithm2-coordinate-init",
    "algorithm2-coordinate-noinit",
    "soft-vi-exact",
)

CSV_HEADER = ("algorithm", "demonstrator", "percent_reward_mean", "percent_reward_stderr",
              "accuracy_mean", "accuracy_stderr", "n_runs")


# Training settings of the desk preset: longer stages than the TrainConfig
# defaults, since with 300 training tasks the planner needs ~150 epochs, and
# only 300 simulated demonstrations to match the known-reward budget.
DESK_TRAIN = TrainConfig(planner_epochs=150, reward_epochs=100, joint_epochs=50, n_sim=300)


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridConfig = GridConfig()
    demonstrators: tuple[BiasSpec, ...] = field(default_factory=lambda: tuple(all_demonstrators()))
    algorithms: tuple[str, ...] = ALGORITHMS
    n_runs: int = 3
    n_total: int = 400
    n_known: int = 300
    n_eval: int = 100
    train: TrainConfig = DESK_TRAIN
    n_perturbations: int = 10
    seed: int = 0
    out_dir: str = "results"

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.n_known + self.n_eval > self.n_total:
            raise ValueError("n_known + n_eval must not exceed n_total")
        if min(self.n_known, self.n_eval, self.n_perturbations) < 1:
            raise ValueError("dataset sizes and perturbation count must be positive")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms: {sorted(unknown)}")
        if not self.demonstrators or not self.algorithms:
            raise ValueError("need at least one demonstrator and one algorithm")

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ExperimentConfig":
        base = dict(n_runs=10, n_total=8000, n_known=7000, n_eval=1000,
                    train=replace(DESK_TRAIN, n_sim=7000))
        base.update(overrides)
        return cls(**base)

    # --- JSON config files

    def to_json(self) -> dict:
        return {
            "grid": asdict(self.grid),
            "demonstrators": [d.to_json() for d in self.demonstrators],
            "algorithms": list(self.algorithms),
            "n_runs": self.n_runs, "n_total": self.n_total, "n_known": self.n_known, "n_eval": self.n_eval,
            "train": {**{f.name: getattr(self.train, f.name) for f in fields(self.train) if f.name != "vin"},
                      "vin": asdict(self.train.vin)},
            "n_perturbations": self.n_perturbations, "seed": self.seed, "out_dir": self.out_dir,
        }

    @classmethod
    def from_json(cls, d: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        """Overlay the keys present in ``d`` on ``base`` (the desk preset by default)."""
        base = base or cls.desk()
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        if "grid" in d:
            kw["grid"] = replace(base.grid, **d["grid"])
        if "demonstrators" in d:
            kw["demonstrators"] = tuple(BiasSpec.from_json(x) for x in d["demonstrators"])
        if "algorithms" in d:
            kw["algorithms"] = tuple(d["algorithms"])
        if "train" in d:
            t = dict(d["train"])
            vin = replace(base.train.vin, **t.pop("vin", {}))
            kw["train"] = replace(base.train, vin=vin, **t)
        for key in ("n_runs", "n_total", "n_known", "n_eval", "n_perturbations", "seed", "out_dir"):
            if key in d:
                kw[key] = d[key]
        return replace(base, **kw)


@dataclass
class Row:
    algorithm: str
    demonstrator: str
    percent_reward_mean: float
    percent_reward_stderr: float
    accuracy_mean: float
    accuracy_stderr: float
    n_runs: int
    error: str = ""


@dataclass
class ResultsTable:
    rows: list[Row]

    def get(self, algorithm: str, demonstrator: str) -> Row:
        for row in self.rows:
            if row.algorithm == algorithm and row.demonstrator == demonstrator:
                return row
        raise KeyError((algorithm, demonstrator))

    def mean_over(self, algorithm: str, demonstrators: Sequence[str], metric: str = "percent_reward_mean") -> float:
        return float(np.mean([getattr(self.get(algorithm, d), metric) for d in demonstrators]))


# --- seeding and dataset cache

def _stable_hash(obj) -> int:
    text = json.dumps(obj, sort_keys=True)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def stream_seed(master: int, run: int, tag: str, demonstrator: BiasSpec | None = None) -> int:
    """Deterministic 32-bit seed for one named random stream of one run."""
    key = [master, run, _stable_hash(tag)]
    if demonstrator is not None:
        key.append(_stable_hash(demonstrator.to_json()))
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint32)[0])


def cache_dir() -> Path:
    return Path(os.environ.get("BIASED_IRL_CACHE", Path.home() / ".cache" / "biased_irl"))


def generate_dataset(spec: BiasSpec, grid: GridConfig, n: int, seed: int, gamma: float = 0.9) -> Dataset:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    entries = []
    for s in seeds:
        world, reward = generate_gridworld(int(s), grid)
        entries.append(Entry(world, reward, demonstrator_policy(spec, world, reward, gamma), True))
    return Dataset(entries)


def cached_dataset(spec: BiasSpec, grid: GridConfig, n: int, seed: int, gamma: float = 0.9,
                   use_cache: bool = True) -> Dataset:
    """Dataset for one demonstrator, memoised on disk by (grid, demonstrator, n, seed)."""
    if not use_cache:
        return generate_dataset(spec, grid, n, seed, gamma)
    key = hashlib.sha256(json.dumps([asdict(grid), spec.to_json(), n, seed, gamma],
                                    sort_keys=True).encode()).hexdigest()[:24]
    path = cache_dir() / f"dataset-{key}.json"
    if path.exists():
        return load_dataset(path)
    data = generate_dataset(spec, grid, n, seed, gamma)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    save_dataset(data, tmp)
    os.replace(tmp, path)
    return data


# --- one (run, demonstrator) cell

def _planner_for_result(result: InferenceResult, cfg: ExperimentConfig, horizon: int):
    if result.planner == "soft_vi":
        return SoftVIPlanner(SoftVIConfig(depth=horizon, gamma=cfg.train.gamma))
    return VINPlanner(cfg.train.vin, result.params)


class Targets:
    """Lazily computed demonstrator policies on perturbed worlds, shared by every algorithm of a cell."""

    def __init__(self, spec: BiasSpec, cfg: ExperimentConfig, seed: int):
        self.spec, self.cfg, self.seed = spec, cfg, seed
        self._cache: dict[int, tuple] = {}

    def __call__(self, i: int, entry: Entry):
        if i not in self._cache:
            self._cache[i] = perturbed_targets(self.spec, entry.world, entry.reward, self.cfg.n_perturbations,
                                               self.seed + i, self.cfg.train.gamma, self.cfg.grid.wall_density)
        return self._cache[i]


def score_result(result: InferenceResult, entries: Sequence[Entry], spec: BiasSpec, cfg: ExperimentConfig,
                 seed: int, targets: Targets | None = None) -> tuple[float, float]:
    """Pooled percent reward and mean action-prediction accuracy over ``entries``."""
    targets = targets or Targets(spec, cfg, seed)
    percent = pooled_percent(reward_obtained(e.world, e.reward, r, cfg.train.gamma)
                             for e, r in zip(entries, result.rewards))
    planner = _planner_for_result(result, cfg, entries[0].world.horizon)
    accs = [accuracy_on(planner, r, *targets(i, e)) for i, (e, r) in enumerate(zip(entries, result.rewards))]
    return float(percent), float(np.mean(accs))


_PRETRAINED: dict = {}


def _pretrained(grid: GridConfig, tcfg: TrainConfig, noise: str):
    # in-process memo: several experiments over the same runs share these planners
    key = (grid, tcfg, noise)
    if key not in _PRETRAINED:
        _PRETRAINED[key] = pretrain_optimal_planner(grid, tcfg, noise=noise)
    return _PRETRAINED[key]


def _shared_planners(cfg: ExperimentConfig, run: int, needed: set[str]) -> dict:
    """Planners trained on simulated optimal demonstrations, shared by all demonstrators of a run."""
    out = {}
    tcfg = replace(cfg.train, seed=stream_seed(cfg.seed, run, "simulated"))
    if "optimal-baseline" in needed:
        out["argmax"] = _pretrained(cfg.grid, tcfg, "argmax")
    if needed & {"boltzmann-baseline", "algorithm2-joint-init", "algorithm2-coordinate-init"}:
        out["boltzmann"] = _pretrained(cfg.grid, tcfg, "boltzmann")
    return out


def run_algorithm(name: str, data: Dataset, cfg: ExperimentConfig, tcfg: TrainConfig,
                  shared: dict) -> tuple[InferenceResult, Sequence[Entry]]:
    """Run one algorithm on one demonstrator's dataset; returns the result and the scored entries."""
    eval_set = Dataset(data[cfg.n_total - cfg.n_eval:]).hide_rewards()
    if name == "optimal-baseline":
        return assumed_model_inference(eval_set, tcfg, shared["argmax"]), eval_set
    if name == "boltzmann-baseline":
        return assumed_model_inference(eval_set, tcfg, shared["boltzmann"]), eval_set
    if name == "soft-vi-exact":
        return soft_vi_inference(eval_set, tcfg), eval_set
    if name == "algorithm1":
        known = Dataset(data[:cfg.n_known])
        return algorithm1(known, eval_set, tcfg), eval_set
    _, schedule, init = name.split("-")
    acfg = replace(tcfg, schedule=schedule, init="optimal_sim" if init == "init" else "none")
    everything = Dataset(data).hide_rewards()
    result = algorithm2(everything, acfg, cfg.grid, init_params=shared.get("boltzmann") if init == "init" else None)
    # score only the evaluation tail so that every algorithm is judged on the same tasks
    tail = slice(cfg.n_total - cfg.n_eval, cfg.n_total)
    return replace(result, rewards=result.rewards[tail]), eval_set


def run_cell(cfg: ExperimentConfig, run: int, spec: BiasSpec, shared: dict,
             use_cache: bool = True) -> dict[str, tuple[float, float] | str]:
    """All algorithms for one (run, demonstrator); failures become error strings."""
    data = cached_dataset(spec, cfg.grid, cfg.n_total, stream_seed(cfg.seed, run, "data", spec),
                          cfg.train.gamma, use_cache)
    tcfg = replace(cfg.train, seed=stream_seed(cfg.seed, run, "train", spec))
    targets = Targets(spec, cfg, stream_seed(cfg.seed, run, "accuracy", spec))
    out: dict[str, tuple[float, float] | str] = {}
    for name in cfg.algorithms:
        try:
            result, entries = run_algorithm(name, data, cfg, tcfg, shared)
            out[name] = score_result(result, entries, spec, cfg, targets.seed, targets)
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            log.warning("run %d, %s, %s failed: %s", run, name, spec.name, exc)
            out[name] = f"{type(exc).__name__}: {exc}"
        log.info("run %d %-28s %-26s %s", run, name, spec.name, out[name])
    return out


def _run_one(args):
    cfg, run, spec, use_cache = args
    shared = _shared_planners(cfg, run, set(cfg.algorithms))
    return run_cell(cfg, run, spec, shared, use_cache)


def _stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, use_cache: bool = True) -> ResultsTable:
    """Every (algorithm, demonstrator) cell averaged over ``cfg.n_runs`` runs.

    With ``jobs > 1`` each (run, demonstrator) pair is a separate process; the
    shared simulated-optimal planners are then retrained per process, which
    is wasteful but gives identical numbers.
    """
    cells: dict[tuple[int, str], dict] = {}
    if jobs > 1:
        tasks = [(cfg, run, spec, use_cache) for run in range(cfg.n_runs) for spec in cfg.demonstrators]
        with ProcessPoolExecutor(jobs) as pool:
            for (_, run, spec, _), res in zip(tasks, pool.map(_run_one, tasks)):
                cells[run, spec.name] = res
    else:
        for run in range(cfg.n_runs):
            shared = _shared_planners(cfg, run, set(cfg.algorithms))
            for spec in cfg.demonstrators:
                cells[run, spec.name] = run_cell(cfg, run, spec, shared, use_cache)
    rows = []
    for name in cfg.algorithms:
        for spec in cfg.demonstrators:
            got = [cells[run, spec.name][name] for run in range(cfg.n_runs)]
            errors = [g for g in got if isinstance(g, str)]
            ok = [g for g in got if not isinstance(g, str)]
            if errors:
                rows.append(Row(name, spec.name, math.nan, math.nan, math.nan, math.nan, cfg.n_runs, errors[0]))
                continue
            pct, acc = [g[0] for g in ok], [g[1] for g in ok]
            rows.append(Row(name, spec.name, float(np.mean(pct)), _stderr(pct), float(np.mean(acc)),
                            _stderr(acc), cfg.n_runs))
    return ResultsTable(rows)


# --- output

def write_csv(table: ResultsTable, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in table.rows:
            w.writerow([r.algorithm, r.demonstrator, repr(r.percent_reward_mean), repr(r.percent_reward_stderr),
                        repr(r.accuracy_mean), repr(r.accuracy_stderr), r.n_runs])
    return path


def read_csv(path: str | Path) -> ResultsTable:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(Row(rec["algorithm"], rec["demonstrator"], float(rec["percent_reward_mean"]),
                            float(rec["percent_reward_stderr"]), float(rec["accuracy_mean"]),
                            float(rec["accuracy_stderr"]), int(rec["n_runs"])))
    return ResultsTable(rows)


PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")


def render_svg(table: ResultsTable, metric: str = "percent_reward", title: str | None = None) -> str:
    """Grouped bar chart: one group per demonstrator, one bar per algorithm, stderr whiskers."""
    demos = list(dict.fromkeys(r.demonstrator for r in table.rows))
    algos = list(dict.fromkeys(r.algorithm for r in table.rows))
    scale = 100.0 if metric == "percent_reward" else 1.0
    lo = min(0.0, min((getattr(r, f"{metric}_mean") for r in table.rows
                       if math.isfinite(getattr(r, f"{metric}_mean"))), default=0.0))
    hi = max(scale, max((getattr(r, f"{metric}_mean") for r in table.rows
                         if math.isfinite(getattr(r, f"{metric}_mean"))), default=scale))
    bar_w, gap, left, top, plot_h = 10, 14, 60, 40, 260
    group_w = bar_w * len(algos) + gap
    width = left + group_w * len(demos) + 20
    height = top + plot_h + 110 + 16 * len(algos)

    def y_of(v):
        return top + plot_h * (hi - v) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">',
           f'<text x="{left}" y="20" font-size="13">{escape(title or metric.replace("_", " "))}</text>',
           f'<line x1="{left}" y1="{y_of(0):.1f}" x2="{width - 20}" y2="{y_of(0):.1f}" stroke="black"/>']
    for tick in np.linspace(lo, hi, 6):
        out.append(f'<text x="{left - 5}" y="{y_of(tick) + 3:.1f}" text-anchor="end">{tick:.3g}</text>')
    for gi, demo in enumerate(demos):
        x0 = left + gi * group_w + gap / 2
        for ai, algo in enumerate(algos):
            try:
                row = table.get(algo, demo)
            except KeyError:
                continue
            mean, err = getattr(row, f"{metric}_mean"), getattr(row, f"{metric}_stderr")
            x = x0 + ai * bar_w
            if not math.isfinite(mean):
                mean, err = 0.0, 0.0
            y, y0 = y_of(max(mean, 0.0)), y_of(min(mean, 0.0))
            out.append(f'<rect class="bar" x="{x:.1f}" y="{y:.1f}" width="{bar_w - 1}" height="{y0 - y:.1f}" '
                       f'fill="{PALETTE[ai % len(PALETTE)]}"><title>{escape(algo)} / {escape(demo)}: '
                       f'{mean:.3g} ± {err:.2g}</title></rect>')
            if err > 0:
                cx = x + (bar_w - 1) / 2
                out.append(f'<line x1="{cx:.1f}" y1="{y_of(mean - err):.1f}" x2="{cx:.1f}" '
                           f'y2="{y_of(mean + err):.1f}" stroke="black"/>')
        lx = x0 + group_w / 2
        out.append(f'<text x="{lx:.1f}" y="{top + plot_h + 12}" transform="rotate(40 {lx:.1f} {top + plot_h + 12})">'
                   f'{escape(demo)}</text>')
    legend_y = top + plot_h + 95
    for ai, algo in enumerate(algos):
        y = legend_y + 16 * ai
        out.append(f'<rect x="{left}" y="{y}" width="10" height="10" fill="{PALETTE[ai % len(PALETTE)]}"/>')
        out.append(f'<text x="{left + 15}" y="{y + 9}">{escape(algo)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def emit_results(table: ResultsTable, out_dir: str | Path, formats: Sequence[str] = ("csv", "svg")) -> list[Path]:
    if not table.rows:
        raise ValueError("results table is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(write_csv(table, out_dir / "results.csv"))
    if "svg" in formats:
        for metric in ("percent_reward", "accuracy"):
            path = out_dir / f"{metric}.svg"
            path.write_text(render_svg(table, metric))
            written.append(path)
    errors = [r for r in table.rows if r.error]
    if errors:
        path = out_dir / "errors.json"
        path.write_text(json.dumps([asdict(r) for r in errors], indent=1))
        written.append(path)
    return written
