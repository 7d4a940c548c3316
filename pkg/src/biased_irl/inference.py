"""Training primitives and the two reward-inference algorithms.

``train_planner`` fits planner weights to (world, reward, policy) triples,
``train_reward`` inverts a frozen planner to per-task rewards, and
``train_jointly`` does both at once (or alternately).  ``algorithm1`` uses
tasks with known rewards to learn the planner first; ``algorithm2`` has no
known rewards and instead starts from a planner trained to imitate a
simulated optimal agent.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .demonstrators import BiasSpec, demonstrator_policy
from .diff_planners import (
    LossGraph,
    SoftVIConfig,
    SoftVIPlanner,
    VINConfig,
    VINPlanner,
    VIN_LAYERS,
    batch_bindings,
    build_loss_graph,
    init_vin_params,
)
from .grid_mdp import Dataset, Entry, GridConfig, generate_gridworld
from .tensor_graph import NonFiniteError, OptimState, Parameters, adam_step, load_parameters, save_parameters

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    planner_epochs: int = 30
    reward_epochs: int = 30
    joint_epochs: int = 50
    batch_size: int = 32
    planner_lr: float = 1e-2
    reward_lr: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-4
    schedule: str = "joint"
    init: str = "optimal_sim"
    n_sim: int = 7000
    sim_noise: str = "boltzmann"
    gamma: float = 0.9
    seed: int = 0
    vin: VINConfig = VINConfig()

    def __post_init__(self):
        if self.schedule not in ("joint", "coordinate"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.init not in ("optimal_sim", "none"):
            raise ValueError(f"unknown init {self.init!r}")
        counts = (self.planner_epochs, self.reward_epochs, self.joint_epochs, self.batch_size, self.n_sim)
        if min(counts) < 1 or min(self.planner_lr, self.reward_lr) <= 0 or self.l2 < 0:
            raise ValueError("counts and learning rates must be positive")


@dataclass
class InferenceResult:
    rewards: list[np.ndarray]
    params: Parameters | None
    trace: list[tuple[int, str, float]] = field(default_factory=list)
    planner: str = "vin"


def save_result(result: InferenceResult, out_dir: str | Path) -> Path:
    """Planner checkpoint, one reward grid per entry and the loss trace, under ``out_dir``."""
    out = Path(out_dir)
    (out / "rewards").mkdir(parents=True, exist_ok=True)
    if result.params is not None:
        save_parameters(result.params, out / "planner.json")
    for i, r in enumerate(result.rewards):
        (out / "rewards" / f"{i:05d}.json").write_text(json.dumps(np.asarray(r).tolist()))
    with (out / "trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "stage", "loss"))
        w.writerows((e, s, repr(l)) for e, s, l in result.trace)
    (out / "meta.json").write_text(json.dumps({"planner": result.planner, "n_rewards": len(result.rewards)}))
    return out


def load_result(out_dir: str | Path) -> InferenceResult:
    out = Path(out_dir)
    meta = json.loads((out / "meta.json").read_text())
    params = load_parameters(out / "planner.json") if (out / "planner.json").exists() else None
    rewards = [np.array(json.loads((out / "rewards" / f"{i:05d}.json").read_text()), dtype=float)
               for i in range(meta["n_rewards"])]
    with (out / "trace.csv").open(newline="") as fh:
        trace = [(int(r["epoch"]), r["stage"], float(r["loss"])) for r in csv.DictReader(fh)]
    return InferenceResult(rewards, params, trace, meta["planner"])


def _optim(cfg: TrainConfig, lr: float) -> OptimState:
    return OptimState(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


class _GraphCache:
    """One loss graph per batch size (the last minibatch may be short)."""

    def __init__(self, planner, l2: float, train_params: bool, train_reward: bool):
        self.args = (planner, l2, train_params, train_reward)
        self.graphs: dict[int, LossGraph] = {}

    def __call__(self, batch: int) -> LossGraph:
        if batch not in self.graphs:
            planner, l2, tp, tr = self.args
            self.graphs[batch] = build_loss_graph(planner, batch, l2=l2, train_params=tp, train_reward=tr)
        return self.graphs[batch]


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _evaluate(lg: LossGraph, bindings: dict, wrt: Sequence[str], stage: str, epoch: int):
    try:
        lg.graph.forward(bindings)
    except NonFiniteError as exc:
        raise TrainingError(f"{stage}: non-finite loss at epoch {epoch}") from exc
    return float(lg.graph.value(lg.data_loss)), lg.graph.backward(lg.loss, wrt=wrt)


def _policies(data: Sequence[Entry]) -> np.ndarray:
    if any(e.policy is None for e in data):
        raise ValueError("every entry needs a demonstrator policy")
    return np.stack([e.policy for e in data])


def _known_rewards(data: Sequence[Entry]) -> np.ndarray:
    if any(not e.reward_known or e.reward is None for e in data):
        raise ValueError("train_planner needs entries with known rewards")
    return np.stack([e.reward for e in data])


def _planner_for(planner_or_params, cfg: TrainConfig):
    if isinstance(planner_or_params, dict):
        return VINPlanner(cfg.vin, planner_or_params)
    return planner_or_params


def _planner_epoch(lgs: _GraphCache, planner: VINPlanner, params: Parameters, state: OptimState,
                   worlds, rewards, policies, cfg: TrainConfig, rng, epoch: int):
    losses = []
    for idx in _batches(len(worlds), cfg.batch_size, rng):
        lg = lgs(len(idx))
        b = batch_bindings(planner, [worlds[i] for i in idx], rewards[idx], policies[idx])
        b.update(params)
        loss, grads = _evaluate(lg, b, VIN_LAYERS, "train_planner", epoch)
        params, state = adam_step(params, grads, state)
        losses.append(loss * len(idx))
    return params, state, sum(losses) / len(worlds)


def train_planner(data: Sequence[Entry], init: Parameters, cfg: TrainConfig,
                  trace: list | None = None, epochs: int | None = None) -> Parameters:
    """Fit VIN weights to demonstrations with known rewards; rewards stay fixed."""
    worlds = [e.world for e in data]
    rewards, policies = _known_rewards(data), _policies(data)
    planner = VINPlanner(cfg.vin, init)
    lgs = _GraphCache(planner, cfg.l2, train_params=True, train_reward=False)
    params = {k: np.array(v) for k, v in init.items()}
    state = _optim(cfg, cfg.planner_lr)
    rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(epochs or cfg.planner_epochs):
        params, state, loss = _planner_epoch(lgs, planner, params, state, worlds, rewards, policies, cfg, rng, epoch)
        if trace is not None:
            trace.append((epoch, "planner", loss))
    return params


def _reward_epoch(lgs: _GraphCache, planner, rewards: dict, state: OptimState, worlds, policies,
                  cfg: TrainConfig, epoch: int, rng=None, params: Parameters | None = None):
    losses = []
    for idx in _batches(len(worlds), cfg.batch_size, rng):
        lg = lgs(len(idx))
        r = np.stack([rewards[i] for i in idx])
        b = batch_bindings(planner, [worlds[i] for i in idx], r, policies[idx])
        if params is not None:
            b.update(params)
        loss, grads = _evaluate(lg, b, ["reward"], "train_reward", epoch)
        g = grads["reward"][:, 0]
        rewards, state = adam_step(rewards, {i: g[n] for n, i in enumerate(idx)}, state)
        losses.append(loss * len(idx))
    return rewards, state, sum(losses) / len(worlds)


def train_reward(data: Sequence[Entry], params, cfg: TrainConfig, trace: list | None = None,
                 init_rewards: np.ndarray | None = None, epochs: int | None = None) -> list[np.ndarray]:
    """Invert a frozen planner: per-entry rewards minimising the imitation loss.

    ``params`` is either VIN weights or a planner object (e.g. soft value
    iteration).  Each entry's reward is its own Adam parameter and gets one
    update per epoch; entries never interact.
    """
    if not len(data):
        return []
    planner = _planner_for(params, cfg)
    worlds = [e.world for e in data]
    policies = _policies(data)
    shape = worlds[0].shape
    start = np.zeros((len(data),) + shape) if init_rewards is None else np.asarray(init_rewards, dtype=float)
    rewards = {i: start[i].copy() for i in range(len(data))}
    lgs = _GraphCache(planner, 0.0, train_params=False, train_reward=True)
    state = _optim(cfg, cfg.reward_lr)
    for epoch in range(epochs or cfg.reward_epochs):
        rewards, state, loss = _reward_epoch(lgs, planner, rewards, state, worlds, policies, cfg, epoch)
        if trace is not None:
            trace.append((epoch, "reward", loss))
    return [_mask_walls(rewards[i], worlds[i]) for i in range(len(data))]


def _mask_walls(reward: np.ndarray, world) -> np.ndarray:
    out = np.array(reward, dtype=float)
    out[world.walls] = 0.0
    return out


def train_jointly(data: Sequence[Entry], init_params: Parameters, init_rewards: Sequence[np.ndarray],
                  cfg: TrainConfig, trace: list | None = None) -> tuple[Parameters, list[np.ndarray]]:
    """Fit planner weights and all rewards together on the summed imitation loss.

    With ``cfg.schedule == "coordinate"`` a full planner epoch and a full
    reward epoch alternate instead of sharing each minibatch step.
    """
    worlds = [e.world for e in data]
    policies = _policies(data)
    planner = VINPlanner(cfg.vin, init_params)
    params = {k: np.array(v) for k, v in init_params.items()}
    rewards = {i: np.array(r, dtype=float) for i, r in enumerate(init_rewards)}
    p_state, r_state = _optim(cfg, cfg.planner_lr), _optim(cfg, cfg.reward_lr)
    rng = np.random.default_rng([cfg.seed, 2])
    if cfg.schedule == "coordinate":
        p_graphs = _GraphCache(planner, cfg.l2, train_params=True, train_reward=False)
        r_graphs = _GraphCache(planner, 0.0, train_params=False, train_reward=True)
        for epoch in range(cfg.joint_epochs):
            r = np.stack([rewards[i] for i in range(len(data))])
            params, p_state, _ = _planner_epoch(p_graphs, planner, params, p_state, worlds, r, policies,
                                                cfg, rng, epoch)
            rewards, r_state, loss = _reward_epoch(r_graphs, planner, rewards, r_state, worlds, policies,
                                                   cfg, epoch, params=params)
            if trace is not None:
                trace.append((epoch, "coordinate", loss))
    else:
        lgs = _GraphCache(planner, cfg.l2, train_params=True, train_reward=True)
        wrt = list(VIN_LAYERS) + ["reward"]
        for epoch in range(cfg.joint_epochs):
            losses = []
            for idx in _batches(len(data), cfg.batch_size, rng):
                lg = lgs(len(idx))
                r = np.stack([rewards[i] for i in idx])
                b = batch_bindings(planner, [worlds[i] for i in idx], r, policies[idx])
                b.update(params)
                loss, grads = _evaluate(lg, b, wrt, "train_jointly", epoch)
                g = grads.pop("reward")[:, 0]
                params, p_state = adam_step(params, grads, p_state)
                rewards, r_state = adam_step(rewards, {i: g[n] for n, i in enumerate(idx)}, r_state)
                losses.append(loss * len(idx))
            if trace is not None:
                trace.append((epoch, "joint", sum(losses) / len(data)))
    return params, [_mask_walls(rewards[i], worlds[i]) for i in range(len(data))]


def simulate_optimal_dataset(n: int, grid: GridConfig, seed: int, noise: str = "boltzmann",
                             beta: float = 1.0) -> Dataset:
    """``n`` fresh worlds with an optimal demonstrator's policy; rewards known."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = BiasSpec.make("optimal", noise, **({"beta": beta} if noise == "boltzmann" else {}))
    seeds = np.random.SeedSequence([seed, 7]).generate_state(n, dtype=np.uint32)
    entries = []
    for s in seeds:
        world, reward = generate_gridworld(int(s), grid)
        entries.append(Entry(world, reward, demonstrator_policy(spec, world, reward, grid.gamma), True))
    return Dataset(entries)


def pretrain_optimal_planner(grid: GridConfig, cfg: TrainConfig, noise: str | None = None,
                             trace: list | None = None) -> Parameters:
    """Planner trained to imitate a simulated optimal agent (the initialisation stage of algorithm 2)."""
    sim = simulate_optimal_dataset(cfg.n_sim, grid, cfg.seed, noise or cfg.sim_noise)
    return train_planner(sim, init_vin_params(cfg.vin, cfg.seed), cfg, trace)


def algorithm1(known: Sequence[Entry], unknown: Sequence[Entry], cfg: TrainConfig) -> InferenceResult:
    """Learn the planner on tasks with known rewards, then invert it on the rest."""
    if any(e.reward_known for e in unknown):
        raise ValueError("unknown entries must not carry known rewards")
    trace: list = []
    params = train_planner(known, init_vin_params(cfg.vin, cfg.seed), cfg, trace)
    rewards = train_reward(unknown, params, cfg, trace)
    return InferenceResult(rewards, params, trace)


def algorithm2(data: Sequence[Entry], cfg: TrainConfig, grid: GridConfig | None = None,
               init_params: Parameters | None = None) -> InferenceResult:
    """Joint (or coordinate) inference with no known rewards.

    With ``cfg.init == "optimal_sim"`` the planner starts from imitation of a
    simulated optimal agent (pass ``init_params`` to reuse one) and rewards
    start from inverting it.  With ``"none"`` training starts from random
    weights and zero rewards.
    """
    if any(e.reward_known for e in data):
        raise ValueError("algorithm2 takes entries without known rewards")
    trace: list = []
    if cfg.init == "optimal_sim":
        if init_params is None:
            if grid is None:
                raise ValueError("grid config needed to simulate optimal demonstrations")
            init_params = pretrain_optimal_planner(grid, cfg, trace=trace)
        init_rewards = train_reward(data, init_params, cfg, trace)
    else:
        init_params = init_vin_params(cfg.vin, cfg.seed)
        init_rewards = [np.zeros(e.world.shape) for e in data]
    params, rewards = train_jointly(data, init_params, init_rewards, cfg, trace)
    return InferenceResult(rewards, params, trace)


def assumed_model_inference(data: Sequence[Entry], cfg: TrainConfig, planner_params: Parameters) -> InferenceResult:
    """Invert a planner trained on an assumed demonstrator model (optimal or Boltzmann)."""
    trace: list = []
    return InferenceResult(train_reward(data, planner_params, cfg, trace), planner_params, trace)


def soft_vi_inference(data: Sequence[Entry], cfg: TrainConfig, horizon: int | None = None,
                      tau: float = 1.0) -> InferenceResult:
    """Reward inference through exact soft value iteration instead of a VIN."""
    if not len(data):
        return InferenceResult([], None, [], planner="soft_vi")
    planner = SoftVIPlanner(SoftVIConfig(depth=horizon or data[0].world.horizon, gamma=cfg.gamma, tau=tau))
    trace: list = []
    return InferenceResult(train_reward(data, planner, cfg, trace), None, trace, planner="soft_vi")
