"""Differentiable planners mapping (world, reward) to per-cell action logits.

Two planners share one interface: a learnable value iteration network and an
exact soft value iteration that uses the true dynamics as constants.  Both
build into a :class:`~biased_irl.tensor_graph.Graph` whose ``reward`` leaf can
be trained, which is what reward inference differentiates through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid_mdp import DELTAS, N_ACTIONS, WorldModel
from .tensor_graph import Graph, Parameters

VIN_LAYERS = ("proxy0", "proxy0_bias", "proxy1", "recur", "head")


@dataclass(frozen=True)
class VINConfig:
    proxy_channels: int = 16
    proxy_out: int = 1
    q_channels: int = 8
    iterations: int = 10
    proxy_kernel: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.proxy_kernel < 1 or self.proxy_kernel % 2 == 0:
            raise ValueError("proxy_kernel must be a positive odd number")


@dataclass(frozen=True)
class SoftVIConfig:
    depth: int = 20
    gamma: float = 0.9
    tau: float = 1.0

    def __post_init__(self):
        if self.depth < 1 or self.tau <= 0:
            raise ValueError("need depth >= 1 and tau > 0")


def init_vin_params(cfg: VINConfig = VINConfig(), seed: int = 0) -> Parameters:
    rng = np.random.default_rng(seed)
    k = cfg.proxy_kernel

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    return {
        "proxy0": he((cfg.proxy_channels, 2, k, k)),
        "proxy0_bias": np.zeros((1, cfg.proxy_channels, 1, 1)),
        "proxy1": he((cfg.proxy_out, cfg.proxy_channels, k, k)),
        "recur": he((cfg.q_channels, cfg.proxy_out + 1, 3, 3)),
        "head": he((N_ACTIONS, cfg.q_channels, 1, 1)),
    }


def check_vin_params(params: Parameters, cfg: VINConfig) -> None:
    expected = {k: v.shape for k, v in init_vin_params(cfg).items()}
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            got = None if name not in params else params[name].shape
            raise ValueError(f"VIN parameter {name!r}: expected {shape}, got {got}")


def shift_filters() -> np.ndarray:
    """``(5, 1, 3, 3)`` one-hot filters; channel d reads the neighbour at ``DELTAS[d]``."""
    f = np.zeros((N_ACTIONS, 1, 3, 3))
    for d, (dx, dy) in enumerate(DELTAS):
        f[d, 0, 1 + dy, 1 + dx] = 1.0
    return f


def build_vin(g: Graph, reward: int, walls: int, cfg: VINConfig, trainable: bool = True) -> int:
    """Add a VIN to ``g``; parameter leaves are named after :data:`VIN_LAYERS`."""
    w = {name: g.leaf(name, trainable=trainable) for name in VIN_LAYERS}
    x = g.concat(reward, walls)
    h = g.add(g.conv2d(x, w["proxy0"]), w["proxy0_bias"])
    proxy = g.conv2d(h, w["proxy1"])
    v = g.leaf("v0")
    q = None
    for _ in range(cfg.iterations):
        q = g.conv2d(g.concat(proxy, v), w["recur"])
        v = g.channel_max(q)
    return g.conv2d(q, w["head"])


def build_soft_vi(g: Graph, reward: int, probs: int, cfg: SoftVIConfig) -> int:
    """Add soft value iteration to ``g``; returns ``Q_depth / tau``."""
    shifts = g.leaf("shifts", shift_filters())
    # Q_1(s, a) = r(s) for every action
    q = g.mul(reward, g.leaf("ones", np.ones((1, N_ACTIONS, 1, 1))))
    for _ in range(cfg.depth - 1):
        v = g.scale(g.channel_logsumexp(g.scale(q, 1.0 / cfg.tau)), cfg.tau)
        nbr = g.conv2d(v, shifts)
        q = g.add(reward, g.scale(g.expect(probs, nbr), cfg.gamma))
    return g.scale(q, 1.0 / cfg.tau)


def imitation_loss(g: Graph, logits: int, target: int, mask: int) -> int:
    """Mean cross-entropy over non-wall cells (per entry), averaged over the batch."""
    return g.masked_mean(g.softmax_xent(logits, target), mask)


def policy_to_channels(policy: np.ndarray) -> np.ndarray:
    """``(..., H, W, 5)`` -> ``(..., 5, H, W)``."""
    return np.moveaxis(np.asarray(policy, dtype=float), -1, -3)


def softmax_policy(logits: np.ndarray) -> np.ndarray:
    """Batch of ``(B, 5, H, W)`` logits to ``(B, H, W, 5)`` probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return np.moveaxis(e / e.sum(axis=1, keepdims=True), 1, -1)


class VINPlanner:
    kind = "vin"

    def __init__(self, cfg: VINConfig = VINConfig(), params: Parameters | None = None):
        self.cfg = cfg
        self.params = params
        if params is not None:
            check_vin_params(params, cfg)

    def with_params(self, params: Parameters) -> "VINPlanner":
        return VINPlanner(self.cfg, params)

    def build(self, g: Graph, reward: int, train_params: bool = False) -> int:
        walls = g.leaf("walls")
        return build_vin(g, reward, walls, self.cfg, trainable=train_params)

    def bindings(self, worlds: Sequence[WorldModel]) -> dict[str, np.ndarray]:
        walls = np.stack([w.walls for w in worlds]).astype(float)[:, None]
        out = {"walls": walls, "v0": np.zeros_like(walls)}
        if self.params is not None:
            out.update(self.params)
        return out


class SoftVIPlanner:
    kind = "soft_vi"
    params = None

    def __init__(self, cfg: SoftVIConfig = SoftVIConfig()):
        self.cfg = cfg

    def build(self, g: Graph, reward: int, train_params: bool = False) -> int:
        if train_params:
            raise ValueError("soft value iteration has no trainable parameters")
        return build_soft_vi(g, reward, g.leaf("probs"), self.cfg)

    def bindings(self, worlds: Sequence[WorldModel]) -> dict[str, np.ndarray]:
        return {"probs": np.stack([w.displacement_probs for w in worlds])}


@dataclass
class LossGraph:
    """A planner graph over a fixed batch size with its imitation and L2 losses."""

    graph: Graph
    logits: int
    data_loss: int
    loss: int
    batch: int


def build_loss_graph(planner, batch: int, l2: float = 0.0, train_params: bool = False,
                     train_reward: bool = False) -> LossGraph:
    g = Graph()
    reward = g.leaf("reward", trainable=train_reward)
    logits = planner.build(g, reward, train_params=train_params)
    data = imitation_loss(g, logits, g.leaf("target"), g.leaf("mask"))
    loss = data
    if train_params and l2 > 0:
        penalty = None
        for name in VIN_LAYERS:
            sq = g.sum_squares(g.leaves[name])
            penalty = sq if penalty is None else g.add(penalty, sq)
        loss = g.add(data, g.scale(penalty, l2))
    return LossGraph(g, logits, data, loss, batch)


def batch_bindings(planner, worlds: Sequence[WorldModel], rewards: np.ndarray,
                   policies: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Leaf values for a batch; ``rewards`` is ``(B, H, W)`` and ``policies`` ``(B, H, W, 5)``."""
    out = planner.bindings(worlds)
    out["reward"] = np.asarray(rewards, dtype=float)[:, None]
    walls = np.stack([w.walls for w in worlds])
    out["mask"] = (~walls).astype(float)
    if policies is not None:
        out["target"] = policy_to_channels(policies)
    return out


def planner_logits(planner, worlds: Sequence[WorldModel], rewards: np.ndarray) -> np.ndarray:
    """Forward pass only: ``(B, 5, H, W)`` logits for a batch of worlds."""
    g = Graph()
    reward = g.leaf("reward")
    logits = planner.build(g, reward)
    b = batch_bindings(planner, worlds, rewards)
    b.pop("mask")
    g.forward(b)
    return g.value(logits)


def vin_forward(params: Parameters, world: WorldModel, reward: np.ndarray,
                cfg: VINConfig = VINConfig()) -> tuple[Graph, int]:
    """Build and evaluate a single-world VIN graph; returns it and the logits node."""
    planner = VINPlanner(cfg, params)
    g = Graph()
    reward_leaf = g.leaf("reward", trainable=True)
    logits = planner.build(g, reward_leaf)
    b = batch_bindings(planner, [world], np.asarray(reward)[None])
    b.pop("mask")
    g.forward(b)
    return g, logits


def soft_value_iteration(world: WorldModel, reward: np.ndarray,
                         cfg: SoftVIConfig = SoftVIConfig()) -> tuple[Graph, int]:
    planner = SoftVIPlanner(cfg)
    g = Graph()
    reward_leaf = g.leaf("reward", trainable=True)
    logits = planner.build(g, reward_leaf)
    b = batch_bindings(planner, [world], np.asarray(reward)[None])
    b.pop("mask")
    g.forward(b)
    return g, logits
