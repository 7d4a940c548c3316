"""Gridworld world models: generation, slippery transitions, exact policy evaluation.

Coordinates are ``(x, y)`` = (column, row) with the origin at the top-left.
Per-cell arrays are indexed ``[y, x]`` (row-major).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ACTIONS = ("North", "South", "East", "West", "Stay")
N_ACTIONS = len(ACTIONS)
STAY = 4
# (dx, dy) per action; index order is global and drives every tie-break.
DELTAS = ((0, -1), (0, 1), (1, 0), (-1, 0), (0, 0))
# the two orthogonal slip directions of each movement action
_ORTHOGONAL = {0: (2, 3), 1: (2, 3), 2: (0, 1), 3: (0, 1)}

Coord = tuple[int, int]


class GenerationError(RuntimeError):
    """Rejection sampling ran out of attempts."""


@dataclass(frozen=True, eq=False)
class WorldModel:
    """A gridworld minus its reward: layout, slip dynamics and horizon.

    ``move_probs`` overrides the slip-derived dynamics; it is only set on
    worlds produced for planning with distorted beliefs.
    """

    width: int
    height: int
    walls: np.ndarray
    start: Coord
    slip_prob: float = 0.2
    horizon: int = 20
    move_probs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        if walls.shape != (self.height, self.width):
            raise ValueError(f"walls shape {walls.shape} != {(self.height, self.width)}")
        walls = walls.copy()
        walls.setflags(write=False)
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "start", (int(self.start[0]), int(self.start[1])))
        x, y = self.start
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"start {self.start} outside grid")
        if walls[y, x]:
            raise ValueError("start cell is a wall")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise ValueError("slip_prob must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def index(self, cell: Coord) -> int:
        return cell[1] * self.width + cell[0]

    def coord(self, index: int) -> Coord:
        return (index % self.width, index // self.width)

    def is_open(self, cell: Coord) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    @cached_property
    def displacement_probs(self) -> np.ndarray:
        """Array ``P[a, d, y, x]``: chance that action ``a`` moves by ``DELTAS[d]``.

        Blocked moves are already folded into the Stay displacement, so each
        displacement with nonzero mass is a distinct successor cell.
        """
        if self.move_probs is not None:
            return self.move_probs
        P = np.zeros((N_ACTIONS, N_ACTIONS, self.height, self.width))
        for y in range(self.height):
            for x in range(self.width):
                if self.walls[y, x]:
                    P[:, STAY, y, x] = 1.0
                    continue
                for a in range(N_ACTIONS):
                    for d, p in _intended_outcomes(a, self.slip_prob):
                        dx, dy = DELTAS[d]
                        target = d if self.is_open((x + dx, y + dy)) else STAY
                        P[a, target, y, x] += p
        P.setflags(write=False)
        return P

    @cached_property
    def transition_matrix(self) -> np.ndarray:
        """Dense ``T[s, a, s']`` over flat cell indices."""
        n = self.n_cells
        T = np.zeros((n, N_ACTIONS, n))
        P = self.displacement_probs
        for y in range(self.height):
            for x in range(self.width):
                s = y * self.width + x
                for d, (dx, dy) in enumerate(DELTAS):
                    p = P[:, d, y, x]
                    if not p.any():
                        continue
                    T[s, :, (y + dy) * self.width + (x + dx)] += p
        T.setflags(write=False)
        return T


def _intended_outcomes(action: int, slip_prob: float) -> list[tuple[int, float]]:
    if action == STAY:
        return [(STAY, 1.0)]
    left, right = _ORTHOGONAL[action]
    out = [(action, 1.0 - slip_prob)]
    if slip_prob > 0:
        out += [(left, slip_prob / 2), (right, slip_prob / 2)]
    return out


@dataclass(frozen=True)
class GridConfig:
    width: int = 14
    height: int = 14
    n_nonzero: int = 7
    reward_magnitude: int = 10
    min_top_reward: int = 5
    wall_density: float = 0.25
    slip_prob: float = 0.2
    horizon: int = 20
    gamma: float = 0.9
    max_attempts: int = 1000

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("grids must be at least 3x3")
        if self.n_nonzero < 1:
            raise ValueError("n_nonzero must be >= 1")
        if self.min_top_reward > self.reward_magnitude:
            raise ValueError("min_top_reward exceeds reward_magnitude")


def reachable_from(walls: np.ndarray, start: Coord) -> np.ndarray:
    """Boolean mask of open cells connected to ``start`` (4-neighbourhood BFS)."""
    h, w = walls.shape
    seen = np.zeros_like(walls, dtype=bool)
    sx, sy = start
    if walls[sy, sx]:
        return seen
    seen[sy, sx] = True
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in DELTAS[:4]:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not walls[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                queue.append((nx, ny))
    return seen


def _enough_open(walls: np.ndarray) -> bool:
    return int((~walls).sum()) >= math.ceil(walls.size / 2)


def optimal_start_value(world: WorldModel, reward: np.ndarray, gamma: float) -> float:
    """Expected return from ``start`` of the hard-VI argmax policy."""
    T = world.transition_matrix
    r = np.asarray(reward, dtype=float).ravel()
    V = np.zeros(world.n_cells)
    for _ in range(world.horizon):
        Q = r[:, None] + gamma * (T @ V)
        V = Q.max(axis=1)
    policy = np.zeros((world.n_cells, N_ACTIONS))
    policy[np.arange(world.n_cells), Q.argmax(axis=1)] = 1.0
    return evaluate_policy(world, reward, policy.reshape(world.height, world.width, N_ACTIONS),
                           world.horizon, gamma)


def generate_gridworld(seed: int, cfg: GridConfig = GridConfig()) -> tuple[WorldModel, np.ndarray]:
    """Sample a random world and a sparse integer reward grid.

    Walls are i.i.d. per cell; layouts are rejected until at least half the
    cells are open and enough cells are reachable to hold the rewards.
    Rewards are uniform over ``[-m, m] \\ {0}`` and resampled until one is at
    least ``min_top_reward`` and the optimal return from start is positive.
    """
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    values = np.array([v for v in range(-cfg.reward_magnitude, cfg.reward_magnitude + 1) if v != 0])
    for _ in range(cfg.max_attempts):
        walls = rng.random((h, w)) < cfg.wall_density
        if not _enough_open(walls):
            continue
        open_cells = np.flatnonzero(~walls.ravel())
        s = int(rng.choice(open_cells))
        start = (s % w, s // w)
        reach = reachable_from(walls, start)
        reach[start[1], start[0]] = False
        candidates = np.flatnonzero(reach.ravel())
        if len(candidates) < cfg.n_nonzero:
            continue
        cells = rng.choice(candidates, size=cfg.n_nonzero, replace=False)
        world = WorldModel(w, h, walls, start, cfg.slip_prob, cfg.horizon)
        for _ in range(20):
            vals = rng.choice(values, size=cfg.n_nonzero)
            if vals.max() < cfg.min_top_reward:
                continue
            reward = np.zeros((h, w))
            reward.ravel()[cells] = vals
            if optimal_start_value(world, reward, cfg.gamma) > 1e-6:
                return world, reward
    raise GenerationError(f"no valid gridworld after {cfg.max_attempts} attempts (seed={seed})")


def next_state_distribution(world: WorldModel, cell: Coord, action: int) -> dict[Coord, float]:
    if not world.is_open(cell):
        raise ValueError(f"{cell} is a wall or off-grid")
    x, y = cell
    out: dict[Coord, float] = {}
    P = world.displacement_probs
    for d, (dx, dy) in enumerate(DELTAS):
        p = float(P[action, d, y, x])
        if p > 0:
            key = (x + dx, y + dy)
            out[key] = out.get(key, 0.0) + p
    return out


def evaluate_policy(world: WorldModel, reward: np.ndarray, policy: np.ndarray,
                    horizon: int, gamma: float) -> float:
    """Exact ``sum_t gamma^t E[r(s_t)]`` for ``t < horizon`` starting from ``start``.

    ``policy`` has shape ``(height, width, 5)``; rows at wall cells are ignored.
    """
    T = world.transition_matrix
    pi = np.asarray(policy, dtype=float).reshape(world.n_cells, N_ACTIONS)
    # state-to-state kernel under the policy
    M = np.einsum("sa,sat->st", pi, T)
    r = np.asarray(reward, dtype=float).ravel()
    occ = np.zeros(world.n_cells)
    occ[world.index(world.start)] = 1.0
    total, disc = 0.0, 1.0
    for _ in range(horizon):
        total += disc * float(occ @ r)
        occ = occ @ M
        disc *= gamma
    return total


def perturb_walls(world: WorldModel, reward: np.ndarray, seed: int,
                  wall_density: float = 0.25, max_attempts: int = 1000) -> WorldModel:
    """Resample the wall layout keeping start and every reward cell open and connected."""
    rng = np.random.default_rng(seed)
    keep = np.asarray(reward) != 0
    keep[world.start[1], world.start[0]] = True
    for _ in range(max_attempts):
        walls = (rng.random(world.shape) < wall_density) & ~keep
        if not _enough_open(walls):
            continue
        if np.all(reachable_from(walls, world.start)[keep]):
            return replace(world, walls=walls, move_probs=None)
    raise GenerationError(f"wall perturbation failed after {max_attempts} attempts")


def check_policy(policy: np.ndarray, world: WorldModel, atol: float = 1e-9) -> None:
    policy = np.asarray(policy)
    if policy.shape != (world.height, world.width, N_ACTIONS):
        raise ValueError(f"policy shape {policy.shape} does not match world")
    open_rows = policy[~world.walls]
    if np.any(open_rows < 0) or np.any(np.abs(open_rows.sum(axis=-1) - 1) > atol):
        raise ValueError("policy rows must be nonnegative and sum to 1")


@dataclass(frozen=True, eq=False)
class Entry:
    world: WorldModel
    reward: np.ndarray | None
    policy: np.ndarray | None
    reward_known: bool = True


class Dataset(list):
    """List of :class:`Entry` sharing grid dimensions."""

    def __init__(self, entries: Iterable[Entry] = ()):
        super().__init__(entries)
        shapes = {e.world.shape for e in self}
        if len(shapes) > 1:
            raise ValueError(f"mixed grid shapes in dataset: {shapes}")

    @property
    def shape(self) -> tuple[int, int] | None:
        return self[0].world.shape if self else None

    def hide_rewards(self) -> "Dataset":
        return Dataset(replace(e, reward_known=False) for e in self)


def entry_to_json(e: Entry) -> dict:
    w = e.world
    return {
        "width": w.width,
        "height": w.height,
        "walls": w.walls.tolist(),
        "start": list(w.start),
        "slip_prob": w.slip_prob,
        "horizon": w.horizon,
        "reward": None if e.reward is None else np.asarray(e.reward, dtype=float).tolist(),
        "policy": None if e.policy is None else np.asarray(e.policy, dtype=float).tolist(),
        "reward_known": bool(e.reward_known),
    }


def entry_from_json(d: dict) -> Entry:
    world = WorldModel(d["width"], d["height"], np.array(d["walls"], dtype=bool),
                       tuple(d["start"]), d["slip_prob"], d["horizon"])
    reward = None if d.get("reward") is None else np.array(d["reward"], dtype=float)
    policy = None if d.get("policy") is None else np.array(d["policy"], dtype=float)
    return Entry(world, reward, policy, bool(d["reward_known"]))


def save_dataset(data: Sequence[Entry], path: str | Path) -> None:
    Path(path).write_text(json.dumps([entry_to_json(e) for e in data]))


def load_dataset(path: str | Path) -> Dataset:
    return Dataset(entry_from_json(d) for d in json.loads(Path(path).read_text()))
