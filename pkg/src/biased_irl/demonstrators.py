"""Exact planners for the optimal and systematically biased demonstrators.

Every planner returns a ``(height, width, 5)`` Q-table; :func:`action_selection`
turns it into a policy.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .grid_mdp import N_ACTIONS, WorldModel

KINDS = ("optimal", "naive", "sophisticated", "myopic", "overconfident", "underconfident")
NOISES = ("argmax", "boltzmann")


@dataclass(frozen=True)
class BiasSpec:
    kind: str = "optimal"
    noise: str = "argmax"
    beta: float | None = None
    k: float | None = None
    myopic_horizon: int | None = None
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown demonstrator kind {self.kind!r}")
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise mode {self.noise!r}")
        needs = {
            "k": self.kind in ("naive", "sophisticated"),
            "myopic_horizon": self.kind == "myopic",
            "alpha": self.kind in ("overconfident", "underconfident"),
            "beta": self.noise == "boltzmann",
        }
        for name, required in needs.items():
            present = getattr(self, name) is not None
            if required != present:
                raise ValueError(f"{name} must {'' if required else 'not '}be set for {self.name}")
        if self.k is not None and self.k < 0:
            raise ValueError("k must be >= 0")
        if self.myopic_horizon is not None and self.myopic_horizon < 1:
            raise ValueError("myopic_horizon must be positive")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.kind == "overconfident" and not self.alpha > 1:
            raise ValueError("overconfident requires alpha > 1")
        if self.kind == "underconfident" and not 0 < self.alpha < 1:
            raise ValueError("underconfident requires 0 < alpha < 1")

    @classmethod
    def make(cls, kind: str, noise: str = "argmax", **overrides) -> "BiasSpec":
        """Build a spec filling in the default parameters for ``kind``."""
        params: dict = {}
        if kind in ("naive", "sophisticated"):
            params["k"] = 1.0
        elif kind == "myopic":
            params["myopic_horizon"] = 6
        elif kind == "overconfident":
            params["alpha"] = 2.0
        elif kind == "underconfident":
            params["alpha"] = 0.5
        if noise == "boltzmann":
            params["beta"] = 1.0
        params.update(overrides)
        return cls(kind=kind, noise=noise, **params)

    @property
    def name(self) -> str:
        return self.kind if self.noise == "argmax" else f"boltzmann-{self.kind}"

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_json(cls, d: dict) -> "BiasSpec":
        return cls(**d)

    def key(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def all_demonstrators() -> list[BiasSpec]:
    """The twelve demonstrators: six kinds, each with argmax and Boltzmann noise."""
    return [BiasSpec.make(kind, noise) for noise in NOISES for kind in KINDS]


def _transitions(world: WorldModel) -> np.ndarray:
    return world.transition_matrix


def _as_table(world: WorldModel, q: np.ndarray) -> np.ndarray:
    return q.reshape(world.height, world.width, N_ACTIONS)


def value_iteration(world: WorldModel, reward: np.ndarray, depth: int, gamma: float) -> np.ndarray:
    """Depth-limited Q-values: ``Q_d = r + gamma * T max Q_{d-1}`` with ``Q_0 = 0``."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    T = _transitions(world)
    r = np.asarray(reward, dtype=float).ravel()
    V = np.zeros(world.n_cells)
    for _ in range(depth):
        Q = r[:, None] + gamma * (T @ V)
        V = Q.max(axis=1)
    return _as_table(world, Q)


def distort_transitions(world: WorldModel, alpha: float) -> WorldModel:
    """World whose transition distributions are sharpened (``alpha > 1``) or flattened.

    Only for planning: the real dynamics stay those of ``world``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    P = np.array(world.displacement_probs)
    with np.errstate(divide="ignore"):
        powered = np.where(P > 0, P ** alpha, 0.0)
    powered /= powered.sum(axis=1, keepdims=True)
    return replace(world, move_probs=powered)


def hyperbolic_discount(k: float, delay: np.ndarray | int) -> np.ndarray:
    return 1.0 / (1.0 + k * np.asarray(delay, dtype=float))


def hyperbolic_q(world: WorldModel, reward: np.ndarray, k: float, depth: int, mode: str) -> np.ndarray:
    """t=0 Q-values of a hyperbolic discounter planning ``depth`` steps ahead.

    ``naive``: the agent optimises its current discounted objective as if its
    future selves will follow through.  ``sophisticated``: each future self
    with ``n`` steps left picks its own argmax, and earlier selves evaluate
    those fixed choices under their own discount.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if k < 0:
        raise ValueError("k must be >= 0")
    T = _transitions(world)
    r = np.asarray(reward, dtype=float).ravel()
    n = world.n_cells
    d = hyperbolic_discount(k, np.arange(depth))
    if mode == "naive":
        V = np.zeros(n)
        for t in reversed(range(depth)):
            Q = d[t] * r[:, None] + T @ V
            V = Q.max(axis=1)
        return _as_table(world, Q)
    if mode != "sophisticated":
        raise ValueError(f"unknown mode {mode!r}")
    # U[j] = value, at delay offset j, of following the committed future selves
    U = np.zeros((depth + 1, n))
    rows = np.arange(n)
    for steps_left in range(1, depth + 1):
        Q = d[0] * r[:, None] + T @ U[1]
        choice = Q.argmax(axis=1)
        T_pi = T[rows, choice]
        # the self with ``steps_left`` steps, seen from an earlier self at offset j
        U_new = np.zeros_like(U)
        for j in range(0, depth - steps_left + 1):
            U_new[j] = d[j] * r + T_pi @ U[j + 1]
        U = U_new
    return _as_table(world, Q)


def action_selection(q: np.ndarray, noise: str, beta: float | None = None) -> np.ndarray:
    """Argmax (ties to the lowest action index) or Boltzmann policy from Q."""
    q = np.asarray(q, dtype=float)
    if noise == "argmax":
        pi = np.zeros_like(q)
        np.put_along_axis(pi, q.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return pi
    if noise == "boltzmann":
        z = (1.0 if beta is None else beta) * q
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown noise mode {noise!r}")


def demonstrator_q(spec: BiasSpec, world: WorldModel, reward: np.ndarray, gamma: float = 0.9) -> np.ndarray:
    H = world.horizon
    if spec.kind == "optimal":
        return value_iteration(world, reward, H, gamma)
    if spec.kind == "myopic":
        if spec.myopic_horizon > H:
            raise ValueError("myopic_horizon exceeds the world horizon")
        return value_iteration(world, reward, spec.myopic_horizon, gamma)
    if spec.kind in ("overconfident", "underconfident"):
        return value_iteration(distort_transitions(world, spec.alpha), reward, H, gamma)
    return hyperbolic_q(world, reward, spec.k, H, spec.kind)


def demonstrator_policy(spec: BiasSpec, world: WorldModel, reward: np.ndarray, gamma: float = 0.9) -> np.ndarray:
    pi = action_selection(demonstrator_q(spec, world, reward, gamma), spec.noise, spec.beta)
    pi[world.walls] = 1.0 / N_ACTIONS
    return pi


def rollout(world: WorldModel, policy: np.ndarray, steps: int, rng: np.random.Generator | None = None,
            start=None) -> list[tuple[int, int]]:
    """Sample a trajectory under the true dynamics; deterministic if both are."""
    rng = rng or np.random.default_rng(0)
    cell = world.start if start is None else tuple(start)
    T = world.transition_matrix
    path = [cell]
    for _ in range(steps):
        s = world.index(cell)
        p = policy[cell[1], cell[0]]
        a = int(p.argmax()) if p.max() == 1.0 else int(rng.choice(N_ACTIONS, p=p))
        nxt = T[s, a]
        s2 = int(nxt.argmax()) if nxt.max() == 1.0 else int(rng.choice(world.n_cells, p=nxt))
        cell = world.coord(s2)
        path.append(cell)
    return path
