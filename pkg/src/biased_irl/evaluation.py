"""Percent-of-maximum reward and action-prediction accuracy."""

from __future__ import annotations

import numpy as np

from .demonstrators import BiasSpec, action_selection, demonstrator_policy, value_iteration
from .diff_planners import planner_logits
from .grid_mdp import WorldModel, evaluate_policy, perturb_walls


def optimal_argmax_policy(world: WorldModel, reward: np.ndarray, horizon: int, gamma: float) -> np.ndarray:
    return action_selection(value_iteration(world, reward, horizon, gamma), "argmax")


def reward_obtained(world: WorldModel, true_reward: np.ndarray, inferred_reward: np.ndarray,
                    gamma: float = 0.9, horizon: int | None = None) -> tuple[float, float]:
    """(true return of the policy optimal for ``inferred_reward``, true optimal return)."""
    horizon = horizon or world.horizon
    best = evaluate_policy(world, true_reward, optimal_argmax_policy(world, true_reward, horizon, gamma),
                           horizon, gamma)
    if best <= 0:
        raise ValueError(f"optimal return {best} is not positive; world violates generation invariants")
    got = evaluate_policy(world, true_reward, optimal_argmax_policy(world, inferred_reward, horizon, gamma),
                          horizon, gamma)
    return got, best


def percent_reward_obtained(world: WorldModel, true_reward: np.ndarray, inferred_reward: np.ndarray,
                            gamma: float = 0.9, horizon: int | None = None) -> float:
    """True return of the policy optimal for ``inferred_reward``, as % of the true optimum."""
    got, best = reward_obtained(world, true_reward, inferred_reward, gamma, horizon)
    return 100.0 * (got / best)


def pooled_percent(pairs) -> float:
    """Percent of the total optimal return collected over a set of worlds.

    Pooling before dividing keeps worlds whose optimum is barely positive from
    dominating the score, as they would in a mean of per-world ratios.
    """
    got, best = np.asarray(list(pairs), dtype=float).reshape(-1, 2).sum(axis=0)
    return 100.0 * (got / best)


def argmax_agreement(pred_logits: np.ndarray, demo_policy: np.ndarray, world: WorldModel) -> float:
    """Fraction of open cells where both argmaxes (lowest index on ties) coincide.

    ``pred_logits`` is ``(5, H, W)``; ``demo_policy`` is ``(H, W, 5)``.
    """
    pred = np.asarray(pred_logits).argmax(axis=0)
    demo = np.asarray(demo_policy).argmax(axis=-1)
    return float(np.mean((pred == demo)[~world.walls]))


def perturbed_targets(demonstrator: BiasSpec, base_world: WorldModel, true_reward: np.ndarray,
                      n_perturbations: int = 10, seed: int = 0, gamma: float = 0.9,
                      wall_density: float = 0.25) -> tuple[list[WorldModel], list[np.ndarray]]:
    """Wall-perturbed copies of ``base_world`` and the demonstrator's policy on each."""
    seeds = np.random.SeedSequence([seed, 11]).generate_state(n_perturbations, dtype=np.uint32)
    worlds = [perturb_walls(base_world, true_reward, int(s), wall_density) for s in seeds]
    return worlds, [demonstrator_policy(demonstrator, w, true_reward, gamma) for w in worlds]


def accuracy_on(planner, inferred_reward: np.ndarray, worlds: list[WorldModel],
                policies: list[np.ndarray]) -> float:
    logits = planner_logits(planner, worlds, np.stack([inferred_reward] * len(worlds)))
    return float(np.mean([argmax_agreement(logits[i], p, w) for i, (w, p) in enumerate(zip(worlds, policies))]))


def action_prediction_accuracy(planner, inferred_reward: np.ndarray, demonstrator: BiasSpec,
                               base_world: WorldModel, true_reward: np.ndarray,
                               n_perturbations: int = 10, seed: int = 0, gamma: float = 0.9,
                               wall_density: float = 0.25) -> float:
    """Mean argmax agreement between planner and demonstrator on wall-perturbed worlds.

    The demonstrator plans with ``true_reward``; the planner sees the inferred one.
    """
    worlds, policies = perturbed_targets(demonstrator, base_world, true_reward, n_perturbations, seed,
                                         gamma, wall_density)
    return accuracy_on(planner, inferred_reward, worlds, policies)
