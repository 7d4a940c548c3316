import itertools

import numpy as np
import pytest

from biased_irl.demonstrators import BiasSpec, demonstrator_policy
from biased_irl.diff_planners import SoftVIConfig, SoftVIPlanner, VINConfig, VINPlanner, init_vin_params
from biased_irl.evaluation import (
    action_prediction_accuracy,
    argmax_agreement,
    percent_reward_obtained,
    pooled_percent,
    reward_obtained,
)
from biased_irl.grid_mdp import GridConfig, WorldModel, generate_gridworld

SMALL = GridConfig(width=6, height=6, n_nonzero=4)


def enumerate_policy_values(world, reward, horizon, gamma):
    # every deterministic stationary policy over the open cells, evaluated in one batch
    T = world.transition_matrix
    open_cells = np.flatnonzero(~world.walls.ravel())
    n = world.n_cells
    values = []
    for choice in itertools.product(range(5), repeat=len(open_cells)):
        acts = np.full(n, 4)
        acts[open_cells] = choice
        values.append(acts)
    acts = np.array(values)                           # (P, n)
    M = T[np.arange(n)[None], acts]                   # (P, n, n)
    d = np.zeros((len(acts), n))
    d[:, world.index(world.start)] = 1.0
    r = reward.ravel()
    total = np.zeros(len(acts))
    for t in range(horizon):
        total += gamma ** t * d @ r
        d = np.einsum("ps,pst->pt", d, M)
    return total


def three_by_three():
    walls = np.zeros((3, 3), bool)
    walls[1, 1] = True
    walls[0, 2] = True
    reward = np.zeros((3, 3))
    reward[2, 2] = 4.0
    reward[0, 1] = -2.0
    reward[2, 0] = 1.0
    return WorldModel(3, 3, walls, (0, 0), 0.2, 20), reward


def test_enumeration_brackets_percent_scores():
    world, reward = three_by_three()
    values = enumerate_policy_values(world, reward, 20, 0.9)
    best, worst = values.max(), values.min()
    assert percent_reward_obtained(world, reward, reward) == 100.0
    # the stationary argmax policy is also the best stationary deterministic policy here
    assert percent_reward_obtained(world, reward, reward) == pytest.approx(100 * best / best)
    flipped = percent_reward_obtained(world, reward, -reward)
    assert flipped == pytest.approx(100 * worst / best, abs=1e-9)
    assert flipped < 0


def test_percent_bounds_and_self_score():
    rng = np.random.default_rng(0)
    for seed in range(20):
        world, reward = generate_gridworld(seed, SMALL)
        assert percent_reward_obtained(world, reward, reward) == 100.0
        assert percent_reward_obtained(world, reward, rng.normal(size=world.shape)) <= 100.0 + 1e-9


@pytest.mark.parametrize("c", [0.1, 3.0, 1e3])
def test_positive_scaling_invariance(c):
    world, reward = generate_gridworld(5, SMALL)
    guess = np.random.default_rng(1).normal(size=world.shape)
    assert percent_reward_obtained(world, reward, c * guess) == percent_reward_obtained(world, reward, guess)


def test_zero_optimum_is_an_error():
    world = WorldModel(3, 3, np.zeros((3, 3), bool), (0, 0))
    with pytest.raises(ValueError):
        percent_reward_obtained(world, np.zeros((3, 3)), np.ones((3, 3)))


def test_argmax_agreement():
    world, reward = generate_gridworld(2, SMALL)
    pi = demonstrator_policy(BiasSpec.make("optimal"), world, reward)
    logits = np.moveaxis(pi, -1, 0) * 5
    assert argmax_agreement(logits, pi, world) == 1.0
    assert argmax_agreement(np.zeros_like(logits), np.full_like(pi, 0.2), world) == 1.0
    wrong = np.roll(logits, 1, axis=0)
    assert argmax_agreement(wrong, pi, world) < 0.5


def test_action_prediction_accuracy_with_exact_planner():
    # near-hard soft VI with the true reward matches the optimal argmax except at near-ties
    world, reward = generate_gridworld(3, GridConfig())
    spec = BiasSpec.make("optimal", "boltzmann")
    planner = SoftVIPlanner(SoftVIConfig(depth=20, tau=1e-3))
    acc = action_prediction_accuracy(planner, reward, spec, world, reward, n_perturbations=5, seed=0)
    assert acc > 0.97
    blind = action_prediction_accuracy(planner, np.zeros(world.shape), spec, world, reward, n_perturbations=5)
    assert blind < 0.5
    again = action_prediction_accuracy(planner, reward, spec, world, reward, n_perturbations=5, seed=0)
    assert acc == again


def test_action_prediction_accuracy_range():
    world, reward = generate_gridworld(4, GridConfig())
    planner = VINPlanner(VINConfig(), init_vin_params(VINConfig(), 0))
    acc = action_prediction_accuracy(planner, np.zeros(world.shape), BiasSpec.make("myopic"), world, reward,
                                     n_perturbations=3)
    assert 0.0 <= acc <= 1.0


def test_pooled_percent_examples():
    assert pooled_percent([(1.0, 2.0), (3.0, 2.0)]) == 100.0
    assert pooled_percent([(-1.0, 0.001), (5.0, 9.999)]) == pytest.approx(40.0)
    world, reward = generate_gridworld(3, SMALL)
    guess = np.random.default_rng(2).normal(size=world.shape)
    one = reward_obtained(world, reward, guess)
    assert pooled_percent([one]) == percent_reward_obtained(world, reward, guess)
    assert pooled_percent([reward_obtained(world, reward, reward)] * 3) == 100.0


def test_pooled_percent_is_robust_to_a_near_zero_optimum():
    # a per-world ratio explodes here; the pooled score stays the share of total reward
    pairs = [(9.0, 10.0), (9.0, 10.0), (0.5, 0.001)]
    assert np.mean([100 * g / b for g, b in pairs]) > 10_000
    assert pooled_percent(pairs) == pytest.approx(100 * 18.5 / 20.001)
