import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biased_irl.demonstrators import (
    BiasSpec,
    action_selection,
    all_demonstrators,
    demonstrator_policy,
    distort_transitions,
    hyperbolic_discount,
    hyperbolic_q,
    rollout,
    value_iteration,
)
from biased_irl.grid_mdp import GridConfig, WorldModel, generate_gridworld, next_state_distribution

SMALL = GridConfig(width=6, height=6, n_nonzero=4)


def corridor():
    world = WorldModel(3, 1, np.zeros((1, 3), bool), (0, 0), slip_prob=0.0, horizon=3)
    reward = np.array([[0.0, 0.0, 1.0]])
    return world, reward


def temptation_world():
    """Corridor from (0, 1) to a +10 at (13, 1); a +3 pocket sits just above it at (2, 0).

    A detour row along the bottom connects both ends of the corridor.
    """
    walls = np.ones((4, 14), bool)
    walls[1, :] = False
    walls[3, :] = False
    walls[1:, 0] = False
    walls[1:, 13] = False
    walls[0, 2] = False
    reward = np.zeros((4, 14))
    reward[0, 2] = 3.0
    reward[1, 13] = 10.0
    return WorldModel(14, 4, walls, (0, 1), slip_prob=0.0, horizon=30), reward


def near_far_world():
    walls = np.zeros((1, 8), bool)
    reward = np.zeros((1, 8))
    reward[0, 3] = 1.0   # one step from start
    reward[0, 7] = 10.0  # five steps from start, the other way
    return WorldModel(8, 1, walls, (2, 0), slip_prob=0.0, horizon=20), reward


def test_value_iteration_zero_reward():
    world, _ = generate_gridworld(0, SMALL)
    assert not value_iteration(world, np.zeros(world.shape), 20, 0.9).any()


def test_value_iteration_depth_one_is_reward():
    world, reward = generate_gridworld(0, SMALL)
    q = value_iteration(world, reward, 1, 0.9)
    assert np.array_equal(q, np.repeat(reward[..., None], 5, axis=-1))


def test_value_iteration_corridor():
    world, reward = corridor()
    q = value_iteration(world, reward, 3, 0.9)
    assert q[0, 0, 2] == pytest.approx(0.81, abs=1e-12)


def brute_force_q(world, reward, depth, gamma, cell, action):
    # exhaustive expectimax over next-state distributions
    if depth == 0:
        return 0.0
    total = reward[cell[1], cell[0]]
    for nxt, p in next_state_distribution(world, cell, action).items():
        total += gamma * p * max(brute_force_q(world, reward, depth - 1, gamma, nxt, a) for a in range(5))
    return total


def test_value_iteration_matches_expectimax():
    world, reward = generate_gridworld(2, GridConfig(width=4, height=4, n_nonzero=3))
    q = value_iteration(world, reward, 3, 0.9)
    for y in range(4):
        for x in range(4):
            if not world.walls[y, x]:
                for a in range(5):
                    assert q[y, x, a] == pytest.approx(brute_force_q(world, reward, 3, 0.9, (x, y), a), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_value_iteration_constant_shift(seed):
    world, reward = generate_gridworld(seed, SMALL)
    c, depth, gamma = 2.5, 20, 0.9
    q = value_iteration(world, reward, depth, gamma)
    q2 = value_iteration(world, reward + c, depth, gamma)
    assert np.abs(q2 - q - c * sum(gamma ** t for t in range(depth))).max() < 1e-9
    # argmax is unchanged wherever the best action is clear of round-off
    top2 = np.sort(q, axis=-1)[..., -2:]
    clear = (top2[..., 1] - top2[..., 0] > 1e-9) & ~world.walls
    assert np.array_equal(q.argmax(-1)[clear], q2.argmax(-1)[clear])


def test_distort_identity_and_example():
    world = WorldModel(5, 5, np.zeros((5, 5), bool), (0, 0), 0.2)
    same = distort_transitions(world, 1.0)
    assert np.allclose(same.displacement_probs, world.displacement_probs, atol=1e-15)
    sharp = distort_transitions(world, 2.0)
    dist = next_state_distribution(sharp, (2, 2), 0)
    assert dist[(2, 1)] == pytest.approx(0.64 / 0.66)
    assert dist[(1, 2)] == pytest.approx(0.01 / 0.66)
    assert dist[(3, 2)] == pytest.approx(0.01 / 0.66)
    # Stay is deterministic and remains so
    assert next_state_distribution(sharp, (2, 2), 4) == {(2, 2): 1.0}
    # the real world is untouched
    assert next_state_distribution(world, (2, 2), 0)[(2, 1)] == pytest.approx(0.8)


def test_hyperbolic_discount_weights():
    assert np.allclose(hyperbolic_discount(1.0, np.arange(4)), [1, 1 / 2, 1 / 3, 1 / 4])


@pytest.mark.parametrize("mode", ["naive", "sophisticated"])
@pytest.mark.parametrize("seed", range(4))
def test_hyperbolic_k0_matches_undiscounted(mode, seed):
    world, reward = generate_gridworld(seed, SMALL)
    hq = hyperbolic_q(world, reward, 0.0, world.horizon, mode)
    q = value_iteration(world, reward, world.horizon, 1.0)
    assert np.array_equal(action_selection(hq, "argmax"), action_selection(q, "argmax"))


def test_naive_caves_in_sophisticated_resists():
    world, reward = temptation_world()
    naive = rollout(world, demonstrator_policy(BiasSpec.make("naive"), world, reward), 40)
    soph = rollout(world, demonstrator_policy(BiasSpec.make("sophisticated"), world, reward), 40)
    assert naive[-1] == (2, 0) and naive[-5:] == [(2, 0)] * 5
    assert (13, 1) not in naive
    assert soph[-1] == (13, 1)
    assert (2, 0) not in soph


def test_myopic_sees_only_near_reward():
    world, reward = near_far_world()
    path = rollout(world, demonstrator_policy(BiasSpec.make("myopic", myopic_horizon=2), world, reward), 30)
    assert (3, 0) in path and path[-1] == (3, 0)
    assert (7, 0) not in path
    # an optimal agent goes for the +10
    opt = rollout(world, demonstrator_policy(BiasSpec.make("optimal"), world, reward), 30)
    assert opt[-1] == (7, 0)


def test_optimal_argmax_corridor():
    world, reward = corridor()
    pi = demonstrator_policy(BiasSpec.make("optimal"), world, reward)
    assert pi[0, 0].tolist() == [0, 0, 1, 0, 0]


def test_boltzmann_equal_q_is_uniform():
    world = WorldModel(3, 3, np.zeros((3, 3), bool), (0, 0))
    for spec in all_demonstrators():
        if spec.noise == "boltzmann":
            assert np.allclose(demonstrator_policy(spec, world, np.zeros((3, 3))), 0.2)


def test_action_selection_examples():
    assert np.allclose(action_selection(np.ones(5), "boltzmann", 1.0), 0.2)
    p = action_selection(np.array([1.0, 0, 0, 0, 0]), "boltzmann", 1.0)
    assert p[0] == pytest.approx(np.e / (np.e + 4))
    assert p[0] == pytest.approx(0.404609675, abs=1e-9)
    assert action_selection(np.array([1.0, 3, 3, 0, 0]), "argmax").tolist() == [0, 1, 0, 0, 0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5), st.floats(-1e3, 1e3), st.floats(0.1, 5))
def test_boltzmann_shift_invariance_and_monotonicity(q, c, beta):
    q = np.array(q)
    p = action_selection(q, "boltzmann", beta)
    assert np.allclose(p, action_selection(q + c, "boltzmann", beta), atol=1e-12)
    assert np.all(p > 0) or np.ptp(q) * beta > 700
    for a in range(5):
        for b in range(5):
            if q[a] > q[b] and (q[a] - q[b]) * beta > 1e-9 and p[b] > 0:
                assert p[a] > p[b]


@pytest.mark.parametrize("noise", ["argmax", "boltzmann"])
@pytest.mark.parametrize("seed", range(3))
def test_myopic_full_horizon_and_alpha_one_are_optimal(noise, seed):
    world, reward = generate_gridworld(seed, SMALL)
    opt = demonstrator_policy(BiasSpec.make("optimal", noise), world, reward)
    myo = demonstrator_policy(BiasSpec.make("myopic", noise, myopic_horizon=world.horizon), world, reward)
    assert np.array_equal(opt, myo)
    # alpha=1 is excluded from the over/underconfident kinds, so use the planner route directly
    q1 = value_iteration(distort_transitions(world, 1.0), reward, world.horizon, 0.9)
    q = value_iteration(world, reward, world.horizon, 0.9)
    assert np.abs(q1 - q).max() < 1e-12
    assert np.array_equal(action_selection(q1, "argmax"), action_selection(q, "argmax"))


def test_demonstrators_are_pure():
    world, reward = generate_gridworld(7, SMALL)
    for spec in all_demonstrators():
        a = demonstrator_policy(spec, world, reward)
        b = demonstrator_policy(spec, world, reward)
        assert np.array_equal(a, b)
        assert np.allclose(a.sum(axis=-1), 1, atol=1e-9)


def test_biases_change_behaviour_somewhere():
    world, reward = generate_gridworld(11, GridConfig())
    opt = demonstrator_policy(BiasSpec.make("optimal"), world, reward)
    for kind in ("naive", "sophisticated", "myopic", "overconfident", "underconfident"):
        pi = demonstrator_policy(BiasSpec.make(kind), world, reward)
        assert pi.shape == opt.shape


@pytest.mark.parametrize("bad", [
    dict(kind="myopic"),
    dict(kind="naive", k=-1.0),
    dict(kind="overconfident", alpha=0.5),
    dict(kind="underconfident", alpha=2.0),
    dict(kind="optimal", noise="boltzmann"),
    dict(kind="optimal", alpha=2.0),
    dict(kind="reckless"),
])
def test_bias_spec_validation(bad):
    with pytest.raises(ValueError):
        BiasSpec(**bad)


def test_bias_spec_json():
    spec = BiasSpec.make("naive", "boltzmann")
    assert spec.to_json() == {"kind": "naive", "k": 1.0, "noise": "boltzmann", "beta": 1.0}
    assert BiasSpec.from_json(spec.to_json()) == spec
    assert len(all_demonstrators()) == 12
