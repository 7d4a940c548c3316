import numpy as np
import pytest

from biased_irl.demonstrators import BiasSpec, demonstrator_policy, value_iteration
from biased_irl.diff_planners import (
    SoftVIConfig,
    SoftVIPlanner,
    VINConfig,
    VINPlanner,
    batch_bindings,
    build_loss_graph,
    check_vin_params,
    init_vin_params,
    planner_logits,
    soft_value_iteration,
    vin_forward,
)
from biased_irl.grid_mdp import GridConfig, WorldModel, generate_gridworld
from biased_irl.tensor_graph import grad_check

from test_tensor_graph import naive_conv

SMALL = GridConfig(width=6, height=6, n_nonzero=4)


def soft_vi_oracle(world, reward, depth, gamma, tau):
    # plain loops over the transition matrix
    T = world.transition_matrix
    r = reward.ravel()
    q = np.repeat(r[:, None], 5, axis=1)
    for _ in range(depth - 1):
        z = q / tau
        v = tau * (z.max(1) + np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)))
        q = r[:, None] + gamma * np.einsum("sat,t->sa", T, v)
    return (q / tau).reshape(world.height, world.width, 5)


def vin_oracle(params, world, reward, cfg):
    x = np.stack([reward, world.walls.astype(float)])[None]
    h = naive_conv(x, params["proxy0"]) + params["proxy0_bias"]
    proxy = naive_conv(h, params["proxy1"])
    v = np.zeros((1, 1) + world.shape)
    for _ in range(cfg.iterations):
        q = naive_conv(np.concatenate([proxy, v], axis=1), params["recur"])
        v = q.max(axis=1, keepdims=True)
    return naive_conv(q, params["head"])


def test_soft_vi_matches_oracle():
    world, reward = generate_gridworld(0, SMALL)
    for tau in (1.0, 0.3):
        cfg = SoftVIConfig(depth=20, gamma=0.9, tau=tau)
        g, logits = soft_value_iteration(world, reward, cfg)
        got = np.moveaxis(g.value(logits)[0], 0, -1)
        want = soft_vi_oracle(world, reward, 20, 0.9, tau)
        open_ = ~world.walls
        assert np.abs(got[open_] - want[open_]).max() < 1e-9


def test_vin_forward_matches_oracle():
    world, reward = generate_gridworld(1, GridConfig(width=5, height=5, n_nonzero=3))
    cfg = VINConfig(proxy_channels=4, q_channels=3, iterations=3)
    params = init_vin_params(cfg, 2)
    params["proxy0_bias"] = np.random.default_rng(0).normal(size=params["proxy0_bias"].shape)
    g, logits = vin_forward(params, world, reward, cfg)
    assert np.allclose(g.value(logits), vin_oracle(params, world, reward, cfg), atol=1e-10)


def test_zero_head_gives_uniform_and_log5_loss():
    world, reward = generate_gridworld(0, SMALL)
    params = init_vin_params(VINConfig(), 0)
    params["head"] = np.zeros_like(params["head"])
    planner = VINPlanner(VINConfig(), params)
    lg = build_loss_graph(planner, 1)
    pi = demonstrator_policy(BiasSpec.make("optimal"), world, reward)
    vals = lg.graph.forward(batch_bindings(planner, [world], reward[None], pi[None]))
    assert vals[lg.logits].max() == vals[lg.logits].min() == 0.0
    assert vals[lg.data_loss].item() == pytest.approx(np.log(5), abs=1e-12)


def test_soft_vi_zero_reward_is_uniform():
    world, _ = generate_gridworld(3, SMALL)
    g, logits = soft_value_iteration(world, np.zeros(world.shape))
    out = g.value(logits)[0][:, ~world.walls]
    assert np.abs(out - out[:1]).max() < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_soft_vi_small_tau_recovers_hard_argmax(seed):
    world, reward = generate_gridworld(seed, GridConfig(width=5, height=5, n_nonzero=3))
    g, logits = soft_value_iteration(world, reward, SoftVIConfig(tau=1e-3))
    soft_arg = g.value(logits)[0].argmax(axis=0)
    q = value_iteration(world, reward, 20, 0.9)
    top2 = np.sort(q, axis=-1)[..., -2:]
    # only cells whose best action is clear of the soft-max's log(5)*tau smoothing
    clear = (top2[..., 1] - top2[..., 0] > 0.05) & ~world.walls
    assert clear.sum() > 5
    assert np.array_equal(soft_arg[clear], q.argmax(-1)[clear])


def test_soft_vi_policy_shift_invariant():
    world, reward = generate_gridworld(4, SMALL)
    a = planner_logits(SoftVIPlanner(), [world], reward[None])[0]
    b = planner_logits(SoftVIPlanner(), [world], reward[None] + 3.0)[0]
    pa = a - a.max(axis=0)
    pb = b - b.max(axis=0)
    assert np.abs(pa - pb)[:, ~world.walls].max() < 1e-8


def test_vin_reward_gradient():
    world, reward = generate_gridworld(5, SMALL)
    params = init_vin_params(VINConfig(), 1)
    params["proxy0_bias"] = np.random.default_rng(1).normal(size=params["proxy0_bias"].shape)
    planner = VINPlanner(VINConfig(), params)
    lg = build_loss_graph(planner, 1, train_reward=True)
    pi = demonstrator_policy(BiasSpec.make("optimal", "boltzmann"), world, reward)
    b = batch_bindings(planner, [world], np.random.default_rng(0).normal(size=(1,) + world.shape), pi[None])
    assert grad_check(lg.graph, "reward", lg.loss, bindings=b) < 1e-4


@pytest.mark.parametrize("kernel", [1, 3])
@pytest.mark.parametrize("layer", ["proxy0", "proxy0_bias", "proxy1", "recur", "head"])
def test_vin_parameter_gradients(layer, kernel):
    world, reward = generate_gridworld(6, SMALL)
    cfg = VINConfig(proxy_kernel=kernel)
    params = init_vin_params(cfg, 3)
    # a zero bias makes every empty cell's Q-channels tie exactly, where channel_max has a kink
    params["proxy0_bias"] = np.random.default_rng(0).normal(size=params["proxy0_bias"].shape)
    planner = VINPlanner(cfg, params)
    lg = build_loss_graph(planner, 1, l2=1e-2, train_params=True)
    pi = demonstrator_policy(BiasSpec.make("optimal", "boltzmann"), world, reward)
    b = batch_bindings(planner, [world], reward[None], pi[None])
    assert grad_check(lg.graph, layer, lg.loss, bindings=b) < 1e-4


def test_soft_vi_reward_gradient():
    world, reward = generate_gridworld(7, SMALL)
    planner = SoftVIPlanner()
    lg = build_loss_graph(planner, 1, train_reward=True)
    pi = demonstrator_policy(BiasSpec.make("optimal", "boltzmann"), world, reward)
    b = batch_bindings(planner, [world], np.random.default_rng(1).normal(size=(1,) + world.shape), pi[None])
    assert grad_check(lg.graph, "reward", lg.loss, bindings=b) < 1e-4


def test_true_reward_scores_better_than_random():
    world, reward = generate_gridworld(8, GridConfig())
    planner = SoftVIPlanner()
    pi = demonstrator_policy(BiasSpec.make("optimal", "boltzmann"), world, reward)
    lg = build_loss_graph(planner, 1)
    b = batch_bindings(planner, [world], reward[None], pi[None])
    truth = lg.graph.forward(b)[lg.loss].item()
    rng = np.random.default_rng(0)
    for _ in range(100):
        b["reward"] = rng.uniform(-10, 10, size=(1, 1) + world.shape)
        assert lg.graph.forward(b)[lg.loss].item() > truth


def test_planners_are_deterministic():
    world, reward = generate_gridworld(9, SMALL)
    params = init_vin_params(VINConfig(), 4)
    for planner in (VINPlanner(VINConfig(), params), SoftVIPlanner()):
        a = planner_logits(planner, [world, world], np.stack([reward, reward]))
        b = planner_logits(planner, [world], reward[None])
        assert np.array_equal(a[0], a[1])
        assert np.allclose(a[0], b[0], atol=1e-12)


def test_loss_ignores_wall_cells():
    world, reward = generate_gridworld(10, SMALL)
    planner = SoftVIPlanner()
    pi = demonstrator_policy(BiasSpec.make("optimal", "boltzmann"), world, reward)
    lg = build_loss_graph(planner, 1)
    before = lg.graph.forward(batch_bindings(planner, [world], reward[None], pi[None]))[lg.loss].item()
    junk = pi.copy()
    junk[world.walls] = np.array([1.0, 0, 0, 0, 0])
    after = lg.graph.forward(batch_bindings(planner, [world], reward[None], junk[None]))[lg.loss].item()
    assert before == after


def test_vin_param_validation():
    params = init_vin_params(VINConfig(), 0)
    params["recur"] = np.zeros((8, 3, 3, 3))
    with pytest.raises(ValueError):
        check_vin_params(params, VINConfig())
    with pytest.raises(ValueError):
        VINConfig(iterations=0)
    with pytest.raises(ValueError):
        SoftVIConfig(tau=0.0)
