import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfchaos.core import FiniteMetricSpace, Measure, reference_model, truncation_horizon
from mfchaos.mkv import (ActionKernel, KernelFamily, MeanFieldPolicy, SimplexGrid, ValueTable,
                         bellman_apply_kernel, bellman_sup, holder_quotient, kernel_from_joint,
                         load_solution, next_measure, policy_gain, policy_gain_exact, sample_action,
                         solution_artifact, sweep_bound, value_iteration)

from oracles import bellman_apply_scalar, kernel_grid, nearest_node_binary, next_law_scalar, tree_value

CONST_REWARD = {"family": "constant", "params": {"value": 1.0}}

# horizon-15 tree values on the q=50 grid with step-1/8 kernels, computed by
# oracles.tree_value and frozen; keys are node indices (count of state 0)
TREE_VALUES = {0: 1.99993896484375, 10: 1.7199389651417731, 25: 1.2449389651417733,
               40: 0.7571889654397964, 50: 0.34037646573781966}


# --- grid and kernels -------------------------------------------------------


def test_grid_node_order_binary():
    grid = SimplexGrid(FiniteMetricSpace.discrete(2), 4)
    assert grid.counts.tolist() == [[0, 4], [1, 3], [2, 2], [3, 1], [4, 0]]


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(1, 40))
def test_nearest_node_matches_oracle(m1, q):
    grid = SimplexGrid(FiniteMetricSpace.discrete(2), q)
    assert grid.nearest([1 - m1, m1]) == nearest_node_binary(m1, q)


def test_nearest_tie_goes_to_lower_index():
    grid = SimplexGrid(FiniteMetricSpace.discrete(2), 2)
    # (0.75, 0.25) sits halfway between nodes 1 and 2
    assert grid.nearest([0.75, 0.25]) == 1


def test_nearest_on_line_metric():
    space = FiniteMetricSpace.line(3)
    grid = SimplexGrid(space, 3)
    rng = np.random.default_rng(0)
    for w in rng.dirichlet(np.ones(3), 20):
        node = grid.nearest(w)
        d = [np.abs(np.cumsum(w - g)[:-1]).sum() for g in grid.weights]
        assert d[node] == pytest.approx(min(d), abs=1e-12)


def test_kernel_family_parse_and_size():
    assert KernelFamily.parse("randomized(0.5)") == KernelFamily("randomized", 2)
    assert KernelFamily.parse("randomized:8").label() == "randomized:8"
    assert KernelFamily.parse("deterministic").size(2, 2) == 4
    assert KernelFamily("randomized", 2).size(2, 2) == 9
    with pytest.raises(ValueError):
        KernelFamily.parse("randomized(0.3)")
    with pytest.raises(ValueError):
        KernelFamily.parse("greedy")


def test_kernel_enumeration_starts_with_point_mass():
    ks = KernelFamily("randomized", 2).kernels(2, 2)
    assert ks.shape == (9, 2, 2)
    assert ks[0].tolist() == [[1, 0], [1, 0]]
    assert ks[1].tolist() == [[1, 0], [0.5, 0.5]]


def test_kernel_from_joint_examples():
    space = FiniteMetricSpace.discrete(2)
    from mfchaos.core import ProductSpace
    prod = ProductSpace(space, space)
    k = kernel_from_joint(Measure(prod, [0.25, 0.25, 0.0, 0.5]))
    assert k.matrix.tolist() == [[0.5, 0.5], [0.0, 1.0]]
    k = kernel_from_joint(Measure(prod, [0.0, 0.0, 0.3, 0.7]))
    assert k.matrix.tolist() == [[0.5, 0.5], [0.3, 0.7]]


@pytest.mark.parametrize("dist,u,expected", [((0.3, 0.7), 0.2, 0), ((0.3, 0.7), 0.3, 1),
                                             ((0, 1, 0), 0.0, 1), ((0, 1, 0), 0.999, 1)])
def test_sample_action_boundaries(dist, u, expected):
    assert sample_action(dist, u) == expected


def test_sample_action_rejects_out_of_range():
    with pytest.raises(ValueError):
        sample_action((0.5, 0.5), 1.0)


# --- one-step maps ----------------------------------------------------------


def test_next_measure_constant_and_identity():
    model = reference_model(transition={"family": "constant", "params": {"state": 1}})
    k = ActionKernel([[0.2, 0.8], [1.0, 0.0]])
    assert next_measure(model, [0.4, 0.6], k, 1).weights.tolist() == [0.0, 1.0]
    model = reference_model(transition={"family": "identity", "params": {}})
    assert np.allclose(next_measure(model, [0.4, 0.6], k, 0).weights, [0.4, 0.6], atol=1e-15)


def test_next_measure_influence_example():
    model = reference_model(noise={"idio_size": 10, "idio_weights": [0.1] * 10,
                                   "common_size": 1, "common_weights": [1.0]},
                            transition={"family": "influence_threshold",
                                        "params": {"eta": 0.3, "common_shifts": [0.0]}})
    nu = next_measure(model, [0.5, 0.5], ActionKernel.deterministic([1, 1], 2), 0)
    assert nu.weights[1] == pytest.approx(0.8, abs=1e-12)


def test_next_measure_matches_scalar_oracle(ref_model):
    rng = np.random.default_rng(1)
    for _ in range(40):
        mu = rng.dirichlet(np.ones(2))
        kern = rng.dirichlet(np.ones(2), 2)
        for e0 in range(ref_model.noise.common_size):
            ref = next_law_scalar(ref_model, mu, kern, e0)
            assert np.allclose(next_measure(ref_model, mu, ActionKernel(kern), e0).weights, ref, atol=1e-13)


def test_bellman_apply_trivial_cases(ref_model):
    grid = SimplexGrid(ref_model.state_space, 4)
    k = ActionKernel([[0.5, 0.5], [0.0, 1.0]])
    mu = [0.25, 0.75]
    const = ValueTable(grid, np.full(len(grid), 3.0))
    model0 = reference_model(beta=0.0)
    f_hat = bellman_apply_kernel(model0, const, mu, k)
    assert f_hat == pytest.approx(0.75 - 0.2 * (0.125 + 0.75), abs=1e-14)
    assert bellman_apply_kernel(ref_model, const, mu, k) == pytest.approx(f_hat + 0.5 * 3.0, abs=1e-14)


def test_bellman_apply_matches_scalar_oracle(ref_model):
    grid = SimplexGrid(ref_model.state_space, 4)
    rng = np.random.default_rng(2)
    values = rng.normal(size=len(grid))
    table = ValueTable(grid, values)
    for _ in range(30):
        mu = rng.dirichlet(np.ones(2))
        kern = rng.dirichlet(np.ones(2), 2)
        ref = bellman_apply_scalar(ref_model, values, 4, mu, kern)
        assert bellman_apply_kernel(ref_model, table, mu, ActionKernel(kern)) == pytest.approx(ref, abs=1e-12)


def test_bellman_sup_nine_kernels(ref_model):
    grid = SimplexGrid(ref_model.state_space, 4)
    table = ValueTable(grid, np.linspace(0, 1, len(grid)))
    mu = [0.25, 0.75]
    value, kern = bellman_sup(ref_model, table, mu, "randomized(0.5)")
    brute = max(bellman_apply_scalar(ref_model, table.values, 4, mu, k) for k in kernel_grid(2))
    assert value == pytest.approx(brute, abs=1e-12)
    assert bellman_apply_kernel(ref_model, table, mu, kern) == value


def test_bellman_sup_action_free_reward():
    model = reference_model(reward={"family": "linear", "params": {"state_coef": 1.0, "action_cost": 0.0}},
                            transition={"family": "identity", "params": {}})
    table = ValueTable(SimplexGrid(model.state_space, 4), np.arange(5.0))
    value, _ = bellman_sup(model, table, [0.5, 0.5], "deterministic")
    assert value == bellman_apply_kernel(model, table, [0.5, 0.5], ActionKernel([[0.3, 0.7], [1, 0]]))


def test_randomized_family_dominates_deterministic(ref_model):
    table = ValueTable(SimplexGrid(ref_model.state_space, 10), np.random.default_rng(3).normal(size=11))
    for mu in ([0.1, 0.9], [0.5, 0.5], [1.0, 0.0]):
        det, _ = bellman_sup(ref_model, table, mu, "deterministic")
        rnd, _ = bellman_sup(ref_model, table, mu, "randomized:4")
        assert rnd >= det


# --- value iteration --------------------------------------------------------


def test_constant_reward_geometric_value():
    model = reference_model(reward=CONST_REWARD)
    res = value_iteration(model, 10, "deterministic", tol=1e-10)
    assert np.allclose(res.table.values, 2.0, atol=1e-9)


def test_beta_zero_single_sweep(ref_model):
    model = reference_model(beta=0.0)
    res = value_iteration(model, 8, "randomized:2")
    assert res.table.sweeps == 1
    for node in range(len(res.table.grid)):
        mu = res.table.grid.weights[node]
        brute = max(bellman_apply_kernel(model, res.table, mu, ActionKernel(k)) for k in kernel_grid(2))
        assert res.table.values[node] == pytest.approx(brute, abs=1e-14)


def test_tree_oracle_frozen_values(ref_model):
    t = truncation_horizon(0.5, ref_model.reward_bound, 1e-4)
    assert t == 15
    tree = tree_value(ref_model, 50, kernel_grid(8), t)
    for node, value in TREE_VALUES.items():
        assert tree[node] == pytest.approx(value, abs=1e-12)


def test_value_iteration_matches_tree_oracle(ref_model, ref_solution):
    tree = tree_value(ref_model, 50, kernel_grid(8), 15)
    assert np.abs(ref_solution.table.values - tree).max() <= 1e-3
    for node, value in TREE_VALUES.items():
        assert ref_solution.table.values[node] == pytest.approx(value, abs=1e-3)


def test_value_iteration_sweep_bound(ref_model, ref_solution):
    assert ref_solution.residual <= 1e-8
    assert ref_solution.table.sweeps <= sweep_bound(0.5, ref_model.reward_bound, 1e-8)


def test_policy_is_greedy_for_values(ref_model, ref_solution):
    table, policy = ref_solution.table, ref_solution.policy
    for node in range(0, 51, 5):
        mu = table.grid.weights[node]
        chosen = bellman_apply_kernel(ref_model, table, mu, policy.kernel_at_node(node))
        best, _ = bellman_sup(ref_model, table, mu, "randomized:8")
        assert chosen == pytest.approx(best, abs=1e-12)


def test_policy_eps_nonnegative(ref_solution):
    assert ref_solution.policy.eps >= ref_solution.residual


def test_holder_quotient_finite(ref_solution):
    assert np.isfinite(holder_quotient(ref_solution.table, 1.0))


# --- gains ------------------------------------------------------------------


def test_policy_gain_constant_reward():
    model = reference_model(reward=CONST_REWARD)
    grid = SimplexGrid(model.state_space, 4)
    policy = MeanFieldPolicy(grid, np.tile(np.eye(2)[[0, 1]], (5, 1, 1)))
    g = policy_gain(model, policy, [0.5, 0.5], 10, common_paths=8, seed=0)
    assert g.mean == pytest.approx((1 - 0.5 ** 10) / 0.5, abs=1e-12)


def test_policy_gain_no_common_noise_zero_stderr():
    model = reference_model(noise={"idio_size": 4, "idio_weights": [0.25] * 4,
                                   "common_size": 1, "common_weights": [1.0]},
                            transition={"family": "influence_threshold", "params": {"common_shifts": [0.0]}})
    res = value_iteration(model, 10, "randomized:2")
    g = policy_gain(model, res.policy, [0.5, 0.5], 20, common_paths=16)
    assert g.stderr == 0.0


def test_policy_gain_mc_vs_exact(ref_model, ref_solution):
    exact = policy_gain_exact(ref_model, ref_solution.policy, [0.5, 0.5], 10)
    mc = policy_gain(ref_model, ref_solution.policy, [0.5, 0.5], 10, common_paths=400, seed=3)
    assert abs(mc.mean - exact.mean) <= 3 * mc.stderr + 1e-12
    again = policy_gain(ref_model, ref_solution.policy, [0.5, 0.5], 10, common_paths=400, seed=3)
    assert again == mc


def test_greedy_gain_close_to_value(ref_model, ref_solution):
    # the greedy policy's gain along the projected flow stays near the table
    node = 25
    mu = ref_solution.table.grid.weights[node]
    g = policy_gain_exact(ref_model, ref_solution.policy, mu, 14)
    assert abs(g.mean - ref_solution.table.values[node]) <= 0.1


# --- artifacts --------------------------------------------------------------


def test_solution_round_trip(tmp_path, ref_model, ref_solution):
    path = tmp_path / "sol.json"
    path.write_text(json.dumps(solution_artifact(ref_model, ref_solution)))
    back = load_solution(str(path), ref_model.state_space, ref_model.action_space)
    assert np.array_equal(back.table.values, ref_solution.table.values)
    assert np.array_equal(back.policy.kernels, ref_solution.policy.kernels)
    assert back.policy.eps == ref_solution.policy.eps
