import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfchaos.core import CapExceededError, reference_model
from mfchaos.mkv import SimplexGrid, ValueTable, value_iteration
from mfchaos.nagent import (CountPolicy, FeedbackPolicy, FullValueTable, NAgentValueTable,
                            action_count_matrices, bellman_TN, bellman_TN_action, bellman_TN_policy,
                            class_of, class_size, empirical_joint, evaluate_policy, greedy_gap,
                            mc_gain_N, reward_joint, solve_VN, solve_VN_unreduced, step_joint, unlift)

from oracles import bellman_TN_action_scalar, empirical_joint_scalar

CONST_REWARD = {"family": "constant", "params": {"value": 1.0}}
NO_COMMON = {"idio_size": 4, "idio_weights": [0.25] * 4, "common_size": 1, "common_weights": [1.0]}


def test_step_joint_hand_example(ref_model):
    # mu_N[x, a] puts 1/3 on (0,0), (0,1), (1,0): state-1 mass 1/3, shift -0.1
    # agent 0: a=0, threshold 0.233, u=0.75 -> 0
    # agent 1: a=1, threshold 0.533, u=0.5  -> 1
    # agent 2: a=0, threshold 0.233, u=0.25 -> 0
    out = step_joint(ref_model, (0, 0, 1), (0, 1, 0), (3, 2, 1), 0)
    assert out.tolist() == [0, 1, 0]


def test_step_joint_matches_scalar_rule(ref_model):
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        x, a, e = rng.integers(0, 2, n), rng.integers(0, 2, n), rng.integers(0, 4, n)
        e0 = int(rng.integers(0, 2))
        joint = empirical_joint_scalar(ref_model, x, a)
        ref = [ref_model.transition(xi, ai, joint, ei, e0) for xi, ai, ei in zip(x, a, e)]
        assert step_joint(ref_model, x, a, e, e0).tolist() == ref


def test_step_joint_identity_and_single_agent(ref_model):
    model = reference_model(transition={"family": "identity", "params": {}})
    assert step_joint(model, (1, 0, 1), (0, 0, 1), (0, 1, 2), 1).tolist() == [1, 0, 1]
    joint = np.zeros(4)
    joint[1 * 2 + 0] = 1.0
    for e, e0 in itertools.product(range(4), range(2)):
        assert step_joint(ref_model, (1,), (0,), (e,), e0)[0] == ref_model.transition(1, 0, joint, e, e0)


def test_reward_joint_examples(ref_model):
    assert reward_joint(ref_model, (0, 1), (1, 0)) == pytest.approx(0.4, abs=1e-15)
    assert reward_joint(reference_model(reward=CONST_REWARD), (0, 1, 1), (1, 0, 1)) == 1.0


def test_empirical_joint_counts(ref_model):
    assert empirical_joint(ref_model, (0, 1), (1, 1)).tolist() == [0.0, 0.5, 0.0, 0.5]


def test_class_helpers():
    assert class_of((1, 0, 1, 1), 2) == (1, 3)
    assert class_size((1, 3)) == 4
    assert len(action_count_matrices((2, 1), 2)) == 3 * 2


# --- one-step operators -----------------------------------------------------


def random_full_table(rng, n):
    full = FullValueTable(n, 2)
    full.values = rng.normal(size=len(full.states))
    return full


def test_bellman_TN_action_matches_exhaustive_sum():
    model = reference_model(noise={"idio_size": 3, "idio_weights": [0.2, 0.3, 0.5],
                                   "common_size": 2, "common_weights": [0.5, 0.5]})
    rng = np.random.default_rng(1)
    full = random_full_table(rng, 2)
    for x, a in itertools.product(itertools.product(range(2), repeat=2), repeat=2):
        ref = bellman_TN_action_scalar(model, full, x, a)
        assert bellman_TN_action(model, full, x, a) == pytest.approx(ref, abs=1e-13)


def test_bellman_TN_action_trivial_cases(ref_model):
    x, a = (0, 1, 1), (1, 0, 0)
    model0 = reference_model(beta=0.0)
    full = FullValueTable(3, 2, np.full(8, 2.0))
    assert bellman_TN_action(model0, full, x, a) == reward_joint(model0, x, a)
    assert bellman_TN_action(ref_model, full, x, a) == pytest.approx(reward_joint(ref_model, x, a) + 1.0)


def test_bellman_TN_action_cap(ref_model):
    with pytest.raises(CapExceededError):
        bellman_TN_action(ref_model, FullValueTable(3, 2), (0, 1, 1), (0, 0, 0), cap=10)


def test_reduced_operator_matches_full_sup():
    # the class operator must equal the max over all 2^N joint actions of the exhaustive sum
    model = reference_model()
    rng = np.random.default_rng(2)
    for n in (1, 2, 3):
        W = NAgentValueTable(n, 2, rng.normal(size=n + 1))
        full = W.expand()
        TW = bellman_TN(model, W)
        for x in itertools.product(range(2), repeat=n):
            best = max(bellman_TN_action(model, full, x, a) for a in itertools.product(range(2), repeat=n))
            assert TW(x) == pytest.approx(best, abs=1e-12)


def test_policy_operator_constant_policy(ref_model):
    rng = np.random.default_rng(3)
    full = random_full_table(rng, 3)
    policy = FeedbackPolicy(lambda x: np.array([1, 0, 1]), 2)
    out = bellman_TN_policy(ref_model, full, policy)
    for i, x in enumerate(full.states):
        assert out.values[i] == pytest.approx(bellman_TN_action(ref_model, full, x, (1, 0, 1)), abs=1e-13)


def test_policy_operator_zero_table_gives_reward(ref_model):
    policy = FeedbackPolicy(lambda x: 1 - np.asarray(x), 2)
    out = bellman_TN_policy(ref_model, FullValueTable(2, 2), policy)
    for i, x in enumerate(out.states):
        assert out.values[i] == pytest.approx(reward_joint(ref_model, x, 1 - x), abs=1e-15)


def test_policy_operator_class_and_full_agree(ref_model):
    rng = np.random.default_rng(4)
    W = NAgentValueTable(4, 2, rng.normal(size=5))
    policy = solve_VN(ref_model, 4).policy
    reduced = bellman_TN_policy(ref_model, W, policy)
    full = bellman_TN_policy(ref_model, W.expand(), FeedbackPolicy(policy.act, 2))
    for i, x in enumerate(full.states):
        assert full.values[i] == pytest.approx(reduced(x), abs=1e-12)


# --- solvers ----------------------------------------------------------------


def test_solve_VN_constant_reward():
    V = solve_VN(reference_model(reward=CONST_REWARD), 3, tol=1e-10)
    assert np.allclose(V.values, 2.0, atol=1e-9)


@pytest.mark.parametrize("n", [2, 3])
def test_solve_VN_matches_unreduced_oracle(ref_model, n):
    V = solve_VN(ref_model, n, tol=1e-11)
    full = solve_VN_unreduced(ref_model, n, tol=1e-11)
    for i, x in enumerate(full.states):
        assert V(x) == pytest.approx(full.values[i], abs=1e-9)


def test_solve_VN_fixed_point(ref_model):
    V = solve_VN(ref_model, 6)
    assert V.residual <= 1e-8
    assert greedy_gap(ref_model, V) <= 0.5 * 1e-8 + 1e-14


def test_greedy_count_policy_attains_value(ref_model):
    V = solve_VN(ref_model, 4, tol=1e-11)
    G = evaluate_policy(ref_model, V.policy, 4, tol=1e-11)
    assert np.allclose(G.values, V.values, atol=1e-9)


def test_single_agent_matches_mean_field_at_point_masses():
    # with one agent, no common noise and a law-free transition the two problems coincide at Dirac laws
    model = reference_model(noise=NO_COMMON, transition={"family": "influence_threshold",
                                                         "params": {"mean_field_weight": 0.0, "base": 0.4,
                                                                    "common_shifts": [0.0]}})
    V1 = solve_VN(model, 1, tol=1e-10)
    mf = value_iteration(model, 10, "deterministic", tol=1e-10)
    for x in (0, 1):
        mu = np.eye(2)[x]
        assert V1((x,)) == pytest.approx(mf.table(mu), abs=1e-8)


def test_unlift_reads_measures(ref_solution):
    table = unlift(ref_solution.table, 4, 2)
    for counts, value in zip(table.classes, table.values):
        assert value == ref_solution.table(np.asarray(counts) / 4)


# --- Monte-Carlo gain -------------------------------------------------------


def test_mc_gain_constant_reward():
    model = reference_model(reward=CONST_REWARD)
    g = mc_gain_N(model, FeedbackPolicy(lambda x: np.zeros_like(x), 2), (0, 1), 8, paths=20)
    assert g.mean == pytest.approx((1 - 0.5 ** 8) / 0.5, abs=1e-12)
    assert g.stderr == 0.0


def test_mc_gain_repeatable(ref_model):
    policy = FeedbackPolicy(lambda x: np.asarray(x), 2)
    a = mc_gain_N(ref_model, policy, (0, 1, 1), 10, paths=50, seed=9)
    b = mc_gain_N(ref_model, policy, (0, 1, 1), 10, paths=50, seed=9)
    assert a == b


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=5))
def test_class_table_is_permutation_invariant(x):
    rng = np.random.default_rng(len(x))
    W = NAgentValueTable(len(x), 2, rng.normal(size=len(x) + 1))
    for perm in itertools.permutations(x):
        assert W(perm) == W(x)


def test_full_table_mixed_radix():
    full = FullValueTable(3, 2, np.arange(8.0))
    assert full((1, 0, 1)) == 5.0
    assert full.lookup(np.array([[0, 1, 1], [1, 1, 1]])).tolist() == [3.0, 7.0]


def test_count_policy_assignment():
    policy = CountPolicy({(2, 1): np.array([[1, 1], [0, 1]])}, 2)
    assert policy.act(np.array([1, 0, 0])).tolist() == [1, 0, 1]


def test_value_table_nearest_lookup_for_unlift():
    grid = SimplexGrid(reference_model().state_space, 2)
    table = ValueTable(grid, np.array([0.0, 1.0, 2.0]))
    # counts (1, 3)/4 lies halfway between nodes 0 and 1, tie to the lower index
    assert unlift(table, 4, 2).values.tolist() == [0.0, 0.0, 1.0, 1.0, 2.0]
