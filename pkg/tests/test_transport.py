import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfchaos.core import CapExceededError, FiniteMetricSpace, Measure
from mfchaos.transport import (default_candidates, estimate_MN, kantorovich_dual_value, lipschitz_vertices,
                               optimal_coupling, optimal_permutation, wasserstein1, wasserstein1_batch)

from oracles import w1_lp


def random_metric(rng, n):
    """Shortest-path metric of a random complete graph, so the triangle inequality holds."""
    w = rng.uniform(0.2, 2.0, (n, n))
    w = np.triu(w, 1)
    w = w + w.T
    for k in range(n):
        w = np.minimum(w, w[:, [k]] + w[[k], :])
    np.fill_diagonal(w, 0.0)
    return FiniteMetricSpace(tuple(range(n)), w)


def random_pair(rng, space, sparse=False):
    a, b = rng.dirichlet(np.ones(space.size), 2)
    if sparse:
        a[rng.random(space.size) < 0.4] = 0
        b[rng.random(space.size) < 0.4] = 0
        a[0] += 1e-3
        b[-1] += 1e-3
        a, b = a / a.sum(), b / b.sum()
    return Measure(space, a), Measure(space, b)


def test_line_example():
    space = FiniteMetricSpace.line(3)
    assert wasserstein1(Measure.dirac(space, 0), Measure.dirac(space, 2)) == 2.0


def test_routes_agree_with_scipy_primal():
    rng = np.random.default_rng(0)
    for trial in range(150):
        n = int(rng.integers(2, 7))
        space = random_metric(rng, n)
        mu, nu = random_pair(rng, space, sparse=trial % 3 == 0)
        ref = w1_lp(mu.weights, nu.weights, space.dist)
        assert wasserstein1(mu, nu) == pytest.approx(ref, abs=1e-9)
        assert wasserstein1(mu, nu, method="lp") == pytest.approx(ref, abs=1e-9)
        assert kantorovich_dual_value(mu, nu) == pytest.approx(ref, abs=1e-9)
        if n <= 5:  # vertex enumeration at 6 points is correct but slow per new space
            assert wasserstein1_batch(mu.weights, nu)[0] == pytest.approx(ref, abs=1e-9)


def test_discrete_closed_form_matches_flow():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        space = FiniteMetricSpace.discrete(n, scale=float(rng.uniform(0.5, 3)))
        mu, nu = random_pair(rng, space)
        tv = 0.5 * np.abs(mu.weights - nu.weights).sum()
        assert wasserstein1(mu, nu) == pytest.approx(space.diameter * tv, abs=1e-12)
        assert wasserstein1(mu, nu, method="flow") == pytest.approx(space.diameter * tv, abs=1e-9)


def test_coupling_marginals_and_cost():
    rng = np.random.default_rng(2)
    for _ in range(50):
        space = random_metric(rng, int(rng.integers(2, 9)))
        mu, nu = random_pair(rng, space, sparse=True)
        c = optimal_coupling(mu, nu)
        assert np.all(c.plan >= -1e-15)
        assert np.allclose(c.plan.sum(axis=1), mu.weights, atol=1e-12)
        assert np.allclose(c.plan.sum(axis=0), nu.weights, atol=1e-12)
        assert c.cost == pytest.approx(wasserstein1(mu, nu, method="lp"), abs=1e-9)


def test_w1_is_a_metric_on_samples():
    rng = np.random.default_rng(3)
    space = random_metric(rng, 5)
    for _ in range(60):
        a, b, c = (Measure(space, w) for w in rng.dirichlet(np.ones(5), 3))
        assert wasserstein1(a, a) == 0.0
        assert wasserstein1(a, b) == pytest.approx(wasserstein1(b, a), abs=1e-10)
        assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-10


def test_lipschitz_vertices_are_one_lipschitz():
    rng = np.random.default_rng(4)
    space = random_metric(rng, 5)
    verts = lipschitz_vertices(space)
    assert np.all(verts[:, 0] == 0.0)
    gaps = np.abs(verts[:, :, None] - verts[:, None, :]) - space.dist[None]
    assert gaps.max() <= 1e-9


def test_mismatched_spaces_rejected():
    a = Measure.uniform(FiniteMetricSpace.discrete(3))
    b = Measure.uniform(FiniteMetricSpace.line(3))
    with pytest.raises(ValueError):
        wasserstein1(a, b)


# --- permutations -----------------------------------------------------------


def brute_permutation(y, yp, space):
    n = len(y)
    best, arg = None, None
    for perm in itertools.permutations(range(n)):
        c = sum(space.dist[y[i], yp[perm[i]]] for i in range(n))
        if best is None or c < best - 1e-12:
            best, arg = c, perm
    return arg, best / n


def test_permutation_hand_example():
    space = FiniteMetricSpace.line(3)
    res = optimal_permutation([0, 2], [2, 0], space)
    assert res.sigma == (1, 0)
    assert res.cost == 0.0
    # all matchings tie on the discrete metric when labels coincide, so the identity wins
    res = optimal_permutation([1, 1, 1], [1, 1, 1], FiniteMetricSpace.discrete(2))
    assert res.sigma == (0, 1, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 3), min_size=n, max_size=n),
                                                      st.lists(st.integers(0, 3), min_size=n, max_size=n))))
def test_permutation_matches_brute_force(pair):
    y, yp = pair
    space = FiniteMetricSpace.line(4)
    sigma, cost = brute_permutation(y, yp, space)
    res = optimal_permutation(y, yp, space)
    assert res.sigma == sigma
    assert res.cost == pytest.approx(cost, abs=1e-12)
    assert optimal_permutation(y, yp, space, method="assignment").sigma == sigma


def test_permutation_cost_equals_empirical_w1():
    rng = np.random.default_rng(5)
    space = random_metric(rng, 4)
    for _ in range(40):
        n = int(rng.integers(1, 8))
        y, yp = rng.integers(0, 4, n), rng.integers(0, 4, n)
        mu = Measure(space, np.bincount(y, minlength=4) / n)
        nu = Measure(space, np.bincount(yp, minlength=4) / n)
        assert optimal_permutation(y, yp, space).cost == pytest.approx(wasserstein1(mu, nu), abs=1e-9)


def test_permutation_cap():
    with pytest.raises(CapExceededError):
        optimal_permutation(list(range(9)), list(range(9)), FiniteMetricSpace.discrete(9), method="exhaustive")
    res = optimal_permutation([0] * 10, [1] * 10, FiniteMetricSpace.discrete(2))
    assert res.sigma == tuple(range(10))


# --- M_N --------------------------------------------------------------------


def test_mn_two_point_exact():
    space = FiniteMetricSpace.discrete(2)
    est = estimate_MN(space, 2, [Measure.uniform(space)], exact=True, return_details=True)
    assert est.value == 0.25
    assert est.stderr == 0.0


def test_mn_exact_matches_hand_sum():
    # for a Bernoulli(p) on two points, E W1 = sum_k C(n,k) p^k (1-p)^(n-k) |k/n - p|
    from math import comb
    space = FiniteMetricSpace.discrete(2)
    for p in (0.1, 0.37, 0.5):
        mu = Measure(space, [1 - p, p])
        for n in (1, 3, 7):
            ref = sum(comb(n, k) * p ** k * (1 - p) ** (n - k) * abs(k / n - p) for k in range(n + 1))
            assert estimate_MN(space, n, [mu], exact=True) == pytest.approx(ref, abs=1e-14)


def test_mn_dirac_is_zero():
    space = FiniteMetricSpace.line(3)
    assert estimate_MN(space, 5, [Measure.dirac(space, 1)], exact=True) == 0.0
    assert estimate_MN(space, 5, [Measure.dirac(space, 1)], trials=100) == 0.0


def test_mn_mc_agrees_with_exact():
    space = FiniteMetricSpace.line(3)
    cands = default_candidates(space, seed=0, n_dirichlet=4)
    exact = estimate_MN(space, 6, cands, exact=True, return_details=True)
    mc = estimate_MN(space, 6, cands, trials=4000, seed=1, return_details=True)
    diff = np.abs(mc.per_candidate - exact.per_candidate)
    assert np.all(diff <= 4 * mc.stderr + 1e-12)


def test_mn_is_deterministic_per_seed():
    space = FiniteMetricSpace.discrete(3)
    a = estimate_MN(space, 32, trials=300, seed=7)
    b = estimate_MN(space, 32, trials=300, seed=7)
    assert a == b


def test_mn_sup_exceeds_uniform_for_two_points():
    # off-centre Bernoulli laws give a larger expected distance at n = 2
    space = FiniteMetricSpace.discrete(2)
    assert estimate_MN(space, 2, exact=True) > 0.25


def test_mn_decreasing_in_n_exact():
    space = FiniteMetricSpace.discrete(2)
    values = [estimate_MN(space, n, exact=True) for n in (1, 2, 4, 8, 16)]
    assert all(v2 < v1 for v1, v2 in zip(values, values[1:]))
