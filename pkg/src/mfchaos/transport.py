"""Exact optimal transport on finite metric spaces.

Wasserstein-1 distances are computed exactly: in closed form for discrete
metrics and by a successive-shortest-path min-cost flow otherwise.  The
Kantorovich dual is solved as an independent linear program so the two can
check each other.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .core import CapExceededError, FiniteMetricSpace, Measure, compositions, n_compositions
from .rng import substream

FLOW_EPS = 1e-15
EXHAUSTIVE_MAX_N = 8
VERTEX_MAX_POINTS = 6
EXACT_MN_CAP = 1_000_000
MN_BLOCK = 64


@dataclass(frozen=True, eq=False)
class Coupling:
    source: Measure
    target: Measure
    plan: np.ndarray

    @property
    def cost(self) -> float:
        return float(np.sum(self.plan * self.source.space.dist))


class PermutationResult(NamedTuple):
    """``sigma[i]`` is the (0-based) index in ``y_prime`` matched to ``y[i]``."""

    sigma: tuple[int, ...]
    cost: float


def empirical_measure(points: Sequence[int], space: FiniteMetricSpace) -> Measure:
    points = np.asarray(points, dtype=np.int64).reshape(-1)
    if points.size == 0:
        raise ValueError("empirical measure of an empty sample")
    if points.min() < 0 or points.max() >= space.size:
        raise IndexError("point index out of range")
    counts = np.bincount(points, minlength=space.size)
    return Measure(space, counts / points.size)


def joint_empirical_measure(states: Sequence[int], actions: Sequence[int], product) -> Measure:
    """Empirical measure of the pairs ``(states[i], actions[i])`` on a product space."""
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    if states.shape != actions.shape:
        raise ValueError("states and actions differ in length")
    return empirical_measure(states * product.right.size + actions, product)


def _check_same_space(mu: Measure, nu: Measure) -> None:
    if mu.space != nu.space:
        raise ValueError("measures live on different spaces")


def _ssp_transport(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Min-cost transport of ``a`` onto ``b`` by successive shortest paths.

    Residual graph: supply node i -> demand node j with unbounded capacity and
    cost ``cost[i, j]``; the reverse arc carries the current flow at negated
    cost.  Shortest paths use Bellman-Ford since reverse arcs are negative.
    """
    ns, nt = cost.shape
    flow = np.zeros((ns, nt))
    ra, rb = a.astype(float).copy(), b.astype(float).copy()
    max_rounds = 4 * (ns + 1) * (nt + 1) + 64
    for _ in range(max_rounds):
        live_s = ra > FLOW_EPS
        live_t = rb > FLOW_EPS
        if not live_s.any() or not live_t.any():
            return flow
        dist_s = np.where(live_s, 0.0, np.inf)
        pred_s = np.full(ns, -1)  # demand node we came from, -1 = path start
        dist_t = np.full(nt, np.inf)
        pred_t = np.full(nt, -1)
        for _ in range(ns + nt + 1):
            cand_t = dist_s[:, None] + cost
            best_i = np.argmin(cand_t, axis=0)
            new_t = cand_t[best_i, np.arange(nt)]
            better_t = new_t < dist_t - 1e-15
            dist_t = np.where(better_t, new_t, dist_t)
            pred_t = np.where(better_t, best_i, pred_t)
            back = np.where(flow > FLOW_EPS, dist_t[None, :] - cost, np.inf)
            best_j = np.argmin(back, axis=1)
            new_s = back[np.arange(ns), best_j]
            better_s = new_s < dist_s - 1e-15
            dist_s = np.where(better_s, new_s, dist_s)
            pred_s = np.where(better_s, best_j, pred_s)
            if not better_t.any() and not better_s.any():
                break
        sinks = np.where(live_t, dist_t, np.inf)
        j = int(np.argmin(sinks))
        if not np.isfinite(sinks[j]):
            raise RuntimeError("transport residual graph is disconnected")
        path = []  # alternating (i, j) forward arcs, walked backwards
        jj = j
        while True:
            i = int(pred_t[jj])
            path.append((i, jj))
            if pred_s[i] < 0:
                break
            jj = int(pred_s[i])
        push = min(ra[path[-1][0]], rb[j])
        for k in range(len(path) - 1):
            i_back, j_back = path[k][0], path[k + 1][1]
            push = min(push, flow[i_back, j_back])
        for k, (i, jj) in enumerate(path):
            flow[i, jj] += push
            if k + 1 < len(path):
                flow[i, path[k + 1][1]] -= push
        ra[path[-1][0]] -= push
        rb[j] -= push
    raise RuntimeError("min-cost flow did not terminate")


def _lp_transport(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> np.ndarray:
    ns, nt = cost.shape
    rows = np.kron(np.eye(ns), np.ones(nt))
    cols = np.kron(np.ones(ns), np.eye(nt))
    res = linprog(cost.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return np.maximum(res.x.reshape(ns, nt), 0.0)


def optimal_coupling(mu: Measure, nu: Measure, method: str = "auto") -> Coupling:
    """Optimal plan for the cost ``dist``; ``method`` is auto | flow | lp."""
    _check_same_space(mu, nu)
    space = mu.space
    p, q = np.asarray(mu.weights), np.asarray(nu.weights)
    shared = np.minimum(p, q)
    plan = np.diag(shared)
    excess, deficit = p - shared, q - shared
    src = np.flatnonzero(excess > FLOW_EPS)
    dst = np.flatnonzero(deficit > FLOW_EPS)
    if src.size and dst.size:
        # with a metric cost, keeping the common mass in place is optimal
        if method == "auto" and space.is_discrete:
            block = np.outer(excess[src], deficit[dst]) / excess[src].sum()
        elif method in ("auto", "flow"):
            block = _ssp_transport(excess[src], deficit[dst], space.dist[np.ix_(src, dst)])
        elif method == "lp":
            block = _lp_transport(excess[src], deficit[dst], space.dist[np.ix_(src, dst)])
        else:
            raise ValueError(f"unknown method {method!r}")
        plan[np.ix_(src, dst)] += block
    return Coupling(mu, nu, plan)


def wasserstein1(mu: Measure, nu: Measure, method: str = "auto",
                 return_coupling: bool = False):
    """Exact W1 between two measures on the same finite space."""
    _check_same_space(mu, nu)
    if method == "auto" and mu.space.is_discrete:
        value = 0.5 * float(np.abs(np.asarray(mu.weights) - np.asarray(nu.weights)).sum())
        value *= mu.space.diameter
        if not return_coupling:
            return value
        return value, optimal_coupling(mu, nu)
    coupling = optimal_coupling(mu, nu, method)
    if return_coupling:
        return coupling.cost, coupling
    return coupling.cost


def kantorovich_dual_value(mu: Measure, nu: Measure) -> float:
    """max of ``<phi, mu - nu>`` over 1-Lipschitz potentials, as a linear program."""
    _check_same_space(mu, nu)
    n = mu.space.size
    diff = np.asarray(mu.weights) - np.asarray(nu.weights)
    if n == 1:
        return 0.0
    i, j = np.where(~np.eye(n, dtype=bool))
    a_ub = np.zeros((i.size, n))
    a_ub[np.arange(i.size), i] = 1.0
    a_ub[np.arange(i.size), j] = -1.0
    bounds = [(0.0, 0.0)] + [(None, None)] * (n - 1)
    res = linprog(-diff, A_ub=a_ub, b_ub=mu.space.dist[i, j], bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual LP failed: {res.message}")
    return float(-res.fun)


@lru_cache(maxsize=None)
def _prufer_trees(n: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    trees = []
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for v in seq:
            degree[v] += 1
        edges = []
        for v in seq:
            leaf = min(k for k in range(n) if degree[k] == 1)
            edges.append((leaf, v))
            degree[leaf] -= 1
            degree[v] -= 1
        u, w = [k for k in range(n) if degree[k] == 1]
        edges.append((u, w))
        trees.append(tuple(edges))
    return tuple(trees)


def lipschitz_vertices(space: FiniteMetricSpace) -> np.ndarray:
    """All vertices of ``{phi : phi[0] = 0, phi[i] - phi[j] <= d[i, j]}``.

    A vertex is fixed by a spanning tree of tight constraints, each tight in one
    direction, so enumerating oriented spanning trees and keeping the feasible
    potentials lists every vertex.  Then ``W1(mu, nu) = max_v <v, mu - nu>``.
    """
    return _lipschitz_vertices(space.dist.tobytes(), space.size)


@lru_cache(maxsize=32)
def _lipschitz_vertices(key: bytes, n: int) -> np.ndarray:
    if n > VERTEX_MAX_POINTS:
        raise CapExceededError(f"vertex enumeration limited to {VERTEX_MAX_POINTS} points")
    dist = np.frombuffer(key).reshape(n, n)
    if n == 1:
        return np.zeros((1, 1))
    found = set()
    for edges in _prufer_trees(n):
        adj = [[] for _ in range(n)]
        for k, (u, w) in enumerate(edges):
            adj[u].append((w, k))
            adj[w].append((u, k))
        for signs in itertools.product((1.0, -1.0), repeat=n - 1):
            phi = np.full(n, np.nan)
            phi[0] = 0.0
            stack = [0]
            while stack:
                u = stack.pop()
                for w, k in adj[u]:
                    if np.isnan(phi[w]):
                        a, b = edges[k]
                        step = signs[k] * dist[a, b]  # phi[a] - phi[b] = step
                        phi[w] = phi[u] - step if w == b else phi[u] + step
                        stack.append(w)
            if np.all(phi[:, None] - phi[None, :] <= dist + 1e-12):
                found.add(tuple(np.round(phi, 12)))
    return np.array(sorted(found))


def wasserstein1_batch(weights: np.ndarray, nu: Measure) -> np.ndarray:
    """W1 from each row of ``weights`` (probability vectors) to ``nu``."""
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    diff = weights - np.asarray(nu.weights)[None, :]
    space = nu.space
    if space.is_discrete:
        return 0.5 * space.diameter * np.abs(diff).sum(axis=1)
    if space.size <= VERTEX_MAX_POINTS:
        return np.maximum((diff @ lipschitz_vertices(space).T).max(axis=1), 0.0)
    return np.array([wasserstein1(Measure(space, w), nu) for w in weights])


def _perm_table(n: int) -> np.ndarray:
    return _perm_table_cached(n)


@lru_cache(maxsize=EXHAUSTIVE_MAX_N + 1)
def _perm_table_cached(n: int) -> np.ndarray:
    table = np.array(list(itertools.permutations(range(n))), dtype=np.int8)
    table.setflags(write=False)
    return table


def _tie_tol(value: float) -> float:
    return 1e-12 * max(1.0, abs(value))


def optimal_permutation(y: Sequence[int], y_prime: Sequence[int], space: FiniteMetricSpace,
                        method: str = "auto") -> PermutationResult:
    """Cost-minimizing matching of ``y`` onto ``y_prime``, lexicographically first among ties.

    ``method``: ``exhaustive`` (all N! permutations in lexicographic order, N <= 8),
    ``assignment`` (Hungarian solve followed by lexicographic refinement), or
    ``auto`` (exhaustive for N <= 8).
    """
    y = np.asarray(y, dtype=np.int64)
    y_prime = np.asarray(y_prime, dtype=np.int64)
    if y.shape != y_prime.shape or y.ndim != 1:
        raise ValueError("y and y_prime must be sequences of equal length")
    n = y.size
    if n == 0:
        raise ValueError("empty point sequences")
    cost = space.dist[np.ix_(y, y_prime)]
    if method == "auto":
        method = "exhaustive" if n <= EXHAUSTIVE_MAX_N else "assignment"
    if method == "exhaustive":
        if n > EXHAUSTIVE_MAX_N:
            raise CapExceededError(f"exhaustive permutation search limited to N <= {EXHAUSTIVE_MAX_N}")
        perms = _perm_table(n)
        totals = cost[np.arange(n), perms].sum(axis=1)
        best = totals.min()
        k = int(np.flatnonzero(totals <= best + _tie_tol(best))[0])
        sigma = tuple(int(s) for s in perms[k])
    elif method == "assignment":
        sigma = _lex_assignment(cost)
    else:
        raise ValueError(f"unknown method {method!r}")
    return PermutationResult(sigma, float(cost[np.arange(n), sigma].sum() / n))


def _lex_assignment(cost: np.ndarray) -> tuple[int, ...]:
    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()
    sigma: list[int] = []
    used = np.zeros(n, dtype=bool)
    fixed = 0.0
    for i in range(n):
        rest_rows = np.arange(i + 1, n)
        for j in np.flatnonzero(~used):
            rest_cols = np.flatnonzero(~used & (np.arange(n) != j))
            rest = 0.0
            if rest_rows.size:
                sub = cost[np.ix_(rest_rows, rest_cols)]
                r, c = linear_sum_assignment(sub)
                rest = sub[r, c].sum()
            if fixed + cost[i, j] + rest <= best + _tie_tol(best):
                sigma.append(int(j))
                used[j] = True
                fixed += cost[i, j]
                break
        else:  # pragma: no cover - the optimum is always reachable
            raise RuntimeError("lexicographic refinement lost the optimum")
    return tuple(sigma)


# ---------------------------------------------------------------------------
# M_N


class MNEstimate(NamedTuple):
    value: float
    stderr: float
    argmax: int
    per_candidate: np.ndarray


def default_candidates(space: FiniteMetricSpace, seed: int = 0, n_dirichlet: int = 32) -> list[Measure]:
    """Uniform measure, every vertex and ``n_dirichlet`` flat-Dirichlet draws."""
    cands = [Measure.uniform(space)]
    cands += [Measure.dirac(space, k) for k in range(space.size)]
    rng = substream(seed, "mn-candidates")
    for w in rng.dirichlet(np.ones(space.size), size=n_dirichlet):
        cands.append(Measure(space, w / w.sum()))
    return cands


def _exact_expected_w1(mu: Measure, n: int) -> tuple[float, float]:
    k = mu.space.size
    if n_compositions(n, k) > EXACT_MN_CAP:
        raise CapExceededError("too many multinomial outcomes for exact M_N")
    counts = np.array(list(compositions(n, k)), dtype=np.int64)
    w = np.asarray(mu.weights)
    logw = np.log(np.where(w > 0, w, 1.0))
    possible = ~np.any((counts > 0) & (w[None, :] == 0), axis=1)
    counts = counts[possible]
    log_coef = math.lgamma(n + 1) - np.array([sum(math.lgamma(c + 1) for c in row) for row in counts])
    pmf = np.exp(log_coef + counts @ logw)
    dists = wasserstein1_batch(counts / n, mu)
    return math.fsum(pmf * dists), 0.0


def _mc_expected_w1(mu: Measure, n: int, trials: int, seed: int, stream: int) -> tuple[float, float]:
    # trials are split into fixed blocks, each with its own counter-based substream,
    # so the result does not depend on how blocks are scheduled
    values = []
    p = np.asarray(mu.weights)
    for block, start in enumerate(range(0, trials, MN_BLOCK)):
        size = min(MN_BLOCK, trials - start)
        rng = substream(seed, "mn", n, stream, block)
        counts = rng.multinomial(n, p, size=size)
        values.append(wasserstein1_batch(counts / n, mu))
    values = np.concatenate(values)
    mean = math.fsum(values) / trials
    if trials > 1:
        var = math.fsum((values - mean) ** 2) / (trials - 1)
        return mean, math.sqrt(var / trials)
    return mean, 0.0


def estimate_MN(space: FiniteMetricSpace, n: int, candidate_measures: Sequence[Measure] | None = None,
                trials: int = 2000, seed: int = 0, exact: bool = False,
                return_details: bool = False):
    """Lower estimate of ``sup_mu E[W1(empirical_n(mu), mu)]`` over candidate laws.

    Monte-Carlo by default; ``exact=True`` sums over all multinomial outcomes.
    """
    if n < 1 or trials < 1:
        raise ValueError("n and trials must be >= 1")
    if candidate_measures is None:
        candidate_measures = default_candidates(space, seed)
    if len(candidate_measures) == 0:
        raise ValueError("empty candidate set")
    results = []
    for idx, mu in enumerate(candidate_measures):
        if mu.space != space:
            raise ValueError("candidate measure on a different space")
        if exact:
            results.append(_exact_expected_w1(mu, n))
        else:
            results.append(_mc_expected_w1(mu, n, trials, seed, idx))
    means = np.array([r[0] for r in results])
    best = int(np.argmax(means))
    if return_details:
        return MNEstimate(float(means[best]), results[best][1], best, means)
    return float(means[best])
