"""The cooperative N-agent MDP on a finite state space.

The dynamics and the average reward are symmetric under simultaneous
permutation of agents, so the optimal value depends on a joint state only
through its state counts.  The reduced solver works on count vectors
("classes") and on action-count matrices; given a class and an action-count
matrix, the law of the next class is an exact convolution of multinomials.
Unreduced solvers over full joint states exist as oracles for small N.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .core import CapExceededError, ModelSpec, compositions, n_compositions
from .mkv import GainEstimate, sweep_bound
from .rng import substream

NOISE_TERM_CAP = 1_000_000
REDUCED_CAP = 5_000_000
FULL_STATE_CAP = 1 << 16
TIE_TOL = 1e-12


# ---------------------------------------------------------------------------
# joint dynamics


def _as_joint(x, a=None):
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if x.size == 0:
        raise ValueError("a joint state needs at least one agent")
    if a is None:
        return x
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    if a.shape != x.shape:
        raise ValueError("joint state and joint action differ in length")
    return x, a


def empirical_joint(model: ModelSpec, x, a) -> np.ndarray:
    """Flat weights of the empirical state-action measure of the agents."""
    x, a = _as_joint(x, a)
    idx = x * model.n_actions + a
    return np.bincount(idx, minlength=model.product.size) / x.size


def step_joint(model: ModelSpec, x, a, e, e0: int) -> np.ndarray:
    """Apply the transition to every agent with the shared empirical measure."""
    x, a = _as_joint(x, a)
    e = np.asarray(e, dtype=np.int64).reshape(-1)
    if e.shape != x.shape:
        raise ValueError("need one idiosyncratic noise value per agent")
    table = model.transition_table(empirical_joint(model, x, a))
    return table[x, a, e, int(e0)]


def reward_joint(model: ModelSpec, x, a) -> float:
    """Average of the agents' rewards at the shared empirical measure."""
    x, a = _as_joint(x, a)
    table = model.reward_table(empirical_joint(model, x, a))
    return float(table[x, a].mean())


def class_of(x, n_states: int) -> tuple[int, ...]:
    """Canonical class of a joint state: its count vector over states."""
    return tuple(int(c) for c in np.bincount(np.asarray(x, dtype=np.int64), minlength=n_states))


def representative(counts: Sequence[int]) -> np.ndarray:
    """The sorted joint state with the given counts."""
    return np.repeat(np.arange(len(counts)), counts)


def class_size(counts: Sequence[int]) -> int:
    n = sum(counts)
    out = math.factorial(n)
    for c in counts:
        out //= math.factorial(c)
    return out


# ---------------------------------------------------------------------------
# value tables


class NAgentValueTable:
    """Values indexed by class (state-count vector), in lexicographic count order."""

    def __init__(self, n: int, n_states: int, values=None, residual: float = math.nan, sweeps: int = 0):
        self.n = int(n)
        self.n_states = int(n_states)
        self.classes = list(compositions(self.n, self.n_states))
        self.index = {c: i for i, c in enumerate(self.classes)}
        self.values = np.zeros(len(self.classes)) if values is None else np.asarray(values, dtype=float)
        if self.values.shape != (len(self.classes),):
            raise ValueError("need one value per class")
        self.residual = residual
        self.sweeps = sweeps
        self.policy = None

    def __call__(self, x) -> float:
        return float(self.values[self.index[class_of(x, self.n_states)]])

    def at_class(self, counts) -> float:
        return float(self.values[self.index[tuple(counts)]])

    def lookup_indices(self, states: np.ndarray) -> np.ndarray:
        """Class index of each row of ``states`` (shape ``(m, n)``)."""
        counts = np.stack([(states == s).sum(axis=1) for s in range(self.n_states)], axis=1)
        return np.array([self.index[tuple(c)] for c in counts.tolist()], dtype=np.int64)

    def lookup(self, states: np.ndarray) -> np.ndarray:
        return self.values[self.lookup_indices(np.atleast_2d(states))]

    def with_values(self, values) -> NAgentValueTable:
        return NAgentValueTable(self.n, self.n_states, values)

    def expand(self) -> FullValueTable:
        full = FullValueTable(self.n, self.n_states)
        full.values = self.values[self.lookup_indices(full.states)]
        return full


class FullValueTable:
    """Values on every joint state; state ``x`` sits at its mixed-radix index (agent 0 most significant)."""

    def __init__(self, n: int, n_states: int, values=None, residual: float = math.nan, sweeps: int = 0):
        if n_states ** n > FULL_STATE_CAP:
            raise CapExceededError(f"{n_states}^{n} joint states exceed the cap")
        self.n = int(n)
        self.n_states = int(n_states)
        self.states = np.array(list(itertools.product(range(n_states), repeat=n)), dtype=np.int64)
        self.radix = n_states ** np.arange(n - 1, -1, -1)
        self.values = np.zeros(len(self.states)) if values is None else np.asarray(values, dtype=float)
        self.residual = residual
        self.sweeps = sweeps

    def __call__(self, x) -> float:
        return float(self.values[int(np.dot(np.asarray(x, dtype=np.int64), self.radix))])

    def lookup(self, states: np.ndarray) -> np.ndarray:
        return self.values[np.atleast_2d(states) @ self.radix]

    def with_values(self, values) -> FullValueTable:
        return FullValueTable(self.n, self.n_states, values)


# ---------------------------------------------------------------------------
# N-agent policies
#
# A policy exposes ``act(x, u)`` (u: one uniform per agent), ``action_law(x)``
# (per-agent independent action laws, shape (n, n_actions)) and optionally
# ``count_law(counts)``: the law of the action-count matrix given the class,
# which must not depend on the order of agents.  Policies with ``count_law``
# can be evaluated on the reduced state space.


class NAgentPolicy(Protocol):
    def act(self, x: np.ndarray, u: np.ndarray | None = None) -> np.ndarray: ...

    def action_law(self, x: np.ndarray) -> np.ndarray: ...


class FeedbackPolicy:
    """Deterministic ``x -> a`` given by a function; no symmetry assumed."""

    def __init__(self, fn, n_actions: int):
        self.fn = fn
        self.n_actions = n_actions

    def act(self, x, u=None):
        return np.asarray(self.fn(np.asarray(x)), dtype=np.int64)

    def action_law(self, x):
        return np.eye(self.n_actions)[self.act(x)]


class TablePolicy(FeedbackPolicy):
    """Feedback policy stored as an explicit table over all joint states."""

    def __init__(self, actions: dict, n_actions: int):
        self.table = {tuple(int(v) for v in k): np.asarray(a, dtype=np.int64) for k, a in actions.items()}
        super().__init__(lambda x: self.table[tuple(int(v) for v in x)], n_actions)


def assign_by_counts(x: np.ndarray, action_counts: np.ndarray) -> np.ndarray:
    """Hand out actions per state group in agent-index order, lowest action first."""
    x = np.asarray(x, dtype=np.int64)
    a = np.empty_like(x)
    for s in range(action_counts.shape[0]):
        agents = np.flatnonzero(x == s)
        a[agents] = np.repeat(np.arange(action_counts.shape[1]), action_counts[s])
    return a


class CountPolicy:
    """Symmetric feedback policy: one action-count matrix per class."""

    def __init__(self, choice: dict, n_actions: int):
        self.choice = {tuple(k): np.asarray(v, dtype=np.int64) for k, v in choice.items()}
        self.n_actions = n_actions

    def counts_for(self, counts) -> np.ndarray:
        return self.choice[tuple(int(c) for c in counts)]

    def act(self, x, u=None):
        x = np.asarray(x, dtype=np.int64)
        n_states = next(iter(self.choice)).__len__()
        return assign_by_counts(x, self.counts_for(class_of(x, n_states)))

    def action_law(self, x):
        return np.eye(self.n_actions)[self.act(x)]

    def count_law(self, counts):
        return [(self.counts_for(counts), 1.0)]


# ---------------------------------------------------------------------------
# reduced model


def action_count_matrices(counts: Sequence[int], n_actions: int) -> list[np.ndarray]:
    """All ``(n_states, n_actions)`` nonnegative matrices with row sums ``counts``."""
    per_row = [list(compositions(c, n_actions))[::-1] for c in counts]
    return [np.array(rows, dtype=np.int64) for rows in itertools.product(*per_row)]


def _multinomial_law(m: int, p: np.ndarray) -> dict[tuple[int, ...], float]:
    out = {}
    logp = np.log(np.where(p > 0, p, 1.0))
    for c in compositions(m, len(p)):
        if any(ci > 0 and pi == 0 for ci, pi in zip(c, p)):
            continue
        logv = math.lgamma(m + 1) + sum(ci * lp - math.lgamma(ci + 1) for ci, lp in zip(c, logp))
        out[c] = math.exp(logv)
    return out


def _convolve(a: dict, b: dict) -> dict:
    out: dict = defaultdict(float)
    for ka, va in a.items():
        for kb, vb in b.items():
            out[tuple(i + j for i, j in zip(ka, kb))] += va * vb
    return out


class ReducedModel:
    """Exact one-step data of the N-agent MDP on classes, memoized per (class, action counts)."""

    def __init__(self, model: ModelSpec, n: int):
        self.model = model
        self.n = int(n)
        self.table = NAgentValueTable(n, model.n_states)
        self.classes = self.table.classes
        self._cache: dict = {}

    def step(self, counts, action_counts: np.ndarray) -> tuple[float, np.ndarray]:
        """Average reward and next-class law (a vector over class indices)."""
        key = (tuple(counts), action_counts.tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        model = self.model
        joint = (action_counts / self.n).reshape(-1)
        reward = float(np.sum(model.reward_table(joint) * action_counts) / self.n)
        law = model.next_state_law(joint)  # (x, a, e0, x')
        nxt = np.zeros(len(self.classes))
        for e0, lam0 in enumerate(model.noise.common.weights):
            if lam0 == 0:
                continue
            dist = {tuple([0] * model.n_states): 1.0}
            for x, act in zip(*np.nonzero(action_counts)):
                dist = _convolve(dist, _multinomial_law(int(action_counts[x, act]), law[x, act, e0]))
            for c, p in dist.items():
                nxt[self.table.index[c]] += lam0 * p
        self._cache[key] = (reward, nxt)
        return reward, nxt

    def action_space(self, counts) -> list[np.ndarray]:
        return action_count_matrices(counts, self.model.n_actions)


@lru_cache(maxsize=32)
def reduced_model(model: ModelSpec, n: int) -> ReducedModel:
    return ReducedModel(model, n)


class _ReducedArrays:
    """Per-class stacked rewards and transition matrices for fast sweeps."""

    def __init__(self, red: ReducedModel):
        self.actions = []
        self.rewards = []
        self.transitions = []
        for counts in red.classes:
            acts = red.action_space(counts)
            data = [red.step(counts, m) for m in acts]
            self.actions.append(acts)
            self.rewards.append(np.array([d[0] for d in data]))
            self.transitions.append(np.array([d[1] for d in data]))

    def q_values(self, values: np.ndarray, beta: float) -> list[np.ndarray]:
        return [r + beta * (p @ values) for r, p in zip(self.rewards, self.transitions)]


@lru_cache(maxsize=32)
def _reduced_arrays(model: ModelSpec, n: int) -> _ReducedArrays:
    n_terms = 0
    for counts in compositions(n, model.n_states):
        n_terms += math.prod(n_compositions(c, model.n_actions) for c in counts)
    if n_terms * n_compositions(n, model.n_states) > REDUCED_CAP:
        raise CapExceededError(f"reduced N-agent problem with n={n} exceeds the cap")
    return _ReducedArrays(reduced_model(model, n))


def bellman_TN(model: ModelSpec, W: NAgentValueTable) -> NAgentValueTable:
    """``T_N W`` on classes (sup over joint actions reduced to action-count matrices)."""
    arrays = _reduced_arrays(model, W.n)
    values = np.array([qv.max() for qv in arrays.q_values(W.values, model.beta)])
    return W.with_values(values)


def solve_VN(model: ModelSpec, n: int, tol: float = 1e-8, max_sweeps: int | None = None) -> NAgentValueTable:
    """Optimal N-agent value by value iteration on classes, from ``W = 0``.

    The returned table carries ``residual``, ``sweeps`` and a greedy
    :class:`CountPolicy` in ``policy``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    arrays = _reduced_arrays(model, n)
    if max_sweeps is None:
        scale = max(model.reward_bound, model.reward_sup * (1 - model.beta))
        max_sweeps = sweep_bound(model.beta, scale, tol) + 10
    values = np.zeros(len(arrays.rewards))
    residual, sweeps = math.inf, 0
    while residual > tol:
        if sweeps >= max_sweeps:
            raise CapExceededError(f"N-agent value iteration did not reach {tol} in {max_sweeps} sweeps")
        new = np.array([qv.max() for qv in arrays.q_values(values, model.beta)])
        sweeps += 1
        residual = float(np.abs(new - values).max())
        values = new
        if model.beta == 0.0:
            residual = 0.0
    table = NAgentValueTable(n, model.n_states, values, residual, sweeps)
    choice = {}
    for counts, acts, qv in zip(table.classes, arrays.actions, arrays.q_values(values, model.beta)):
        best = int(np.argmax(qv >= qv.max() - TIE_TOL * max(1.0, abs(qv.max()))))
        choice[counts] = acts[best]
    table.policy = CountPolicy(choice, model.n_actions)
    return table


def evaluate_policy(model: ModelSpec, policy, n: int, tol: float = 1e-10,
                    max_sweeps: int | None = None, reduced: bool | None = None):
    """Fixed point of the policy operator, by iteration from ``W = 0``.

    Uses the class-reduced operator when the policy has ``count_law``.
    """
    if reduced is None:
        reduced = hasattr(policy, "count_law")
    W = NAgentValueTable(n, model.n_states) if reduced else FullValueTable(n, model.n_states)
    if max_sweeps is None:
        scale = max(model.reward_bound, model.reward_sup * (1 - model.beta))
        max_sweeps = sweep_bound(model.beta, scale, tol) + 10
    residual, sweeps = math.inf, 0
    op = _PolicyOperator(model, policy, n, reduced)
    while residual > tol:
        if sweeps >= max_sweeps:
            raise CapExceededError("policy evaluation did not converge")
        new = op(W.values)
        sweeps += 1
        residual = float(np.abs(new - W.values).max())
        W = W.with_values(new)
        if model.beta == 0.0:
            residual = 0.0
    W.residual, W.sweeps = residual, sweeps
    return W


class _PolicyOperator:
    """Linear policy operator ``W -> r + beta P W``, assembled once."""

    def __init__(self, model: ModelSpec, policy, n: int, reduced: bool):
        self.beta = model.beta
        if reduced:
            red = reduced_model(model, n)
            rows_r, rows_p = [], []
            for counts in red.classes:
                r_acc, p_acc = 0.0, np.zeros(len(red.classes))
                for mat, prob in policy.count_law(counts):
                    r, p = red.step(counts, np.asarray(mat, dtype=np.int64))
                    r_acc += prob * r
                    p_acc += prob * p
                rows_r.append(r_acc)
                rows_p.append(p_acc)
            self.reward, self.matrix = np.array(rows_r), np.array(rows_p)
        else:
            full = FullValueTable(n, model.n_states)
            self.reward = np.empty(len(full.states))
            self.matrix = np.zeros((len(full.states), len(full.states)))
            for i, x in enumerate(full.states):
                r, idx, prob = _policy_step_full(model, policy, x, full)
                self.reward[i] = r
                np.add.at(self.matrix[i], idx, prob)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.reward + self.beta * (self.matrix @ values)


def _noise_grid(model: ModelSpec, n: int, cap: int):
    n_idio = model.noise.idio_size
    if n_idio ** n > cap:
        raise CapExceededError(f"|E|^N = {n_idio}^{n} noise terms exceed the cap {cap}")
    e = np.array(list(itertools.product(range(n_idio), repeat=n)), dtype=np.int64)
    w = np.prod(np.asarray(model.noise.idio.weights)[e], axis=1)
    return e, w


def _expected_next(model: ModelSpec, W, x, a, cap: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Reward, next-state table indices and their probabilities for one joint action."""
    x, a = _as_joint(x, a)
    e, w = _noise_grid(model, x.size, cap)
    joint = empirical_joint(model, x, a)
    reward = float(model.reward_table(joint)[x, a].mean())
    table = model.transition_table(joint)
    idx, prob = [], []
    for e0, lam0 in enumerate(model.noise.common.weights):
        if lam0 == 0:
            continue
        nxt = table[x[None, :], a[None, :], e, e0]
        idx.append(nxt)
        prob.append(lam0 * w)
    return reward, np.concatenate(idx), np.concatenate(prob)


def bellman_TN_action(model: ModelSpec, W, x, a, cap: int = NOISE_TERM_CAP) -> float:
    """One-step value of joint action ``a`` at ``x``, summing exactly over ``E^N x E0``."""
    reward, nxt, prob = _expected_next(model, W, x, a, cap)
    if model.beta == 0.0:
        return reward
    return reward + model.beta * float(np.dot(prob, W.lookup(nxt)))


def _policy_step_full(model: ModelSpec, policy, x, full: FullValueTable, cap: int = NOISE_TERM_CAP):
    law = np.asarray(policy.action_law(np.asarray(x)), dtype=float)  # (n, n_actions)
    n = len(x)
    reward, idx, prob = 0.0, [], []
    support = [np.flatnonzero(row > 0) for row in law]
    for a in itertools.product(*support):
        pa = float(np.prod(law[np.arange(n), list(a)]))
        r, nxt, p = _expected_next(model, full, x, a, cap)
        reward += pa * r
        idx.append(nxt @ full.radix)
        prob.append(pa * p)
    return reward, np.concatenate(idx), np.concatenate(prob)


def bellman_TN_policy(model: ModelSpec, W, policy):
    """One application of the policy operator to ``W``.

    Exact: the expectation over the agents' private randomization is a sum over
    the product of their per-agent action laws.  On a class table the policy
    must expose ``count_law``; otherwise pass a :class:`FullValueTable`.
    """
    if isinstance(W, NAgentValueTable):
        if not hasattr(policy, "count_law"):
            W = W.expand()
        else:
            return W.with_values(_PolicyOperator(model, policy, W.n, True)(W.values))
    return W.with_values(_PolicyOperator(model, policy, W.n, False)(W.values))


def greedy_gap(model: ModelSpec, W: NAgentValueTable) -> float:
    """``sup |T_N W - W|``: the fixed-point residual of a class table."""
    return float(np.abs(bellman_TN(model, W).values - W.values).max())


# ---------------------------------------------------------------------------
# unreduced oracle


def solve_VN_unreduced(model: ModelSpec, n: int, tol: float = 1e-10,
                       max_sweeps: int | None = None) -> FullValueTable:
    """Value iteration over all joint states and all joint actions (small n only)."""
    full = FullValueTable(n, model.n_states)
    actions = list(itertools.product(range(model.n_actions), repeat=n))
    steps = []
    for x in full.states:
        per_action = []
        for a in actions:
            r, nxt, p = _expected_next(model, full, x, a, NOISE_TERM_CAP)
            per_action.append((r, nxt @ full.radix, p))
        steps.append(per_action)
    if max_sweeps is None:
        scale = max(model.reward_bound, model.reward_sup * (1 - model.beta))
        max_sweeps = sweep_bound(model.beta, scale, tol) + 10
    values = np.zeros(len(full.states))
    residual, sweeps = math.inf, 0
    while residual > tol and sweeps < max_sweeps:
        new = np.array([max(r + model.beta * np.dot(p, values[idx]) for r, idx, p in per_action)
                        for per_action in steps])
        sweeps += 1
        residual = float(np.abs(new - values).max())
        values = new
        if model.beta == 0.0:
            residual = 0.0
    return FullValueTable(n, model.n_states, values, residual, sweeps)


def unlift(V, n: int, n_states: int) -> NAgentValueTable:
    """``x -> V(empirical measure of x)`` on classes, for any callable ``V`` on measures."""
    table = NAgentValueTable(n, n_states)
    table.values = np.array([V(np.asarray(c, dtype=float) / n) for c in table.classes])
    return table


# ---------------------------------------------------------------------------
# Monte-Carlo gain


def mc_gain_N(model: ModelSpec, policy, x0, horizon: int, paths: int = 1000, seed: int = 0) -> GainEstimate:
    """Average discounted reward along simulated trajectories, all noises sampled.

    Path ``k`` draws from its own substream, so results do not depend on order.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x0 = _as_joint(x0)
    n = x0.size
    lam = np.asarray(model.noise.idio.weights)
    lam0 = np.asarray(model.noise.common.weights)
    gains = np.empty(paths)
    for k in range(paths):
        rng = substream(seed, "n-gain", k)
        u = rng.random((horizon, n))
        e = rng.choice(len(lam), size=(horizon, n), p=lam)
        e0 = rng.choice(len(lam0), size=horizon, p=lam0)
        x = x0
        total, disc = 0.0, 1.0
        for t in range(horizon):
            a = policy.act(x, u[t])
            total += disc * reward_joint(model, x, a)
            x = step_joint(model, x, a, e[t], e0[t])
            disc *= model.beta
        gains[k] = total
    mean = math.fsum(gains) / paths
    stderr = 0.0
    if paths > 1:
        stderr = math.sqrt(math.fsum((gains - mean) ** 2) / (paths - 1) / paths)
    bias = model.beta ** horizon * model.reward_sup / (1 - model.beta)
    return GainEstimate(mean, stderr, bias)
