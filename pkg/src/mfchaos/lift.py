"""Transfer of a mean-field policy to the N-agent system.

Two constructions.  The feedback lift chooses the joint action whose
empirical state-action law is closest in W1 to the mean-field target
``mu_N[x] (x) kernel``; for a product metric and a target sharing the state
marginal the transport splits per state, so per-state count rounding solves
it.  The randomized lift lets each agent sample from its own state's kernel
row with a private uniform.
"""
from __future__ import annotations

import itertools
import math
from typing import NamedTuple

import numpy as np

from .core import CapExceededError, FiniteMetricSpace, Measure, ModelSpec, ProductSpace, gamma_exponent
from .mkv import MeanFieldPolicy, sample_action
from .nagent import _multinomial_law, assign_by_counts, class_of, evaluate_policy, solve_VN
from .rng import substream
from .transport import estimate_MN, wasserstein1, wasserstein1_batch

BRUTE_FORCE_CAP = 4096


class LiftedAction(NamedTuple):
    actions: np.ndarray
    cost: float


def _product_of(policy: MeanFieldPolicy) -> ProductSpace:
    actions = policy.action_space or FiniteMetricSpace.discrete(policy.kernels.shape[2])
    return ProductSpace(policy.grid.space, actions)


def _kernel_for_counts(policy: MeanFieldPolicy, counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    return policy.kernels[policy.grid.nearest(counts / counts.sum())]


def target_joint(policy: MeanFieldPolicy, x) -> np.ndarray:
    """Flat weights of ``mu_N[x] (x) kernel`` with the kernel at the nearest grid node."""
    counts = class_of(x, policy.grid.space.size)
    kernel = _kernel_for_counts(policy, counts)
    return (np.asarray(counts, dtype=float)[:, None] / sum(counts) * kernel).reshape(-1)


def round_counts(counts, kernel: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of ``counts[x] * kernel[x]`` row by row.

    Each row keeps its floors and hands the leftover units to the largest
    fractional parts, ties going to the smallest action index.
    """
    out = np.zeros(kernel.shape, dtype=np.int64)
    for x, c in enumerate(counts):
        ideal = c * kernel[x]
        base = np.floor(ideal + 1e-12).astype(np.int64)
        frac = ideal - base
        left = int(c - base.sum())
        order = sorted(range(len(frac)), key=lambda k: (-round(frac[k], 12), k))
        for k in order[:left]:
            base[k] += 1
        out[x] = base
    return out


def _joint_cost(product: ProductSpace, target: np.ndarray, x, a) -> float:
    x = np.asarray(x, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    emp = np.bincount(x * product.right.size + a, minlength=product.size) / x.size
    return wasserstein1(Measure(product, target), Measure(product, emp))


def lift_feedback(policy: MeanFieldPolicy, x, method: str = "rounding") -> LiftedAction:
    """Joint action minimizing W1 to the mean-field target, with its cost.

    ``method="brute"`` scans all of ``A^N`` in lexicographic order and keeps the
    first minimizer.
    """
    x = np.asarray(x, dtype=np.int64)
    product = _product_of(policy)
    target = target_joint(policy, x)
    if method == "rounding":
        counts = class_of(x, policy.grid.space.size)
        a = assign_by_counts(x, round_counts(counts, _kernel_for_counts(policy, counts)))
        return LiftedAction(a, _joint_cost(product, target, x, a))
    if method == "brute":
        n_actions = product.right.size
        if n_actions ** x.size > BRUTE_FORCE_CAP:
            raise CapExceededError("brute-force lift limited to |A|^N <= 4096")
        cand = np.array(list(itertools.product(range(n_actions), repeat=x.size)), dtype=np.int64)
        idx = x[None, :] * n_actions + cand
        emp = np.stack([np.bincount(row, minlength=product.size) for row in idx]) / x.size
        costs = wasserstein1_batch(emp, Measure(product, target))
        best = int(np.argmax(costs <= costs.min() + 1e-12))
        return LiftedAction(cand[best], float(costs[best]))
    raise ValueError(f"unknown method {method!r}")


def lift_randomized(policy: MeanFieldPolicy, x, u) -> np.ndarray:
    """Agent ``i`` samples from the kernel row of its own state with ``u[i]``."""
    x = np.asarray(x, dtype=np.int64)
    u = np.asarray(u, dtype=float)
    if u.shape != x.shape:
        raise ValueError("need one uniform per agent")
    kernel = _kernel_for_counts(policy, class_of(x, policy.grid.space.size))
    return np.array([sample_action(kernel[s], float(v)) for s, v in zip(x, u)], dtype=np.int64)


class LiftedFeedbackPolicy:
    """N-agent feedback policy from :func:`lift_feedback`, memoized per class."""

    def __init__(self, source: MeanFieldPolicy):
        self.source = source
        self.n_states = source.grid.space.size
        self.n_actions = source.kernels.shape[2]
        self._counts: dict = {}

    def counts_for(self, counts) -> np.ndarray:
        counts = tuple(int(c) for c in counts)
        hit = self._counts.get(counts)
        if hit is None:
            hit = round_counts(counts, _kernel_for_counts(self.source, counts))
            self._counts[counts] = hit  # idempotent: same value for every writer
        return hit

    def act(self, x, u=None):
        x = np.asarray(x, dtype=np.int64)
        return assign_by_counts(x, self.counts_for(class_of(x, self.n_states)))

    def action_law(self, x):
        return np.eye(self.n_actions)[self.act(x)]

    def count_law(self, counts):
        return [(self.counts_for(counts), 1.0)]


class LiftedRandomizedPolicy:
    """N-agent randomized feedback policy from :func:`lift_randomized`."""

    def __init__(self, source: MeanFieldPolicy):
        self.source = source
        self.n_states = source.grid.space.size
        self.n_actions = source.kernels.shape[2]
        self._laws: dict = {}

    def act(self, x, u=None):
        if u is None:
            raise ValueError("the randomized lift needs one uniform per agent")
        return lift_randomized(self.source, x, u)

    def action_law(self, x):
        x = np.asarray(x, dtype=np.int64)
        kernel = _kernel_for_counts(self.source, class_of(x, self.n_states))
        return kernel[x]

    def count_law(self, counts):
        counts = tuple(int(c) for c in counts)
        hit = self._laws.get(counts)
        if hit is not None:
            return hit
        kernel = _kernel_for_counts(self.source, counts)
        rows = [_multinomial_law(c, kernel[s]) for s, c in enumerate(counts)]
        law = []
        for combo in itertools.product(*(r.items() for r in rows)):
            mat = np.array([k for k, _ in combo], dtype=np.int64)
            law.append((mat, math.prod(p for _, p in combo)))
        self._laws[counts] = law
        return law


def lifted_policy(policy: MeanFieldPolicy, mode: str):
    if mode == "feedback":
        return LiftedFeedbackPolicy(policy)
    if mode == "randomized":
        return LiftedRandomizedPolicy(policy)
    raise ValueError(f"unknown lift mode {mode!r}")


def randomized_lift_distance(policy: MeanFieldPolicy, x, draws: int, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of W1(target, empirical law of the randomized lift)."""
    x = np.asarray(x, dtype=np.int64)
    product = _product_of(policy)
    target = Measure(product, target_joint(policy, x))
    rng = substream(seed, "lift-distance", tuple(x.tolist()))
    u = rng.random((draws, x.size))
    kernel = _kernel_for_counts(policy, class_of(x, product.left.size))
    cdf = np.cumsum(kernel[x], axis=1)  # (n, A)
    acts = (u[:, :, None] >= cdf[None, :, :]).sum(axis=2)
    acts = np.minimum(acts, product.right.size - 1)
    idx = x[None, :] * product.right.size + acts
    emp = np.stack([np.bincount(row, minlength=product.size) for row in idx]) / x.size
    d = wasserstein1_batch(emp, target)
    mean = math.fsum(d) / draws
    se = math.sqrt(math.fsum((d - mean) ** 2) / max(draws - 1, 1) / draws)
    return mean, se


class GapReport(NamedTuple):
    n: int
    mode: str
    V_N: float
    V_lift: float
    gap: float
    eps_source: float
    M_N_hat: float
    gamma: float
    x0: tuple


def lift_gap(model: ModelSpec, policy: MeanFieldPolicy, mode: str, n: int, x0=None,
             tol: float = 1e-10, mn_seed: int = 0, M_N_hat: float | None = None,
             V_N=None) -> GapReport:
    """Optimal N-agent value minus the exact gain of the lifted policy.

    ``x0=None`` reports the class where the gap is largest.  The lifted gain is
    the fixed point of the policy operator on classes.
    """
    if V_N is None:
        V_N = solve_VN(model, n, tol)
    lifted = lifted_policy(policy, mode)
    V_lift = evaluate_policy(model, lifted, n, tol)
    if x0 is None:
        gaps = V_N.values - V_lift.values
        k = int(np.argmax(gaps))
        counts = V_N.classes[k]
    else:
        counts = class_of(x0, model.n_states)
        k = V_N.index[counts]
    if M_N_hat is None:
        M_N_hat = estimate_MN(model.product, n, seed=mn_seed, exact=True)
    gamma = gamma_exponent(model.beta, model.k_big_f) if model.beta > 0 else 1.0
    return GapReport(n, mode, float(V_N.values[k]), float(V_lift.values[k]),
                     float(V_N.values[k] - V_lift.values[k]), float(policy.eps),
                     float(M_N_hat), gamma, tuple(counts))
