"""Value iteration for the mean-field (McKean-Vlasov) control problem.

The lifted problem lives on the simplex of state laws.  We discretize it by
the lattice of measures with denominator ``q`` and replace the sup over
randomized feedback controls by a sup over per-state action kernels drawn
from a finite family.  Off-lattice laws are mapped to their nearest node in
W1, ties going to the lowest node index.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from . import __version__
from .core import (CapExceededError, FiniteMetricSpace, Measure, ModelSpec, compositions,
                   n_compositions)
from .rng import substream
from .transport import wasserstein1_batch

KERNEL_FAMILY_CAP = 100_000
GRID_NODE_CAP = 200_000
TIE_TOL = 1e-12
DEFAULT_STEP = 1 / 8
N_PROBES = 16


# ---------------------------------------------------------------------------
# grid, kernels, policies, tables


class SimplexGrid:
    """Measures on ``space`` with weights ``k_i / q``; nodes in lexicographic count order."""

    def __init__(self, space: FiniteMetricSpace, q: int):
        if q < 1:
            raise ValueError("grid denominator must be >= 1")
        if n_compositions(q, space.size) > GRID_NODE_CAP:
            raise CapExceededError("simplex grid too large")
        self.space = space
        self.q = int(q)
        self.counts = np.array(list(compositions(self.q, space.size)), dtype=np.int64)
        self.weights = self.counts / self.q
        self.counts.setflags(write=False)
        self.weights.setflags(write=False)
        self._index = {tuple(c): i for i, c in enumerate(self.counts.tolist())}

    def __len__(self):
        return len(self.counts)

    def __repr__(self):
        return f"SimplexGrid(size={self.space.size}, q={self.q}, nodes={len(self)})"

    def measure(self, node: int) -> Measure:
        return Measure(self.space, self.weights[node])

    def index_of_counts(self, counts: Sequence[int]) -> int:
        return self._index[tuple(int(c) for c in counts)]

    def nearest(self, mu) -> int:
        """Node closest to ``mu`` in W1, lowest index among ties."""
        w = np.asarray(getattr(mu, "weights", mu), dtype=float)
        return int(self.nearest_many(w[None, :])[0])

    def nearest_many(self, weights: np.ndarray, chunk: int = 2048) -> np.ndarray:
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        out = np.empty(len(weights), dtype=np.int64)
        if self.space.is_discrete:
            for s in range(0, len(weights), chunk):
                block = weights[s:s + chunk]
                dist = np.abs(block[:, None, :] - self.weights[None, :, :]).sum(axis=2)
                out[s:s + chunk] = _first_min(dist)
            return out
        for s, w in enumerate(weights):
            dist = wasserstein1_batch(self.weights, Measure(self.space, w))
            out[s] = _first_min(dist[None, :])[0]
        return out

    def mesh_bound(self) -> float:
        return self.space.diameter * self.space.size / (2 * self.q)


def _first_min(values: np.ndarray) -> np.ndarray:
    best = values.min(axis=1, keepdims=True)
    return np.argmax(values <= best + TIE_TOL * np.maximum(1.0, np.abs(best)), axis=1)


@dataclass(frozen=True, eq=False)
class ActionKernel:
    """Row ``x`` is a probability vector over actions."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each kernel row must be a probability vector")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def row(self, x: int) -> np.ndarray:
        return self.matrix[x]

    def joint(self, mu) -> np.ndarray:
        """Flat weights of ``mu (x) kernel`` on the product space."""
        w = np.asarray(getattr(mu, "weights", mu), dtype=float)
        return (w[:, None] * self.matrix).reshape(-1)

    @classmethod
    def deterministic(cls, choice: Sequence[int], n_actions: int) -> ActionKernel:
        return cls(np.eye(n_actions)[np.asarray(choice)])

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.matrix == 0) | (self.matrix == 1)))


@dataclass(frozen=True)
class KernelFamily:
    """``deterministic`` or ``randomized`` with per-state probability step ``1/denominator``."""

    kind: str = "randomized"
    denominator: int = 8

    def __post_init__(self):
        if self.kind not in ("deterministic", "randomized"):
            raise ValueError(f"unknown kernel family {self.kind!r}")
        if self.denominator < 1:
            raise ValueError("kernel step must be 1/k for a positive integer k")

    @classmethod
    def parse(cls, spec) -> KernelFamily:
        """Accepts a family, ``"deterministic"``, ``"randomized"``, ``"randomized:8"`` or ``"randomized(0.125)"``."""
        if isinstance(spec, KernelFamily):
            return spec
        text = str(spec).strip()
        if text == "deterministic":
            return cls("deterministic", 1)
        if text == "randomized":
            return cls("randomized", round(1 / DEFAULT_STEP))
        for sep in (":", "("):
            if text.startswith("randomized" + sep):
                arg = text[len("randomized") + 1:].rstrip(")")
                value = float(arg)
                k = round(1 / value) if value < 1 else round(value)
                if value < 1 and abs(k * value - 1) > 1e-9:
                    raise ValueError("randomized step must be 1/k")
                return cls("randomized", int(k))
        raise ValueError(f"cannot parse kernel family {spec!r}")

    @property
    def step(self) -> float:
        return 1.0 / self.denominator

    def label(self) -> str:
        if self.kind == "deterministic":
            return "deterministic"
        return f"randomized:{self.denominator}"

    def size(self, n_states: int, n_actions: int) -> int:
        if self.kind == "deterministic":
            return n_actions ** n_states
        return n_compositions(self.denominator, n_actions) ** n_states

    def finer(self) -> KernelFamily:
        if self.kind == "deterministic":
            return KernelFamily("randomized", round(1 / DEFAULT_STEP))
        return KernelFamily("randomized", 2 * self.denominator)

    def kernels(self, n_states: int, n_actions: int, cap: int = KERNEL_FAMILY_CAP) -> np.ndarray:
        """All kernels as an array ``(K, n_states, n_actions)`` in enumeration order.

        Each state's row runs over point masses ``delta_0, delta_1, ...`` in the
        deterministic family and over the probability grid in reverse
        lexicographic count order (so ``delta_0`` first) in the randomized one;
        states vary lexicographically with state 0 slowest.
        """
        if self.size(n_states, n_actions) > cap:
            raise CapExceededError(f"kernel family has {self.size(n_states, n_actions)} members, cap {cap}")
        if self.kind == "deterministic":
            rows = np.eye(n_actions)
        else:
            counts = list(compositions(self.denominator, n_actions))[::-1]
            rows = np.array(counts, dtype=float) / self.denominator
        idx = np.array(list(itertools.product(range(len(rows)), repeat=n_states)), dtype=np.int64)
        return rows[idx]


@dataclass(eq=False)
class MeanFieldPolicy:
    """One action kernel per grid node; off-grid laws use the nearest node."""

    grid: SimplexGrid
    kernels: np.ndarray  # (nodes, n_states, n_actions)
    eps: float = 0.0
    family: str = ""
    action_space: FiniteMetricSpace | None = None

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=float)
        if self.kernels.shape[0] != len(self.grid):
            raise ValueError("need one kernel per grid node")

    def kernel_at(self, mu) -> ActionKernel:
        return ActionKernel(self.kernels[self.grid.nearest(mu)])

    def kernel_at_node(self, node: int) -> ActionKernel:
        return ActionKernel(self.kernels[node])


@dataclass(eq=False)
class ValueTable:
    grid: SimplexGrid
    values: np.ndarray
    interpolation: str = "nearest"
    residual: float = math.nan
    sweeps: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.grid),):
            raise ValueError("need one value per grid node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")
        if self.interpolation not in ("nearest", "none", "barycentric"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    def __call__(self, mu) -> float:
        w = np.asarray(getattr(mu, "weights", mu), dtype=float)
        if self.interpolation == "none":
            counts = w * self.grid.q
            rounded = np.rint(counts)
            if np.max(np.abs(counts - rounded)) > 1e-9:
                raise KeyError("measure is not a grid node")
            return float(self.values[self.grid.index_of_counts(rounded.astype(int))])
        if self.interpolation == "barycentric":
            return barycentric_value(self, w)
        return float(self.values[self.grid.nearest(w)])

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())


def barycentric_value(table: ValueTable, w: np.ndarray) -> float:
    """Piecewise-linear interpolation on the Freudenthal triangulation of the grid.

    For plots only; the solvers use nearest-node lookup.
    """
    q = table.grid.q
    cum = np.cumsum(w)[:-1] * q  # nondecreasing coordinates in [0, q]
    base = np.floor(cum + 1e-12)
    base = np.minimum(base, q - 1) if q > 0 else base
    frac = cum - base
    order = np.argsort(-frac, kind="stable")
    vertex = base.copy()
    weights = [1.0 - (frac[order[0]] if len(order) else 0.0)]
    vertices = [vertex.copy()]
    for k, j in enumerate(order):
        vertex = vertex.copy()
        vertex[j] += 1
        nxt = frac[order[k + 1]] if k + 1 < len(order) else 0.0
        weights.append(frac[j] - nxt)
        vertices.append(vertex)
    total = 0.0
    for lam, v in zip(weights, vertices):
        if lam <= 1e-15:
            continue
        c = np.diff(np.concatenate([[0.0], np.clip(v, 0, q), [q]]))
        if np.any(c < -1e-9):
            continue
        node = table.grid.index_of_counts(np.rint(c).astype(int))
        total += lam * table.values[node]
    return float(total)


# ---------------------------------------------------------------------------
# one-step maps


def kernel_from_joint(joint: Measure) -> ActionKernel:
    """Disintegrate a product-space measure; zero-mass states get the uniform row."""
    m = joint.as_matrix()
    marginal = m.sum(axis=1)
    n_actions = m.shape[1]
    rows = np.full_like(m, 1.0 / n_actions)
    live = marginal > 1e-12
    rows[live] = m[live] / marginal[live, None]
    return ActionKernel(rows)


def sample_action(dist, u: float) -> int:
    """Inverse CDF with half-open cells ``[c_{k-1}, c_k)``."""
    if not 0.0 <= u < 1.0:
        raise ValueError("u must lie in [0, 1)")
    w = np.asarray(getattr(dist, "weights", dist), dtype=float)
    cdf = np.cumsum(w)
    k = int(np.searchsorted(cdf, u, side="right"))
    # guard against cdf[-1] slightly below 1 and zero-mass trailing cells
    k = min(k, len(w) - 1)
    while w[k] == 0 and k > 0:
        k -= 1
    return k


def sample_actions(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sample_action`: agent ``i`` samples from ``rows[i]`` with ``u[i]``."""
    rows = np.asarray(rows, dtype=float)
    return np.array([sample_action(r, float(v)) for r, v in zip(rows, u)], dtype=np.int64)


def next_measure(model: ModelSpec, mu, kernel: ActionKernel, e0: int) -> Measure:
    """Conditional law of the next state given the common noise value ``e0``."""
    joint = kernel.joint(mu)
    law = model.next_state_law(joint)[:, :, e0, :]  # (x, a, x')
    nu = np.einsum("xa,xay->y", joint.reshape(model.n_states, model.n_actions), law)
    return Measure(model.state_space, nu / nu.sum())


def lifted_reward(model: ModelSpec, joint: np.ndarray) -> float:
    """Average reward ``sum_{x,a} f(x, a, joint) joint(x, a)``."""
    joint = np.asarray(joint, dtype=float)
    return float(np.dot(model.reward_table(joint).reshape(-1), joint))


def bellman_apply_kernel(model: ModelSpec, W: ValueTable, mu, kernel: ActionKernel) -> float:
    joint = kernel.joint(mu)
    value = lifted_reward(model, joint)
    if model.beta == 0.0:
        return value
    cont = 0.0
    for e0, lam0 in enumerate(model.noise.common.weights):
        if lam0 > 0:
            cont += lam0 * W(next_measure(model, mu, kernel, e0))
    return value + model.beta * cont


def bellman_sup(model: ModelSpec, W: ValueTable, mu, kernel_family="randomized",
                cap: int = KERNEL_FAMILY_CAP) -> tuple[float, ActionKernel]:
    family = KernelFamily.parse(kernel_family)
    kernels = family.kernels(model.n_states, model.n_actions, cap)
    values = np.array([bellman_apply_kernel(model, W, mu, ActionKernel(k)) for k in kernels])
    best = int(_first_max(values[None, :])[0])
    return float(values[best]), ActionKernel(kernels[best])


def _first_max(values: np.ndarray) -> np.ndarray:
    return _first_min(-values)


# ---------------------------------------------------------------------------
# the discretized lifted operator


class LiftedOperator:
    """Precomputed one-step data of the lifted Bellman operator on a grid.

    ``reward[node, k]`` is the lifted reward of kernel ``k`` at node ``node``
    and ``successor[node, k, e0]`` the node nearest to the next law.
    """

    def __init__(self, model: ModelSpec, grid: SimplexGrid, family: KernelFamily,
                 cap: int = KERNEL_FAMILY_CAP):
        if grid.space != model.state_space:
            raise ValueError("grid is not over the model's state space")
        self.model, self.grid, self.family = model, grid, family
        self.kernels = family.kernels(model.n_states, model.n_actions, cap)
        n_nodes, n_k = len(grid), len(self.kernels)
        n_common = model.noise.common_size
        self.reward = np.empty((n_nodes, n_k))
        laws = np.empty((n_nodes, n_k, n_common, model.n_states))
        for i, w in enumerate(grid.weights):
            joints = w[None, :, None] * self.kernels  # (K, x, a)
            for k, joint in enumerate(joints):
                flat = joint.reshape(-1)
                self.reward[i, k] = np.dot(model.reward_table(flat).reshape(-1), flat)
                p = model.next_state_law(flat)  # (x, a, e0, x')
                laws[i, k] = np.einsum("xa,xaey->ey", joint, p)
        laws /= laws.sum(axis=-1, keepdims=True)
        self.next_laws = laws
        self.successor = grid.nearest_many(laws.reshape(-1, model.n_states)).reshape(n_nodes, n_k, n_common)
        self.common_weights = np.asarray(model.noise.common.weights)

    def q_values(self, values: np.ndarray) -> np.ndarray:
        cont = values[self.successor] @ self.common_weights
        return self.reward + self.model.beta * cont

    def apply(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One synchronous sweep: new values and the argmax kernel index per node."""
        qv = self.q_values(np.asarray(values, dtype=float))
        best = _first_max(qv)
        return qv[np.arange(len(qv)), best], best


@lru_cache(maxsize=16)
def lifted_operator(model: ModelSpec, q: int, family: KernelFamily,
                    cap: int = KERNEL_FAMILY_CAP) -> LiftedOperator:
    return LiftedOperator(model, SimplexGrid(model.state_space, q), family, cap)


def sweep_bound(beta: float, reward_bound: float, tol: float) -> int:
    """Sweeps from zero that the contraction argument guarantees suffice."""
    if beta == 0.0:
        return 1
    if reward_bound <= 0:
        return 1
    return max(1, math.ceil(math.log(tol * (1 - beta) / reward_bound) / math.log(beta)))


class SolveResult(NamedTuple):
    table: ValueTable
    policy: MeanFieldPolicy
    residual: float


def value_iteration(model: ModelSpec, grid: SimplexGrid | int, kernel_family="randomized",
                    tol: float = 1e-8, max_sweeps: int | None = None,
                    cap: int = KERNEL_FAMILY_CAP, with_eps: bool = True) -> SolveResult:
    """Jacobi value iteration from ``W = 0`` until the sup-norm update is at most ``tol``.

    The returned policy carries ``eps = residual + family gap``, the gap being the
    largest improvement a twice-finer kernel family finds at 16 probe nodes.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    family = KernelFamily.parse(kernel_family)
    q = grid if isinstance(grid, int) else grid.q
    op = lifted_operator(model, q, family, cap)
    if max_sweeps is None:
        scale = max(model.reward_bound, model.reward_sup * (1 - model.beta))
        max_sweeps = sweep_bound(model.beta, scale, tol) + 10
    values = np.zeros(len(op.grid))
    residual = math.inf
    sweeps = 0
    while residual > tol:
        if sweeps >= max_sweeps:
            raise CapExceededError(f"value iteration did not reach {tol} in {max_sweeps} sweeps")
        new, best = op.apply(values)
        sweeps += 1
        residual = float(np.abs(new - values).max())
        values = new
        if model.beta == 0.0:
            residual = 0.0
    # the greedy kernels for the returned table, so the policy matches the values
    _, best = op.apply(values)
    table = ValueTable(op.grid, values, residual=residual, sweeps=sweeps)
    policy = MeanFieldPolicy(op.grid, op.kernels[best], family=family.label(),
                             action_space=model.action_space)
    if with_eps:
        policy.eps = residual + family_gap(model, table, family, cap)
    else:
        policy.eps = residual
    return SolveResult(table, policy, residual)


def probe_nodes(grid: SimplexGrid, count: int = N_PROBES) -> np.ndarray:
    return np.unique(np.linspace(0, len(grid) - 1, count).round().astype(np.int64))


def family_gap(model: ModelSpec, table: ValueTable, family: KernelFamily,
               cap: int = KERNEL_FAMILY_CAP) -> float:
    """Largest gain of the finer family's one-step sup over the family's, at probe nodes."""
    finer = family.finer()
    coarse = family.kernels(model.n_states, model.n_actions, cap)
    fine = finer.kernels(model.n_states, model.n_actions, cap)
    gap = 0.0
    for node in probe_nodes(table.grid):
        mu = table.grid.weights[node]
        best_coarse = max(bellman_apply_kernel(model, table, mu, ActionKernel(k)) for k in coarse)
        best_fine = max(bellman_apply_kernel(model, table, mu, ActionKernel(k)) for k in fine)
        gap = max(gap, best_fine - best_coarse)
    return gap


def bellman_lifted(model: ModelSpec, W: ValueTable, kernel_family="randomized",
                   cap: int = KERNEL_FAMILY_CAP) -> ValueTable:
    """``T W`` at every grid node (the operator checked for contraction and monotonicity)."""
    op = lifted_operator(model, W.grid.q, KernelFamily.parse(kernel_family), cap)
    new, _ = op.apply(W.values)
    return ValueTable(W.grid, new, interpolation=W.interpolation)


def holder_quotient(table: ValueTable, gamma: float) -> float:
    """``max |V(mu) - V(mu')| / W1(mu, mu')**gamma`` over distinct node pairs."""
    grid = table.grid
    best = 0.0
    for i in range(len(grid)):
        d = wasserstein1_batch(grid.weights[i + 1:], grid.measure(i))
        if d.size == 0:
            continue
        dv = np.abs(table.values[i + 1:] - table.values[i])
        best = max(best, float((dv / d ** gamma).max()))
    return best


# ---------------------------------------------------------------------------
# policy evaluation along the exact law flow


class GainEstimate(NamedTuple):
    mean: float
    stderr: float
    truncation_bias: float


def _path_gain(model: ModelSpec, policy: MeanFieldPolicy, mu0: np.ndarray,
               noise: np.ndarray) -> float:
    mu = np.asarray(mu0, dtype=float)
    total, disc = 0.0, 1.0
    for e0 in noise:
        kernel = policy.kernel_at(mu)
        joint = kernel.joint(mu)
        total += disc * lifted_reward(model, joint)
        mu = np.asarray(next_measure(model, mu, kernel, int(e0)).weights)
        disc *= model.beta
    return total


def policy_gain(model: ModelSpec, policy: MeanFieldPolicy, mu0, horizon: int,
                common_paths: int = 256, seed: int = 0) -> GainEstimate:
    """Discounted gain over ``horizon`` steps with the state law propagated exactly.

    Idiosyncratic noise is integrated out by :func:`next_measure`; only the
    common noise is sampled, one substream per path.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    mu0 = np.asarray(getattr(mu0, "weights", mu0), dtype=float)
    lam0 = np.asarray(model.noise.common.weights)
    gains = []
    for path in range(common_paths):
        if model.noise.common_size == 1:
            noise = np.zeros(horizon, dtype=np.int64)
        else:
            noise = substream(seed, "mf-gain", path).choice(len(lam0), size=horizon, p=lam0)
        gains.append(_path_gain(model, policy, mu0, noise))
        if model.noise.common_size == 1:
            gains = gains * common_paths
            break
    gains = np.asarray(gains)
    mean = math.fsum(gains) / len(gains)
    stderr = 0.0
    if len(gains) > 1:
        stderr = math.sqrt(math.fsum((gains - mean) ** 2) / (len(gains) - 1) / len(gains))
    bias = model.beta ** horizon * model.reward_sup / (1 - model.beta)
    return GainEstimate(mean, stderr, bias)


def policy_gain_exact(model: ModelSpec, policy: MeanFieldPolicy, mu0, horizon: int,
                      max_paths: int = 1 << 16) -> GainEstimate:
    """Same gain with the expectation over common-noise paths enumerated exactly."""
    lam0 = np.asarray(model.noise.common.weights)
    n_common = len(lam0)
    if n_common ** horizon > max_paths:
        raise CapExceededError("too many common-noise paths to enumerate")
    mu0 = np.asarray(getattr(mu0, "weights", mu0), dtype=float)

    def rec(mu, depth):
        if depth == horizon:
            return 0.0
        kernel = policy.kernel_at(mu)
        joint = kernel.joint(mu)
        value = lifted_reward(model, joint)
        cont = 0.0
        for e0 in range(n_common):
            if lam0[e0] > 0:
                nu = np.asarray(next_measure(model, mu, kernel, e0).weights)
                cont += lam0[e0] * rec(nu, depth + 1)
        return value + model.beta * cont

    bias = model.beta ** horizon * model.reward_sup / (1 - model.beta)
    return GainEstimate(rec(mu0, 0), 0.0, bias)


# ---------------------------------------------------------------------------
# artifacts


def solution_artifact(model: ModelSpec, result: SolveResult, extra: dict | None = None) -> dict:
    table, policy = result.table, result.policy
    data = {
        "version": __version__,
        "config": model.resolved_config(),
        "grid_denominator": table.grid.q,
        "kernel_family": policy.family,
        "residual": result.residual,
        "sweeps": table.sweeps,
        "eps": policy.eps,
        "nodes": [
            {"weights": table.grid.weights[i].tolist(),
             "value": float(table.values[i]),
             "kernel": policy.kernels[i].tolist()}
            for i in range(len(table.grid))
        ],
    }
    if extra:
        data.update(extra)
    return data


def load_solution(data: dict | str, space: FiniteMetricSpace,
                  action_space: FiniteMetricSpace | None = None) -> SolveResult:
    """Rebuild a solved table and policy from :func:`solution_artifact` output."""
    if isinstance(data, str):
        with open(data) as fh:
            data = json.load(fh)
    grid = SimplexGrid(space, int(data["grid_denominator"]))
    values = np.array([node["value"] for node in data["nodes"]])
    kernels = np.array([node["kernel"] for node in data["nodes"]])
    table = ValueTable(grid, values, residual=float(data["residual"]), sweeps=int(data.get("sweeps", 0)))
    policy = MeanFieldPolicy(grid, kernels, eps=float(data.get("eps", 0.0)),
                             family=data.get("kernel_family", ""), action_space=action_space)
    return SolveResult(table, policy, table.residual)
