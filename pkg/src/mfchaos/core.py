"""Finite metric spaces, probability measures and the model specification.

Everything downstream (transport, the mean-field solver, the N-agent solver)
works on finite spaces given by explicit distance matrices, so every
expectation and conditional law in the model is an exact finite sum.

Index conventions
-----------------
* states and actions are integer indices into their spaces;
* a point ``(x, a)`` of the product space has index ``x * n_actions + a``;
* a transition table has shape ``(n_states, n_actions, n_idio, n_common)``.
"""
from __future__ import annotations

import importlib
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9
METRIC_TOL = 1e-12
REWARD_GRID_DENOMINATOR = 20
MAX_HORIZON = 10_000


class ValidationError(ValueError):
    """A model, measure or configuration violates its invariants."""


class CapExceededError(RuntimeError):
    """A computation would exceed a configured enumeration cap."""


class LipschitzWarning(UserWarning):
    """An empirical Lipschitz quotient exceeds the declared constant."""


def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """Yield all tuples of ``parts`` nonnegative ints summing to ``total``.

    Order is lexicographic ascending, so ``(0, ..., 0, total)`` comes first.
    """
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in compositions(total - head, parts - 1):
            yield (head,) + tail


def n_compositions(total: int, parts: int) -> int:
    return math.comb(total + parts - 1, parts - 1)


# ---------------------------------------------------------------------------
# spaces and measures


@dataclass(frozen=True, eq=False)
class FiniteMetricSpace:
    labels: tuple
    dist: np.ndarray
    diameter: float = field(init=False)

    def __post_init__(self):
        labels = tuple(self.labels)
        dist = np.array(self.dist, dtype=float)
        n = len(labels)
        if n == 0:
            raise ValidationError("a metric space needs at least one point")
        if dist.shape != (n, n):
            raise ValidationError(f"distance matrix must be {n}x{n}, got {dist.shape}")
        if not np.all(np.isfinite(dist)):
            raise ValidationError("distances must be finite")
        if np.any(np.diag(dist) != 0):
            raise ValidationError("distance matrix must vanish on the diagonal")
        if not np.array_equal(dist, dist.T):
            raise ValidationError("distance matrix must be symmetric")
        off = ~np.eye(n, dtype=bool)
        if np.any(dist[off] <= 0):
            raise ValidationError("off-diagonal distances must be strictly positive")
        # d[i,k] <= d[i,j] + d[j,k] for all i, j, k
        via = dist[:, :, None] + dist[None, :, :]
        if np.any(dist[:, None, :] > via + METRIC_TOL):
            raise ValidationError("distance matrix violates the triangle inequality")
        dist.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "diameter", float(dist.max()))

    @classmethod
    def discrete(cls, labels: int | Sequence = 2, scale: float = 1.0) -> FiniteMetricSpace:
        if isinstance(labels, int):
            labels = tuple(range(labels))
        n = len(labels)
        return cls(tuple(labels), scale * (1.0 - np.eye(n)))

    @classmethod
    def line(cls, n: int) -> FiniteMetricSpace:
        idx = np.arange(n, dtype=float)
        return cls(tuple(range(n)), np.abs(idx[:, None] - idx[None, :]))

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def is_discrete(self) -> bool:
        """True when all off-diagonal distances coincide."""
        if self.size == 1:
            return True
        off = self.dist[~np.eye(self.size, dtype=bool)]
        return bool(np.all(off == off[0]))

    def index(self, label) -> int:
        return self.labels.index(label)

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, FiniteMetricSpace):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.dist, other.dist)

    def __hash__(self):
        return hash((self.labels, self.dist.tobytes()))

    def __repr__(self):
        return f"{type(self).__name__}(size={self.size}, diameter={self.diameter:g})"


class ProductSpace(FiniteMetricSpace):
    """``left x right`` with the sum metric; point ``(i, j)`` has index ``i * right.size + j``."""

    def __init__(self, left: FiniteMetricSpace, right: FiniteMetricSpace):
        labels = tuple(itertools.product(left.labels, right.labels))
        dist = left.dist[:, None, :, None] + right.dist[None, :, None, :]
        dist = dist.reshape(len(labels), len(labels))
        super().__init__(labels, dist)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def pair_index(self, i: int, j: int) -> int:
        return i * self.right.size + j


@dataclass(frozen=True, eq=False)
class Measure:
    space: FiniteMetricSpace
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape != (self.space.size,):
            raise ValidationError(f"expected {self.space.size} weights, got {w.size}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, space: FiniteMetricSpace) -> Measure:
        return cls(space, np.full(space.size, 1.0 / space.size))

    @classmethod
    def dirac(cls, space: FiniteMetricSpace, index: int) -> Measure:
        w = np.zeros(space.size)
        w[index] = 1.0
        return cls(space, w)

    def as_matrix(self) -> np.ndarray:
        """Weights of a product-space measure as a ``(left, right)`` matrix."""
        if not isinstance(self.space, ProductSpace):
            raise TypeError("as_matrix needs a measure on a product space")
        return self.weights.reshape(self.space.left.size, self.space.right.size)

    def left_marginal(self) -> Measure:
        return Measure(self.space.left, self.as_matrix().sum(axis=1))

    def __repr__(self):
        return f"Measure({np.array2string(self.weights, precision=4)})"


@dataclass(frozen=True)
class NoiseSpec:
    idio: Measure
    common: Measure

    @classmethod
    def from_weights(cls, idio_weights, common_weights) -> NoiseSpec:
        idio_weights = np.asarray(idio_weights, dtype=float)
        common_weights = np.asarray(common_weights, dtype=float)
        return cls(
            Measure(FiniteMetricSpace.discrete(len(idio_weights)), idio_weights),
            Measure(FiniteMetricSpace.discrete(len(common_weights)), common_weights),
        )

    @classmethod
    def uniform(cls, idio_size: int, common_size: int = 1) -> NoiseSpec:
        return cls.from_weights(np.full(idio_size, 1.0 / idio_size),
                                np.full(common_size, 1.0 / common_size))

    @property
    def idio_size(self) -> int:
        return self.idio.space.size

    @property
    def common_size(self) -> int:
        return self.common.space.size


# ---------------------------------------------------------------------------
# transition and reward rules
#
# A rule is called with the joint state-action measure as a flat weight
# vector over the product space.  ``table`` evaluates the rule for every
# (x, a[, e, e0]) at once; subclasses override it with a vectorized version.


class TransitionRule:
    family = "custom"

    def __call__(self, x: int, a: int, joint: np.ndarray, e: int, e0: int) -> int:
        raise NotImplementedError

    def table(self, joint: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
        out = np.empty(shape, dtype=np.int64)
        for idx in itertools.product(*map(range, shape)):
            x, a, e, e0 = idx
            out[idx] = self(x, a, joint, e, e0)
        return out

    def validate(self, model: ModelSpec) -> None:
        pass

    def params(self) -> dict:
        return {}


class RewardRule:
    family = "custom"

    def __call__(self, x: int, a: int, joint: np.ndarray) -> float:
        raise NotImplementedError

    def table(self, joint: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        out = np.empty(shape)
        for x, a in itertools.product(range(shape[0]), range(shape[1])):
            out[x, a] = self(x, a, joint)
        return out

    def validate(self, model: ModelSpec) -> None:
        pass

    def params(self) -> dict:
        return {}


class FunctionTransition(TransitionRule):
    """Wraps a user-registered pure function ``F(x, a, joint, e, e0) -> x'``."""

    def __init__(self, fn: Callable, ref: str = ""):
        self.fn = fn
        self.ref = ref

    def __call__(self, x, a, joint, e, e0):
        return int(self.fn(x, a, joint, e, e0))

    def params(self):
        return {"ref": self.ref}


class FunctionReward(RewardRule):
    def __init__(self, fn: Callable, ref: str = ""):
        self.fn = fn
        self.ref = ref

    def __call__(self, x, a, joint):
        return float(self.fn(x, a, joint))

    def params(self):
        return {"ref": self.ref}


def _mass_of_state_one(joint: np.ndarray) -> float:
    # binary state space, product index x * 2 + a
    return float(joint[2] + joint[3])


def idio_grid(size: int, kind: str = "left") -> np.ndarray:
    """Quantized uniform noise values: ``e / size`` (left) or ``(e + 1/2) / size`` (midpoint)."""
    if kind == "left":
        return np.arange(size) / size
    if kind == "midpoint":
        return (np.arange(size) + 0.5) / size
    raise ValueError(f"unknown noise grid {kind!r}")


class InfluenceThreshold(TransitionRule):
    """Binary adoption dynamics driven by the population's state-1 mass.

    The next state is 1 iff ``u_e < clamp(w * m + base + eta * a + shift[e0], 0, 1)``
    where ``m`` is the mass of state 1 under the joint measure and ``u_e`` the
    quantized uniform value of the idiosyncratic noise (see :func:`idio_grid`).
    ``w = 0`` removes the mean-field dependence.
    """

    family = "influence_threshold"

    def __init__(self, eta: float = 0.3, common_shifts: Sequence[float] = (0.0,),
                 mean_field_weight: float = 1.0, base: float = 0.0, noise_grid: str = "left"):
        self.eta = float(eta)
        self.common_shifts = tuple(float(s) for s in common_shifts)
        self.mean_field_weight = float(mean_field_weight)
        self.base = float(base)
        idio_grid(1, noise_grid)
        self.noise_grid = noise_grid
        self._u = None

    def threshold(self, a: int, joint: np.ndarray, e0: int) -> float:
        raw = (self.mean_field_weight * _mass_of_state_one(joint) + self.base
               + self.eta * a + self.common_shifts[e0])
        return min(max(raw, 0.0), 1.0)

    def __call__(self, x, a, joint, e, e0):
        return int(self._u[e] < self.threshold(a, joint, e0))

    def table(self, joint, shape):
        n_states, n_actions, n_idio, n_common = shape
        m = _mass_of_state_one(joint)
        raw = (self.mean_field_weight * m + self.base
               + self.eta * np.arange(n_actions)[:, None]
               + np.asarray(self.common_shifts)[None, :])
        theta = np.clip(raw, 0.0, 1.0)  # (a, e0)
        hit = (self._u[None, :, None] < theta[:, None, :]).astype(np.int64)  # (a, e, e0)
        return np.broadcast_to(hit, shape).copy()

    def validate(self, model):
        if model.n_states != 2 or model.n_actions != 2:
            raise ValidationError("influence_threshold needs two states and two actions")
        if len(self.common_shifts) != model.noise.common_size:
            raise ValidationError("common_shifts must have one entry per common-noise value")
        self._u = idio_grid(model.noise.idio_size, self.noise_grid)

    def params(self):
        return {"eta": self.eta, "common_shifts": list(self.common_shifts),
                "mean_field_weight": self.mean_field_weight, "base": self.base,
                "noise_grid": self.noise_grid}


class ConstantTransition(TransitionRule):
    family = "constant"

    def __init__(self, state: int = 0):
        self.state = int(state)

    def __call__(self, x, a, joint, e, e0):
        return self.state

    def table(self, joint, shape):
        return np.full(shape, self.state, dtype=np.int64)

    def validate(self, model):
        if not 0 <= self.state < model.n_states:
            raise ValidationError("constant transition state out of range")

    def params(self):
        return {"state": self.state}


class IdentityTransition(TransitionRule):
    family = "identity"

    def __call__(self, x, a, joint, e, e0):
        return x

    def table(self, joint, shape):
        return np.broadcast_to(np.arange(shape[0])[:, None, None, None], shape).copy()


class LinearReward(RewardRule):
    """``f(x, a, mu) = state_coef * x - action_cost * a - congestion * m(mu)``.

    ``x`` and ``a`` enter through their indices; ``m`` is the state-1 mass,
    used only when ``congestion`` is nonzero (binary state space).
    """

    family = "linear"

    def __init__(self, state_coef: float = 1.0, action_cost: float = 0.2,
                 congestion: float = 0.0):
        self.state_coef = float(state_coef)
        self.action_cost = float(action_cost)
        self.congestion = float(congestion)

    def __call__(self, x, a, joint):
        value = self.state_coef * x - self.action_cost * a
        if self.congestion:
            value -= self.congestion * _mass_of_state_one(joint)
        return value

    def table(self, joint, shape):
        xs = np.arange(shape[0])[:, None]
        acts = np.arange(shape[1])[None, :]
        out = self.state_coef * xs - self.action_cost * acts + 0.0 * (xs + acts)
        if self.congestion:
            out = out - self.congestion * _mass_of_state_one(joint)
        return out

    def validate(self, model):
        if self.congestion and model.n_states != 2:
            raise ValidationError("linear reward congestion needs a binary state space")

    def params(self):
        return {"state_coef": self.state_coef, "action_cost": self.action_cost,
                "congestion": self.congestion}


class ConstantReward(RewardRule):
    family = "constant"

    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def __call__(self, x, a, joint):
        return self.value

    def table(self, joint, shape):
        return np.full(shape, self.value)

    def params(self):
        return {"value": self.value}


class DistanceReward(RewardRule):
    """``f(x, a, mu) = d(x, target)``."""

    family = "distance_to_state"

    def __init__(self, target: int = 0):
        self.target = int(target)
        self._column = None

    def __call__(self, x, a, joint):
        return float(self._column[x])

    def table(self, joint, shape):
        return np.repeat(self._column[:, None], shape[1], axis=1).astype(float)

    def validate(self, model):
        if not 0 <= self.target < model.n_states:
            raise ValidationError("distance_to_state target out of range")
        self._column = np.asarray(model.state_space.dist[:, self.target])

    def params(self):
        return {"target": self.target}


TRANSITION_FAMILIES = {
    "influence_threshold": InfluenceThreshold,
    "constant": ConstantTransition,
    "identity": IdentityTransition,
}
REWARD_FAMILIES = {
    "linear": LinearReward,
    "constant": ConstantReward,
    "distance_to_state": DistanceReward,
}

_CUSTOM_TRANSITIONS: dict[str, Callable] = {}
_CUSTOM_REWARDS: dict[str, Callable] = {}


def register_transition(name: str, fn: Callable) -> None:
    """Make a pure ``F(x, a, joint, e, e0)`` available to configs as ``custom``."""
    _CUSTOM_TRANSITIONS[name] = fn


def register_reward(name: str, fn: Callable) -> None:
    _CUSTOM_REWARDS[name] = fn


def _resolve_custom(ref: str, registry: dict) -> Callable:
    if ref in registry:
        return registry[ref]
    if ":" in ref:
        module, attr = ref.split(":", 1)
        try:
            return getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise ValidationError(f"cannot import custom rule {ref!r}: {exc}") from exc
    raise ValidationError(f"unknown custom rule {ref!r}")


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class ModelSpec:
    state_space: FiniteMetricSpace
    action_space: FiniteMetricSpace
    noise: NoiseSpec
    transition: TransitionRule
    reward: RewardRule
    beta: float
    k_f: float = 1.0
    k_big_f: float = 1.0
    config: dict | None = None
    product: ProductSpace = field(init=False)
    reward_bound: float = field(init=False)
    reward_sup: float = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError(f"beta must lie in [0, 1), got {self.beta}")
        if self.k_f <= 0 or self.k_big_f <= 0:
            raise ValidationError("Lipschitz constants must be positive")
        object.__setattr__(self, "product", ProductSpace(self.state_space, self.action_space))
        self.transition.validate(self)
        self.reward.validate(self)
        lo, hi = self._reward_range()
        object.__setattr__(self, "reward_bound", hi - lo)
        object.__setattr__(self, "reward_sup", max(abs(lo), abs(hi)))

    @property
    def n_states(self) -> int:
        return self.state_space.size

    @property
    def n_actions(self) -> int:
        return self.action_space.size

    @property
    def table_shape(self) -> tuple[int, int, int, int]:
        return (self.n_states, self.n_actions, self.noise.idio_size, self.noise.common_size)

    def transition_table(self, joint: np.ndarray) -> np.ndarray:
        table = np.asarray(self.transition.table(np.asarray(joint, dtype=float), self.table_shape))
        if table.min() < 0 or table.max() >= self.n_states:
            raise ValidationError("transition produced a state index out of range")
        return table

    def reward_table(self, joint: np.ndarray) -> np.ndarray:
        return np.asarray(self.reward.table(np.asarray(joint, dtype=float),
                                            (self.n_states, self.n_actions)), dtype=float)

    def next_state_law(self, joint: np.ndarray) -> np.ndarray:
        """Per-agent next-state law ``p[x, a, e0, x']`` with idiosyncratic noise integrated."""
        table = self.transition_table(joint)
        onehot = np.eye(self.n_states)[table]  # (x, a, e, e0, x')
        return np.einsum("e,xaeys->xays", self.noise.idio.weights, onehot)

    def _reward_range(self) -> tuple[float, float]:
        p = self.product.size
        q = REWARD_GRID_DENOMINATOR
        if n_compositions(q, p) <= 20_000:
            grid = (np.array(c, dtype=float) / q for c in compositions(q, p))
        else:
            rng = np.random.default_rng(0)
            grid = (rng.multinomial(q, np.full(p, 1.0 / p)) / q for _ in range(5_000))
        lo, hi = math.inf, -math.inf
        for joint in grid:
            table = self.reward_table(joint)
            if not np.all(np.isfinite(table)):
                raise ValidationError("reward must be finite")
            lo = min(lo, float(table.min()))
            hi = max(hi, float(table.max()))
        return lo, hi

    def resolved_config(self) -> dict:
        if self.config is not None:
            return self.config
        return model_to_config(self)


def gamma_exponent(beta: float, k_big_f: float) -> float:
    """Convergence exponent ``min(1, |ln beta| / ln(2 K_F)_+)``."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if k_big_f <= 0:
        raise ValueError(f"K_F must be positive, got {k_big_f}")
    growth = max(math.log(2.0 * k_big_f), 0.0)
    if growth == 0.0:
        return 1.0
    return min(1.0, abs(math.log(beta)) / growth)


def truncation_horizon(beta: float, reward_bound: float, tol: float,
                       max_horizon: int = MAX_HORIZON) -> int:
    """Smallest ``T`` with ``beta**T * reward_bound / (1 - beta) <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    scale = reward_bound / (1.0 - beta)
    horizon = 0
    while scale > tol:
        horizon += 1
        scale *= beta
        if horizon > max_horizon:
            raise CapExceededError(f"horizon exceeds the cap of {max_horizon}")
    return horizon


def estimate_lipschitz_constants(model: ModelSpec, samples: int = 2000, seed: int = 0,
                                 grid_denominator: int | None = None,
                                 exhaustive: bool = False) -> tuple[float, float]:
    """Empirical lower bounds ``(K_F_hat, K_f_hat)`` for the declared constants.

    Pairs ``((x, a, mu), (x', a', mu'))`` are drawn with ``mu`` on the lattice of
    product-space measures with denominator ``grid_denominator`` (default: the
    idiosyncratic noise size).  With finite noise the in-expectation modulus of
    ``F`` is a step function, so quotients below that resolution are meaningless.
    ``exhaustive=True`` sweeps every pair of the lattice instead of sampling.
    The numerator for ``F`` is ``E_e[d(F, F')]``, exact over the idiosyncratic
    noise and maximized over the common noise.
    """
    from .transport import wasserstein1

    if samples < 1:
        raise ValueError("samples must be >= 1")
    q = grid_denominator or model.noise.idio_size
    p = model.product.size
    lattice = [np.array(c, dtype=float) / q for c in compositions(q, p)]
    points = list(itertools.product(range(model.n_states), range(model.n_actions)))
    lam = model.noise.idio.weights
    d_state = model.state_space.dist

    tables = [model.transition_table(j) for j in lattice]
    rewards = [model.reward_table(j) for j in lattice]
    measures = [Measure(model.product, j) for j in lattice]
    w_cache: dict[tuple[int, int], float] = {}

    def w_between(i: int, j: int) -> float:
        key = (min(i, j), max(i, j))
        if key not in w_cache:
            w_cache[key] = wasserstein1(measures[i], measures[j])
        return w_cache[key]

    if exhaustive:
        pairs = itertools.product(range(len(lattice)), points, range(len(lattice)), points)
    else:
        rng = np.random.default_rng(seed)
        pairs = ((int(rng.integers(len(lattice))), points[rng.integers(len(points))],
                  int(rng.integers(len(lattice))), points[rng.integers(len(points))])
                 for _ in range(samples))

    k_trans = k_rew = 0.0
    for i, (x, a), j, (x2, a2) in pairs:
        denom = (model.product.dist[model.product.pair_index(x, a), model.product.pair_index(x2, a2)]
                 + w_between(i, j))
        if denom <= 0:
            continue
        moved = d_state[tables[i][x, a], tables[j][x2, a2]]  # (e, e0)
        k_trans = max(k_trans, float((lam @ moved).max()) / denom)
        k_rew = max(k_rew, abs(rewards[i][x, a] - rewards[j][x2, a2]) / denom)

    if k_trans > model.k_big_f + 1e-12:
        warnings.warn(f"empirical K_F {k_trans:.4g} exceeds declared {model.k_big_f:.4g}",
                      LipschitzWarning, stacklevel=2)
    if k_rew > model.k_f + 1e-12:
        warnings.warn(f"empirical K_f {k_rew:.4g} exceeds declared {model.k_f:.4g}",
                      LipschitzWarning, stacklevel=2)
    return k_trans, k_rew


# ---------------------------------------------------------------------------
# configuration

MODEL_KEYS = {"state_space", "action_space", "noise", "transition", "reward",
              "beta", "k_big_f", "k_f"}
SPACE_KEYS = {"labels", "dist"}
NOISE_KEYS = {"idio_size", "idio_weights", "common_size", "common_weights"}
RULE_KEYS = {"family", "params"}

REFERENCE_CONFIG = {
    "state_space": {"labels": [0, 1], "dist": [[0.0, 1.0], [1.0, 0.0]]},
    "action_space": {"labels": [0, 1], "dist": [[0.0, 1.0], [1.0, 0.0]]},
    "noise": {"idio_size": 4, "idio_weights": [0.25, 0.25, 0.25, 0.25],
              "common_size": 2, "common_weights": [0.5, 0.5]},
    "transition": {"family": "influence_threshold",
                   "params": {"eta": 0.3, "common_shifts": [-0.1, 0.1],
                              "mean_field_weight": 1.0, "base": 0.0, "noise_grid": "left"}},
    "reward": {"family": "linear",
               "params": {"state_coef": 1.0, "action_cost": 0.2, "congestion": 0.0}},
    "beta": 0.5,
    "k_big_f": 1.0,
    "k_f": 1.0,
}


def _check_keys(section: dict, allowed: set, where: str, required: set | None = None) -> None:
    if not isinstance(section, dict):
        raise ValidationError(f"{where} must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {sorted(unknown)}")
    missing = (allowed if required is None else required) - set(section)
    if missing:
        raise ValidationError(f"missing key(s) in {where}: {sorted(missing)}")


def _space_from_config(section: dict, where: str) -> FiniteMetricSpace:
    _check_keys(section, SPACE_KEYS, where)
    return FiniteMetricSpace(tuple(section["labels"]), np.asarray(section["dist"], dtype=float))


def _rule_from_config(section: dict, families: dict, registry: dict, wrapper, where: str):
    _check_keys(section, RULE_KEYS, where, required={"family"})
    family = section["family"]
    params = dict(section.get("params") or {})
    if family == "custom":
        _check_keys(params, {"ref"}, f"{where}.params")
        return wrapper(_resolve_custom(params["ref"], registry), params["ref"])
    if family not in families:
        raise ValidationError(f"unknown {where} family {family!r}")
    try:
        return families[family](**params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for {where} family {family!r}: {exc}") from exc


def model_from_config(cfg: dict) -> ModelSpec:
    """Build a :class:`ModelSpec` from a parsed config mapping (unknown keys are errors)."""
    _check_keys(cfg, MODEL_KEYS, "model config")
    noise_cfg = cfg["noise"]
    _check_keys(noise_cfg, NOISE_KEYS, "noise")
    idio_w = noise_cfg["idio_weights"]
    common_w = noise_cfg["common_weights"]
    if len(idio_w) != noise_cfg["idio_size"] or len(common_w) != noise_cfg["common_size"]:
        raise ValidationError("noise weights do not match the declared sizes")
    return ModelSpec(
        state_space=_space_from_config(cfg["state_space"], "state_space"),
        action_space=_space_from_config(cfg["action_space"], "action_space"),
        noise=NoiseSpec.from_weights(idio_w, common_w),
        transition=_rule_from_config(cfg["transition"], TRANSITION_FAMILIES,
                                     _CUSTOM_TRANSITIONS, FunctionTransition, "transition"),
        reward=_rule_from_config(cfg["reward"], REWARD_FAMILIES, _CUSTOM_REWARDS,
                                 FunctionReward, "reward"),
        beta=float(cfg["beta"]),
        k_big_f=float(cfg["k_big_f"]),
        k_f=float(cfg["k_f"]),
        config=_plain(cfg),
    )


def model_to_config(model: ModelSpec) -> dict:
    def space(s):
        return {"labels": list(s.labels), "dist": s.dist.tolist()}

    return {
        "state_space": space(model.state_space),
        "action_space": space(model.action_space),
        "noise": {"idio_size": model.noise.idio_size,
                  "idio_weights": model.noise.idio.weights.tolist(),
                  "common_size": model.noise.common_size,
                  "common_weights": model.noise.common.weights.tolist()},
        "transition": {"family": model.transition.family, "params": model.transition.params()},
        "reward": {"family": model.reward.family, "params": model.reward.params()},
        "beta": model.beta,
        "k_big_f": model.k_big_f,
        "k_f": model.k_f,
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def reference_model(**overrides) -> ModelSpec:
    """The pinned benchmark model; keyword overrides replace top-level keys."""
    cfg = _plain(REFERENCE_CONFIG)
    cfg.update(overrides)
    return model_from_config(cfg)
