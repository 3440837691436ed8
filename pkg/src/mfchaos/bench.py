"""Experiment harness: value convergence, policy-lift gaps, M_N rates and operator checks.

Every experiment is a pure function of its :class:`ExperimentConfig`; rows are
emitted in increasing N and all Monte-Carlo draws come from labelled
substreams, so outputs are bit-reproducible for any worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import __version__
from .core import (CapExceededError, FiniteMetricSpace, Measure, ModelSpec, gamma_exponent,
                   model_from_config)
from .lift import lift_feedback, lift_gap, randomized_lift_distance
from .mkv import (ActionKernel, KernelFamily, MeanFieldPolicy, SolveResult, bellman_apply_kernel,
                  kernel_from_joint, value_iteration)
from .nagent import NAgentValueTable, bellman_TN_action, solve_VN, unlift
from .rng import substream
from .transport import estimate_MN

VALUE_COLUMNS = ["N", "x0_id", "V_N", "V_check", "gap", "M_N_hat", "gamma", "C_fit", "q", "tol", "seed"]
GAP_COLUMNS = ["N", "mode", "V_N", "V_lift", "gap", "eps_source", "M_N_hat", "gamma", "seed"]
MN_COLUMNS = ["N", "M_N_hat", "stderr"]
OPERATOR_COLUMNS = ["N", "sample", "lhs", "coupling_cost", "M_N_hat", "ratio", "coupling_ok", "roundtrip_error"]
MAX_BENCH_N = 12


@dataclass
class ExperimentConfig:
    model: dict
    n_list: tuple = (2, 4, 6, 8)
    q: int = 50
    kernel_family: str = "randomized:8"
    tol: float = 1e-8
    trials: int = 2000
    seed: int = 0
    output: str | None = None
    mn_n_list: tuple = (16, 32, 64, 128, 256, 512, 1024)
    lift_draws: int = 5000
    random_states: int = 200
    operator_samples: int = 50
    workers: int = 1
    plots: bool = False

    def __post_init__(self):
        self.n_list = tuple(int(n) for n in self.n_list)
        self.mn_n_list = tuple(int(n) for n in self.mn_n_list)
        if not self.n_list or min(self.n_list) < 1 or max(self.n_list) > MAX_BENCH_N:
            raise CapExceededError(f"N-list must lie within 1..{MAX_BENCH_N}")
        for name in ("q", "trials", "lift_draws", "random_states", "operator_samples", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        KernelFamily.parse(self.kernel_family)

    def build_model(self) -> ModelSpec:
        return model_from_config(self.model)

    def resolved(self) -> dict:
        out = asdict(self)
        out["n_list"] = list(self.n_list)
        out["mn_n_list"] = list(self.mn_n_list)
        return out


class RateFit(NamedTuple):
    points: tuple
    slope: float
    intercept: float
    residual: float
    diagnostic: str = ""


def fit_loglog(points: Sequence[tuple[float, float]]) -> RateFit:
    """Least-squares line through ``(log x, log y)``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ValueError("need at least three (x, y) points")
    if np.any(pts <= 0):
        raise ValueError("log-log fit needs positive coordinates")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    (slope, intercept), res, *_ = np.polyfit(lx, ly, 1, full=True)
    residual = float(res[0]) if len(res) else 0.0
    return RateFit(tuple(map(tuple, pts.tolist())), float(slope), float(intercept), residual)


def _gamma(model: ModelSpec) -> float:
    return gamma_exponent(model.beta, model.k_big_f) if model.beta > 0 else 1.0


def solve_mean_field(cfg: ExperimentConfig, model: ModelSpec | None = None) -> SolveResult:
    model = model or cfg.build_model()
    return value_iteration(model, cfg.q, cfg.kernel_family, cfg.tol)


def _mn_exact(model: ModelSpec, n: int, seed: int) -> float:
    return estimate_MN(model.product, n, seed=seed, exact=True)


# ---------------------------------------------------------------------------
# value convergence and policy gaps (one job per N)


def _value_job(args) -> dict:
    cfg, n, solution = args
    model = cfg.build_model()
    V_N = solve_VN(model, n, cfg.tol)
    check = unlift(solution.table, n, model.n_states)
    M_N = _mn_exact(model, n, cfg.seed)
    gaps = []
    for mode in ("feedback", "randomized"):
        gaps.append(lift_gap(model, solution.policy, mode, n, tol=cfg.tol, M_N_hat=M_N, V_N=V_N))
    return {"n": n, "V_N": V_N.values, "V_check": check.values, "M_N": M_N, "gaps": gaps}


def _run_jobs(cfg: ExperimentConfig, solution: SolveResult) -> list[dict]:
    jobs = [(cfg, n, solution) for n in cfg.n_list]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_value_job, jobs))
    return [_value_job(j) for j in jobs]


def value_rows(cfg: ExperimentConfig, results: list[dict], gamma: float) -> tuple[list[dict], float]:
    ratios = []
    for res in results:
        gap = np.abs(res["V_N"] - res["V_check"])
        ratios.append(float(gap.max()) / res["M_N"] ** gamma if res["M_N"] > 0 else 0.0)
    c_fit = max(ratios) if ratios else 0.0
    rows = []
    for res in results:
        for k, (v, chk) in enumerate(zip(res["V_N"], res["V_check"])):
            rows.append({"N": res["n"], "x0_id": k, "V_N": float(v), "V_check": float(chk),
                         "gap": abs(float(v) - float(chk)), "M_N_hat": res["M_N"], "gamma": gamma,
                         "C_fit": c_fit, "q": cfg.q, "tol": cfg.tol, "seed": cfg.seed})
    return rows, c_fit


def gap_rows(cfg: ExperimentConfig, results: list[dict]) -> list[dict]:
    rows = []
    for res in results:
        for rep in res["gaps"]:
            rows.append({"N": rep.n, "mode": rep.mode, "V_N": rep.V_N, "V_lift": rep.V_lift,
                         "gap": rep.gap, "eps_source": rep.eps_source, "M_N_hat": rep.M_N_hat,
                         "gamma": rep.gamma, "seed": cfg.seed})
    return rows


def run_value_convergence(cfg: ExperimentConfig, solution: SolveResult | None = None) -> list[dict]:
    """Rows of (N, x0_id, V_N, V_check, gap, ...) for every class of every N.

    ``x0_id`` indexes the class (state-count vector) in lexicographic count
    order, i.e. by the number of agents in state 0 when there are two states.
    """
    model = cfg.build_model()
    solution = solution or solve_mean_field(cfg, model)
    rows, _ = value_rows(cfg, _run_jobs(cfg, solution), _gamma(model))
    return rows


def run_policy_gap(cfg: ExperimentConfig, solution: SolveResult | None = None) -> list[dict]:
    """Lift gaps for both modes at the class where each gap is largest."""
    model = cfg.build_model()
    solution = solution or solve_mean_field(cfg, model)
    return gap_rows(cfg, _run_jobs(cfg, solution))


# ---------------------------------------------------------------------------
# M_N rate


def run_mn_rate(cfg: ExperimentConfig, space: FiniteMetricSpace | None = None,
                candidates: Sequence[Measure] | None = None) -> tuple[RateFit, list[dict]]:
    """Monte-Carlo M_N over ``cfg.mn_n_list`` and its log-log slope."""
    if space is None:
        space = cfg.build_model().product
    rows = []
    for n in cfg.mn_n_list:
        est = estimate_MN(space, n, candidates, trials=cfg.trials, seed=cfg.seed, return_details=True)
        rows.append({"N": n, "M_N_hat": est.value, "stderr": est.stderr})
    points = [(r["N"], r["M_N_hat"]) for r in rows]
    try:
        fit = fit_loglog(points)
    except ValueError as exc:
        fit = RateFit(tuple(points), math.nan, math.nan, math.nan, f"fit rejected: {exc}")
    return fit, rows


# ---------------------------------------------------------------------------
# operator comparison and transport bounds


def random_joint_states(n_states: int, n: int, count: int, seed: int) -> np.ndarray:
    return substream(seed, "joint-states", n).integers(0, n_states, size=(count, n))


def run_operator_comparison(cfg: ExperimentConfig, solution: SolveResult | None = None) -> tuple[list[dict], float]:
    """Compare the lifted operator at ``mu_N[x]`` with the N-agent operator at the lifted action.

    For random ``(x, kernel)``: ``lhs = |T^kernel V(mu_N[x]) - T^a_N V_check(x)|`` with
    ``a`` from the feedback lift.  Returns rows and the largest
    ``lhs / (W^gamma + M_N^gamma)``.
    """
    model = cfg.build_model()
    solution = solution or solve_mean_field(cfg, model)
    gamma = _gamma(model)
    table = solution.table
    rows, worst = [], 0.0
    for n in cfg.n_list:
        check = unlift(table, n, model.n_states)
        M_N = _mn_exact(model, n, cfg.seed)
        rng = substream(cfg.seed, "operator", n)
        states = random_joint_states(model.n_states, n, cfg.operator_samples, cfg.seed + 1)
        for s, x in enumerate(states):
            kernel = rng.dirichlet(np.ones(model.n_actions), size=model.n_states)
            policy = MeanFieldPolicy(table.grid, np.broadcast_to(kernel, (len(table.grid),) + kernel.shape),
                                     action_space=model.action_space)
            lifted = lift_feedback(policy, x)
            mu = np.bincount(x, minlength=model.n_states) / n
            lhs = abs(bellman_apply_kernel(model, table, mu, ActionKernel(kernel))
                      - bellman_TN_action(model, check, x, lifted.actions))
            denom = lifted.cost ** gamma + M_N ** gamma
            ratio = lhs / denom if denom > 0 else 0.0
            worst = max(worst, ratio)
            emp = Measure(model.product, np.bincount(x * model.n_actions + lifted.actions,
                                                     minlength=model.product.size) / n)
            rebuilt = kernel_from_joint(emp).joint(emp.left_marginal())
            rows.append({"N": n, "sample": s, "lhs": lhs, "coupling_cost": lifted.cost,
                         "M_N_hat": M_N, "ratio": ratio,
                         "coupling_ok": int(lifted.cost <= 2 * M_N + 1e-12),
                         "roundtrip_error": float(np.abs(rebuilt - emp.weights).max())})
    return rows, worst


def run_lift_coupling(cfg: ExperimentConfig, solution: SolveResult | None = None) -> list[dict]:
    """Feedback-lift coupling cost on random joint states against ``2 M_N``."""
    model = cfg.build_model()
    solution = solution or solve_mean_field(cfg, model)
    out = []
    for n in cfg.n_list:
        M_N = _mn_exact(model, n, cfg.seed)
        states = random_joint_states(model.n_states, n, cfg.random_states, cfg.seed)
        costs = np.array([lift_feedback(solution.policy, x).cost for x in states])
        out.append({"N": n, "max_cost": float(costs.max()), "bound": 2 * M_N,
                    "ok": bool(costs.max() <= 2 * M_N + 1e-12)})
    return out


def run_randomized_lift_distance(cfg: ExperimentConfig, solution: SolveResult | None = None) -> list[dict]:
    """Monte-Carlo ``E[W1(target, empirical of randomized lift)]`` against ``(2 + diam A) M_N``.

    Evaluated at every class representative; the row keeps the worst class.
    """
    model = cfg.build_model()
    solution = solution or solve_mean_field(cfg, model)
    k = model.action_space.diameter
    out = []
    for n in cfg.n_list:
        M_N = _mn_exact(model, n, cfg.seed)
        bound = (2 + k) * M_N
        worst = None
        for counts in NAgentValueTable(n, model.n_states).classes:
            x = np.repeat(np.arange(model.n_states), counts)
            mean, se = randomized_lift_distance(solution.policy, x, cfg.lift_draws, cfg.seed)
            if worst is None or mean - bound > worst[0] - bound:
                worst = (mean, se)
        mean, se = worst
        out.append({"N": n, "mean": mean, "stderr": se, "bound": bound,
                    "ok": bool(mean - 3 * se <= bound)})
    return out


# ---------------------------------------------------------------------------
# full run


def rows_to_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _fmt(row[c]) for c in columns})
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def criteria_summary(value: list[dict], gaps: list[dict], coupling: list[dict],
                     distance: list[dict], fit: RateFit | None, solution: SolveResult) -> dict:
    """Pass/fail of the quantitative checks the bench reproduces."""
    by_n: dict[int, float] = {}
    mn: dict[int, float] = {}
    gamma = value[0]["gamma"] if value else 1.0
    for r in value:
        by_n[r["N"]] = max(by_n.get(r["N"], 0.0), r["gap"])
        mn[r["N"]] = r["M_N_hat"]
    ns = sorted(by_n)
    out: dict = {}
    if len(ns) >= 2:
        n0, n1 = ns[0], ns[-1]
        c0 = by_n[n0] / mn[n0] ** gamma
        out["value_gap_decreases"] = {"pass": by_n[n1] < by_n[n0], "gap_first": by_n[n0], "gap_last": by_n[n1]}
        bound_ok = {n: by_n[n] <= 2 * c0 * mn[n] ** gamma + 1e-12 for n in ns}
        out["value_gap_rate_bound"] = {"pass": all(bound_ok.values()), "C_first": c0,
                                       "per_N": {str(n): ok for n, ok in bound_ok.items()}}
        c_fit = value[0]["C_fit"]
        lift_ok = all(r["V_lift"] >= r["V_N"] - (r["eps_source"] + 2 * c_fit * r["M_N_hat"] ** r["gamma"]) - 1e-12
                      for r in gaps)
        out["lift_value_bound"] = {"pass": lift_ok, "C_fit": c_fit}
        for mode in ("feedback", "randomized"):
            g = {r["N"]: r["gap"] for r in gaps if r["mode"] == mode}
            out[f"lift_gap_decreases_{mode}"] = {"pass": g[n1] < g[n0], "gap_first": g[n0], "gap_last": g[n1]}
    out["randomized_lift_distance"] = {"pass": all(r["ok"] for r in distance)}
    out["feedback_lift_coupling"] = {"pass": all(r["ok"] for r in coupling)}
    if fit is not None:
        ok = math.isfinite(fit.slope) and abs(fit.slope + 0.5) <= 0.1
        out["mn_rate_slope"] = {"pass": ok, "slope": fit.slope, "diagnostic": fit.diagnostic}
    out["mean_field_residual"] = {"pass": solution.residual <= value[0]["tol"] if value else True,
                                  "residual": solution.residual, "eps": solution.policy.eps}
    return out


def bench_chaos(cfg: ExperimentConfig, with_rate: bool = True) -> dict:
    """Run every experiment; write CSVs, the JSON summary and optional plots to ``cfg.output``."""
    model = cfg.build_model()
    solution = solve_mean_field(cfg, model)
    gamma = _gamma(model)
    results = _run_jobs(cfg, solution)
    value, _ = value_rows(cfg, results, gamma)
    gaps = gap_rows(cfg, results)
    coupling = run_lift_coupling(cfg, solution)
    distance = run_randomized_lift_distance(cfg, solution)
    operator, worst_ratio = run_operator_comparison(cfg, solution)
    fit, mn_rows = run_mn_rate(cfg, model.product) if with_rate else (None, [])
    summary = {
        "version": __version__,
        "config": cfg.resolved(),
        "gamma": gamma,
        "operator_ratio_max": worst_ratio,
        "mn_fit": None if fit is None else {"slope": fit.slope, "intercept": fit.intercept,
                                            "residual": fit.residual, "diagnostic": fit.diagnostic},
        "criteria": criteria_summary(value, gaps, coupling, distance, fit, solution),
        "lift_coupling": coupling,
        "randomized_lift_distance": distance,
    }
    files = {
        "value_convergence.csv": rows_to_csv(value, VALUE_COLUMNS),
        "policy_gap.csv": rows_to_csv(gaps, GAP_COLUMNS),
        "operator_comparison.csv": rows_to_csv(operator, OPERATOR_COLUMNS),
    }
    if with_rate:
        files["mn_rate.csv"] = rows_to_csv(mn_rows, MN_COLUMNS)
    if cfg.output:
        os.makedirs(cfg.output, exist_ok=True)
        for name, text in files.items():
            with open(os.path.join(cfg.output, name), "w", newline="") as fh:
                fh.write(text)
        with open(os.path.join(cfg.output, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        if cfg.plots:
            from .plotting import plot_bench
            summary["plots"] = plot_bench(cfg.output, value, gaps, fit)
    summary["files"] = files
    return summary


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
