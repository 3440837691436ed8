"""Command-line entry point.

Config files are JSON documents holding the model keys plus an optional
``run`` section with solver and experiment settings.  ``--set key=value``
overrides any existing (dotted) key; unknown keys are errors.

Exit status: 0 success, 1 validation failure, 2 cap or parameter error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from importlib import resources

import numpy as np

from . import __version__
from .core import (CapExceededError, LipschitzWarning, MODEL_KEYS, ValidationError,
                   estimate_lipschitz_constants, gamma_exponent, model_from_config)

OUTPUT_ENV = "MFCHAOS_OUTPUT_DIR"
DEFAULT_OUTPUT = "mfchaos-out"

RUN_DEFAULTS = {
    "q": 50,
    "kernel_family": "randomized:8",
    "tol": 1e-8,
    "n_list": [2, 4, 6, 8],
    "trials": 2000,
    "mn_n_list": [16, 32, 64, 128, 256, 512, 1024],
    "lift_draws": 5000,
    "random_states": 200,
    "operator_samples": 50,
    "lipschitz_samples": 2000,
}

log = logging.getLogger("mfchaos")


def load_config(path: str) -> dict:
    """Parse a config file; the name ``reference`` loads the bundled reference model."""
    if path == "reference":
        text = resources.files("mfchaos").joinpath("configs/reference.json").read_text()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ValidationError(f"cannot read config {path!r}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    unknown = set(cfg) - MODEL_KEYS - {"run"}
    if unknown:
        raise ValidationError(f"unknown top-level config key(s): {sorted(unknown)}")
    run = cfg.get("run", {})
    if not isinstance(run, dict):
        raise ValidationError("run must be a mapping")
    unknown = set(run) - set(RUN_DEFAULTS)
    if unknown:
        raise ValidationError(f"unknown key(s) in run: {sorted(unknown)}")
    cfg["run"] = {**copy.deepcopy(RUN_DEFAULTS), **run}
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Set dotted keys such as ``beta=0.3`` or ``transition.params.eta=0.2``; keys must exist."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ValidationError(f"override key {key!r} does not exist in the config")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ValidationError(f"override key {key!r} does not exist in the config")
        node[parts[-1]] = _parse_value(value)
    return cfg


def model_part(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "run"}


def _write_json(outdir: str, name: str, data: dict) -> str:
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")
    return path


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _envelope(cfg: dict, seed: int, **payload) -> dict:
    return {"version": __version__, "config": cfg, "seed": seed, **payload}


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate_model(args, cfg) -> int:
    model = model_from_config(model_part(cfg))
    gamma = gamma_exponent(model.beta, model.k_big_f) if model.beta > 0 else 1.0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LipschitzWarning)
        k_big_f, k_f = estimate_lipschitz_constants(model, cfg["run"]["lipschitz_samples"], args.seed)
    for w in caught:
        log.warning("%s", w.message)
    info = {
        "diameter_state": model.state_space.diameter,
        "diameter_action": model.action_space.diameter,
        "gamma": gamma,
        "reward_bound": model.reward_bound,
        "k_big_f_empirical": k_big_f,
        "k_f_empirical": k_f,
    }
    print(f"Delta_X = {info['diameter_state']:g}")
    print(f"Delta_A = {info['diameter_action']:g}")
    print(f"gamma = {gamma:g}")
    print(f"Delta_f = {model.reward_bound:g}")
    print(f"K_F empirical = {k_big_f:g} (declared {model.k_big_f:g})")
    print(f"K_f empirical = {k_f:g} (declared {model.k_f:g})")
    _write_json(args.output_dir, "validate.json", _envelope(cfg, args.seed, **info))
    return 0


def cmd_solve_mkv(args, cfg) -> int:
    from .mkv import solution_artifact, value_iteration

    run = cfg["run"]
    model = model_from_config(model_part(cfg))
    result = value_iteration(model, int(run["q"]), run["kernel_family"], float(run["tol"]))
    data = solution_artifact(model, result, {"config": cfg, "seed": args.seed})
    path = _write_json(args.output_dir, "mkv_solution.json", data)
    print(f"residual {result.residual:.3g} after {result.table.sweeps} sweeps, eps {result.policy.eps:.3g}")
    print(path)
    return 0


def cmd_solve_nagent(args, cfg) -> int:
    from .nagent import solve_VN

    run = cfg["run"]
    model = model_from_config(model_part(cfg))
    ns = args.n if args.n else run["n_list"]
    tables = []
    for n in ns:
        table = solve_VN(model, int(n), float(run["tol"]))
        tables.append({"n": int(n), "residual": table.residual, "sweeps": table.sweeps,
                       "classes": [list(c) for c in table.classes], "values": table.values.tolist()})
        print(f"n={n}: residual {table.residual:.3g} after {table.sweeps} sweeps")
    print(_write_json(args.output_dir, "nagent_values.json", _envelope(cfg, args.seed, tables=tables)))
    return 0


def cmd_lift(args, cfg) -> int:
    from .lift import lift_feedback, lift_gap, lift_randomized
    from .mkv import load_solution, value_iteration

    run = cfg["run"]
    model = model_from_config(model_part(cfg))
    if args.solution:
        result = load_solution(args.solution, model.state_space, model.action_space)
    else:
        result = value_iteration(model, int(run["q"]), run["kernel_family"], float(run["tol"]))
    ns = args.n if args.n else run["n_list"]
    modes = [args.mode] if args.mode != "both" else ["feedback", "randomized"]
    reports = []
    for n in ns:
        for mode in modes:
            rep = lift_gap(model, result.policy, mode, int(n), tol=float(run["tol"]), mn_seed=args.seed)
            reports.append(rep._asdict())
            print(f"n={n} {mode}: V_N {rep.V_N:.6g} V_lift {rep.V_lift:.6g} gap {rep.gap:.3g}")
    payload = {"reports": reports}
    if args.x0:
        x0 = np.array([int(v) for v in args.x0.split(",")])
        u = np.random.default_rng(args.seed).random(x0.size)
        fb = lift_feedback(result.policy, x0)
        payload["x0"] = {"state": x0.tolist(), "feedback": fb.actions.tolist(), "feedback_cost": fb.cost,
                         "randomized": lift_randomized(result.policy, x0, u).tolist()}
        print(f"x0 {x0.tolist()}: feedback {fb.actions.tolist()} (cost {fb.cost:.4g})")
    print(_write_json(args.output_dir, "lift_report.json", _envelope(cfg, args.seed, **payload)))
    return 0


def _experiment(args, cfg):
    from .bench import ExperimentConfig

    run = cfg["run"]
    return ExperimentConfig(
        model=model_part(cfg), n_list=tuple(run["n_list"]), q=int(run["q"]),
        kernel_family=run["kernel_family"], tol=float(run["tol"]), trials=int(run["trials"]),
        seed=args.seed, output=args.output_dir, mn_n_list=tuple(run["mn_n_list"]),
        lift_draws=int(run["lift_draws"]), random_states=int(run["random_states"]),
        operator_samples=int(run["operator_samples"]), workers=args.workers,
        plots=getattr(args, "plots", False))


def cmd_bench_chaos(args, cfg) -> int:
    from .bench import bench_chaos

    exp = _experiment(args, cfg)
    summary = bench_chaos(exp, with_rate=not args.skip_rate)
    _write_json(args.output_dir, "manifest.json",
                _envelope(cfg, args.seed, files=sorted(summary["files"]) + ["summary.json"]))
    for name, crit in summary["criteria"].items():
        print(f"{'PASS' if crit['pass'] else 'FAIL'} {name}")
    return 0


def cmd_estimate_mn(args, cfg) -> int:
    from .bench import MN_COLUMNS, rows_to_csv, run_mn_rate

    exp = _experiment(args, cfg)
    if args.n:
        exp.mn_n_list = tuple(args.n)
    fit, rows = run_mn_rate(exp)
    os.makedirs(args.output_dir, exist_ok=True)
    with open(os.path.join(args.output_dir, "mn_rate.csv"), "w", newline="") as fh:
        fh.write(rows_to_csv(rows, MN_COLUMNS))
    _write_json(args.output_dir, "mn_fit.json",
                _envelope(cfg, args.seed, slope=fit.slope, intercept=fit.intercept,
                          residual=fit.residual, diagnostic=fit.diagnostic))
    for r in rows:
        print(f"N={r['N']}: M_N_hat {r['M_N_hat']:.5g} (se {r['stderr']:.2g})")
    if fit.diagnostic:
        log.warning("%s", fit.diagnostic)
    else:
        print(f"slope {fit.slope:.4f}")
    return 0


COMMANDS = {
    "validate-model": cmd_validate_model,
    "solve-mkv": cmd_solve_mkv,
    "solve-nagent": cmd_solve_nagent,
    "lift": cmd_lift,
    "bench-chaos": cmd_bench_chaos,
    "estimate-mn": cmd_estimate_mn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfchaos", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default="reference",
                        help="JSON config path, or 'reference' for the bundled model")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override an existing config key (dotted path), repeatable")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-o", "--output-dir", default=None,
                        help=f"artifact directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    common.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: available CPUs)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate-model", parents=[common], help="check a model config and print its constants")
    sub.add_parser("solve-mkv", parents=[common], help="solve the mean-field problem on a simplex grid")
    p = sub.add_parser("solve-nagent", parents=[common], help="solve the N-agent problem exactly")
    p.add_argument("-n", type=int, action="append", help="number of agents (repeatable)")
    p = sub.add_parser("lift", parents=[common], help="evaluate lifted mean-field policies")
    p.add_argument("-n", type=int, action="append", help="number of agents (repeatable)")
    p.add_argument("--mode", choices=["feedback", "randomized", "both"], default="both")
    p.add_argument("--solution", help="mkv_solution.json to lift instead of solving afresh")
    p.add_argument("--x0", help="comma-separated joint state to lift, e.g. 0,1,1")
    p = sub.add_parser("bench-chaos", parents=[common], help="run the convergence benchmark")
    p.add_argument("--plots", action="store_true", help="also write log-log figures")
    p.add_argument("--skip-rate", action="store_true", help="skip the M_N rate experiment")
    p = sub.add_parser("estimate-mn", parents=[common], help="estimate M_N and its log-log slope")
    p.add_argument("-n", type=int, action="append", help="sample size (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    args.output_dir = args.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    if args.workers is None:
        args.workers = os.cpu_count() or 1
    try:
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        cfg = apply_overrides(load_config(args.config), args.overrides)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        log.info("seed: %d", args.seed)
        return COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"mfchaos: validation error: {exc}", file=sys.stderr)
        return 1
    except (CapExceededError, ValueError, KeyError, TypeError) as exc:
        print(f"mfchaos: parameter error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
