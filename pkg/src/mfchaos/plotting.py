"""Static log-log figures for the bench outputs."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def configure_plt():
    plt.rcParams.update({
        "figure.figsize": (5.0, 3.6),
        "figure.dpi": 120,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
        "legend.frameon": False,
        "svg.hashsalt": "mfchaos",
    })


def _save(fig, path):
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Date": None} if path.endswith(".svg") else {"Software": None})
    plt.close(fig)
    return path


def plot_value_gap(rows, path):
    """Largest value gap per N together with M_N_hat, on log-log axes."""
    configure_plt()
    ns = sorted({r["N"] for r in rows})
    gap = [max(r["gap"] for r in rows if r["N"] == n) for n in ns]
    mn = [next(r["M_N_hat"] for r in rows if r["N"] == n) for n in ns]
    c_fit = rows[0]["C_fit"] if rows else 0.0
    gamma = rows[0]["gamma"] if rows else 1.0
    fig, ax = plt.subplots()
    positive = [(n, g) for n, g in zip(ns, gap) if g > 0]
    if positive:
        ax.loglog(*zip(*positive), "o-", label="max gap")
    ax.loglog(ns, c_fit * np.asarray(mn) ** gamma, "--", label="C_fit M_N^gamma")
    ax.set_xlabel("N")
    ax.set_ylabel("|V_N - V(mu_N)|")
    ax.legend()
    return _save(fig, path)


def plot_policy_gap(rows, path):
    configure_plt()
    fig, ax = plt.subplots()
    for mode, marker in (("feedback", "o-"), ("randomized", "s--")):
        pts = sorted((r["N"], r["gap"]) for r in rows if r["mode"] == mode and r["gap"] > 0)
        if pts:
            ax.loglog(*zip(*pts), marker, label=mode)
    ax.set_xlabel("N")
    ax.set_ylabel("V_N - V_lift")
    ax.legend()
    return _save(fig, path)


def plot_mn_rate(fit, path):
    configure_plt()
    pts = np.asarray(fit.points, dtype=float)
    fig, ax = plt.subplots()
    ax.loglog(pts[:, 0], pts[:, 1], "o", label="M_N_hat")
    if np.isfinite(fit.slope):
        ax.loglog(pts[:, 0], np.exp(fit.intercept) * pts[:, 0] ** fit.slope, "-",
                  label=f"slope {fit.slope:.3f}")
    ax.set_xlabel("N")
    ax.set_ylabel("M_N")
    ax.legend()
    return _save(fig, path)


def plot_bench(outdir, value_rows, gap_rows, fit=None):
    paths = [plot_value_gap(value_rows, os.path.join(outdir, "value_gap.svg")),
             plot_policy_gap(gap_rows, os.path.join(outdir, "policy_gap.svg"))]
    if fit is not None and len(fit.points) and np.all(np.asarray(fit.points)[:, 1] > 0):
        paths.append(plot_mn_rate(fit, os.path.join(outdir, "mn_rate.svg")))
    return paths
