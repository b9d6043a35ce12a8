"""Report figures rendered to files (headless backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def rate_figure(fit, outpath) -> str:
    """Log-log decay of mean transport distance with the fitted power law."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    Ns = np.asarray(fit.Ns, dtype=np.float64)
    means = np.asarray(fit.means, dtype=np.float64)
    errs = np.asarray(fit.stderrs, dtype=np.float64)
    ax.errorbar(Ns, means, yerr=np.where(np.isfinite(errs), errs, 0.0),
                fmt="o", capsize=3, label="mean distance")
    if np.isfinite(fit.fitted_slope):
        keep = np.array([n not in fit.excluded_Ns for n in fit.Ns])
        line = np.exp(fit.intercept) * Ns[keep] ** fit.fitted_slope
        ax.plot(Ns[keep], line, "--",
                label=f"slope {fit.fitted_slope:+.3f} "
                      f"[{fit.slope_ci_low:+.3f}, {fit.slope_ci_high:+.3f}]")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sample size N")
    ax.set_ylabel("mean W to reference")
    ax.set_title(f"empirical-measure convergence: {fit.law_name}"
                 + (" (rescaled)" if fit.use_rescaled else ""))
    ax.legend()
    fig.tight_layout()
    fig.savefig(outpath, dpi=150)
    plt.close(fig)
    return str(outpath)


def consistency_figure(result, outpath, title="run-to-reference distance") -> str:
    """Left: distance along time per size.  Right: decay of the sup quantile."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10.5, 4.2))
    by_n = {}
    for (N, r, t, w) in result.rows:
        by_n.setdefault(N, {}).setdefault(r, []).append((t, w))
    for N in sorted(by_n):
        reps = by_n[N]
        grid = np.array([t for t, _ in reps[min(reps)]])
        stack = np.array([[w for _, w in reps[r]] for r in sorted(reps)])
        ax1.plot(grid, stack.mean(axis=0), marker=".", label=f"N={N}")
    ax1.set_xlabel("time")
    ax1.set_ylabel("W")
    ax1.set_title(title)
    ax1.legend(fontsize=8)

    fit = result.fit
    if "Ns" in fit:
        Ns = np.asarray(fit["Ns"], dtype=np.float64)
        qv = np.asarray(fit["quantile_values"], dtype=np.float64)
        ax2.plot(Ns, qv, "o", label=f"{fit['quantile']:.0%} quantile of sup W")
        if np.isfinite(fit["exponent"]) and np.all(qv > 0):
            anchor = qv[0] / Ns[0] ** fit["exponent"]
            ax2.plot(Ns, anchor * Ns ** fit["exponent"], "--",
                     label=f"exponent {fit['exponent']:+.3f}")
        ax2.set_xscale("log")
        ax2.set_yscale("log")
        ax2.set_xlabel("N")
        ax2.set_ylabel("sup-W quantile")
        ax2.set_title("decay fit")
        ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(outpath, dpi=150)
    plt.close(fig)
    return str(outpath)


def moment_figure(result, outpath) -> str:
    """Moment trajectories, one curve per (N, order), log scale."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    series = {}
    for (N, q, t, mean, err) in result.rows:
        series.setdefault((N, q), []).append((t, mean, err))
    for (N, q), pts in sorted(series.items()):
        pts.sort()
        ts = np.array([p[0] for p in pts])
        ms = np.array([p[1] for p in pts])
        es = np.array([p[2] for p in pts])
        ax.plot(ts, ms, marker=".", label=f"N={N}, order {q:g}")
        ax.fill_between(ts, ms - es, ms + es, alpha=0.2)
    ax.set_yscale("log")
    ax.set_xlabel("time")
    ax.set_ylabel("<|v|^q, mu_t>")
    ax.set_title("moment trajectories")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(outpath, dpi=150)
    plt.close(fig)
    return str(outpath)
