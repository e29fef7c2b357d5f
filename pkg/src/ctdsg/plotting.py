"""Figures written next to the CSV outputs.

matplotlib is optional: every function returns ``None`` without writing when
it cannot be imported.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping figures")
        return None
    return plt


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    fig.clf()
    return path


def plot_states(stats, path) -> Path | None:
    """Mean agent states against time, one panel per coordinate, minimizer dashed."""
    plt = _pyplot()
    if plt is None:
        return None
    m = stats.mean_state.shape[-1]
    fig, axes = plt.subplots(m, 1, figsize=(6.4, 2.6 * m), sharex=True, squeeze=False)
    for c, ax in enumerate(axes[:, 0]):
        for i in range(stats.mean_state.shape[1]):
            ax.plot(stats.times, stats.mean_state[:, i, c], lw=1.0, label=f"agent {i + 1}")
        ax.axhline(stats.x_star[c], color="k", ls="--", lw=0.8)
        ax.set_ylabel(f"E[x_i{c + 1}(t)]")
    axes[0, 0].legend(fontsize=7, ncol=3)
    axes[-1, 0].set_xlabel("t (s)")
    out = _save(fig, Path(path))
    plt.close(fig)
    return out


def plot_gaps(stats, path) -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for i in range(stats.mean_gap.shape[1]):
        ax.plot(stats.times, stats.mean_gap[:, i], lw=1.0, label=f"agent {i + 1}")
    ax.set_xlabel("t (s)")
    ax.set_ylabel("E[f(x_i(t)) - f(x*)]")
    ax.legend(fontsize=7, ncol=3)
    out = _save(fig, Path(path))
    plt.close(fig)
    return out


def plot_sweep(results: dict, path) -> Path | None:
    """Agent-averaged gap curves for several step exponents, log-log."""
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for a, stats in results.items():
        keep = stats.times > 0
        ax.loglog(stats.times[keep], stats.mean_gap[keep].mean(axis=1), lw=1.0, label=f"a = {a:g}")
    ax.set_xlabel("t (s)")
    ax.set_ylabel("mean gap")
    ax.legend(fontsize=8)
    out = _save(fig, Path(path))
    plt.close(fig)
    return out


def plot_decay(fit, path, c_factor: float = 1.05, lam_factor: float = 1.01) -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.semilogy(fit.times, fit.deviation, lw=1.0, label="max |Phi(t,0) - 1/n|")
    ax.semilogy(fit.times, fit.bound(fit.times, c_factor, lam_factor), "k--", lw=0.8,
                label=f"{c_factor:g} C ({lam_factor:g} lam)^t")
    ax.set_xlabel("t (s)")
    ax.legend(fontsize=8)
    out = _save(fig, Path(path))
    plt.close(fig)
    return out


def plot_consensus(stats, bound: np.ndarray, path) -> Path | None:
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for i in range(stats.mean_consensus.shape[1]):
        ax.semilogy(stats.times, stats.mean_consensus[:, i], lw=1.0, label=f"agent {i + 1}")
    ax.semilogy(stats.times, bound, "k--", lw=0.8, label="bound")
    ax.set_xlabel("t (s)")
    ax.set_ylabel("E||x_i - xbar||")
    ax.legend(fontsize=7, ncol=3)
    out = _save(fig, Path(path))
    plt.close(fig)
    return out
