"""Figure rendering for the CLI report paths.

Every subcommand that writes delimited output also renders a matplotlib
figure next to it, so a run directory is self-describing.  All figures are
written to files; no interactive backend is ever required.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_equilibrium_figure(path, times, m_p, m_x, u_star, p_star):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(times, m_p, label="mean price")
    ax.plot(times, m_x, label="mean output")
    ax.plot(times, u_star, label="equilibrium control")
    ax.axhline(p_star, color="gray", lw=0.8, ls="--", label="stationary price")
    ax.set_xlabel("t")
    ax.legend(loc="best")
    ax.set_title("Limiting equilibrium paths")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_picard_figure(path, residuals, final_gap):
    fig, ax = plt.subplots(figsize=(6, 4))
    its = np.arange(1, len(residuals) + 1)
    ax.semilogy(its, residuals, marker="o", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("sup-norm change")
    ax.set_title(f"Picard iteration (final gap to closed form: {final_gap:.2e})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_trajectory_figure(path, times, P, X_bar, n_show=20):
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for p in range(min(n_show, P.shape[0])):
        axes[0].plot(times, P[p], lw=0.5, alpha=0.5)
        axes[1].plot(times, X_bar[p], lw=0.5, alpha=0.5)
    axes[0].plot(times, P.mean(axis=0), color="k", lw=1.5, label="mean")
    axes[1].plot(times, X_bar.mean(axis=0), color="k", lw=1.5, label="mean")
    axes[0].set_ylabel("price")
    axes[1].set_ylabel("average output")
    axes[1].set_xlabel("t")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_gap_figure(path, ns, gaps, errs):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(ns, gaps, yerr=2 * np.asarray(errs), marker="o", capsize=3)
    ax.set_xscale("log", base=2)
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_xlabel("number of firms n")
    ax.set_ylabel("best-response improvement")
    ax.set_title("Found equilibrium gap vs market size (2 SE bars)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_convergence_figure(path, ns, gap_price, gap_output):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(ns, gap_price, marker="o", label="sup-t E|P - limit|^2")
    ax.loglog(ns, gap_output, marker="s", label="sup-t E|output mean - limit|^2")
    ref = gap_price[0] * np.asarray(ns, float) ** -1 / ns[0] ** -1
    ax.loglog(ns, ref, ls="--", color="gray", label="1/n reference")
    ax.set_xlabel("number of firms n")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_reward_figure(path, labels, means, errs):
    fig, ax = plt.subplots(figsize=(6, 4))
    pos = np.arange(len(labels))
    ax.errorbar(pos, means, yerr=2 * np.asarray(errs), fmt="o", capsize=3)
    ax.set_xticks(pos)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("discounted reward")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
