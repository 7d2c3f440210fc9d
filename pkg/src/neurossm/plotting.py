"""Report figures. Everything renders to files through the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_regimes(rows: list[dict], path):
    """Bar chart per metric column, one bar per schedule, token and sample regimes side by side."""
    metrics = [("energy_mJ", "energy (mJ)"), ("latency_ms", "latency (ms)"),
               ("throughput_per_s", "throughput (1/s)"), ("edp_uJs", "EDP (uJ s)")]
    schedules = sorted({r["schedule"] for r in rows})
    regimes = ["token", "sample"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 4, figsize=(9, 4.2))
        for i, regime in enumerate(regimes):
            for j, (key, label) in enumerate(metrics):
                ax = axes[i, j]
                vals = [next(r[key] for r in rows if r["schedule"] == s and r["regime"] == regime) for s in schedules]
                ax.bar(range(len(schedules)), vals, color=["#4c72b0", "#dd8452", "#55a868"][:len(schedules)])
                ax.set_xticks(range(len(schedules)), [s.replace("_", "-") for s in schedules])
                ax.set_title(f"{label} / {regime}")
        return _save(fig, path)


def plot_training(history: dict, path):
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7, 2.8))
        ep = np.arange(1, len(history["train_loss"]) + 1)
        a.plot(ep, history["train_loss"], marker="o")
        a.set_xlabel("epoch")
        a.set_ylabel("train loss")
        b.plot(ep, history["train_accuracy"], marker="o", label="train")
        b.plot(ep, history["test_accuracy"], marker="s", label="test")
        b.set_xlabel("epoch")
        b.set_ylabel("accuracy")
        b.legend()
        return _save(fig, path)


def plot_fit(rows: list[dict], columns: list[str], path):
    """Fitted vs measured, one panel per column, log-log with the identity line."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(columns), figsize=(2.4 * len(columns), 2.6), squeeze=False)
        for ax, col in zip(axes[0], columns):
            x = np.array([r[col] for r in rows])
            y = np.array([r[col + "_fit"] for r in rows])
            lo, hi = min(x.min(), y.min()) * 0.8, max(x.max(), y.max()) * 1.25
            ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8)
            ax.scatter(x, y, s=14)
            ax.set_xscale("log")
            ax.set_yscale("log")
            ax.set_xlabel("measured")
            ax.set_ylabel("fitted")
            ax.set_title(col, fontsize=7)
        return _save(fig, path)
