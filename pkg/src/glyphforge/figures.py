"""Matplotlib figure rendering for the report paths.

Training and evaluation emit delimited text first; these helpers render the
companion PNGs next to them. Import stays lazy-ish: the Agg backend is
forced before pyplot so headless runs never touch a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_loss_curves(log_rows, out_path):
    """Plot per-step losses from parsed training-log rows."""
    if not log_rows:
        raise ValueError("no log rows to plot")
    steps = [r["step"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, [r["l1"] for r in log_rows], label="l1", lw=1.2)
    ax1.plot(steps, [r["constant"] for r in log_rows], label="constant", lw=1.2)
    ax1.plot(steps, [r["tv"] for r in log_rows], label="tv", lw=1.2)
    ax1.set_ylabel("unweighted loss")
    ax1.set_yscale("log")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(steps, [r["g_total"] for r in log_rows], label="g_total", lw=1.2)
    ax2.plot(steps, [r["d_total"] for r in log_rows], label="d_total", lw=1.2)
    ax2.plot(steps, [r["cheat"] for r in log_rows], label="cheat", lw=1.2)
    ax2.set_xlabel("step")
    ax2.set_ylabel("adversarial / total")
    ax2.legend(loc="upper right", fontsize=8)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def save_eval_chart(report, out_path, max_bars=64):
    """Bar chart of per-codepoint l1 (worst first) with the mean marked."""
    rows = report.rows[:max_bars]
    labels = [f"U+{cp:04X}" for cp, _, _ in rows]
    values = [l1 for _, l1, _ in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.18 * len(rows) + 2), 4))
    ax.bar(range(len(rows)), values, color="#4878b0")
    ax.axhline(report.mean_l1(), color="#c44e52", lw=1.2, label=f"mean {report.mean_l1():.4f}")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=90, fontsize=6)
    ax.set_ylabel("l1 (WORST first)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
