"""Static result figures rendered to files next to their CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

LOSS_COLUMNS = ("L_global", "L_local", "L_TSL", "L_total")


def plot_loss_curves(history: list[dict], path: str | Path) -> Path:
    """Per-term training losses against step number."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [row["step"] for row in history]
    for column in LOSS_COLUMNS:
        ax.plot(steps, [row[column] for row in history], label=column, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_method_bars(rows: list[dict], value_columns: list[str], ylabel: str,
                     path: str | Path) -> Path:
    """Grouped bars, one group per method row, one bar per metric column."""
    path = Path(path)
    methods = [row["method"] for row in rows]
    width = 0.8 / max(len(value_columns), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, column in enumerate(value_columns):
        xs = [i + j * width for i in range(len(methods))]
        ax.bar(xs, [float(row[column]) for row in rows], width=width, label=column)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(methods))])
    ax.set_xticklabels(methods, fontsize=8)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_report_bars(header_to_value: dict[str, float], ylabel: str,
                     path: str | Path) -> Path:
    """One bar per metric column of a single-row report."""
    path = Path(path)
    keys = list(header_to_value)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(keys)), [header_to_value[k] for k in keys])
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, fontsize=8, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
