"""Figure rendering for the CLI report paths.

Every verb that writes a delimited report also renders a PNG next to it.
All rendering goes through the Agg backend so runs work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import IoError


def _save(fig, path) -> None:
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise IoError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)


def save_history_figure(history, path) -> None:
    """Training loss per epoch, with validation error on a twin axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(history.epochs, history.train_loss, color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    snaps = [(s["epoch"], s["val_error"]) for s in history.snapshots if "val_error" in s]
    if snaps:
        ax2 = ax.twinx()
        ax2.plot(*zip(*snaps), color="tab:red", marker="o", label="val error")
        ax2.set_ylabel("validation triplet error", color="tab:red")
        ax2.set_ylim(bottom=0)
    ax.set_title("training history")
    _save(fig, path)


def save_report_figure(report, path) -> None:
    """Horizontal bars, one per metric row of the report."""
    names = [n for n, _ in report.rows]
    values = [v for _, v in report.rows]
    fig, ax = plt.subplots(figsize=(7, 0.6 * max(4, len(names))))
    ax.barh(range(len(names)), values, color="tab:blue")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    for i, v in enumerate(values):
        ax.text(v, i, f" {v:.4g}", va="center")
    ax.set_xlabel("value")
    ax.set_title("evaluation report")
    _save(fig, path)


def save_ablation_figure(result, path) -> None:
    """Held-out error across the swept axis values."""
    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(result.values))
    ax.plot(x, result.errors, marker="o", color="tab:blue")
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(v) for v in result.values])
    ax.set_xlabel(result.axis)
    ax.set_ylabel("held-out triplet error")
    ax.set_ylim(bottom=0)
    ax.set_title(f"ablation over {result.axis}")
    _save(fig, path)


def save_gradcheck_figure(results, tol: float, path) -> None:
    """Max relative error per gradient-check case, log scale, tol line."""
    names = [name for name, _ in results]
    errs = [max(report.max_rel_error, 1e-16) for _, report in results]
    fig, ax = plt.subplots(figsize=(8, 0.5 * max(6, len(names))))
    colors = ["tab:red" if not r.passed else "tab:green" for _, r in results]
    ax.barh(range(len(names)), errs, color=colors)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xscale("log")
    ax.axvline(tol, color="black", linestyle="--", label=f"tolerance {tol:g}")
    ax.set_xlabel("max relative gradient error")
    ax.set_title("finite-difference gradient check")
    ax.legend()
    _save(fig, path)
