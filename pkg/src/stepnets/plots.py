"""Figure rendering for finished runs: reads the run directory's CSVs and
writes PNGs next to them (accuracy and loss curves over iterations, plus
the step-size trajectories where a pruned layer's curve simply ends)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def _column(header: list[str], rows: list[list[str]], name: str) -> np.ndarray:
    i = header.index(name)
    return np.array([float(r[i]) if r[i] != "" else np.nan for r in rows])


def render_run_figures(run_dir, dpi: int = 150) -> list[str]:
    """Render accuracy.png, loss.png and tau.png for one run directory."""
    run_dir = Path(run_dir)
    header, rows = _read_csv(run_dir / "metrics.csv")
    iterations = _column(header, rows, "iteration")
    written: list[str] = []

    accuracy = _column(header, rows, "test_accuracy")
    have = ~np.isnan(accuracy)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iterations[have], 100.0 * accuracy[have], marker="o", markersize=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("test accuracy [%]")
    ax.set_title(run_dir.name)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = run_dir / "accuracy.png"
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    written.append(str(path))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iterations, _column(header, rows, "train_loss_total"), label="total", lw=0.8)
    ax.plot(iterations, _column(header, rows, "train_loss_data"), label="cross entropy", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.set_title(run_dir.name)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = run_dir / "loss.png"
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    written.append(str(path))

    tau_header, tau_rows = _read_csv(run_dir / "tau.csv")
    tau_iters = _column(tau_header, tau_rows, "iteration")
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in tau_header[1:]:
        values = _column(tau_header, tau_rows, name)
        # a pruned column stops emitting values; the line ends there
        ax.plot(tau_iters, values, label=name, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("step size")
    ax.set_title(run_dir.name)
    ax.legend(ncol=2, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = run_dir / "tau.png"
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    written.append(str(path))
    return written
