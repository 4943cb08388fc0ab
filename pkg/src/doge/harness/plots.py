"""Plot data (CSV) and the matching PNG figures for a run directory."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..core import WeightTrajectory, cumulative_average  # noqa: E402
from ..errors import ContractError  # noqa: E402


def write_curve_csv(path, steps, names, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *names])
        for s, row in zip(steps, values):
            w.writerow([int(s), *(repr(float(v)) for v in row)])


def read_curve_csv(path) -> tuple[np.ndarray, tuple[str, ...], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    steps = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(steps), len(names))
    return steps, names, values


def _style(ax, ylabel):
    ax.set_xlabel("proxy step")
    ax.set_ylabel(ylabel)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(alpha=0.3, lw=0.5)


def render_figures(out: Path, steps, names, alphas, averages, losses, report=None) -> list[Path]:
    paths = []
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 3.6), sharey=True)
    for i, n in enumerate(names):
        left.plot(steps, alphas[:, i], lw=1, label=n)
        right.plot(steps, averages[:, i], lw=1.5, label=n)
    left.set_title("step-wise weights")
    right.set_title("running average")
    _style(left, "domain weight")
    _style(right, "")
    right.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    paths.append(out / "weights.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.6))
    for i, n in enumerate(names):
        ax.plot(steps, losses[:, i], lw=1, label=n)
    _style(ax, "proxy train loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    paths.append(out / "losses.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    if report is not None:
        fig, ax = plt.subplots(figsize=(5, 3.6))
        ax.bar(report.names, report.perplexities, color="0.6")
        ax.axhline(report.average_perplexity, color="k", lw=1, ls="--", label="average")
        ax.set_ylabel("validation perplexity")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        paths.append(out / "perplexity.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    return paths


def emit_plot_data(trajectory: WeightTrajectory, report, out, figures: bool = True) -> dict[str, Path]:
    """Write step-wise and running-average weight curves and per-domain loss curves."""
    if trajectory is None or not len(trajectory):
        raise ContractError("cannot emit plot data for an empty trajectory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    steps, names = trajectory.steps, trajectory.names
    alphas = trajectory.alphas
    averages = cumulative_average(alphas)
    losses = np.array([r.losses for r in trajectory.records])
    files = {
        "weights_stepwise": out / "weights_stepwise.csv",
        "weights_average": out / "weights_average.csv",
        "losses": out / "losses.csv",
    }
    write_curve_csv(files["weights_stepwise"], steps, names, alphas)
    write_curve_csv(files["weights_average"], steps, names, averages)
    write_curve_csv(files["losses"], steps, names, losses)
    if report is not None:
        with open(out / "perplexity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "loss", "perplexity"])
            for n, l, p in zip(report.names, report.losses, report.perplexities):
                w.writerow([n, repr(float(l)), repr(float(p))])
            w.writerow(["average", repr(report.average_loss), repr(report.average_perplexity)])
            w.writerow(["worst-case", "", repr(report.worst_perplexity)])
        files["perplexity"] = out / "perplexity.csv"
    if figures:
        for p in render_figures(out, steps, names, alphas, averages, losses, report):
            files[p.stem + "_png"] = p
    return files
