"""Report artifacts: delimited outputs plus rendered figures.

CSV files format floats with repr so identical runs produce byte-identical
files; that is what the determinism guarantees are stated against.  Figures
are rendered with the Agg backend next to the CSVs they visualize and are not
covered by the byte-identity guarantee.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fitness import ExpertScores, normalized_accuracy
from .search import LeaveOneOutResult, RandomReport, TraceRow


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("\n".join(lines) + "\n")


def _fmt(value: float) -> str:
    return repr(float(value))


def write_trace_csv(path: Path, trace: list[TraceRow]) -> None:
    lines = ["generation,best_val_fitness,best_ever_fitness,popcount"]
    for row in trace:
        lines.append(
            f"{row.generation},{_fmt(row.best_val_fitness)},{_fmt(row.best_ever_fitness)},{row.popcount}"
        )
    _write_lines(path, lines)


def write_timing_csv(path: Path, seconds: list[float]) -> None:
    lines = ["generation,seconds"]
    for generation, value in enumerate(seconds):
        lines.append(f"{generation},{_fmt(value)}")
    _write_lines(path, lines)


def write_impact_csv(path: Path, loo: LeaveOneOutResult) -> None:
    lines = ["layer,task_index,task,fitness,impact"]
    num_layers, num_tasks = loo.impacts.shape
    for layer in range(num_layers):
        for task in range(num_tasks):
            lines.append(
                f"{layer},{task},{loo.tasks[task]},"
                f"{_fmt(loo.fitnesses[layer, task])},{_fmt(loo.impacts[layer, task])}"
            )
    _write_lines(path, lines)


def write_random_csv(path: Path, report: RandomReport) -> None:
    lines = ["trial,fitness,mask"]
    for trial, (value, mask) in enumerate(zip(report.fitnesses, report.masks)):
        bits = "".join(str(int(b)) for b in mask.flat())
        lines.append(f"{trial},{_fmt(value)},{bits}")
    _write_lines(path, lines)


def write_eval_csv(
    path: Path, accuracies: dict[str, float], experts: ExpertScores | None
) -> None:
    if experts is None:
        lines = ["task,accuracy"]
        for task in sorted(accuracies):
            lines.append(f"{task},{_fmt(accuracies[task])}")
    else:
        lines = ["task,accuracy,normalized_accuracy"]
        for task in sorted(accuracies):
            norm = normalized_accuracy(accuracies[task], experts.scores[task])
            lines.append(f"{task},{_fmt(accuracies[task])},{_fmt(norm)}")
    _write_lines(path, lines)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_trace_figure(path: Path, trace: list[TraceRow]) -> None:
    plt = _pyplot()
    generations = [row.generation for row in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(generations, [row.best_val_fitness for row in trace], ".-", label="generation best")
    ax.plot(generations, [row.best_ever_fitness for row in trace], "-", label="best ever")
    ax.set_xlabel("generation")
    ax.set_ylabel("fitness")
    twin = ax.twinx()
    twin.step(generations, [row.popcount for row in trace], where="mid", color="gray", alpha=0.5)
    twin.set_ylabel("pruned units", color="gray")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_impact_figure(path: Path, loo: LeaveOneOutResult) -> None:
    plt = _pyplot()
    impacts = loo.impacts
    span = float(np.max(np.abs(impacts))) or 1.0
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * impacts.shape[1], 1.0 + 0.6 * impacts.shape[0]))
    image = ax.imshow(impacts, cmap="RdBu_r", vmin=-span, vmax=span)
    ax.set_xticks(range(impacts.shape[1]), loo.tasks, rotation=45, ha="right")
    ax.set_yticks(range(impacts.shape[0]), [f"layer {i}" for i in range(impacts.shape[0])])
    if impacts.size <= 64:
        for layer in range(impacts.shape[0]):
            for task in range(impacts.shape[1]):
                ax.text(task, layer, f"{impacts[layer, task]:+.3f}", ha="center", va="center", fontsize=8)
    fig.colorbar(image, ax=ax, label="fitness impact of removal")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_random_figure(path: Path, report: RandomReport) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(report.fitnesses, bins="auto", alpha=0.75, label="random masks")
    ax.axvline(report.baseline, color="black", linestyle="--", label="zero mask")
    ax.axvline(report.mean, color="C1", linestyle="-", label="random mean")
    ax.set_xlabel("fitness")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
