"""Figure rendering for the analyze and bench report paths."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .bench import BenchReport
from .dataset_io import StepStats


def save_step_histogram(stats: list[StepStats], path: str) -> None:
    """Bar chart of the reasoning-step-count distribution, one series per
    group, with each group's mean in the legend."""
    fig, ax = plt.subplots(figsize=(7, 4))
    all_lengths = sorted({k for s in stats for k in s.histogram})
    width = 0.8 / max(1, len(stats))
    for i, s in enumerate(stats):
        label = s.group_key if s.group_key is not None else "all"
        xs = [x + i * width for x in range(len(all_lengths))]
        ys = [s.histogram.get(length, 0) for length in all_lengths]
        ax.bar(xs, ys, width=width, label=f"{label} (mean {s.mean:.1f})")
    ax.set_xticks([x + 0.4 - width / 2 for x in range(len(all_lengths))])
    ax.set_xticklabels([str(length) for length in all_lengths])
    ax.set_xlabel("reasoning steps per effective path")
    ax.set_ylabel("frequency")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_chart(report: BenchReport, path: str) -> None:
    """Side-by-side bars for success rate and average iterations per method,
    plus the ensemble-size ablation curve when present."""
    n_panels = 3 if report.ablation else 2
    fig, axes = plt.subplots(1, n_panels, figsize=(4 * n_panels, 3.5))
    names = sorted(report.methods)
    axes[0].bar(names, [report.methods[n].success_rate for n in names], color="#4878d0")
    axes[0].set_ylim(0, 1)
    axes[0].set_title("search success rate")
    axes[1].bar(names, [report.methods[n].avg_iterations for n in names], color="#ee854a")
    axes[1].set_title("average search iterations")
    if report.ablation:
        ks = [row["ensemble_size"] for row in report.ablation]
        axes[2].plot(ks, [row["success_rate"] for row in report.ablation], marker="o")
        axes[2].set_ylim(0, 1.05)
        axes[2].set_xticks(ks)
        axes[2].set_xlabel("ensemble size")
        axes[2].set_title("success rate vs ensemble size")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
