"""Matplotlib figure rendering for the report paths.

Each report command writes a figure next to its delimited output.  Figures
are annotated with the config hash so they can be matched to their data
files.  The Agg backend keeps rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import BenchRow, ScaleCurve, SweepRow
from .stageaccel import RankTable

__all__ = [
    "save_curves_figure",
    "save_bench_figure",
    "save_sweep_figure",
    "save_rank_heatmap",
]


def _stamp(fig, cfg_hash: str) -> None:
    fig.text(0.99, 0.01, f"config {cfg_hash}", ha="right", va="bottom", fontsize=7, color="0.4")


def save_curves_figure(curves: list[ScaleCurve], path, title: str, cfg_hash: str, logy: bool = True) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        if not curve.entries:
            continue
        ks = [k for k, _ in curve.entries]
        ax.plot(ks, curve.values, marker="o", label=curve.metric_name)
    if logy and any(np.any(c.values > 0) for c in curves if c.entries):
        ax.set_yscale("log")
    ax.set_xlabel("scale step")
    ax.set_ylabel("value")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    _stamp(fig, cfg_hash)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_bench_figure(rows: list[BenchRow], path, cfg_hash: str) -> None:
    fig, (ax_time, ax_err) = plt.subplots(1, 2, figsize=(9, 4))
    labels = [r.variant for r in rows]
    x = np.arange(len(rows))
    ax_time.bar(x - 0.2, [r.mod_seconds for r in rows], width=0.4, label="model")
    ax_time.bar(x + 0.2, [r.add_seconds for r in rows], width=0.4, label="added")
    ax_time.set_xticks(x, labels, rotation=30, ha="right", fontsize=8)
    ax_time.set_ylabel("seconds")
    ax_time.set_title("latency split")
    ax_time.legend(fontsize=8)
    ax_err.bar(x, [r.rel_error for r in rows], color="0.5")
    ax_err.set_xticks(x, labels, rotation=30, ha="right", fontsize=8)
    ax_err.set_ylabel("relative error vs baseline")
    ax_err.set_title("final-feature error")
    for ax in (ax_time, ax_err):
        ax.grid(True, axis="y", alpha=0.3)
    _stamp(fig, cfg_hash)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_sweep_figure(rows: list[SweepRow], path, cfg_hash: str) -> None:
    """Error against attention cost across thresholds, annotated by alpha."""
    fig, ax = plt.subplots(figsize=(6, 4))
    flops = [r.flops_attention for r in rows]
    errors = [r.rel_error for r in rows]
    order = np.argsort(flops)
    ax.plot(np.array(flops)[order], np.array(errors)[order], marker="o")
    for r in rows:
        ax.annotate(f"{r.alpha:g}", (r.flops_attention, r.rel_error), fontsize=7,
                    textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("attention FLOPs")
    ax.set_ylabel("relative error vs baseline")
    ax.set_title("error vs attention cost")
    ax.grid(True, alpha=0.3)
    _stamp(fig, cfg_hash)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_rank_heatmap(table: RankTable, alpha: float, path, cfg_hash: str) -> None:
    blocks = sorted({b for b, _, a in table.entries if a == alpha})
    scales = sorted({k for _, k, a in table.entries if a == alpha})
    grid = np.full((len(blocks), len(scales)), np.nan)
    for (b, k, a), entry in table.entries.items():
        if a == alpha:
            grid[blocks.index(b), scales.index(k)] = entry.mean_fraction
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(scales), 1.0 + 0.45 * len(blocks)))
    im = ax.imshow(grid, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(scales)), [str(k) for k in scales])
    ax.set_yticks(range(len(blocks)), [f"block {b}" for b in blocks])
    ax.set_xlabel("scale step")
    ax.set_title(f"mean rank fraction, threshold {alpha:g}")
    fig.colorbar(im, ax=ax, shrink=0.8)
    _stamp(fig, cfg_hash)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
