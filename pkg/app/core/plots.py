"""SVG/PNG figures for gate reports and corpus statistics."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams.update({"font.family": "DejaVu Sans", "svg.hashsalt": "aesfusor"})
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.fusor_model import GateReport  # noqa: E402
from app.logger import logger  # noqa: E402

FORMATS = ("svg", "png")


def _save(fig, path_stem: str | Path) -> list[Path]:
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in FORMATS:
        path = stem.with_suffix(f".{fmt}")
        fig.savefig(path, format=fmt, dpi=150, bbox_inches="tight", metadata={"Date": None} if fmt == "svg" else None)
        paths.append(path)
    plt.close(fig)
    logger.debug(f"Wrote figure {stem}.{{{','.join(FORMATS)}}}")
    return paths


def plot_gate_reports(reports: list[GateReport], encoder_names: list[str], path_stem: str | Path) -> list[Path]:
    """Grouped bar chart of mean gate weights, one panel per fusion layer.

    Args:
        reports: One report per group (e.g. instruction class)
        encoder_names: Names of the N encoders, in index order
        path_stem: Output path without suffix

    Returns:
        Paths of the written SVG and PNG files
    """
    if not reports:
        raise ValueError("No gate reports to plot")
    num_layers = len(reports[0].layers)
    fig, axes = plt.subplots(1, num_layers, figsize=(4.5 * num_layers, 3.6), squeeze=False, constrained_layout=True)
    x = np.arange(len(reports))
    width = 0.8 / len(encoder_names)
    for layer in range(num_layers):
        ax = axes[0][layer]
        for n, name in enumerate(encoder_names):
            heights = [report.layers[layer][n] for report in reports]
            ax.bar(x + (n - (len(encoder_names) - 1) / 2) * width, heights, width, label=name)
        ax.set_xticks(x, [report.label for report in reports])
        ax.set_ylim(0.0, 1.0)
        ax.set_title(f"Layer {layer + 1}")
        ax.set_ylabel("mean gate weight")
    axes[0][0].legend(fontsize=8)
    return _save(fig, path_stem)


def plot_length_histogram(
    buckets: list[tuple[int, int, int]], path_stem: str | Path, title: str = "Length"
) -> list[Path]:
    """Bar chart of (lower, upper, count) word-length buckets."""
    fig, ax = plt.subplots(figsize=(7, 3.6), constrained_layout=True)
    lowers = [b[0] for b in buckets]
    ax.bar(lowers, [b[2] for b in buckets], width=[b[1] - b[0] for b in buckets], align="edge", edgecolor="black")
    ax.set_xlabel("words")
    ax.set_ylabel("count")
    ax.set_title(title)
    return _save(fig, path_stem)


def plot_category_histogram(
    categories: list[tuple[str, int]], path_stem: str | Path, title: str = "Categories"
) -> list[Path]:
    """Horizontal bar chart of (category, count), most frequent on top."""
    fig, ax = plt.subplots(figsize=(6, 0.25 * max(len(categories), 4) + 1), constrained_layout=True)
    names = [c[0] for c in categories][::-1]
    counts = [c[1] for c in categories][::-1]
    ax.barh(names, counts)
    ax.set_xlabel("count")
    ax.set_title(title)
    return _save(fig, path_stem)
