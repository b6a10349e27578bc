"""Matplotlib rendering of lattice layers and replication reports to PNG files.

All functions write files and return the path; nothing is shown interactively.
Rendering is deterministic for fixed inputs, so the PNGs participate in the
manifest checksums like every other artifact.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .entropy import LOG2  # noqa: E402


def save_surface_png(layer: np.ndarray, path, title: str = "", vmax: float = LOG2):
    """Grayscale heatmap of an entropy layer, 0 dark to log(2) white."""
    grid = np.atleast_2d(layer)
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    image = ax.imshow(grid, cmap="gray", vmin=0.0, vmax=vmax, interpolation="nearest")
    fig.colorbar(image, ax=ax, shrink=0.85, label="entropy (nats)")
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_field_png(field_grid: np.ndarray, path, title: str = ""):
    """Black/white plot of a binary field."""
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    ax.imshow(np.atleast_2d(field_grid), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_coverage_png(report: dict, path):
    """Bar chart of the 95% interval coverage per parameter, grouped by scenario."""
    scenarios = sorted(report["scenarios"])
    params = ("beta0", "tau", "rho")
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    width = 0.8 / max(len(scenarios), 1)
    for k, scenario in enumerate(scenarios):
        cov = report["scenarios"][scenario]["coverage"]
        rates = [cov[p]["rate"] if cov[p]["rate"] is not None else 0.0 for p in params]
        offsets = np.arange(len(params)) + k * width
        ax.bar(offsets, rates, width=width, label=scenario)
    ax.axhline(0.95, color="black", linewidth=0.8, linestyle="--")
    ax.set_xticks(np.arange(len(params)) + width * (len(scenarios) - 1) / 2)
    ax.set_xticklabels(params)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("coverage of 95% interval")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
