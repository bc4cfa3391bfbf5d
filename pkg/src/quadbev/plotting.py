"""Loss-curve figures. Rendered off-screen; the numbers behind every plot are also written as CSV."""
from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STAGE_COLORS = {"pretrain": "tab:green", "warmup": "tab:orange", "e2e": "tab:blue"}


def _draw(ax, rows: Sequence[dict], title: str) -> None:
    for stage, color in STAGE_COLORS.items():
        pts = [(r["step"], r["combined"]) for r in rows if r["stage"] == stage]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, color=color, lw=0.9, label=stage)
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("step")
    ax.set_ylabel("combined loss")
    ax.legend(fontsize=7)


def loss_curve(rows: Sequence[dict], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    _draw(ax, rows, title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def panel_grid(runs: Sequence[tuple[str, Sequence[dict]]], path, ncols: int = 3) -> tuple[int, int]:
    """All runs side by side; returns the (rows, cols) layout used."""
    n = len(runs)
    ncols = min(ncols, n)
    nrows = math.ceil(n / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.2 * ncols, 3 * nrows), squeeze=False)
    for ax, (title, rows) in zip(axes.flat, runs):
        _draw(ax, rows, title)
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return nrows, ncols
