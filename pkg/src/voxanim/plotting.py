"""Figures written next to the CSV/PFM outputs of the command-line tools.

Uses the Agg canvas directly so nothing touches pyplot's global state.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

RC = {"font.size": 9, "axes.labelsize": 9, "legend.fontsize": 8}


def _figure(width=6.0, height=3.6, ncols=1):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols)
    return fig, np.atleast_1d(axes)


def plot_trace(trace, path) -> None:
    """Loss terms against step on a log axis; constant-zero terms are skipped."""
    fig, (ax,) = _figure()
    steps = np.array([r["step"] for r in trace])
    for key in ("total", "rec", "bkg", "eq", "proj", "init", "geo"):
        vals = np.array([r[key] for r in trace], dtype=np.float64)
        if len(vals) == 0 or not np.any(vals > 0):
            continue
        ax.plot(steps, np.maximum(vals, 1e-12), lw=1.2 if key == "total" else 0.8, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False, ncol=2)
    fig.tight_layout()
    fig.savefig(path)


def plot_render(out, path) -> None:
    """Colour, depth, occupancy and dominant-part panels for one render."""
    fig, axes = _figure(10.0, 2.8, ncols=4)
    occ = out.occupancy
    depth = np.where(occ > 1e-3, out.depth, np.nan)
    axes[0].imshow(np.clip(out.rgb, 0, 1), interpolation="nearest")
    axes[0].set_title("rgb")
    im = axes[1].imshow(depth, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    axes[1].set_title("depth")
    im = axes[2].imshow(occ, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    axes[2].set_title("occupancy")
    part = np.where(occ > 1e-3, np.argmax(out.parts, axis=-1), -1).astype(float)
    part[part < 0] = np.nan
    axes[3].imshow(part, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
    axes[3].set_title("parts")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)


def plot_scatter(pred, ref, path, r=None, max_points: int = 20000) -> None:
    """Scatter of predicted against reference values (subsampled evenly)."""
    x = np.asarray(ref, dtype=np.float64).ravel()
    y = np.asarray(pred, dtype=np.float64).ravel()
    if len(x) > max_points:
        idx = np.linspace(0, len(x) - 1, max_points).astype(int)
        x, y = x[idx], y[idx]
    fig, (ax,) = _figure(4.0, 4.0)
    ax.scatter(x, y, s=2, alpha=0.4, lw=0)
    ax.set_xlabel("reference")
    ax.set_ylabel("prediction")
    if r is not None:
        ax.set_title(f"r = {r:.4f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
