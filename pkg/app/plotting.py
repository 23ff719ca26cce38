"""
SVG figures: geodesics over the -log p landscape, step-size profiles, energy landscapes.
Output is byte-stable across reruns (fixed hash salt, no date metadata, no path simplification).
"""

import logging
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.axes import Axes
from matplotlib.figure import Figure

from app.densities import MixtureDensity
from app.evaluation import DISPLAY
from app.geodesics import GeodesicPath

logger = logging.getLogger(__name__)

COLORS = {
    "energy_oracle": "#222222",
    "inv_density_oracle": "#7f7f7f",
    "energy_ebm": "#1f77b4",
    "inv_density_ebm": "#2ca02c",
    "land": "#ff7f0e",
    "rbf": "#9467bd",
    "linear": "#d62728",
    "euclidean": "#8c564b",
}


def _style() -> None:
    plt.rcParams.update(
        {
            "svg.hashsalt": "riemann-ebm",
            "svg.fonttype": "none",
            "path.simplify": False,
            "font.size": 10,
        }
    )


def makefig(ncols: int = 1, size: float = 5.0) -> tuple[Figure, np.ndarray]:
    _style()
    fig, axes = plt.subplots(1, ncols, figsize=(size * ncols, size), squeeze=False)
    for ax in axes.ravel():
        ax.set_box_aspect(1)
    return fig, axes.ravel()


def save_svg(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"🖼️  Saved figure to {path}")
    return path


def _landscape(ax: Axes, gx: np.ndarray, gy: np.ndarray, values: np.ndarray, levels: int, title: str) -> None:
    ax.contourf(gx, gy, values, levels=levels, cmap="Blues_r")
    ax.set_title(title)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")


def _grid(grid: int, box: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axis = np.linspace(-box, box, grid)
    gx, gy = np.meshgrid(axis, axis)
    return gx, gy, np.stack([gx.ravel(), gy.ravel()], axis=1)


def plot_fig1(
    d: MixtureDensity,
    paths_by_metric: Dict[str, Sequence[GeodesicPath]],
    out: str | Path,
    grid: int = 200,
    box: float = 14.0,
    levels: int = 20,
) -> Path:
    """Filled iso-bands of -log p with every metric's geodesics overlaid."""
    fig, (ax,) = makefig()
    gx, gy, pts = _grid(grid, box)
    _landscape(ax, gx, gy, -d.log_density(pts).reshape(gx.shape), levels, f"Geodesics on {d.name.upper()}")
    for name, paths in paths_by_metric.items():
        for k, path in enumerate(paths):
            ax.plot(
                path.points[:, 0],
                path.points[:, 1],
                color=COLORS.get(name, "black"),
                linewidth=1.2,
                label=DISPLAY.get(name, name) if k == 0 else None,
                gid=f"path-{name}-{k}",
            )
    ax.set_xlim(-box, box)
    ax.set_ylim(-box, box)
    ax.legend(loc="lower left", fontsize=8)
    return save_svg(fig, out)


def plot_fig2(profiles: pd.DataFrame, out: str | Path) -> Path:
    """One step-size curve per metric; each line's SVG group id is `profile-<metric>`."""
    fig, (ax,) = makefig()
    for name, group in profiles.groupby("metric", sort=False):
        group = group.sort_values("step")
        ax.plot(
            group["step"].to_numpy(),
            group["step_size"].to_numpy(),
            color=COLORS.get(name, "black"),
            label=DISPLAY.get(name, name),
            gid=f"profile-{name}",
        )
    ax.set_xlabel("step t")
    ax.set_ylabel("|x_{t+1} - x_t|")
    ax.set_title("Step size along geodesics")
    ax.grid(alpha=0.15)
    ax.legend(fontsize=8)
    return save_svg(fig, out)


def plot_energy(energy_values: np.ndarray, d: MixtureDensity, out: str | Path, box: float = 14.0, levels: int = 20) -> Path:
    """Learned energy next to -log p on the same n x n grid (energy_values is n x n)."""
    n = energy_values.shape[0]
    fig, axes = makefig(ncols=2)
    gx, gy, pts = _grid(n, box)
    _landscape(axes[0], gx, gy, energy_values, levels, "Learned energy E_theta")
    _landscape(axes[1], gx, gy, -d.log_density(pts).reshape(gx.shape), levels, "-log p_M")
    return save_svg(fig, out)


def svg_line_vertices(path: str | Path, gid: str) -> int:
    """Number of vertices in the line drawn inside the SVG group `gid`."""
    root = ET.parse(path).getroot()
    ns = {"svg": "http://www.w3.org/2000/svg"}
    group = root.find(f".//svg:g[@id='{gid}']", ns)
    if group is None:
        raise KeyError(f"no SVG group with id {gid!r} in {path}")
    line = group.find(".//svg:path", ns)
    tokens = line.get("d", "").split()
    return sum(1 for tok in tokens if tok in ("M", "L"))
