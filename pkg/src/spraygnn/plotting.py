"""Thickness maps and error curves: CSV matrices plus PNG renderings."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import WallGrid  # noqa: E402

METRIC_LABELS = {"hd_mm": "HD (mm)", "cd_mm2": "CD (mm$^2$)", "mse_mm2": "MSE (mm$^2$)", "mae_mm": "max abs err (mm)"}


def heightmap(grid: WallGrid, offsets: np.ndarray) -> np.ndarray:
    """(ny, nx) matrix of offsets; row j holds y index j."""
    return np.asarray(offsets, dtype=np.float64).reshape(grid.ny, grid.nx)


def write_heightmap_csv(grid: WallGrid, offsets: np.ndarray, path) -> Path:
    path = Path(path)
    np.savetxt(path, heightmap(grid, offsets), delimiter=",", fmt="%.6f")
    return path


def plot_heightmaps(grid: WallGrid, panels: dict[str, np.ndarray], path, title: str = "") -> Path:
    """Side-by-side maps; panels whose name contains 'error' get a diverging colormap."""
    path = Path(path)
    extent = [grid.origin[0], grid.origin[0] + (grid.nx - 1) * grid.spacing,
              grid.origin[1], grid.origin[1] + (grid.ny - 1) * grid.spacing]
    thick = [v for k, v in panels.items() if "error" not in k]
    vmax = max(float(np.max(v)) for v in thick) if thick else 1.0
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.6), squeeze=False)
    for ax, (name, values) in zip(axes[0], panels.items()):
        m = heightmap(grid, values)
        if "error" in name:
            lim = float(np.abs(m).max()) or 1.0
            im = ax.imshow(m, origin="lower", extent=extent, cmap="RdBu_r", vmin=-lim, vmax=lim)
        else:
            im = ax.imshow(m, origin="lower", extent=extent, cmap="viridis", vmin=0.0, vmax=vmax or 1.0)
        ax.set_title(name)
        ax.set_xlabel("x (mm)")
        ax.set_ylabel("y (mm)")
        fig.colorbar(im, ax=ax, shrink=0.8, label="mm")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_error_curves(rows: list[dict], path, log: bool = True) -> Path:
    """One panel per metric, error against rollout steps for every model in ``rows``."""
    path = Path(path)
    models = sorted({r["model"] for r in rows})
    fig, axes = plt.subplots(1, len(METRIC_LABELS), figsize=(16, 3.6))
    for ax, (col, label) in zip(axes, METRIC_LABELS.items()):
        for model in models:
            sel = [r for r in rows if r["model"] == model]
            x = [int(r["horizon_layers"]) for r in sel]
            y = [float(r[col]) for r in sel]
            ax.plot(x, y, marker="o", label=model)
        ax.set_xlabel("layers ahead")
        ax.set_ylabel(label)
        if log:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
