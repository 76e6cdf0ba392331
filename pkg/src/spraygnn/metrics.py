"""Point-cloud distances and the per-horizon error report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud


def _as_cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyCloud("point cloud must be a non-empty (n, d) array")
    return x


def nearest(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index in ``y`` of the nearest neighbor of every point of ``x``."""
    _, idx = cKDTree(y).query(x, k=1)
    return np.asarray(idx, dtype=np.int64)


def _nn_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x - y[nearest(x, y)]
    return np.sqrt((diff * diff).sum(axis=1))


def hausdorff(x, y) -> float:
    """Directed distance: half the largest distance from a point of x to its nearest point of y."""
    x, y = _as_cloud(x), _as_cloud(y)
    return 0.5 * float(_nn_distances(x, y).max())


def hausdorff_symmetric(x, y) -> float:
    return hausdorff(x, y) + hausdorff(y, x)


def chamfer(x, y) -> float:
    """Mean squared nearest distance x->y plus the same for y->x."""
    x, y = _as_cloud(x), _as_cloud(y)
    dxy = _nn_distances(x, y)
    dyx = _nn_distances(y, x)
    return float((dxy * dxy).mean() + (dyx * dyx).mean())


@dataclass
class MetricsReport:
    hd: float
    cd: float
    mse: float
    mae: float
    horizon: int = 1
    steps: int = 0

    def as_row(self) -> dict:
        return {"hd_mm": self.hd, "cd_mm2": self.cd, "mse_mm2": self.mse, "mae_mm": self.mae}


def compare(pred_offsets: np.ndarray, true_offsets: np.ndarray, inplane: np.ndarray,
            horizon: int = 1, steps: int = 0, plane_z: float = 0.0) -> MetricsReport:
    """All four metrics between two wall states on the same particle grid.

    HD is the symmetric form (forward + backward), MAE is the *maximum*
    absolute offset error.
    """
    pred = np.asarray(pred_offsets, dtype=np.float64)
    true = np.asarray(true_offsets, dtype=np.float64)
    p = np.column_stack([inplane, plane_z + pred])
    t = np.column_stack([inplane, plane_z + true])
    err = pred - true
    return MetricsReport(hd=hausdorff_symmetric(t, p), cd=chamfer(t, p), mse=float((err * err).mean()),
                         mae=float(np.abs(err).max()), horizon=horizon, steps=steps)
