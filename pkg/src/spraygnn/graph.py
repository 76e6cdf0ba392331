"""Per-step spray graph: 27 node features, 4 edge features, two edge families.

Node feature layout (columns):

    0:3    position (normalized)
    3:18   K=5 effector velocities, newest first (m/s; zero for wall nodes)
    18:21  printing direction (zero for wall nodes)
    21:23  type one-hot, wall=(1, 0) effector=(0, 1)
    23     pressure / P_ref (zero for wall nodes)
    24     gun-to-wall distance (normalized; zero for wall nodes)
    25     layer progress l / L
    26     speed |u| (zero for wall nodes)

The effector is always the last node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import TrajectoryStep, WallGrid, particles_in_cone, radius_neighbors, spray_cone, wall_distance

NODE_FEATURES = 27
EDGE_FEATURES = 4
HISTORY = 5


@dataclass
class NormStats:
    """Frozen normalization constants, stored with every checkpoint."""

    pos_mean: list[float]
    length_scale: float
    P_ref: float
    delta_scale: float
    velocity_scale: float = 1.0

    @classmethod
    def from_datasets(cls, datasets, P_ref: float) -> "NormStats":
        xy = np.vstack([ds.grid.inplane for ds in datasets])
        mean = [float(xy[:, 0].mean()), float(xy[:, 1].mean()), 0.0]
        scale = float(np.sqrt(((xy - xy.mean(axis=0)) ** 2).sum(axis=1).mean() / 2.0))
        # RMS of the non-zero per-step thickness changes
        sq, cnt = 0.0, 0
        for ds in datasets:
            for seq in ds.augmented:
                dz = np.diff(seq, axis=0)
                nz = dz[dz != 0]
                sq += float((nz * nz).sum())
                cnt += nz.size
        delta = float(np.sqrt(sq / cnt)) if cnt else 1.0
        return cls(mean, scale, float(P_ref), delta)

    def to_dict(self) -> dict:
        return {"pos_mean": list(self.pos_mean), "length_scale": self.length_scale, "P_ref": self.P_ref,
                "delta_scale": self.delta_scale, "velocity_scale": self.velocity_scale}


@dataclass
class SprayGraph:
    node_features: np.ndarray
    edge_features: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    effector_index: int
    cone_radius: float = 0.0
    cone_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_wall(self) -> int:
        return self.effector_index


class VelocityHistory:
    """Rolling buffer of the last K effector velocities, newest first."""

    def __init__(self, k: int = HISTORY):
        self.k = k
        self.items: list[np.ndarray] = []

    def push(self, u) -> None:
        self.items.insert(0, np.asarray(u, dtype=np.float64).reshape(3))
        del self.items[self.k:]

    def as_array(self) -> np.ndarray:
        out = np.zeros((self.k, 3))
        for i, u in enumerate(self.items):
            out[i] = u
        return out

    def copy(self) -> "VelocityHistory":
        h = VelocityHistory(self.k)
        h.items = [u.copy() for u in self.items]
        return h


def build_node_features(grid: WallGrid, offsets: np.ndarray, step: TrajectoryStep,
                        velocity_history, layer_index: int, n_layers: int,
                        stats: NormStats) -> np.ndarray:
    n = grid.n
    hist = velocity_history.as_array() if isinstance(velocity_history, VelocityHistory) \
        else np.asarray(velocity_history, dtype=np.float64).reshape(-1, 3)
    X = np.zeros((n + 1, NODE_FEATURES))
    mean = np.asarray(stats.pos_mean)
    X[:n, 0:3] = (grid.positions(offsets) - mean) / stats.length_scale
    X[n, 0:3] = (step.tp - mean) / stats.length_scale
    k = min(len(hist), HISTORY)
    X[n, 3:3 + 3 * k] = (hist[:k] / stats.velocity_scale).ravel()
    X[n, 18:21] = step.n
    X[:n, 21] = 1.0
    X[n, 22] = 1.0
    X[n, 23] = step.P / stats.P_ref
    X[n, 24] = wall_distance(step.tp, grid) / stats.length_scale
    X[:, 25] = layer_index / n_layers
    X[n, 26] = step.speed / stats.velocity_scale
    return X


def build_edges(grid: WallGrid, step: TrajectoryStep, node_positions: np.ndarray,
                R_wall: float = 30.0, cone_factor: float = 0.4,
                length_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Senders, receivers and [r_x, r_y, r_z, |r|] features (r = receiver - sender).

    ``node_positions`` are the (N + 1, 3) positions used for the relative
    vectors, already in the unit that ``length_scale`` divides.
    """
    n = grid.n
    wall = radius_neighbors(grid, R_wall)
    cone = particles_in_cone(spray_cone(step, grid, cone_factor), grid)
    senders = np.concatenate([wall[:, 0], np.full(cone.size, n)]).astype(np.int64)
    receivers = np.concatenate([wall[:, 1], cone]).astype(np.int64)
    r = (node_positions[receivers] - node_positions[senders]) / length_scale
    feats = np.column_stack([r, np.sqrt((r * r).sum(axis=1))])
    return senders, receivers, feats


def gaussian_weights(grid: WallGrid, step: TrajectoryStep, cone_factor: float = 0.4) -> np.ndarray:
    """Per-particle weight exp(-rho^2 / 2R^2) around the cone's base center."""
    cone = spray_cone(step, grid, cone_factor)
    diff = grid.inplane - cone.base_center[:2]
    rho2 = (diff * diff).sum(axis=1)
    return np.exp(-rho2 / (2.0 * cone.base_radius**2))


def build_graph(grid: WallGrid, offsets: np.ndarray, step: TrajectoryStep, history,
                layer_index: int, n_layers: int, stats: NormStats,
                R_wall: float = 30.0, cone_factor: float = 0.4,
                noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> SprayGraph:
    """Assemble the model input for one step.

    With ``noise_sigma > 0`` Gaussian noise (normalized units) is added to
    the wall particle positions and the effector velocity-history slots;
    edge features are then computed from the noisy positions.
    """
    X = build_node_features(grid, offsets, step, history, layer_index, n_layers, stats)
    n = grid.n
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise is enabled")
        X[:n, 0:3] += rng.normal(0.0, noise_sigma, size=(n, 3))
        filled = len(history.items) if isinstance(history, VelocityHistory) else HISTORY
        width = 3 * min(filled, HISTORY)
        X[n, 3:3 + width] += rng.normal(0.0, noise_sigma, size=width)
    senders, receivers, E = build_edges(grid, step, X[:, 0:3], R_wall, cone_factor, 1.0)
    cone = spray_cone(step, grid, cone_factor)
    return SprayGraph(X, E, senders, receivers, n, cone.base_radius, cone.base_center)
