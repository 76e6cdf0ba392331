"""Synthetic deposition oracle and the layer-wise regression baseline.

The oracle is an analytic stand-in for laboratory data: every trajectory
step deposits a truncated Gaussian footprint under the spray cone, with a
rate proportional to pressure and a dwell time set by the gun speed. It is
not calibrated against real plaster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .dataset import ExperimentDataset, LayerScan
from .errors import DegenerateFit, ZeroVelocity
from .geometry import Trajectory, TrajectoryStep, WallGrid, particles_in_cone, spray_cone, wall_distance


@dataclass(frozen=True)
class OracleParams:
    A: float = 4.0                      # mm/s at reference pressure
    P_ref: float = 2.0                  # bar
    radius_factor: float = 0.5
    profile_sigma_factor: float = 0.5

    def __post_init__(self):
        if self.A <= 0 or self.P_ref <= 0:
            raise ValueError("deposition rate and reference pressure must be positive")
        for f in (self.radius_factor, self.profile_sigma_factor):
            if not 0 < f <= 1:
                raise ValueError("oracle factors must lie in (0, 1]")


@dataclass(frozen=True)
class ShapeSpec:
    """Scale targets of one experiment."""

    name: str
    area_m2: float
    particles: int
    layers: int
    steps: int
    vel_mean: float
    vel_std: float
    vel_max: float
    vel_min: float
    dist_mean: float = 400.0
    dist_std: float = 20.0


SHAPES = {
    "s": ShapeSpec("S-shaped", 1.34, 2395, 12, 278, 0.619, 0.235, 1.000, 0.100),
    "thunder": ShapeSpec("Thunder-shaped", 2.43, 4290, 12, 214, 0.638, 0.272, 1.000, 0.100),
    "wave": ShapeSpec("Wave-shaped", 2.45, 4364, 12, 529, 0.668, 0.281, 1.000, 0.100),
    "u": ShapeSpec("U-shaped", 1.68, 3004, 12, 445, 0.595, 0.158, 0.983, 0.326),
}

# training-style experiments: 16 layers, step counts and speed/distance statistics
TRAINING_SHAPES = {
    "exp1": ShapeSpec("experiment-1", 6.40, 11000, 16, 415, 0.81, 0.26, 1.00, 0.10, 445.1, 20.5),
    "exp2": ShapeSpec("experiment-2", 6.40, 11000, 16, 391, 0.72, 0.25, 1.00, 0.10, 336.3, 35.9),
    "exp3": ShapeSpec("experiment-3", 6.40, 11000, 16, 314, 0.55, 0.28, 1.00, 0.10, 228.6, 33.1),
    "exp4": ShapeSpec("experiment-4", 6.40, 11000, 16, 472, 0.76, 0.16, 1.00, 0.15, 388.0, 15.0),
    "exp5": ShapeSpec("experiment-5", 6.40, 11000, 16, 417, 0.65, 0.20, 1.00, 0.10, 333.4, 21.2),
}


def shape_spec(shape: str) -> ShapeSpec:
    key = shape.lower().replace("-shaped", "")
    if key in SHAPES:
        return SHAPES[key]
    if key in TRAINING_SHAPES:
        return TRAINING_SHAPES[key]
    raise ValueError(f"unknown shape {shape!r}; choose from {sorted(SHAPES) + sorted(TRAINING_SHAPES)}")


# ---------------------------------------------------------------------------
# oracle


def dwell_time(step: TrajectoryStep, next_step: TrajectoryStep) -> float:
    """Seconds spent on the segment to ``next_step`` (positions in mm, speed in m/s)."""
    speed = step.speed
    if speed <= 0:
        raise ZeroVelocity(f"step {step.t} has zero speed")
    return float(np.linalg.norm(next_step.tp - step.tp)) / (1000.0 * speed)


def deposition_profile(step: TrajectoryStep, grid: WallGrid, params: OracleParams,
                       dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices under the cone and the thickness each one gains."""
    cone = spray_cone(step, grid, params.radius_factor)
    idx = particles_in_cone(cone, grid)
    sigma = params.profile_sigma_factor * cone.base_radius
    diff = grid.inplane[idx] - cone.base_center[:2]
    rho2 = (diff * diff).sum(axis=1)
    amount = params.A * (step.P / params.P_ref) * np.exp(-rho2 / (2.0 * sigma**2)) * dt
    return idx, amount


def oracle_step(grid_offsets: np.ndarray, step: TrajectoryStep, next_step: TrajectoryStep,
                params: OracleParams, grid: WallGrid) -> np.ndarray:
    out = np.array(grid_offsets, dtype=np.float64)
    idx, amount = deposition_profile(step, grid, params, dwell_time(step, next_step))
    out[idx] += amount
    return out


# ---------------------------------------------------------------------------
# trajectory generation


def _shape_warp(key: str, s: np.ndarray) -> np.ndarray:
    """Lateral displacement (fraction of the pass spacing) along a pass, s in [0, 1]."""
    if key == "s":
        return 0.6 * np.sin(2.0 * np.pi * s)
    if key == "wave":
        return 0.5 * np.sin(6.0 * np.pi * s)
    if key == "thunder":
        return 0.8 * (2.0 * np.abs((3.0 * s) % 1.0 - 0.5) - 0.5)
    if key == "u":
        return 1.2 * (2.0 * s - 1.0) ** 2 - 0.6
    return np.zeros_like(s)


def _resample(path: np.ndarray, count: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, arc[-1], count)
    return np.column_stack([np.interp(target, arc, path[:, k]) for k in range(path.shape[1])])


def _sample_speeds(spec: ShapeSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    # beta distribution matched to the mean/std on [min, max]
    span = spec.vel_max - spec.vel_min
    m = (spec.vel_mean - spec.vel_min) / span
    var = min((spec.vel_std / span) ** 2, 0.95 * m * (1 - m))
    k = m * (1 - m) / var - 1.0
    speeds = spec.vel_min + span * rng.beta(m * k, (1 - m) * k, size=count)
    if count >= 2:
        lo, hi = rng.choice(count, size=2, replace=False)
        speeds[lo], speeds[hi] = spec.vel_min, spec.vel_max
    return speeds


def grid_for(spec: ShapeSpec, particles: int | None = None, aspect: float = 1.25) -> WallGrid:
    n = particles or spec.particles
    spacing = np.sqrt(spec.area_m2 * 1e6 / n)
    nx = max(2, int(round(np.sqrt(n * aspect))))
    ny = max(2, int(round(n / nx)))
    return WallGrid(nx, ny, float(spacing))


def make_path(key: str, grid: WallGrid, points: int, passes: int | None = None) -> np.ndarray:
    """Equally spaced (points, 2) boustrophedon path warped to the named shape."""
    width = (grid.nx - 1) * grid.spacing
    height = (grid.ny - 1) * grid.spacing
    if passes is None:
        passes = max(2, int(round(height / 220.0)))
    margin = 0.1 * width
    pass_gap = height / passes
    rows = []
    dense = np.linspace(0.0, 1.0, 200)
    for p in range(passes):
        y0 = pass_gap * (p + 0.5)
        x = margin + (width - 2 * margin) * dense
        y = y0 + pass_gap * 0.5 * _shape_warp(key, dense)
        if p % 2:
            x, y = x[::-1], y[::-1]
        rows.append(np.column_stack([x, y]))
    path = np.vstack(rows) + grid.origin[:2]
    return _resample(path, points)


def make_trajectory(key: str, spec: ShapeSpec, grid: WallGrid, steps: int, P: float,
                    rng: np.random.Generator, path: np.ndarray | None = None) -> tuple[Trajectory, TrajectoryStep]:
    """Trajectory of ``steps`` sprayed points plus the terminal point that closes the last segment."""
    if path is None:
        path = make_path(key, grid, steps + 1)
    speeds = _sample_speeds(spec, steps + 1, rng)
    phase = rng.uniform(0, 2 * np.pi)
    s = np.linspace(0.0, 1.0, steps + 1)
    dist = spec.dist_mean + np.sqrt(2.0) * spec.dist_std * np.sin(2 * np.pi * 3 * s + phase)
    tangent = np.gradient(path, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    tilt = 0.05 * np.sin(2 * np.pi * 5 * s + phase)
    recs = []
    for k in range(steps + 1):
        tp = np.array([path[k, 0], path[k, 1], grid.plane_z + dist[k]])
        n = np.array([tilt[k] * tangent[k, 0], tilt[k] * tangent[k, 1], -1.0])
        n /= np.linalg.norm(n)
        u = speeds[k] * np.array([tangent[k, 0], tangent[k, 1], 0.0])
        recs.append(TrajectoryStep(k, tp, u, n, P))
    return Trajectory(recs[:-1]), recs[-1]


def generate_experiment(shape: str, params: OracleParams | None = None, seed: int = 0, *,
                        particles: int | None = None, steps: int | None = None,
                        layers: int | None = None, scan_layers: list[int] | None = None) -> ExperimentDataset:
    """Synthetic experiment whose per-step ground truth comes from :func:`oracle_step`.

    ``augmented`` holds the exact oracle states; ``scans`` holds the states
    before each layer in ``scan_layers`` (default: every layer 0..L).
    """
    params = params or OracleParams()
    key = shape.lower().replace("-shaped", "")
    spec = shape_spec(key)
    rng = np.random.default_rng(seed)
    grid = grid_for(spec, particles)
    T = steps or spec.steps
    L = layers or spec.layers
    path = make_path(key, grid, T + 1)

    trajectories: list[Trajectory] = []
    augmented: list[np.ndarray] = []
    current = np.zeros(grid.n)
    for _ in range(L):
        traj, terminal = make_trajectory(key, spec, grid, T, params.P_ref, rng, path)
        seq = np.empty((T + 1, grid.n))
        seq[0] = current
        for k in range(T):
            nxt = traj[k + 1] if k + 1 < T else terminal
            idx, amount = deposition_profile(traj[k], grid, params, dwell_time(traj[k], nxt))
            current = current.copy()
            current[idx] += amount
            seq[k + 1] = current
        trajectories.append(traj)
        augmented.append(seq)

    if scan_layers is None:
        scan_layers = list(range(L + 1))
    scans = [LayerScan(l, augmented[l][0] if l < L else augmented[-1][-1]) for l in scan_layers]
    meta = {"shape": key, "seed": seed, "augmented_source": "oracle",
            "oracle": {"A": params.A, "P_ref": params.P_ref, "radius_factor": params.radius_factor,
                       "profile_sigma_factor": params.profile_sigma_factor}}
    return ExperimentDataset(grid, L, trajectories, scans, augmented, name=spec.name, meta=meta)


# ---------------------------------------------------------------------------
# layer-wise regression baseline


@dataclass
class BaselineModel:
    """Per-layer increment ``(a + b*l) * exp(-delta^2 / 2c^2) * (d0/d) * (u0/u)``.

    ``delta`` is a particle's in-plane distance to the projected spray path,
    ``d`` the mean gun-to-surface distance over the layer and ``u`` the mean
    gun speed over the layer.
    """

    a: float
    b: float
    c: float
    d0: float
    u0: float

    def __post_init__(self):
        if not (self.c > 0 and self.d0 > 0 and self.u0 > 0):
            raise ValueError("baseline width and reference scales must be positive")


def path_distance(points: np.ndarray, path: np.ndarray) -> np.ndarray:
    """In-plane distance from each point to the polyline ``path`` (both (., 2))."""
    if len(path) == 1:
        return np.linalg.norm(points - path[0], axis=1)
    a = path[:-1]
    ab = path[1:] - a
    best = np.full(len(points), np.inf)
    chunk = 256
    for lo in range(0, len(a), chunk):
        sa, sab = a[lo:lo + chunk], ab[lo:lo + chunk]
        ap = points[:, None, :] - sa[None]
        denom = np.maximum((sab * sab).sum(axis=1), 1e-300)
        t = np.clip((ap * sab[None]).sum(axis=2) / denom, 0.0, 1.0)
        d = np.linalg.norm(ap - t[..., None] * sab[None], axis=2)
        best = np.minimum(best, d.min(axis=1))
    return best


def layer_features(trajectory: Trajectory, grid: WallGrid, offsets: np.ndarray) -> tuple[np.ndarray, float, float]:
    """(path distance per particle, mean gun-to-surface distance, mean speed)."""
    centers = np.array([spray_cone(s, grid, 1.0).base_center[:2] for s in trajectory])
    delta = path_distance(grid.inplane, centers)
    h = grid.spatial_hash(4.0 * grid.spacing)
    surface = []
    for s, c in zip(trajectory, centers):
        near = _nearest_particle(grid, c, h)
        surface.append(wall_distance(s.tp, grid) - offsets[near])
    return delta, float(np.mean(surface)), float(np.mean(trajectory.speeds))


def _nearest_particle(grid: WallGrid, xy: np.ndarray, h) -> int:
    ij = np.round((xy - grid.origin[:2]) / grid.spacing).astype(int)
    ix = int(np.clip(ij[0], 0, grid.nx - 1))
    iy = int(np.clip(ij[1], 0, grid.ny - 1))
    return iy * grid.nx + ix


def _design(delta: np.ndarray, dbar: float, ubar: float, layer: int, c: float, d0: float, u0: float):
    g = np.exp(-delta**2 / (2.0 * c * c)) * (d0 / dbar) * (u0 / ubar)
    return np.column_stack([g, g * layer])


def fit_baseline(dataset: ExperimentDataset | list[ExperimentDataset]) -> BaselineModel:
    """Least-squares fit over every recorded layer of one or more datasets.

    For fixed width ``c`` the model is linear in (a, b); ``c`` itself is
    found by golden-section search on log(c) over the profiled residual.
    """
    datasets = dataset if isinstance(dataset, list) else [dataset]
    rows = []
    for ds in datasets:
        states = _layer_states(ds)
        if len(states) < 2:
            raise DegenerateFit("need at least two recorded layers")
        for l in range(len(states) - 1):
            delta, dbar, ubar = layer_features(ds.trajectories[l], ds.grid, states[l])
            rows.append((delta, dbar, ubar, l, states[l + 1] - states[l]))
    y = np.concatenate([r[4] for r in rows])
    if np.ptp(y) == 0:
        raise DegenerateFit("layer increments have zero variance")
    d0 = float(np.mean([r[1] for r in rows]))
    u0 = float(np.mean([r[2] for r in rows]))

    def solve(c):
        X = np.vstack([_design(r[0], r[1], r[2], r[3], c, d0, u0) for r in rows])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        res = y - X @ coef
        return float(res @ res), coef

    spacing = min(ds.grid.spacing for ds in datasets)
    extent = max(max(ds.grid.nx, ds.grid.ny) * ds.grid.spacing for ds in datasets)
    res = optimize.minimize_scalar(lambda lc: solve(np.exp(lc))[0],
                                   bracket=(np.log(spacing), np.log(extent)), method="golden",
                                   options={"xtol": 1e-6})
    c = float(np.exp(res.x))
    _, (a, b) = solve(c)
    return BaselineModel(float(a), float(b), c, d0, u0)


def _layer_states(ds: ExperimentDataset) -> list[np.ndarray]:
    if ds.augmented is not None:
        return [ds.layer_start(l) for l in range(ds.layers + 1)]
    from .dataset import interpolate_layers
    return list(interpolate_layers(ds.scans, ds.layers))


def baseline_increment(model: BaselineModel, trajectory: Trajectory, grid: WallGrid,
                       offsets: np.ndarray, layer: int) -> np.ndarray:
    delta, dbar, ubar = layer_features(trajectory, grid, offsets)
    X = _design(delta, dbar, ubar, layer, model.c, model.d0, model.u0)
    return X @ np.array([model.a, model.b])


def baseline_predict_layer(model: BaselineModel, trajectory: Trajectory, offsets: np.ndarray,
                           grid: WallGrid, layer: int) -> np.ndarray:
    """Offsets after printing ``layer`` in a single prediction step."""
    out = np.asarray(offsets, dtype=np.float64) + baseline_increment(model, trajectory, grid, offsets, layer)
    return np.maximum(out, 0.0)
