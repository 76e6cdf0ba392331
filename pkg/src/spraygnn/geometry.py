"""Wall grid, trajectory and spray-cone types plus the spatial queries on them.

All geometry lives in a local wall frame: the reference wall is the plane
z = origin_z, particles sit on an orthogonal lattice in x/y and their
thickness offset grows along +z towards the spray gun.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, ParallelAxis

AXIS_TOL = 1e-9


@dataclass(eq=False)
class WallGrid:
    nx: int
    ny: int
    spacing: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offsets: np.ndarray | None = None
    wall_basis: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0 or self.spacing <= 0:
            raise ValueError("grid dimensions and spacing must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.offsets is None:
            self.offsets = np.zeros(self.n)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.shape != (self.n,):
            raise GridMismatch(f"expected {self.n} offsets, got {self.offsets.shape}")
        self._inplane: np.ndarray | None = None
        self._hash: dict[float, SpatialHash] = {}

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def plane_z(self) -> float:
        return float(self.origin[2])

    @property
    def normal(self) -> np.ndarray:
        return self.wall_basis[2]

    @property
    def inplane(self) -> np.ndarray:
        """(N, 2) in-plane coordinates in row-major order (x varies fastest)."""
        if self._inplane is None:
            ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
            xy = np.stack([ix.ravel(), iy.ravel()], axis=1) * self.spacing
            self._inplane = xy + self.origin[:2]
        return self._inplane

    def positions(self, offsets: np.ndarray | None = None) -> np.ndarray:
        """(N, 3) particle positions for the given (or current) offsets."""
        off = self.offsets if offsets is None else np.asarray(offsets, dtype=np.float64)
        if off.shape != (self.n,):
            raise GridMismatch(f"expected {self.n} offsets, got {off.shape}")
        return np.column_stack([self.inplane, self.plane_z + off])

    def spatial_hash(self, cell: float) -> "SpatialHash":
        if cell not in self._hash:
            self._hash[cell] = SpatialHash(self.inplane, cell)
        return self._hash[cell]

    def with_offsets(self, offsets: np.ndarray) -> "WallGrid":
        return WallGrid(self.nx, self.ny, self.spacing, self.origin.copy(),
                        np.array(offsets, dtype=np.float64), self.wall_basis.copy())


@dataclass(frozen=True, eq=False)
class TrajectoryStep:
    t: int
    tp: np.ndarray
    u: np.ndarray
    n: np.ndarray
    P: float

    def __post_init__(self):
        for name in ("tp", "u", "n"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if abs(np.linalg.norm(self.n) - 1.0) > 1e-9:
            raise ValueError(f"printing direction at step {self.t} is not a unit vector")

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.u))


@dataclass(eq=False)
class Trajectory:
    steps: list[TrajectoryStep]

    def __post_init__(self):
        ts = [s.t for s in self.steps]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory step indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, k):
        return self.steps[k]

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.tp for s in self.steps])

    @property
    def speeds(self) -> np.ndarray:
        return np.array([s.speed for s in self.steps])


@dataclass(frozen=True, eq=False)
class SprayCone:
    apex: np.ndarray
    axis: np.ndarray
    base_radius: float
    base_center: np.ndarray

    def __post_init__(self):
        if not self.base_radius > 0:
            raise ValueError("cone base radius must be positive")


def wall_distance(tp: np.ndarray, grid: WallGrid) -> float:
    """Distance of a gun position from the reference wall plane."""
    return abs(float(tp[2]) - grid.plane_z)


def project_to_wall(apex, axis, grid: WallGrid | float = 0.0) -> np.ndarray:
    """Intersection of the ray ``apex + s * axis`` with the wall plane."""
    apex = np.asarray(apex, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    plane_z = grid.plane_z if isinstance(grid, WallGrid) else float(grid)
    if abs(axis[2]) < AXIS_TOL:
        raise ParallelAxis("spray axis is parallel to the wall plane")
    s = (plane_z - apex[2]) / axis[2]
    hit = apex + s * axis
    hit[2] = plane_z
    return hit


def spray_cone(step: TrajectoryStep, grid: WallGrid, radius_factor: float) -> SprayCone:
    """Cone with apex at the gun and base radius ``radius_factor * d`` on the wall."""
    d = wall_distance(step.tp, grid)
    return SprayCone(step.tp, step.n, radius_factor * d, project_to_wall(step.tp, step.n, grid))


class SpatialHash:
    """Uniform bucket grid over 2-D points with cell size ``cell``.

    Points are sorted by cell key once; each occupied cell maps to a
    contiguous slice of the sorted index array.
    """

    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        self.lo = self.points.min(axis=0) if len(self.points) else np.zeros(2)
        ij = np.floor((self.points - self.lo) / self.cell).astype(np.int64)
        self.ncell = ij.max(axis=0) + 1 if len(self.points) else np.ones(2, dtype=np.int64)
        keys = ij[:, 0] * self.ncell[1] + ij[:, 1]
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]
        self.cell_ij = ij
        self._pairs: dict[float, np.ndarray] = {}

    def _slice(self, key: int) -> np.ndarray:
        a = np.searchsorted(self.keys, key, side="left")
        b = np.searchsorted(self.keys, key, side="right")
        return self.order[a:b]

    def query_disc(self, center, radius: float) -> np.ndarray:
        """Sorted indices with distance to ``center`` strictly below ``radius``."""
        c = np.asarray(center, dtype=np.float64)[:2]
        lo = np.floor((c - radius - self.lo) / self.cell).astype(np.int64)
        hi = np.floor((c + radius - self.lo) / self.cell).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, self.ncell - 1)
        if np.any(hi < lo):
            return np.empty(0, dtype=np.int64)
        chunks = [self._slice(i * self.ncell[1] + j)
                  for i in range(lo[0], hi[0] + 1) for j in range(lo[1], hi[1] + 1)]
        cand = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        diff = self.points[cand] - c
        inside = np.sqrt((diff * diff).sum(axis=1)) < radius
        return np.sort(cand[inside])

    def pairs(self, radius: float) -> np.ndarray:
        """All ordered pairs (i, j), i != j, with distance strictly below ``radius``.

        Requires ``radius <= cell`` so that neighbors sit in adjacent cells.
        """
        if radius > self.cell:
            raise ValueError("pair radius must not exceed the hash cell size")
        if radius not in self._pairs:
            self._pairs[radius] = self._pairs_uncached(radius)
        return self._pairs[radius]

    def _pairs_uncached(self, radius: float) -> np.ndarray:
        n = len(self.points)
        if n < 2:
            return np.empty((0, 2), dtype=np.int64)
        out_i, out_j = [], []
        sorted_ij = self.cell_ij[self.order]
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni = sorted_ij[:, 0] + di
                nj = sorted_ij[:, 1] + dj
                ok = (ni >= 0) & (nj >= 0) & (ni < self.ncell[0]) & (nj < self.ncell[1])
                nkey = ni * self.ncell[1] + nj
                a = np.searchsorted(self.keys, nkey, side="left")
                b = np.searchsorted(self.keys, nkey, side="right")
                cnt = np.where(ok, b - a, 0)
                if cnt.sum() == 0:
                    continue
                src = np.repeat(np.arange(n), cnt)
                starts = np.repeat(a, cnt)
                within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                out_i.append(self.order[src])
                out_j.append(self.order[starts + within])
        i = np.concatenate(out_i)
        j = np.concatenate(out_j)
        diff = self.points[i] - self.points[j]
        keep = (i != j) & (np.sqrt((diff * diff).sum(axis=1)) < radius)
        edges = np.column_stack([i[keep], j[keep]])
        return edges[np.lexsort((edges[:, 1], edges[:, 0]))]


def _inplane(grid) -> np.ndarray:
    return grid.inplane if isinstance(grid, WallGrid) else np.asarray(grid, dtype=np.float64)[:, :2]


def particles_in_cone(cone: SprayCone, grid) -> np.ndarray:
    """Sorted indices of particles whose in-plane distance to the cone's base
    center is strictly less than its base radius.

    ``grid`` is a :class:`WallGrid` or an (N, 2+) array of points.
    """
    if isinstance(grid, WallGrid):
        # cell size tied to the lattice so that the hash is reused across steps
        h = grid.spatial_hash(4.0 * grid.spacing)
    else:
        pts = _inplane(grid)
        h = SpatialHash(pts, max(cone.base_radius, 1e-9))
    return h.query_disc(cone.base_center, cone.base_radius)


def radius_neighbors(grid, R: float) -> np.ndarray:
    """Directed edges (i, j) for every pair with in-plane distance < R.

    Each unordered pair appears in both directions; rows are sorted.
    """
    if R <= 0:
        raise ValueError("radius must be positive")
    if isinstance(grid, WallGrid):
        h = grid.spatial_hash(float(R))
    else:
        h = SpatialHash(_inplane(grid), float(R))
    return h.pairs(R)
