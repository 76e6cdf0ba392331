"""Experiment datasets: file formats and the two augmentation passes.

On disk an experiment is a JSON manifest next to its files::

    {"version": 1,
     "grid": {"nx": .., "ny": .., "spacing_mm": .., "origin": [x, y, z]},
     "layers": L,
     "trajectories": ["traj_000.jsonl", ...]  or  [{"layer": l, "file": ..}, ...],
     "scans": [{"layer": l, "file": "scan_000.csv"}, ...],
     "augmented": "augmented.npz"            # optional
    }

Scans are CSV (``x_mm,y_mm,offset_mm``, row-major grid order) holding the
wall state *before* the given layer is printed, so a scan at layer L is the
finished wall. Trajectories are JSON Lines with one step per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatch, InsufficientScans, MissingFile, NonMonotoneLayers, SchemaVersionMismatch
from .geometry import Trajectory, TrajectoryStep, WallGrid, particles_in_cone, spray_cone

MANIFEST_VERSION = 1
AUGMENT_RADIUS_FACTOR = 0.5


@dataclass(eq=False)
class LayerScan:
    layer: int
    offsets: np.ndarray
    captured_before_layer: bool = True

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)


@dataclass(eq=False)
class ExperimentDataset:
    """One printed formation.

    ``augmented[l]`` is an array of shape (T_l + 1, N): the wall before the
    first step of layer ``l`` followed by the wall after each of its T_l
    steps. Row 0 of layer l equals the last row of layer l-1, so the number
    of distinct per-step snapshots is the sum of T_l.
    """

    grid: WallGrid
    layers: int
    trajectories: list[Trajectory]
    scans: list[LayerScan] = field(default_factory=list)
    augmented: list[np.ndarray] | None = None
    name: str = "experiment"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trajectories) != self.layers:
            raise ValueError(f"{self.layers} layers but {len(self.trajectories)} trajectories")
        for scan in self.scans:
            if scan.offsets.shape != (self.grid.n,):
                raise GridMismatch(f"scan of layer {scan.layer} has {scan.offsets.size} offsets, grid has {self.grid.n}")

    def steps_per_layer(self) -> list[int]:
        return [len(t) for t in self.trajectories]

    def snapshot_count(self) -> int:
        if self.augmented is None:
            return 0
        return sum(a.shape[0] - 1 for a in self.augmented)

    def layer_start(self, layer: int) -> np.ndarray:
        """Wall offsets before ``layer`` is printed (``layer == L`` is the end)."""
        if self.augmented is None:
            raise ValueError("dataset is not augmented")
        if layer == self.layers:
            return self.augmented[-1][-1]
        return self.augmented[layer][0]


# ---------------------------------------------------------------------------
# inter-layer augmentation


def interpolate_layers(scans: list[LayerScan], L: int) -> np.ndarray:
    """Wall offsets before every layer 0..L from sparse scans.

    Piecewise-linear between scanned layers; beyond the last scan the final
    segment's slope is continued and clamped at zero. Returns (L + 1, N).
    """
    if len(scans) < 2:
        raise InsufficientScans(f"need at least 2 scans, got {len(scans)}")
    layers = [s.layer for s in scans]
    if any(b <= a for a, b in zip(layers, layers[1:])):
        raise NonMonotoneLayers(f"scan layers must be strictly increasing: {layers}")
    if layers[0] != 0:
        raise NonMonotoneLayers("first scan must be taken before layer 0")
    n = scans[0].offsets.size
    if any(s.offsets.size != n for s in scans):
        raise GridMismatch("scans have different particle counts")

    out = np.empty((L + 1, n))
    seg = 0
    for l in range(L + 1):
        while seg < len(scans) - 2 and l > scans[seg + 1].layer:
            seg += 1
        a, b = scans[seg], scans[seg + 1]
        if l == a.layer:
            out[l] = a.offsets
        elif l == b.layer:
            out[l] = b.offsets
        else:
            frac = (l - a.layer) / (b.layer - a.layer)
            out[l] = a.offsets + frac * (b.offsets - a.offsets)
            if l > b.layer:
                out[l] = np.maximum(out[l], 0.0)
    return out


# ---------------------------------------------------------------------------
# inter-step augmentation


def augment_inter_step(layer_offsets_start: np.ndarray, layer_offsets_end: np.ndarray,
                       trajectory: Trajectory, grid: WallGrid,
                       radius_factor: float = AUGMENT_RADIUS_FACTOR) -> np.ndarray:
    """Per-step wall states for one layer, shape (T + 1, N).

    Step k sets every not-yet-covered particle inside that step's spray cone
    to its layer-end value. Particles no cone ever reached jump at the last
    step, so the final row equals ``layer_offsets_end`` exactly.
    """
    start = np.asarray(layer_offsets_start, dtype=np.float64)
    end = np.asarray(layer_offsets_end, dtype=np.float64)
    if start.shape != end.shape:
        raise GridMismatch(f"start {start.shape} and end {end.shape} differ")
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    T = len(trajectory)
    seq = np.empty((T + 1, start.size))
    seq[0] = start
    current = start.copy()
    done = np.zeros(start.size, dtype=bool)
    for k, step in enumerate(trajectory):
        idx = particles_in_cone(spray_cone(step, grid, radius_factor), grid)
        fresh = idx[~done[idx]]
        current[fresh] = end[fresh]
        done[fresh] = True
        if k == T - 1:
            current[:] = end
        seq[k + 1] = current
    return seq


def augment_dataset(ds: ExperimentDataset, radius_factor: float = AUGMENT_RADIUS_FACTOR) -> ExperimentDataset:
    """Fill ``ds.augmented`` from its sparse scans (both augmentation passes)."""
    per_layer = interpolate_layers(ds.scans, ds.layers)
    ds.augmented = [
        augment_inter_step(per_layer[l], per_layer[l + 1], ds.trajectories[l], ds.grid, radius_factor)
        for l in range(ds.layers)
    ]
    ds.meta["augmented_source"] = "cone"
    return ds


# ---------------------------------------------------------------------------
# file formats


def _step_to_json(step: TrajectoryStep) -> str:
    return json.dumps({"t": step.t, "tp": step.tp.tolist(), "u": step.u.tolist(),
                       "n": step.n.tolist(), "P": float(step.P)})


def write_trajectory(traj: Trajectory, path: Path) -> None:
    with open(path, "w") as fh:
        for step in traj:
            fh.write(_step_to_json(step) + "\n")


def read_trajectory(path: Path) -> Trajectory:
    if not Path(path).exists():
        raise MissingFile(f"trajectory file not found: {path}")
    steps = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                steps.append(TrajectoryStep(rec["t"], rec["tp"], rec["u"], rec["n"], rec["P"]))
    return Trajectory(steps)


def write_scan(grid: WallGrid, offsets: np.ndarray, path: Path) -> None:
    xy = grid.inplane
    # %.17g round-trips float64 exactly
    np.savetxt(path, np.column_stack([xy, offsets]), delimiter=",", fmt="%.17g",
               header="x_mm,y_mm,offset_mm", comments="")


def read_scan(path: Path, grid: WallGrid) -> np.ndarray:
    if not Path(path).exists():
        raise MissingFile(f"scan file not found: {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != grid.n:
        raise GridMismatch(f"{path}: {data.shape[0]} rows but grid has {grid.n} particles")
    return data[:, 2].copy()


def _trajectory_files(entries: list, L: int) -> list[str]:
    """Per-layer trajectory file; layers without one reuse the nearest recorded layer."""
    if all(isinstance(e, str) for e in entries):
        if len(entries) == L:
            return list(entries)
        entries = [{"layer": i, "file": f} for i, f in enumerate(entries)]
    recorded = {int(e["layer"]): e["file"] for e in entries}
    keys = sorted(recorded)
    return [recorded[min(keys, key=lambda k: (abs(k - l), k))] for l in range(L)]


def load_experiment(manifest_path) -> ExperimentDataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    with open(manifest_path) as fh:
        man = json.load(fh)
    if man.get("version") != MANIFEST_VERSION:
        raise SchemaVersionMismatch(f"manifest version {man.get('version')!r}, expected {MANIFEST_VERSION}")
    g = man["grid"]
    grid = WallGrid(int(g["nx"]), int(g["ny"]), float(g["spacing_mm"]), np.asarray(g.get("origin", [0, 0, 0]), float))
    L = int(man["layers"])
    trajectories = [read_trajectory(root / f) for f in _trajectory_files(man["trajectories"], L)]
    scans = [LayerScan(int(s["layer"]), read_scan(root / s["file"], grid)) for s in man.get("scans", [])]
    augmented = None
    if man.get("augmented"):
        apath = root / man["augmented"]
        if not apath.exists():
            raise MissingFile(f"augmented store not found: {apath}")
        with np.load(apath) as z:
            augmented = [z[f"layer_{l:03d}"] for l in range(L)]
        for l, a in enumerate(augmented):
            if a.shape != (len(trajectories[l]) + 1, grid.n):
                raise GridMismatch(f"augmented layer {l} has shape {a.shape}")
    return ExperimentDataset(grid, L, trajectories, scans, augmented,
                             name=man.get("name", manifest_path.parent.name), meta=man.get("meta", {}))


def store_augmented(ds: ExperimentDataset, path) -> Path:
    """Write ``ds`` (manifest, scans, trajectories, augmented store) into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    traj_files = []
    for l, traj in enumerate(ds.trajectories):
        fname = f"traj_{l:03d}.jsonl"
        write_trajectory(traj, out / fname)
        traj_files.append(fname)
    scan_entries = []
    for scan in ds.scans:
        fname = f"scan_{scan.layer:03d}.csv"
        write_scan(ds.grid, scan.offsets, out / fname)
        scan_entries.append({"layer": scan.layer, "file": fname})
    man = {
        "version": MANIFEST_VERSION,
        "name": ds.name,
        "grid": {"nx": ds.grid.nx, "ny": ds.grid.ny, "spacing_mm": ds.grid.spacing,
                 "origin": ds.grid.origin.tolist()},
        "layers": ds.layers,
        "trajectories": traj_files,
        "scans": scan_entries,
        "meta": ds.meta,
    }
    if ds.augmented is not None:
        np.savez(out / "augmented.npz", **{f"layer_{l:03d}": a for l, a in enumerate(ds.augmented)})
        man["augmented"] = "augmented.npz"
    with open(out / "manifest.json", "w") as fh:
        json.dump(man, fh, indent=2)
    return out / "manifest.json"
