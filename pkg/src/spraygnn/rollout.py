"""Recursive multi-step prediction and error-versus-horizon analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ExperimentDataset
from .errors import HorizonExceedsLayers, MissingTruth
from .graph import NormStats, VelocityHistory, build_graph
from .metrics import MetricsReport, compare
from .model import ModelParams, forward, load_checkpoint
from .oracle import BaselineModel, baseline_predict_layer

METRICS_HEADER = ["experiment", "model", "horizon_layers", "steps", "hd_mm", "cd_mm2", "mse_mm2", "mae_mm"]


class GNNSimulator:
    """Frozen model plus the settings needed to build its input graphs."""

    def __init__(self, params: ModelParams, stats: NormStats, R_wall: float = 30.0, cone_factor: float = 0.4):
        self.params = params
        self.stats = stats
        self.R_wall = R_wall
        self.cone_factor = cone_factor
        self.evaluations = 0

    @classmethod
    def from_checkpoint(cls, path) -> "GNNSimulator":
        params, meta = load_checkpoint(path)
        stats = NormStats(**meta["stats"])
        train = meta.get("train", {})
        return cls(params, stats, train.get("R_wall", 30.0), train.get("cone_factor", 0.4))

    def predict_delta(self, grid, offsets, step, history, layer, n_layers) -> np.ndarray:
        """Out-of-plane thickness change (mm) for one trajectory step."""
        graph = build_graph(grid, offsets, step, history, layer, n_layers, self.stats,
                            self.R_wall, self.cone_factor)
        self.evaluations += 1
        return forward(graph, self.params).values[:, 2] * self.stats.delta_scale


class ZeroSimulator:
    """Predicts no change; the do-nothing reference."""

    evaluations = 0

    def predict_delta(self, grid, offsets, step, history, layer, n_layers) -> np.ndarray:
        self.evaluations += 1
        return np.zeros(grid.n)


@dataclass
class RolloutResult:
    start_layer: int
    layers_ahead: int
    steps_executed: int
    layer_ends: dict[int, np.ndarray]              # horizon h -> offsets after h layers
    step_offsets: list[np.ndarray] | None = None
    metrics: list[MetricsReport] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.layer_ends[self.layers_ahead]


def rollout(model, dataset: ExperimentDataset, start_layer: int, layers_ahead: int,
            keep_steps: bool = False) -> RolloutResult:
    """Start from the true wall before ``start_layer`` (0-based) and feed every
    prediction back as the next input for ``layers_ahead`` full layers."""
    if layers_ahead < 1:
        raise ValueError("layers_ahead must be at least 1")
    if start_layer < 0 or start_layer + layers_ahead > dataset.layers:
        raise HorizonExceedsLayers(
            f"layers {start_layer}..{start_layer + layers_ahead - 1} exceed the {dataset.layers} available")
    grid = dataset.grid
    offsets = _start_state(dataset, start_layer)
    ends = {}
    kept = [] if keep_steps else None
    executed = 0
    for h in range(1, layers_ahead + 1):
        layer = start_layer + h - 1
        history = VelocityHistory()
        for step in dataset.trajectories[layer]:
            history.push(step.u)
            dz = model.predict_delta(grid, offsets, step, history, layer, dataset.layers)
            offsets = np.maximum(offsets + dz, 0.0)
            executed += 1
            if kept is not None:
                kept.append(offsets.copy())
        ends[h] = offsets.copy()
    return RolloutResult(start_layer, layers_ahead, executed, ends, kept)


def _start_state(dataset: ExperimentDataset, layer: int) -> np.ndarray:
    if dataset.augmented is not None:
        return dataset.layer_start(layer).copy()
    for scan in dataset.scans:
        if scan.layer == layer:
            return scan.offsets.copy()
    raise MissingTruth(f"no ground truth before layer {layer}")


def _truth(dataset: ExperimentDataset, layer: int) -> np.ndarray:
    try:
        return _start_state(dataset, layer)
    except (MissingTruth, IndexError):
        raise MissingTruth(f"no ground truth after layer {layer - 1}") from None


def evaluate(result: RolloutResult, truth: ExperimentDataset) -> list[MetricsReport]:
    """Metrics after every rolled layer against the true wall."""
    reports = []
    steps = 0
    lengths = truth.steps_per_layer()
    for h in range(1, result.layers_ahead + 1):
        layer = result.start_layer + h
        steps += lengths[layer - 1]
        reports.append(compare(result.layer_ends[h], _truth(truth, layer), truth.grid.inplane,
                               horizon=h, steps=steps, plane_z=truth.grid.plane_z))
    result.metrics = reports
    return reports


def baseline_rollout(model: BaselineModel, dataset: ExperimentDataset, start_layer: int,
                     layers_ahead: int) -> RolloutResult:
    """Layer-granular rollout: one prediction per layer."""
    if start_layer < 0 or start_layer + layers_ahead > dataset.layers:
        raise HorizonExceedsLayers(f"horizon {layers_ahead} from layer {start_layer} exceeds {dataset.layers}")
    offsets = _start_state(dataset, start_layer)
    ends = {}
    for h in range(1, layers_ahead + 1):
        layer = start_layer + h - 1
        offsets = baseline_predict_layer(model, dataset.trajectories[layer], offsets, dataset.grid, layer)
        ends[h] = offsets.copy()
    return RolloutResult(start_layer, layers_ahead, layers_ahead, ends)


# ---------------------------------------------------------------------------
# error scaling


METRIC_KEYS = ("hd", "cd", "mse", "mae")


@dataclass
class ScalingTable:
    experiment: str
    horizons: list[int]
    rows: list[dict]                    # one per (model, horizon)
    gnn_exponent: dict[str, float]      # slope of log(err) vs log(steps)
    baseline_rate: dict[str, float]     # slope of log(err) vs steps
    baseline_ratios: dict[str, list[float]]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in METRICS_HEADER})
        return path

    def series(self, model: str, metric: str) -> np.ndarray:
        col = {"hd": "hd_mm", "cd": "cd_mm2", "mse": "mse_mm2", "mae": "mae_mm"}[metric]
        return np.array([r[col] for r in self.rows if r["model"] == model])


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    ok = y > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(x[ok], np.log(y[ok]), 1)[0])


def report_rows(experiment: str, model: str, reports: list[MetricsReport]) -> list[dict]:
    return [{"experiment": experiment, "model": model, "horizon_layers": r.horizon, "steps": r.steps,
             **r.as_row()} for r in reports]


def scaling_analysis(model, baseline: BaselineModel | None, dataset: ExperimentDataset,
                     horizons=(3, 6, 9, 12), start_layer: int = 0) -> ScalingTable:
    """Errors of both predictors after each horizon (layers ahead of ``start_layer``).

    A single rollout to the longest horizon is read off at every requested
    horizon; prefixes of a deterministic rollout equal the shorter rollouts.
    """
    horizons = sorted(int(h) for h in horizons)
    longest = horizons[-1]
    rows = []
    gnn = rollout(model, dataset, start_layer, longest)
    g_reports = [r for r in evaluate(gnn, dataset) if r.horizon in horizons]
    rows += report_rows(dataset.name, "gnn", g_reports)
    b_reports = []
    if baseline is not None:
        base = baseline_rollout(baseline, dataset, start_layer, longest)
        b_reports = [r for r in evaluate(base, dataset) if r.horizon in horizons]
        for r in b_reports:
            r.steps = r.horizon
        rows += report_rows(dataset.name, "baseline", b_reports)

    steps = np.array([r.steps for r in g_reports], dtype=float)
    exps, rates, ratios = {}, {}, {}
    for key in METRIC_KEYS:
        g = np.array([getattr(r, key) for r in g_reports])
        exps[key] = _slope(np.log(steps), g)
        if b_reports:
            b = np.array([getattr(r, key) for r in b_reports])
            rates[key] = _slope(np.array([r.steps for r in b_reports], float), b)
            ratios[key] = [float(b[i + 1] / b[i]) if b[i] > 0 else float("inf") for i in range(len(b) - 1)]
    return ScalingTable(dataset.name, horizons, rows, exps, rates, ratios)


def write_metrics_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRICS_HEADER})
    return path
