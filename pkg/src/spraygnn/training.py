"""Loss terms and the batch-size-1 training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataset import ExperimentDataset
from .errors import EmptyCloud, EmptyDataset, ShapeMismatch
from .graph import NormStats, SprayGraph, VelocityHistory, build_graph, gaussian_weights
from .metrics import nearest
from .model import ModelConfig, ModelParams, forward, save_checkpoint

TRAIN_LOG_HEADER = ["step", "train_loss", "val_loss", "wall_seconds"]


@dataclass
class TrainConfig:
    max_steps: int = 10_000
    select_step: int = 300
    batch: int = 1
    noise_sigma: float = 0.003
    lambda_delta: float = 1.0
    lambda_hd: float = 0.1
    lr: float = 1e-4
    lr_decay: float = 1.0            # multiplicative per step; 1.0 disables it
    seed: int = 0
    R_wall: float = 30.0
    cone_factor: float = 0.4
    checkpoint_every: int = 0        # 0: only at select_step and the final step
    val_every: int = 10
    val_samples: int = 4

    def __post_init__(self):
        if self.batch != 1:
            raise ValueError("only mini-batches of one sample are supported")
        if min(self.max_steps, self.select_step, self.lr, self.R_wall, self.cone_factor) <= 0:
            raise ValueError("training settings must be positive")
        if self.noise_sigma < 0 or self.lambda_delta < 0 or self.lambda_hd < 0:
            raise ValueError("noise and loss weights must be non-negative")


# ---------------------------------------------------------------------------
# losses


def loss_delta(pred: ad.Tensor, true, weights) -> ad.Tensor:
    """Weighted squared error sum_i w_i |pred_i - true_i|^2 / sum_i w_i."""
    pred = ad.constant(pred)
    true = np.asarray(true, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pred.shape != true.shape or w.shape != (true.shape[0],):
        raise ShapeMismatch(f"loss_delta: {pred.shape} vs {true.shape}, weights {w.shape}")
    return ad.scale(ad.weighted_sumsq(ad.sub(pred, true), w), 1.0 / float(w.sum()))


def hausdorff_term(x, y) -> ad.Tensor:
    """Directed distance 0.5 * max_x |x - NN(x, y)| with either side a Tensor.

    Nearest-neighbor correspondences are computed on the values and then
    held fixed, so gradients flow only through the matched pairs.
    """
    xt, yt = ad.constant(x), ad.constant(y)
    if xt.shape[0] == 0 or yt.shape[0] == 0:
        raise EmptyCloud("hausdorff_term needs non-empty clouds")
    idx = nearest(xt.values, yt.values)
    diff = ad.sub(xt, ad.gather_rows(yt, idx))
    return ad.scale(ad.max_reduce(ad.row_norm(diff)), 0.5)


def loss_hd(p_true_next, p_prev, delta_pred: ad.Tensor) -> ad.Tensor:
    """Symmetric Hausdorff loss between the true and predicted next clouds."""
    pred_cloud = ad.add(ad.constant(np.asarray(p_prev, dtype=np.float64)), delta_pred)
    true = np.asarray(p_true_next, dtype=np.float64)
    return ad.add(hausdorff_term(true, pred_cloud), hausdorff_term(pred_cloud, true))


def total_loss(delta_pred: ad.Tensor, delta_true, weights, p_prev, p_true_next,
               lambda_delta: float = 1.0, lambda_hd: float = 0.1) -> ad.Tensor:
    out = ad.scale(loss_delta(delta_pred, delta_true, weights), lambda_delta)
    if lambda_hd:
        out = ad.add(out, ad.scale(loss_hd(p_true_next, p_prev, delta_pred), lambda_hd))
    return out


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    graph: SprayGraph
    delta: np.ndarray          # (N, 3) normalized target
    weights: np.ndarray        # (N,)
    p_prev: np.ndarray         # (N, 3) in normalized-delta units
    p_next: np.ndarray


def history_at(traj, k: int) -> VelocityHistory:
    """Velocity buffer as it stands when step ``k`` of a layer is predicted."""
    h = VelocityHistory()
    for j in range(max(0, k - h.k + 1), k + 1):
        h.push(traj[j].u)
    return h


def make_sample(ds: ExperimentDataset, layer: int, k: int, stats: NormStats, cfg: TrainConfig,
                rng: np.random.Generator | None = None, noise: float = 0.0) -> Sample:
    seq = ds.augmented[layer]
    traj = ds.trajectories[layer]
    step = traj[k]
    graph = build_graph(ds.grid, seq[k], step, history_at(traj, k), layer, ds.layers, stats,
                        cfg.R_wall, cfg.cone_factor, noise, rng)
    dz = (seq[k + 1] - seq[k]) / stats.delta_scale
    delta = np.zeros((ds.grid.n, 3))
    delta[:, 2] = dz
    scale = 1.0 / stats.delta_scale
    p_prev = ds.grid.positions(seq[k]) * scale
    p_next = ds.grid.positions(seq[k + 1]) * scale
    return Sample(graph, delta, gaussian_weights(ds.grid, step, cfg.cone_factor), p_prev, p_next)


def sample_loss(params: ModelParams, s: Sample, cfg: TrainConfig) -> ad.Tensor:
    pred = forward(s.graph, params)
    return total_loss(pred, s.delta, s.weights, s.p_prev, s.p_next, cfg.lambda_delta, cfg.lambda_hd)


def draw_index(datasets: list[ExperimentDataset], rng: np.random.Generator) -> tuple[int, int, int]:
    e = int(rng.integers(len(datasets)))
    layer = int(rng.integers(datasets[e].layers))
    k = int(rng.integers(len(datasets[e].trajectories[layer])))
    return e, layer, k


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: ModelParams
    stats: NormStats
    log: list[dict] = field(default_factory=list)
    checkpoints: dict[int, Path] = field(default_factory=dict)
    snapshots: dict[int, ModelParams] = field(default_factory=dict)

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([r["train_loss"] for r in self.log])


def _sidecar(stats: NormStats, cfg: TrainConfig, step: int) -> dict:
    return {"stats": stats.to_dict(), "train": asdict(cfg), "step": step}


def train(datasets: list[ExperimentDataset] | ExperimentDataset, cfg: TrainConfig,
          model_cfg: ModelConfig | None = None, val_dataset: ExperimentDataset | None = None,
          out_dir=None, stats: NormStats | None = None, params: ModelParams | None = None,
          P_ref: float = 2.0, progress=None) -> TrainResult:
    """Run ``cfg.max_steps`` Adam updates on randomly drawn (experiment, layer, step) samples.

    Writes ``train_log.csv`` and checkpoints into ``out_dir`` when given.
    """
    if isinstance(datasets, ExperimentDataset):
        datasets = [datasets]
    datasets = [ds for ds in datasets if ds.augmented is not None and ds.snapshot_count() > 0]
    if not datasets:
        raise EmptyDataset("no augmented training data")
    model_cfg = model_cfg or ModelConfig()
    stats = stats or NormStats.from_datasets(datasets, P_ref)
    params = params or ModelParams.init(model_cfg, cfg.seed)
    plist = list(params)
    adam = ad.AdamState(plist, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    val_rng = np.random.default_rng(cfg.seed + 1)
    val_samples = []
    if val_dataset is not None and val_dataset.augmented is not None:
        for _ in range(cfg.val_samples):
            _, layer, k = draw_index([val_dataset], val_rng)
            val_samples.append(make_sample(val_dataset, layer, k, stats, cfg))

    out = Path(out_dir) if out_dir else None
    log_fh = writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(TRAIN_LOG_HEADER)

    result = TrainResult(params, stats)
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.max_steps + 1):
            e, layer, k = draw_index(datasets, rng)
            sample = make_sample(datasets[e], layer, k, stats, cfg, rng, cfg.noise_sigma)
            with ad.Tape() as tape:
                loss = sample_loss(params, sample, cfg)
            grads = ad.backward(tape, loss, plist)
            ad.adam_step(plist, [grads[id(p)] for p in plist], adam)
            adam.lr *= cfg.lr_decay

            val = None
            if val_samples and step % cfg.val_every == 0:
                val = float(np.mean([sample_loss(params, s, cfg).item() for s in val_samples]))
            row = {"step": step, "train_loss": loss.item(), "val_loss": val,
                   "wall_seconds": time.perf_counter() - t0}
            result.log.append(row)
            if writer:
                writer.writerow([step, repr(row["train_loss"]), "" if val is None else repr(val),
                                 f"{row['wall_seconds']:.3f}"])
            want_ckpt = step == cfg.select_step or step == cfg.max_steps or (
                cfg.checkpoint_every and step % cfg.checkpoint_every == 0)
            if want_ckpt:
                result.snapshots[step] = params.copy()
                if out:
                    path = save_checkpoint(params, out / f"checkpoint_{step:05d}.sgnn",
                                           _sidecar(stats, cfg, step))
                    result.checkpoints[step] = path
            if progress:
                progress(row)
    finally:
        if log_fh:
            log_fh.close()
    return result
