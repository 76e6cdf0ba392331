"""Command-line entry point: generate | augment | train | predict | evaluate | export-plot."""

from __future__ import annotations

import os

# must happen before numpy loads its BLAS
_threads = os.environ.get("SPRAYGNN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

try:
    import tomllib  # noqa: E402
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib  # noqa: E402

from .dataset import MANIFEST_VERSION, ExperimentDataset, augment_dataset, load_experiment, store_augmented, write_scan  # noqa: E402
from .errors import ConfigError, EmptyDataset, SprayGNNError  # noqa: E402
from .model import CHECKPOINT_FORMAT, ModelConfig  # noqa: E402
from .oracle import SHAPES, OracleParams, fit_baseline, generate_experiment  # noqa: E402
from .rollout import METRICS_HEADER, GNNSimulator, rollout, scaling_analysis  # noqa: E402
from .training import TRAIN_LOG_HEADER, TrainConfig, train  # noqa: E402

TRUTH_FILE = "truth.npz"


@dataclass
class GenerateConfig:
    shape: str = "s"
    particles: int = 0          # 0: the shape's nominal count
    steps: int = 0              # 0: the shape's nominal steps per layer
    layers: int = 0
    scan_every: int = 1         # keep a scan before every n-th layer (and the final one)


@dataclass
class EvaluateConfig:
    horizons: list = field(default_factory=lambda: [3, 6, 9, 12])
    start_layer: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    augment_source: str = "cone"        # "cone" (scan-based) or "oracle" (exact per-step truth)
    oracle: OracleParams = field(default_factory=OracleParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {"oracle": OracleParams, "model": ModelConfig, "train": TrainConfig,
            "generate": GenerateConfig, "evaluate": EvaluateConfig}


def _section(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def load_config(path: str | None, overrides: dict) -> RunConfig:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    top = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    sections = {k: dict(v) for k, v in raw.items() if isinstance(v, dict)}
    bad = set(sections) - set(SECTIONS)
    bad |= set(top) - {"seed", "augment_source"}
    if bad:
        raise ConfigError(f"unknown config entries: {', '.join(sorted(bad))}")

    seed = overrides.get("seed", top.get("seed", 0))
    sections.setdefault("train", {})["seed"] = seed
    if overrides.get("max_steps") is not None:
        sections["train"]["max_steps"] = overrides["max_steps"]
        sections["train"]["select_step"] = min(sections["train"].get("select_step", 300), overrides["max_steps"])
    if overrides.get("shape"):
        sections.setdefault("generate", {})["shape"] = overrides["shape"]
    if overrides.get("horizons"):
        sections.setdefault("evaluate", {})["horizons"] = overrides["horizons"]
    built = {name: _section(cls, sections.get(name, {}), name) for name, cls in SECTIONS.items()}
    source = top.get("augment_source", "cone")
    if source not in ("cone", "oracle"):
        raise ConfigError(f"augment_source must be 'cone' or 'oracle', got {source!r}")
    return RunConfig(seed=int(seed), augment_source=source, **built)


def echo_run(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    """Everything needed to repeat a run, written next to its outputs."""
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": cfg.seed,
        "formats": {"manifest": MANIFEST_VERSION, "checkpoint": CHECKPOINT_FORMAT,
                    "train_log": TRAIN_LOG_HEADER, "metrics": METRICS_HEADER},
        "config": cfg.to_dict(),
    }
    record.update(extra or {})
    with open(out / f"run_{command}.json", "w") as fh:
        json.dump(record, fh, indent=2)


def _manifest(path) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def _load(path) -> ExperimentDataset:
    return load_experiment(_manifest(path))


def _parse_horizons(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"horizons must be a comma list of integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("horizons must be positive")
    return values


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: RunConfig) -> None:
    g = cfg.generate
    ds = generate_experiment(g.shape, cfg.oracle, cfg.seed, particles=g.particles or None,
                             steps=g.steps or None, layers=g.layers or None)
    every = max(1, g.scan_every)
    keep = sorted(set(range(0, ds.layers, every)) | {ds.layers})
    ds.scans = [s for s in ds.scans if s.layer in keep]
    truth = ds.augmented
    ds.augmented = None
    ds.meta["truth"] = TRUTH_FILE
    out = Path(args.out)
    store_augmented(ds, out)
    np.savez(out / TRUTH_FILE, **{f"layer_{l:03d}": a for l, a in enumerate(truth)})
    echo_run(out, "generate", cfg)
    print(f"generated {ds.name}: {ds.grid.n} particles, {ds.layers} layers, "
          f"{sum(ds.steps_per_layer())} steps -> {out}")


def cmd_augment(args, cfg: RunConfig) -> None:
    ds = _load(args.data)
    if cfg.augment_source == "oracle":
        truth = ds.meta.get("truth")
        path = _manifest(args.data).parent / (truth or TRUTH_FILE)
        if not truth or not path.exists():
            raise SprayGNNError(f"no oracle truth stored with {args.data}")
        with np.load(path) as z:
            ds.augmented = [z[f"layer_{l:03d}"] for l in range(ds.layers)]
        ds.meta["augmented_source"] = "oracle"
    else:
        augment_dataset(ds)
    out = Path(args.out) if args.out else _manifest(args.data).parent
    store_augmented(ds, out)
    if out != _manifest(args.data).parent and ds.meta.get("truth"):
        src = _manifest(args.data).parent / ds.meta["truth"]
        if src.exists():
            (out / ds.meta["truth"]).write_bytes(src.read_bytes())
    echo_run(out, "augment", cfg)
    print(f"augmented {ds.snapshot_count()} snapshots ({ds.meta['augmented_source']}) -> {out}")


def cmd_train(args, cfg: RunConfig) -> None:
    datasets = [_load(d) for d in args.data]
    for d, ds in zip(args.data, datasets):
        if ds.augmented is None:
            raise EmptyDataset(f"{d} has no per-step snapshots; run 'augment' first")
    val = _load(args.val) if args.val else None
    out = Path(args.out)
    echo_run(out, "train", cfg, {"data": [str(d) for d in args.data], "val": args.val})

    def progress(row):
        if not args.quiet and (row["step"] % 50 == 0 or row["step"] == cfg.train.max_steps):
            print(f"step {row['step']:6d}  loss {row['train_loss']:.5g}  {row['wall_seconds']:.1f}s", flush=True)

    res = train(datasets, cfg.train, cfg.model, val, out, P_ref=cfg.oracle.P_ref, progress=progress)
    for step, path in sorted(res.checkpoints.items()):
        print(f"checkpoint {step}: {path}")


def cmd_predict(args, cfg: RunConfig) -> None:
    ds = _load(args.data)
    sim = GNNSimulator.from_checkpoint(_checkpoint(args))
    res = rollout(sim, ds, args.start_layer, args.layers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for h, offsets in res.layer_ends.items():
        write_scan(ds.grid, offsets, out / f"pred_layer_{args.start_layer + h:03d}.csv")
    np.savez(out / "predicted.npz", **{f"layer_{args.start_layer + h:03d}": v for h, v in res.layer_ends.items()})
    echo_run(out, "predict", cfg, {"data": str(args.data), "checkpoint": str(args.checkpoint),
                                   "start_layer": args.start_layer, "layers": args.layers,
                                   "model_evaluations": sim.evaluations})
    print(f"{res.steps_executed} rollout steps, predictions for layers "
          f"{args.start_layer + 1}..{args.start_layer + args.layers} -> {out}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    ds = _load(args.data)
    sim = GNNSimulator.from_checkpoint(_checkpoint(args))
    base_sets = [_load(d) for d in args.baseline_data] if args.baseline_data else [ds]
    baseline = fit_baseline(base_sets)
    ev = cfg.evaluate
    table = scaling_analysis(sim, baseline, ds, ev.horizons, ev.start_layer)
    out = Path(args.out)
    table.write_csv(out / "metrics.csv")
    summary = {"experiment": table.experiment, "horizons": table.horizons,
               "gnn_loglog_exponent": table.gnn_exponent, "baseline_log_rate": table.baseline_rate,
               "baseline_consecutive_ratios": table.baseline_ratios, "baseline": asdict(baseline)}
    with open(out / "scaling.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    echo_run(out, "evaluate", cfg, {"data": str(args.data), "checkpoint": str(args.checkpoint)})
    for r in table.rows:
        print(",".join(str(r[k]) for k in METRICS_HEADER))


def cmd_export_plot(args, cfg: RunConfig) -> None:
    from . import plotting
    import csv

    ds = _load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = args.start_layer + args.layers
    if ds.augmented is not None:
        truth = ds.layer_start(target)
    else:
        match = [s for s in ds.scans if s.layer == target]
        if not match:
            raise SprayGNNError(f"no ground truth before layer {target}")
        truth = match[0].offsets
    panels = {f"truth, layer {target}": truth}
    plotting.write_heightmap_csv(ds.grid, truth, out / f"heightmap_truth_{target:03d}.csv")
    if args.checkpoint:
        sim = GNNSimulator.from_checkpoint(args.checkpoint)
        pred = rollout(sim, ds, args.start_layer, args.layers).final
        plotting.write_heightmap_csv(ds.grid, pred, out / f"heightmap_pred_{target:03d}.csv")
        plotting.write_heightmap_csv(ds.grid, pred - truth, out / f"heightmap_error_{target:03d}.csv")
        panels[f"predicted, layer {target}"] = pred
        panels["error (pred - truth)"] = pred - truth
    written = [plotting.plot_heightmaps(ds.grid, panels, out / f"thickness_{target:03d}.png", ds.name)]
    if args.metrics:
        with open(args.metrics) as fh:
            rows = list(csv.DictReader(fh))
        with open(out / "error_curves.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            w.writeheader()
            w.writerows({k: r[k] for k in METRICS_HEADER} for r in rows)
        written.append(plotting.plot_error_curves(rows, out / "error_curves.png"))
    echo_run(out, "export-plot", cfg, {"data": str(args.data), "checkpoint": args.checkpoint})
    for p in written:
        print(p)


def _checkpoint(args) -> Path:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return Path(args.checkpoint)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [oracle], [model], [train], [generate], [evaluate] tables")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="spraygnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="synthetic experiment from the deposition oracle")
    p.add_argument("--shape", choices=sorted(SHAPES))

    p = sub.add_parser("augment", parents=[common], help="per-step snapshots from sparse scans")
    p.add_argument("--data", required=True, help="experiment directory or manifest")

    p = sub.add_parser("train", parents=[common], help="fit the graph network")
    p.add_argument("--data", required=True, nargs="+", help="augmented experiment(s)")
    p.add_argument("--val", help="held-out augmented experiment")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--quiet", action="store_true")

    for name, text in (("predict", "roll the model forward from ground truth"),
                       ("evaluate", "error metrics against horizon for the model and the baseline"),
                       ("export-plot", "thickness maps and error curves")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=name != "export-plot")
        if name != "evaluate":
            p.add_argument("--start-layer", type=int, default=0, help="0-based layer to start from")
            p.add_argument("--layers", type=int, default=1, help="layers to predict")
        if name == "evaluate":
            p.add_argument("--horizons", type=_parse_horizons, help="comma list, e.g. 3,6,9,12")
            p.add_argument("--baseline-data", nargs="+", help="experiments to fit the baseline on")
        if name == "export-plot":
            p.add_argument("--metrics", help="metrics CSV from 'evaluate' to plot")
    return parser


COMMANDS = {"generate": cmd_generate, "augment": cmd_augment, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "export-plot": cmd_export_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.out is None and args.command != "augment":
            raise ConfigError("--out is required")
        overrides = {"seed": args.seed, "max_steps": getattr(args, "max_steps", None),
                     "shape": getattr(args, "shape", None), "horizons": getattr(args, "horizons", None)}
        cfg = load_config(args.config, {k: v for k, v in overrides.items() if v is not None})
        COMMANDS[args.command](args, cfg)
    except SprayGNNError as exc:
        print(f"spraygnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"spraygnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
