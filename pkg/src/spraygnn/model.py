"""Encode-process-decode graph network predicting per-particle displacement."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import SchemaVersionMismatch, ShapeMismatch
from .graph import EDGE_FEATURES, NODE_FEATURES, SprayGraph

CHECKPOINT_MAGIC = b"SGNN"
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    latent: int = 128
    encoder_hidden_layers: int = 6
    processor_blocks: int = 10
    processor_width: int = 114
    processor_hidden_layers: int = 6
    decoder_hidden_layers: int = 6
    node_in: int = NODE_FEATURES
    edge_in: int = EDGE_FEATURES
    out: int = 3

    def __post_init__(self):
        if self.processor_blocks < 0 or min(self.latent, self.processor_width, self.node_in,
                                            self.edge_in, self.out) <= 0:
            raise ValueError("model dimensions must be positive")


def _mlp_shapes(prefix: str, n_in: int, width: int, hidden: int, n_out: int) -> list[tuple[str, tuple]]:
    dims = [n_in] + [width] * hidden + [n_out]
    shapes = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes.append((f"{prefix}/w{i}", (a, b)))
        shapes.append((f"{prefix}/b{i}", (b,)))
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list of every trainable tensor."""
    L = cfg.latent
    shapes = _mlp_shapes("enc_node", cfg.node_in, L, cfg.encoder_hidden_layers, L)
    shapes += _mlp_shapes("enc_edge", cfg.edge_in, L, cfg.encoder_hidden_layers, L)
    for m in range(cfg.processor_blocks):
        shapes += _mlp_shapes(f"proc{m:02d}/edge", 2 * L, cfg.processor_width, cfg.processor_hidden_layers, L)
        shapes += _mlp_shapes(f"proc{m:02d}/node", 3 * L, cfg.processor_width, cfg.processor_hidden_layers, L)
    shapes += _mlp_shapes("dec_node", L, L, cfg.decoder_hidden_layers, cfg.out)
    return shapes


class ModelParams:
    """Named, ordered collection of parameter tensors."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(cfg):
            if len(shape) == 2:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                values = rng.uniform(-limit, limit, size=shape)
            else:
                values = np.zeros(shape)
            tensors[name] = ad.parameter(values, name=name)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: ad.parameter(v.values.copy(), name=k) for k, v in self.tensors.items()})


def mlp(params: ModelParams, prefix: str, x: ad.Tensor, n_layers: int) -> ad.Tensor:
    """Affine layers with ReLU between them and a linear output."""
    for i in range(n_layers):
        x = ad.affine(x, params[f"{prefix}/w{i}"], params[f"{prefix}/b{i}"], relu_out=i < n_layers - 1)
    return x


class LatentGraph:
    def __init__(self, nodes: ad.Tensor, edges: ad.Tensor, senders, receivers, skip: ad.Tensor):
        self.nodes = nodes
        self.edges = edges
        self.senders = senders
        self.receivers = receivers
        self.skip = skip


def _check(graph: SprayGraph, cfg: ModelConfig) -> None:
    if graph.node_features.shape[1] != cfg.node_in:
        raise ShapeMismatch(f"{graph.node_features.shape[1]} node features, model expects {cfg.node_in}")
    if graph.edge_features.shape[1] != cfg.edge_in:
        raise ShapeMismatch(f"{graph.edge_features.shape[1]} edge features, model expects {cfg.edge_in}")
    n = graph.n_nodes
    if len(graph.senders) != graph.edge_features.shape[0] or len(graph.receivers) != len(graph.senders):
        raise ShapeMismatch("edge index and feature counts differ")
    if len(graph.senders) and max(graph.senders.max(), graph.receivers.max()) >= n:
        raise ShapeMismatch("edge endpoint beyond node count")


def encode(graph: SprayGraph, params: ModelParams) -> LatentGraph:
    cfg = params.cfg
    _check(graph, cfg)
    depth = cfg.encoder_hidden_layers + 1
    v = mlp(params, "enc_node", ad.constant(graph.node_features), depth)
    e = mlp(params, "enc_edge", ad.constant(graph.edge_features), depth)
    return LatentGraph(v, e, graph.senders, graph.receivers, v)


def process(g: LatentGraph, params: ModelParams) -> LatentGraph:
    cfg = params.cfg
    depth = cfg.processor_hidden_layers + 1
    n = g.nodes.shape[0]
    v, e = g.nodes, g.edges
    for m in range(cfg.processor_blocks):
        diff = ad.sub(ad.gather_rows(v, g.receivers), ad.gather_rows(v, g.senders))
        e_new = mlp(params, f"proc{m:02d}/edge", ad.concat_cols([e, diff]), depth)
        agg = ad.segment_sum(e_new, g.receivers, n)
        v_new = mlp(params, f"proc{m:02d}/node", ad.concat_cols([v, agg, g.skip]), depth)
        e = ad.add(e, e_new)
        v = ad.add(v, v_new)
    return LatentGraph(v, e, g.senders, g.receivers, g.skip)


def decode(g: LatentGraph, params: ModelParams, n_wall: int) -> ad.Tensor:
    """(n_wall, 3) displacement in normalized units; the effector row is dropped."""
    out = mlp(params, "dec_node", g.nodes, params.cfg.decoder_hidden_layers + 1)
    return ad.gather_rows(out, np.arange(n_wall))


def forward(graph: SprayGraph, params: ModelParams) -> ad.Tensor:
    return decode(process(encode(graph, params), params), params, graph.n_wall)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, sidecar: dict | None = None) -> Path:
    """Binary tensor file plus a ``.json`` sidecar holding config and extras."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_FORMAT))
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.values.ndim))
            fh.write(struct.pack(f"<{t.values.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    meta = {"checkpoint_format": CHECKPOINT_FORMAT, "model": asdict(params.cfg)}
    meta.update(sidecar or {})
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2)
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise SchemaVersionMismatch(f"{path}: not a checkpoint file")
    (fmt,) = struct.unpack_from("<I", data, 4)
    if fmt != CHECKPOINT_FORMAT:
        raise SchemaVersionMismatch(f"{path}: checkpoint format {fmt}, expected {CHECKPOINT_FORMAT}")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
    return out


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    cfg = ModelConfig(**meta["model"])
    arrays = read_tensors(path)
    expected = param_shapes(cfg)
    if [n for n, _ in expected] != list(arrays):
        raise SchemaVersionMismatch(f"{path}: tensor names do not match the model config")
    for name, shape in expected:
        if arrays[name].shape != shape:
            raise ShapeMismatch(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    tensors = {n: ad.parameter(arrays[n], name=n) for n, _ in expected}
    return ModelParams(cfg, tensors), meta
