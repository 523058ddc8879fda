"""Graph-convolution point-cloud classifier with teacher and student presets.

The encoder is a max-relative graph convolution stack: a local embedding
(shared linear map of [relative offset, absolute position] edge features,
max-aggregated over each point's neighborhood) followed by one or more
stages of residual graph-conv blocks. The teacher preset is a 3-stage
hierarchy with stride-2 downsampling between stages; the student is a
single wide-neighborhood stage. Readout is global max ++ mean pooling into
a 2-layer classifier head.

Checkpoint layout (little-endian): magic "PVMD" | version u32 | config blob
| parameters as f32 in declaration order | CRC32 of (config + params).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .augment import splitmix64
from .autodiff import (
    Tensor,
    _accum,
    add,
    add_bias,
    concat,
    gather_rows,
    grad_enabled,
    matmul,
    no_grad,
    op_result,
    reduce_max,
    reduce_mean,
    relu,
    reshape,
)
from .errors import ConfigError, DimensionError, FormatError

MODEL_MAGIC = b"PVMD"
MODEL_VERSION = 1


@dataclass
class StageConfig:
    blocks: int
    channels: int
    graph_k: int


@dataclass
class ModelConfig:
    embed_k: int
    stages: list
    num_classes: int
    points_per_cloud: int
    downsample_stride: int = 2  # applied at each stage boundary (ratio 0.5)
    embed_hidden: int = 16
    head_hidden: int = 256

    def stage_point_counts(self):
        counts = [self.points_per_cloud]
        for _ in self.stages[1:]:
            counts.append((counts[-1] + self.downsample_stride - 1) // self.downsample_stride)
        return counts

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not self.stages:
            raise ConfigError("need at least one stage")
        if self.downsample_stride < 1:
            raise ConfigError(f"downsample_stride must be >= 1, got {self.downsample_stride}")
        if self.embed_k > self.points_per_cloud:
            raise ConfigError(
                f"embed_k={self.embed_k} exceeds points_per_cloud={self.points_per_cloud}"
            )
        for stage, count in zip(self.stages, self.stage_point_counts()):
            if stage.graph_k > count:
                raise ConfigError(
                    f"graph_k={stage.graph_k} exceeds stage point count {count}"
                )

    @property
    def feature_dim(self) -> int:
        return 2 * self.stages[-1].channels


def teacher_config(num_classes: int, points_per_cloud: int, **kw) -> ModelConfig:
    """3-stage hierarchical encoder: k=24 embedding, channels 64/128/256, graph k=8."""
    return ModelConfig(
        embed_k=24,
        stages=[StageConfig(1, 64, 8), StageConfig(1, 128, 8), StageConfig(1, 256, 8)],
        num_classes=num_classes,
        points_per_cloud=points_per_cloud,
        **kw,
    )


def student_config(num_classes: int, points_per_cloud: int, **kw) -> ModelConfig:
    """Single-stage encoder: k=48 embedding, 128 channels, graph k=32."""
    return ModelConfig(
        embed_k=48,
        stages=[StageConfig(1, 128, 32)],
        num_classes=num_classes,
        points_per_cloud=points_per_cloud,
        **kw,
    )


def _param_shapes(config: ModelConfig):
    """Parameter (name, shape) pairs in declaration (= checkpoint) order."""
    shapes = []
    h = config.embed_hidden
    c0 = config.stages[0].channels
    shapes.append(("embed.w1", (6, h)))
    shapes.append(("embed.b1", (h,)))
    shapes.append(("embed.w2", (h, c0)))
    shapes.append(("embed.b2", (c0,)))
    prev_c = c0
    for s, stage in enumerate(config.stages):
        c = stage.channels
        if s > 0:
            shapes.append((f"proj{s}.w", (prev_c, c)))
            shapes.append((f"proj{s}.b", (c,)))
        hidden = max(c // 2, 1)
        for b in range(stage.blocks):
            shapes.append((f"block{s}_{b}.w1", (2 * c, hidden)))
            shapes.append((f"block{s}_{b}.b1", (hidden,)))
            shapes.append((f"block{s}_{b}.w2", (hidden, c)))
            shapes.append((f"block{s}_{b}.b2", (c,)))
        prev_c = c
    f = config.feature_dim
    shapes.append(("head.w1", (f, config.head_hidden)))
    shapes.append(("head.b1", (config.head_hidden,)))
    shapes.append(("head.w2", (config.head_hidden, config.num_classes)))
    shapes.append(("head.b2", (config.num_classes,)))
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact scalar parameter count; a pure function of the config."""
    return sum(int(np.prod(shape)) for _, shape in _param_shapes(config))


@dataclass
class Model:
    config: ModelConfig
    params: dict  # name -> Tensor, in declaration order
    mode: str = "train"

    def set_mode(self, mode: str):
        if mode not in ("train", "inference"):
            raise ConfigError(f"mode must be train|inference, got {mode!r}")
        self.mode = mode

    def named_params(self):
        return list(self.params.items())

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, snapshot: dict):
        for name, t in self.params.items():
            np.copyto(t.data, snapshot[name])


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministic uniform fan-in initialization; biases start at zero."""
    config.validate()
    rng = np.random.Generator(np.random.Philox(key=(splitmix64(seed), 0xC0FFEE)))
    params = {}
    for name, shape in _param_shapes(config):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config=config, params=params, mode="train")


# ---------------------------------------------------------------------------
# fused graph ops on the tape
# ---------------------------------------------------------------------------

def _edge_embed_max(points_flat, neigh_flat, w1: Tensor, b1: Tensor) -> Tensor:
    """Max over neighbors of the shared edge-feature linear map (pre-relu)."""
    out, arg = kernels.edge_linear_max(points_flat, neigh_flat, w1.data, b1.data)

    def bwd(node):
        gw, gb = kernels.edge_linear_max_backward(points_flat, neigh_flat, arg, node.grad)
        if w1.requires_grad:
            _accum(w1, gw, fresh=True)
        if b1.requires_grad:
            _accum(b1, gb, fresh=True)

    return op_result(out, (w1, b1), bwd, "edge_embed_max")


def max_relative_features(feat: Tensor, neigh_flat) -> Tensor:
    """Per-channel max over neighbors of feature differences (>= 0, self included)."""
    out, arg = kernels.max_relative(feat.data, neigh_flat)

    def bwd(node):
        if feat.requires_grad:
            g = kernels.max_relative_backward(neigh_flat, arg, node.grad, feat.data.shape[0])
            _accum(feat, g, fresh=True)

    return op_result(out, (feat,), bwd, "max_relative")


def graph_conv_block(feat: Tensor, neigh_flat, w1, b1, w2, b2) -> Tensor:
    """Residual max-relative block: h + MLP([h, max-rel(h)])."""
    if feat.data.shape[1] * 2 != w1.data.shape[0]:
        raise DimensionError(
            f"graph_conv_block: features {feat.data.shape} vs w1 {w1.data.shape}"
        )
    mr = max_relative_features(feat, neigh_flat)
    z = concat([feat, mr], axis=1)
    z = relu(add_bias(matmul(z, w1), b1))
    z = add_bias(matmul(z, w2), b2)
    return add(feat, z)


def _flat_neighbors(points_batched, k):
    """kNN per cloud, with indices offset into the flattened (B*n) row space."""
    B, n, _ = points_batched.shape
    neigh = kernels.knn_batch(points_batched, k)
    offsets = (np.arange(B, dtype=np.int32) * n)[:, None, None]
    return (neigh + offsets).reshape(B * n, k)


def _forward_impl(model: Model, batch: np.ndarray):
    cfg = model.config
    P = model.params
    B, n, _ = batch.shape
    if cfg.embed_k > n:
        raise ConfigError(f"embed_k={cfg.embed_k} exceeds point count {n}")

    pts = batch
    neigh = _flat_neighbors(pts, cfg.embed_k)
    flat_pts = np.ascontiguousarray(pts.reshape(B * n, 3))
    z = relu(_edge_embed_max(flat_pts, neigh, P["embed.w1"], P["embed.b1"]))
    h = relu(add_bias(matmul(z, P["embed.w2"]), P["embed.b2"]))

    for s, stage in enumerate(cfg.stages):
        if s > 0:
            stride = cfg.downsample_stride
            old_n = n
            pts = np.ascontiguousarray(pts[:, ::stride, :])
            n = pts.shape[1]
            keep = (
                np.arange(B, dtype=np.int64)[:, None] * old_n
                + np.arange(0, old_n, stride, dtype=np.int64)[None, :]
            ).reshape(-1)
            h = gather_rows(h, keep)
            h = relu(add_bias(matmul(h, P[f"proj{s}.w"]), P[f"proj{s}.b"]))
        if stage.graph_k > n:
            raise ConfigError(f"graph_k={stage.graph_k} exceeds stage point count {n}")
        neigh = _flat_neighbors(pts, stage.graph_k)
        for b in range(stage.blocks):
            h = graph_conv_block(
                h,
                neigh,
                P[f"block{s}_{b}.w1"],
                P[f"block{s}_{b}.b1"],
                P[f"block{s}_{b}.w2"],
                P[f"block{s}_{b}.b2"],
            )

    c_last = cfg.stages[-1].channels
    h3 = reshape(h, (B, n, c_last))
    pooled = concat([reduce_max(h3, axis=1), reduce_mean(h3, axis=1)], axis=1)
    y = relu(add_bias(matmul(pooled, P["head.w1"]), P["head.b1"]))
    logits = add_bias(matmul(y, P["head.w2"]), P["head.b2"])
    return logits, pooled


def forward(model: Model, batch: np.ndarray):
    """Run the classifier on (B, N, 3) clouds -> (logits B x C, pooled B x F).

    In inference mode no tape is recorded and the result is a pure function
    of (parameters, input).
    """
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[2] != 3:
        raise DimensionError(f"expected (B, N, 3) batch, got {batch.shape}")
    if model.mode == "inference" and grad_enabled():
        with no_grad():
            return _forward_impl(model, batch)
    return _forward_impl(model, batch)


def local_embed(model: Model, points: np.ndarray) -> np.ndarray:
    """Per-point embedding of one cloud (N, 3) -> (N, C0), inference only."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    cfg = model.config
    if cfg.embed_k > points.shape[0]:
        raise ConfigError(f"embed_k={cfg.embed_k} exceeds point count {points.shape[0]}")
    with no_grad():
        neigh = _flat_neighbors(points[None, :, :], cfg.embed_k)
        z = relu(_edge_embed_max(points, neigh, model.params["embed.w1"], model.params["embed.b1"]))
        h = relu(add_bias(matmul(z, model.params["embed.w2"]), model.params["embed.b2"]))
    return h.data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_blob(config: ModelConfig) -> bytes:
    fields = [
        config.embed_k,
        config.num_classes,
        config.points_per_cloud,
        config.downsample_stride,
        config.embed_hidden,
        config.head_hidden,
        len(config.stages),
    ]
    blob = np.array(fields, dtype="<u4").tobytes()
    for stage in config.stages:
        blob += np.array([stage.blocks, stage.channels, stage.graph_k], dtype="<u4").tobytes()
    return blob


def _config_from_blob(blob: bytes, offset: int):
    head = np.frombuffer(blob, "<u4", 7, offset=offset)
    embed_k, num_classes, n_pts, stride, embed_hidden, head_hidden, n_stages = (
        int(x) for x in head
    )
    pos = offset + 28
    stages = []
    for _ in range(n_stages):
        b, c, k = (int(x) for x in np.frombuffer(blob, "<u4", 3, offset=pos))
        stages.append(StageConfig(b, c, k))
        pos += 12
    cfg = ModelConfig(
        embed_k=embed_k,
        stages=stages,
        num_classes=num_classes,
        points_per_cloud=n_pts,
        downsample_stride=stride,
        embed_hidden=embed_hidden,
        head_hidden=head_hidden,
    )
    return cfg, pos


def save_model(model: Model, path):
    cfg_blob = _config_blob(model.config)
    parts = [cfg_blob]
    for _, tensor in model.named_params():
        parts.append(tensor.data.astype("<f4").tobytes())
    payload = b"".join(parts)
    crc = np.array([zlib.crc32(payload)], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(np.array([MODEL_VERSION], dtype="<u4").tobytes())
        fh.write(payload)
        fh.write(crc)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MODEL_MAGIC:
        raise FormatError("bad magic", offset=0)
    version = int(np.frombuffer(blob, "<u4", 1, offset=4)[0])
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    payload = blob[8:-4]
    crc_stored = int(np.frombuffer(blob, "<u4", 1, offset=len(blob) - 4)[0])
    if zlib.crc32(payload) != crc_stored:
        raise FormatError("checksum mismatch", offset=len(blob) - 4)
    cfg, pos = _config_from_blob(blob, 8)
    cfg.validate()
    params = {}
    for name, shape in _param_shapes(cfg):
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(blob) - 4:
            raise FormatError(f"truncated parameters for {name}", offset=pos)
        data = np.frombuffer(blob, "<f4", count, offset=pos).astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True)
        pos = end
    if pos != len(blob) - 4:
        raise FormatError("trailing bytes after parameters", offset=pos)
    return Model(config=cfg, params=params, mode="inference")
