"""Point-cloud datasets: synthetic generation, normalization, kNN, file IO.

The synthetic generator is the desk-scale stand-in for a real benchmark
corpus. Each class is a parametric surface with per-cloud dimension jitter
(aspect ratios, radii) so that classes overlap enough to make the
classification problem nontrivial for small models. Coordinates are
quantized to float32 at creation so the on-disk format round-trips exactly.

Dataset file layout (little-endian):
  magic "PVDS" | version u32 | num_samples u32 | num_classes u32 |
  points_per_cloud u32 | per sample: label u32, canonical_index u32,
  points 3*N f32 | CRC32 of the sample section as footer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .augment import splitmix64
from .errors import DataError, FormatError, ParameterError

DATASET_MAGIC = b"PVDS"
DATASET_VERSION = 1

SHAPE_NAMES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "helix", "pyramid")


@dataclass
class PointCloud:
    """N x 3 float64 point set with a class label."""

    points: np.ndarray
    label: int


@dataclass
class Dataset:
    """Stack of same-size clouds with a fixed canonical sample order.

    ``canonical_order[pos]`` is the canonical index of the cloud stored at
    ``pos``; generated datasets are stored in canonical order (identity).
    """

    points: np.ndarray  # (S, N, 3) float64
    labels: np.ndarray  # (S,) int64
    class_names: list
    split: str
    canonical_order: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.canonical_order is None:
            self.canonical_order = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> PointCloud:
        return PointCloud(points=self.points[i], label=int(self.labels[i]))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def points_per_cloud(self) -> int:
        return self.points.shape[1]


# ---------------------------------------------------------------------------
# normalization and kNN
# ---------------------------------------------------------------------------

def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale the max point norm to 1.

    Idempotent and translation-invariant; a degenerate cloud (all points
    coincident) is centered but not scaled.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
        raise DataError(f"expected (N, 3) points, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise DataError("non-finite coordinates in point cloud")
    centered = points - points.mean(axis=0)
    max_norm = np.sqrt((centered * centered).sum(axis=1).max())
    if max_norm > 1e-30:
        centered = centered / max_norm
    return centered


@dataclass
class NeighborIndex:
    """Row i: i itself first, then the k-1 nearest other points."""

    indices: np.ndarray  # (N, k) int32
    k: int


def knn_indices(points: np.ndarray, k: int) -> NeighborIndex:
    """Exact brute-force kNN with (distance, index) ascending tie order."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    idx = kernels.knn_batch(points[None, :, :], k)[0]
    return NeighborIndex(indices=idx, k=k)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _sample_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    v /= np.sqrt((v * v).sum(axis=1, keepdims=True))
    return v


def _sample_cube(rng, n):
    hx, hy, hz = rng.uniform(0.5, 1.0, 3)
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, n)
    v = rng.uniform(-1.0, 1.0, n)
    pts = np.empty((n, 3))
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    ax = face // 2  # 0: x faces, 1: y faces, 2: z faces
    pts[ax == 0] = np.c_[sign[ax == 0] * hx, u[ax == 0] * hy, v[ax == 0] * hz]
    pts[ax == 1] = np.c_[u[ax == 1] * hx, sign[ax == 1] * hy, v[ax == 1] * hz]
    pts[ax == 2] = np.c_[u[ax == 2] * hx, v[ax == 2] * hy, sign[ax == 2] * hz]
    return pts


def _sample_cylinder(rng, n):
    r = rng.uniform(0.35, 0.9)
    h = rng.uniform(0.4, 1.1)  # half-height
    lateral = 2.0 * np.pi * r * 2.0 * h
    caps = 2.0 * np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    z = rng.uniform(-h, h, n)
    rad = r * np.sqrt(rng.uniform(size=n))
    cap_sign = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    pts = np.where(
        on_side[:, None],
        np.c_[r * np.cos(theta), r * np.sin(theta), z],
        np.c_[rad * np.cos(theta), rad * np.sin(theta), cap_sign * h],
    )
    return pts


def _sample_cone(rng, n):
    r = rng.uniform(0.5, 1.0)
    h = rng.uniform(0.8, 1.6)
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    s = np.sqrt(rng.uniform(size=n))  # density grows toward the base rim
    rad_base = r * np.sqrt(rng.uniform(size=n))
    pts = np.where(
        on_side[:, None],
        np.c_[r * s * np.cos(theta), r * s * np.sin(theta), h * (1.0 - s) - h / 2.0],
        np.c_[rad_base * np.cos(theta), rad_base * np.sin(theta), np.full(n, -h / 2.0)],
    )
    return pts


def _sample_torus(rng, n):
    big_r = rng.uniform(0.55, 0.85)
    small_r = big_r * rng.uniform(0.25, 0.55)
    u = rng.uniform(0.0, 2.0 * np.pi, n)
    v = rng.uniform(0.0, 2.0 * np.pi, n)
    ring = big_r + small_r * np.cos(v)
    return np.c_[ring * np.cos(u), ring * np.sin(u), small_r * np.sin(v)]


def _sample_plane(rng, n):
    hx = rng.uniform(0.5, 1.2)
    hy = rng.uniform(0.5, 1.2)
    return np.c_[rng.uniform(-hx, hx, n), rng.uniform(-hy, hy, n), np.zeros(n)]


def _sample_helix(rng, n):
    r = rng.uniform(0.5, 0.9)
    turns = rng.uniform(1.5, 2.8)
    hz = rng.uniform(0.8, 1.6)
    t = rng.uniform(0.0, 1.0, n)
    ang = 2.0 * np.pi * turns * t
    return np.c_[r * np.cos(ang), r * np.sin(ang), hz * (t - 0.5)]


def _sample_pyramid(rng, n):
    b = rng.uniform(0.5, 1.0)  # base half-extent
    h = rng.uniform(0.7, 1.5)
    apex = np.array([0.0, 0.0, h / 2.0])
    z0 = -h / 2.0
    corners = np.array([[b, b, z0], [-b, b, z0], [-b, -b, z0], [b, -b, z0]])
    side_area = 4.0 * (0.5 * (2.0 * b) * np.sqrt(h * h + b * b))
    base_area = (2.0 * b) ** 2
    on_side = rng.uniform(size=n) < side_area / (side_area + base_area)
    face = rng.integers(0, 4, n)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    # fold (u, v) into the unit triangle
    flip = u + v > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    a = corners[face]
    c = corners[(face + 1) % 4]
    tri = a + u[:, None] * (c - a) + v[:, None] * (apex - a)
    base = np.c_[rng.uniform(-b, b, n), rng.uniform(-b, b, n), np.full(n, z0)]
    return np.where(on_side[:, None], tri, base)


_SAMPLERS = (
    _sample_sphere,
    _sample_cube,
    _sample_cylinder,
    _sample_cone,
    _sample_torus,
    _sample_plane,
    _sample_helix,
    _sample_pyramid,
)


def _cloud_rng(seed: int, split_tag: int, label: int, instance: int):
    key = (splitmix64(seed) ^ splitmix64(split_tag + 1), (label << 32) | instance)
    return np.random.Generator(np.random.Philox(key=key))


def generate_synthetic_dataset(
    num_classes: int,
    per_class_train: int,
    per_class_test: int,
    points_per_cloud: int,
    seed: int,
):
    """Deterministic desk-scale datasets; returns (train, test).

    Clouds are surface samples of the first ``num_classes`` library shapes,
    normalized, f32-quantized, and stored class-major in canonical order.
    """
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise ParameterError(f"num_classes must be in [2, {len(SHAPE_NAMES)}], got {num_classes}")
    if points_per_cloud < 1 or per_class_train < 1 or per_class_test < 0:
        raise ParameterError("per-class counts and points_per_cloud must be positive")

    names = list(SHAPE_NAMES[:num_classes])

    def build(split_tag, split_name, per_class):
        total = num_classes * per_class
        pts = np.empty((total, points_per_cloud, 3), dtype=np.float64)
        labels = np.empty(total, dtype=np.int64)
        pos = 0
        for label in range(num_classes):
            sampler = _SAMPLERS[label]
            for inst in range(per_class):
                rng = _cloud_rng(seed, split_tag, label, inst)
                raw = sampler(rng, points_per_cloud)
                norm = normalize_cloud(raw)
                pts[pos] = norm.astype(np.float32).astype(np.float64)
                labels[pos] = label
                pos += 1
        return Dataset(points=pts, labels=labels, class_names=names, split=split_name)

    train = build(0, "train", per_class_train)
    test = build(1, "test", per_class_test)
    return train, test


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _sample_dtype(n_points: int):
    return np.dtype(
        [("label", "<u4"), ("canonical", "<u4"), ("points", "<f4", (n_points, 3))]
    )


def save_dataset(dataset: Dataset, path):
    header = DATASET_MAGIC
    header += np.array(
        [DATASET_VERSION, len(dataset), dataset.num_classes, dataset.points_per_cloud],
        dtype="<u4",
    ).tobytes()
    body = np.empty(len(dataset), dtype=_sample_dtype(dataset.points_per_cloud))
    body["label"] = dataset.labels.astype("<u4")
    body["canonical"] = dataset.canonical_order.astype("<u4")
    body["points"] = dataset.points.astype("<f4")
    body_bytes = body.tobytes()
    crc = np.array([zlib.crc32(body_bytes)], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body_bytes)
        fh.write(crc)


def load_dataset(path, split: str = "train") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != DATASET_MAGIC:
        raise FormatError("bad magic", offset=0)
    version, num_samples, num_classes, n_points = np.frombuffer(blob, "<u4", 4, offset=4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    dt = _sample_dtype(int(n_points))
    body_size = int(num_samples) * dt.itemsize
    expect = 20 + body_size + 4
    if len(blob) != expect:
        raise FormatError(
            f"truncated or oversized file: {len(blob)} bytes, expected {expect}",
            offset=min(len(blob), expect),
        )
    body_bytes = blob[20 : 20 + body_size]
    crc_stored = int(np.frombuffer(blob, "<u4", 1, offset=20 + body_size)[0])
    if zlib.crc32(body_bytes) != crc_stored:
        raise FormatError("checksum mismatch", offset=20 + body_size)
    body = np.frombuffer(body_bytes, dtype=dt)
    labels = body["label"].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(
            f"label {labels[bad]} out of range for {num_classes} classes (sample {bad})",
            offset=20 + bad * dt.itemsize,
        )
    canonical = body["canonical"].astype(np.int64)
    if not np.array_equal(np.sort(canonical), np.arange(num_samples)):
        raise FormatError("canonical_order is not a permutation of 0..S-1", offset=20)
    names = [SHAPE_NAMES[i] if i < len(SHAPE_NAMES) else f"class_{i}" for i in range(num_classes)]
    return Dataset(
        points=body["points"].astype(np.float64),
        labels=labels,
        class_names=names,
        split=split,
        canonical_order=canonical,
    )
