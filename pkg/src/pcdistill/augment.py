"""Shape-level augmentation: per-cloud anisotropic scaling and translation.

Parameters are drawn from counter-based RNG streams keyed by
(master_seed, epoch, sample_index), so any single draw can be reproduced
without replaying the sequence that preceded it. That property is what lets
offline records be regenerated and cross-checked out of order.

No per-point randomness exists anywhere in this module: one parameter set
applies to every point of a cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

# wire schema: 6 little-endian f32 in order sx, sy, sz, tx, ty, tz
AUG_SCHEMA_ID = 1

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """Fixed 64-bit mixing function (SplitMix64 finalizer)."""
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class AugParams:
    """Per-cloud scale factors and translation offsets (3 + 3 floats)."""

    scale: tuple
    translation: tuple

    @staticmethod
    def identity() -> "AugParams":
        return AugParams((1.0, 1.0, 1.0), (0.0, 0.0, 0.0))

    def as_array(self) -> np.ndarray:
        return np.array(self.scale + self.translation, dtype=np.float64)

    @staticmethod
    def from_array(a) -> "AugParams":
        a = np.asarray(a, dtype=np.float64)
        return AugParams(tuple(a[:3].tolist()), tuple(a[3:6].tolist()))


@dataclass
class AugRanges:
    """Sampling ranges; the defaults follow common point-cloud practice."""

    scale_lo: float = 0.67
    scale_hi: float = 1.5
    translate_max: float = 0.2
    isotropic: bool = False

    def validate(self):
        if not (0.0 < self.scale_lo <= self.scale_hi):
            raise ParameterError(
                f"scale range must satisfy 0 < lo <= hi, got [{self.scale_lo}, {self.scale_hi}]"
            )
        if self.translate_max < 0.0:
            raise ParameterError(f"translate_max must be >= 0, got {self.translate_max}")


class RngStream:
    """Counter-based stream keyed by (master_seed, epoch, sample_index).

    Identical keys give identical draw sequences regardless of creation
    order; distinct keys give independent Philox streams by construction.
    """

    __slots__ = ("master_seed", "epoch", "sample_index", "_gen")

    def __init__(self, master_seed: int, epoch: int, sample_index: int):
        self.master_seed = int(master_seed) & _MASK64
        self.epoch = int(epoch)
        self.sample_index = int(sample_index)
        key = (
            splitmix64(self.master_seed),
            ((self.epoch & 0xFFFFFFFF) << 32) | (self.sample_index & 0xFFFFFFFF),
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, lo: float, hi: float, n: int = 1) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=n)


def derive_stream(master_seed: int, epoch: int, sample_index: int) -> RngStream:
    """Pure constructor for the (seed, epoch, sample) stream."""
    return RngStream(master_seed, epoch, sample_index)


def sample_aug_params(stream: RngStream, ranges: AugRanges | None = None) -> AugParams:
    """Draw one parameter set; components are uniform and independent."""
    if ranges is None:
        ranges = AugRanges()
    ranges.validate()
    if ranges.isotropic:
        s = float(stream.uniform(ranges.scale_lo, ranges.scale_hi, 1)[0])
        scale = (s, s, s)
    else:
        scale = tuple(stream.uniform(ranges.scale_lo, ranges.scale_hi, 3).tolist())
    t = tuple(stream.uniform(-ranges.translate_max, ranges.translate_max, 3).tolist())
    return AugParams(scale, t)


def apply_aug_points(points: np.ndarray, params: AugParams) -> np.ndarray:
    """p' = p * scale + translation, identical for every point."""
    scale = np.asarray(params.scale, dtype=np.float64)
    trans = np.asarray(params.translation, dtype=np.float64)
    return points * scale + trans


def apply_aug(cloud, params: AugParams):
    """Augment a PointCloud; the label is untouched."""
    from .data import PointCloud

    return PointCloud(points=apply_aug_points(cloud.points, params), label=cloud.label)


def inverse_params(params: AugParams) -> AugParams:
    """Parameters undoing ``params``: scale 1/s, translation -t/s."""
    s = np.asarray(params.scale, dtype=np.float64)
    t = np.asarray(params.translation, dtype=np.float64)
    return AugParams(tuple((1.0 / s).tolist()), tuple((-t / s).tolist()))
