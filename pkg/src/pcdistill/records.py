"""Offline soft-label records: (epoch, sample, augmentation params, logits).

A record file captures multiple inference epochs of a frozen teacher over
the training set in canonical order, each sample freshly augmented from its
own RNG stream. Student training then replays augmentation from the stored
parameters and distills against the stored logits with no teacher in memory.

Record file layout (little-endian):
  magic "PVDR" | version u32 | num_epochs u32 | num_samples u32 |
  num_classes u32 | aug_schema_id u32 | master_seed u64   (32-byte header)
  body: E*S records of [epoch u32][sample_index u32][aug 6xf32][logits Cxf32]
  footer: CRC32 of the body.

Raw logits are stored, not tempered probabilities, so distillation
temperatures can be swept without regenerating records.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .augment import AUG_SCHEMA_ID, AugParams, AugRanges, derive_stream, sample_aug_params
from .errors import ConfigError, ContractError, FormatError, SchemaError

RECORD_MAGIC = b"PVDR"
RECORD_VERSION = 1
HEADER_BYTES = 32


def record_dtype(num_classes: int):
    return np.dtype(
        [
            ("epoch", "<u4"),
            ("sample_index", "<u4"),
            ("aug", "<f4", (6,)),
            ("logits", "<f4", (num_classes,)),
        ]
    )


def file_size_bytes(num_epochs: int, num_samples: int, num_classes: int) -> int:
    """Exact record file size: 32 + E*S*(32 + 4C) + 4."""
    return HEADER_BYTES + num_epochs * num_samples * (32 + 4 * num_classes) + 4


@dataclass
class SoftLabelRecord:
    """One (epoch, sample) row of a record file."""

    epoch: int
    sample_index: int
    aug: AugParams
    teacher_logits: np.ndarray  # (C,) float32, raw/untempered


@dataclass
class EpochRecords:
    """One epoch block, possibly permuted alongside the dataset."""

    epoch: int
    sample_index: np.ndarray  # (S,) int64
    aug: np.ndarray  # (S, 6) float32
    logits: np.ndarray  # (S, C) float32


class RecordSet:
    """In-memory, validated view of a record file (immutable once opened)."""

    def __init__(self, num_epochs, num_samples, num_classes, aug_schema_id, master_seed, aug, logits):
        self.num_epochs = int(num_epochs)
        self.num_samples = int(num_samples)
        self.num_classes = int(num_classes)
        self.aug_schema_id = int(aug_schema_id)
        self.master_seed = int(master_seed)
        self.aug = aug  # (E, S, 6) float32
        self.logits = logits  # (E, S, C) float32

    def record(self, epoch: int, sample_index: int) -> SoftLabelRecord:
        return SoftLabelRecord(
            epoch=epoch,
            sample_index=sample_index,
            aug=AugParams.from_array(self.aug[epoch, sample_index]),
            teacher_logits=self.logits[epoch, sample_index],
        )

    def epoch_block(self, epoch: int) -> EpochRecords:
        return EpochRecords(
            epoch=epoch,
            sample_index=np.arange(self.num_samples, dtype=np.int64),
            aug=self.aug[epoch],
            logits=self.logits[epoch],
        )


def write_records(path, teacher, dataset, num_epochs: int, master_seed: int,
                  ranges: AugRanges | None = None, batch_size: int = 64):
    """Run the teacher over ``num_epochs`` augmented passes and persist records.

    Samples are visited in canonical order without shuffling; each (epoch,
    sample) derives its own parameter stream so records can be regenerated
    and spot-checked independently of generation order.
    """
    from .model import forward
    from .autodiff import no_grad

    if ranges is None:
        ranges = AugRanges()
    num_classes = dataset.num_classes
    if teacher.config.num_classes != num_classes:
        raise ConfigError(
            f"teacher emits {teacher.config.num_classes} classes, dataset has {num_classes}"
        )
    if not np.array_equal(dataset.canonical_order, np.arange(len(dataset))):
        raise ConfigError("record generation requires the dataset in canonical order")

    num_samples = len(dataset)
    dt = record_dtype(num_classes)
    body = np.empty(num_epochs * num_samples, dtype=dt)
    teacher.set_mode("inference")
    row = 0
    for epoch in range(num_epochs):
        for lo in range(0, num_samples, batch_size):
            hi = min(lo + batch_size, num_samples)
            batch = np.empty((hi - lo, dataset.points_per_cloud, 3), dtype=np.float64)
            for j, i in enumerate(range(lo, hi)):
                stream = derive_stream(master_seed, epoch, i)
                params = sample_aug_params(stream, ranges)
                batch[j] = dataset.points[i] * np.asarray(params.scale) + np.asarray(
                    params.translation
                )
                body[row + j]["epoch"] = epoch
                body[row + j]["sample_index"] = i
                body[row + j]["aug"] = params.as_array().astype(np.float32)
            with no_grad():
                logits, _ = forward(teacher, batch)
            body[row : row + (hi - lo)]["logits"] = logits.data.astype(np.float32)
            row += hi - lo

    header = RECORD_MAGIC
    header += np.array(
        [RECORD_VERSION, num_epochs, num_samples, num_classes, AUG_SCHEMA_ID], dtype="<u4"
    ).tobytes()
    header += np.array([master_seed], dtype="<u8").tobytes()
    body_bytes = body.tobytes()
    crc = np.array([zlib.crc32(body_bytes)], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body_bytes)
        fh.write(crc)
    return {
        "bytes_written": len(header) + len(body_bytes) + len(crc),
        "num_epochs": num_epochs,
        "num_samples": num_samples,
        "num_classes": num_classes,
    }


def open_records(path) -> RecordSet:
    """Read and fully validate a record file (magic, sizes, CRC, ordering)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_BYTES or blob[:4] != RECORD_MAGIC:
        raise FormatError("bad magic", offset=0)
    version, num_epochs, num_samples, num_classes, schema = np.frombuffer(
        blob, "<u4", 5, offset=4
    )
    master_seed = int(np.frombuffer(blob, "<u8", 1, offset=24)[0])
    if version != RECORD_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if schema != AUG_SCHEMA_ID:
        raise SchemaError(
            f"augmentation schema {schema} does not match supported schema {AUG_SCHEMA_ID}",
            offset=20,
        )
    dt = record_dtype(int(num_classes))
    expect = file_size_bytes(int(num_epochs), int(num_samples), int(num_classes))
    if len(blob) < expect:
        raise FormatError(
            f"truncated file: {len(blob)} bytes, header implies {expect}", offset=len(blob)
        )
    if len(blob) > expect:
        raise FormatError(
            f"trailing bytes: {len(blob)} bytes, header implies {expect}", offset=expect
        )
    body_bytes = blob[HEADER_BYTES : expect - 4]
    crc_stored = int(np.frombuffer(blob, "<u4", 1, offset=expect - 4)[0])
    if zlib.crc32(body_bytes) != crc_stored:
        raise FormatError("checksum mismatch", offset=expect - 4)
    body = np.frombuffer(body_bytes, dtype=dt).reshape(int(num_epochs), int(num_samples))
    epochs_expect = np.arange(int(num_epochs), dtype=np.uint32)[:, None]
    if not np.array_equal(body["epoch"], np.broadcast_to(epochs_expect, body.shape)):
        raise FormatError("records not grouped by epoch in ascending order", offset=HEADER_BYTES)
    samples_expect = np.arange(int(num_samples), dtype=np.uint32)[None, :]
    if not np.array_equal(body["sample_index"], np.broadcast_to(samples_expect, body.shape)):
        raise FormatError("epoch block not in canonical sample order", offset=HEADER_BYTES)
    if not np.all(np.isfinite(body["logits"])):
        raise FormatError("non-finite logits in body", offset=HEADER_BYTES)
    return RecordSet(
        num_epochs=int(num_epochs),
        num_samples=int(num_samples),
        num_classes=int(num_classes),
        aug_schema_id=int(schema),
        master_seed=master_seed,
        aug=np.array(body["aug"]),
        logits=np.array(body["logits"]),
    )


class EpochSelector:
    """Uniform epoch selection without replacement, reshuffled when exhausted."""

    def __init__(self, num_epochs: int, rng: np.random.Generator):
        if num_epochs < 1:
            raise ContractError("need at least one record epoch")
        self._num_epochs = num_epochs
        self._rng = rng
        self._queue = []

    def next_epoch(self) -> int:
        if not self._queue:
            self._queue = list(self._rng.permutation(self._num_epochs))
        return int(self._queue.pop(0))


def select_epoch(records: RecordSet, selector: EpochSelector) -> EpochRecords:
    """Draw the next epoch block under the selector's cycle policy."""
    return records.epoch_block(selector.next_epoch())


def apply_permutation(block: EpochRecords, permutation) -> EpochRecords:
    """Reorder a block so position j holds the record of sample permutation[j]."""
    perm = np.asarray(permutation, dtype=np.int64)
    n = block.sample_index.shape[0]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ContractError("permutation must be a bijection on 0..S-1")
    return EpochRecords(
        epoch=block.epoch,
        sample_index=block.sample_index[perm],
        aug=block.aug[perm],
        logits=block.logits[perm],
    )
