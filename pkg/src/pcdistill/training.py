"""Training loops: teacher pretraining, record-driven student distillation,
evaluation, and feature export.

The student loop never constructs or loads a teacher model; its only
teacher-side input is the record file. Per epoch it selects one record
epoch, draws a single permutation shared by the dataset and the records,
and iterates drop-last batches. For batch k > 0 the previous batch's
samples are re-augmented with batch k's stored parameters and forwarded
again; that replay feeds both the concatenated cross-entropy and the
self-distillation term against the logits cached when batch k-1 trained.

The replay graph and the current-batch graph are disjoint except at the
parameters (the concatenated cross-entropy splits into per-batch shares),
so they are backpropagated one after the other; gradients accumulate and
the peak live graph stays at single-forward size.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugRanges, derive_stream, sample_aug_params, splitmix64
from .autodiff import AdamState, Tensor, adam_step, add, backward, no_grad, scalar_mul
from .data import Dataset
from .errors import ConfigError, ContractError, TrainingError
from .losses import DistilConfig, LossBreakdown, cross_entropy_concat, kd_teacher_loss, self_distil_loss
from .model import Model, ModelConfig, build_model, forward
from .records import EpochSelector, RecordSet, apply_permutation, select_epoch

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    schedule: str = "cosine"  # cosine | linear | exponential
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    distil: DistilConfig = field(default_factory=DistilConfig)
    aug: AugRanges = field(default_factory=AugRanges)
    disable_self_loss: bool = False  # structural off-switch for the replay KL

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.schedule not in ("cosine", "linear", "exponential"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        self.distil.validate()


@dataclass
class BatchPair:
    """Current batch plus the previous batch's samples and cached logits.

    ``prev_*`` and ``cached_prev_logits`` are None on the first batch of an
    epoch; drop-last batching guarantees equal sizes otherwise.
    """

    cur_points: np.ndarray  # (B, N, 3) raw; augmented at use time
    cur_labels: np.ndarray
    cur_aug: np.ndarray  # (B, 6) stored augmentation rows for this batch
    cur_records_logits: np.ndarray  # (B, C) from the record store
    prev_points: np.ndarray | None
    prev_labels: np.ndarray | None
    cached_prev_logits: np.ndarray | None  # detached from B_{k-1}'s own step


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Per-epoch decay from lr_start to lr_end over the run."""
    if config.epochs == 1:
        return config.lr_start
    progress = epoch / (config.epochs - 1)
    if config.schedule == "cosine":
        return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (
            1.0 + math.cos(math.pi * progress)
        )
    if config.schedule == "linear":
        return config.lr_start + (config.lr_end - config.lr_start) * progress
    return config.lr_start * (config.lr_end / config.lr_start) ** progress


class MetricsLog:
    """Row buffer for the per-run metrics CSV (step and eval rows)."""

    COLUMNS = ["kind", "epoch", "step", "ce", "tea", "self", "total", "lr", "oa", "macc"]

    def __init__(self):
        self.rows = []

    def step(self, epoch, step, breakdown: LossBreakdown, lr):
        self.rows.append(
            {
                "kind": "step",
                "epoch": epoch,
                "step": step,
                "ce": f"{breakdown.ce:.10e}",
                "tea": f"{breakdown.tea:.10e}",
                "self": f"{breakdown.self_:.10e}",
                "total": f"{breakdown.total:.10e}",
                "lr": f"{lr:.10e}",
                "oa": "",
                "macc": "",
            }
        )

    def eval(self, epoch, metrics):
        self.rows.append(
            {
                "kind": "eval",
                "epoch": epoch,
                "step": "",
                "ce": "",
                "tea": "",
                "self": "",
                "total": "",
                "lr": "",
                "oa": f"{metrics['OA']:.6f}",
                "macc": f"{metrics['mAcc']:.6f}",
            }
        )

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> dict:
    """Overall accuracy and mean per-class recall, in percent; no augmentation."""
    if len(dataset) == 0:
        raise ContractError("evaluate: empty dataset")
    prev_mode = model.mode
    model.set_mode("inference")
    num_classes = dataset.num_classes
    correct = np.zeros(num_classes, dtype=np.int64)
    total = np.zeros(num_classes, dtype=np.int64)
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            hi = min(lo + batch_size, len(dataset))
            logits, _ = forward(model, dataset.points[lo:hi])
            pred = logits.data.argmax(axis=1)
            labels = dataset.labels[lo:hi]
            for cls in range(num_classes):
                mask = labels == cls
                total[cls] += int(mask.sum())
                correct[cls] += int((pred[mask] == cls).sum())
    model.set_mode(prev_mode)
    oa = 100.0 * correct.sum() / total.sum()
    present = total > 0
    macc = 100.0 * float((correct[present] / total[present]).mean())
    return {"OA": oa, "mAcc": macc}


def _adam(config: TrainConfig) -> AdamState:
    return AdamState(beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_eps)


def _apply_adam(model: Model, state: AdamState, lr: float):
    names = [n for n, _ in model.named_params()]
    params = [t.data for _, t in model.named_params()]
    grads = [
        t.grad if t.grad is not None else np.zeros_like(t.data)
        for _, t in model.named_params()
    ]
    adam_step(params, grads, state, lr, names=names)
    model.zero_grads()


def _augment_batch(points: np.ndarray, aug_rows: np.ndarray) -> np.ndarray:
    """Apply per-sample (scale, translation) rows to a (B, N, 3) batch."""
    scales = aug_rows[:, None, 0:3].astype(np.float64)
    trans = aug_rows[:, None, 3:6].astype(np.float64)
    return points * scales + trans


def train_teacher(
    train_set: Dataset,
    test_set: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    log: MetricsLog | None = None,
) -> Model:
    """Plain cross-entropy pretraining with fresh per-epoch augmentation.

    Returns the model restored to its best test-OA checkpoint.
    """
    config.validate()
    model = build_model(model_config, config.seed)
    state = _adam(config)
    shuffle_rng = np.random.Generator(np.random.Philox(key=(splitmix64(config.seed), 1)))
    aug_seed = splitmix64(config.seed ^ 0xA46)  # separate stream namespace
    best = {"oa": -1.0, "params": None}
    step_index = 0
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        perm = shuffle_rng.permutation(len(train_set))
        n_batches = len(train_set) // config.batch_size
        for k in range(n_batches):
            pos = perm[k * config.batch_size : (k + 1) * config.batch_size]
            batch = np.empty((len(pos), train_set.points_per_cloud, 3))
            for j, p in enumerate(pos):
                stream = derive_stream(aug_seed, epoch, int(train_set.canonical_order[p]))
                params = sample_aug_params(stream, config.aug)
                batch[j] = train_set.points[p] * np.asarray(params.scale) + np.asarray(
                    params.translation
                )
            labels = train_set.labels[pos]
            logits, _ = forward(model, batch)
            ce = cross_entropy_concat(None, logits, None, labels)
            loss_value = ce.item()
            if not np.isfinite(loss_value):
                raise TrainingError(f"non-finite loss at step {step_index}")
            backward(ce)
            _apply_adam(model, state, lr)
            if log is not None:
                log.step(epoch, k, LossBreakdown(loss_value, 0.0, 0.0, loss_value), lr)
            step_index += 1
        metrics = evaluate(model, test_set)
        if log is not None:
            log.eval(epoch, metrics)
        if metrics["OA"] > best["oa"]:
            best = {"oa": metrics["OA"], "params": model.snapshot()}
    if best["params"] is not None:
        model.restore(best["params"])
    model.set_mode("inference")
    return model


def train_student(
    train_set: Dataset,
    test_set: Dataset,
    records: RecordSet,
    model_config: ModelConfig,
    config: TrainConfig,
    log: MetricsLog | None = None,
) -> Model:
    """Record-driven distillation; no teacher model exists in this scope."""
    config.validate()
    if records.num_samples != len(train_set):
        raise ConfigError(
            f"records cover {records.num_samples} samples, dataset has {len(train_set)}"
        )
    if records.num_classes != train_set.num_classes:
        raise ConfigError(
            f"records have {records.num_classes} classes, dataset has {train_set.num_classes}"
        )
    distil = config.distil
    model = build_model(model_config, config.seed)
    state = _adam(config)
    shuffle_rng = np.random.Generator(np.random.Philox(key=(splitmix64(config.seed), 2)))
    selector = EpochSelector(records.num_epochs, shuffle_rng)
    best = {"oa": -1.0, "params": None}
    canon_at = np.empty(len(train_set), dtype=np.int64)
    canon_at[train_set.canonical_order] = np.arange(len(train_set))
    step_index = 0
    warned_self_scale = False

    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        block = select_epoch(records, selector)
        perm = shuffle_rng.permutation(len(train_set))
        permuted = apply_permutation(block, perm)
        carry: BatchPair | None = None  # resets at every epoch boundary
        n_batches = len(train_set) // config.batch_size  # drop-last
        for k in range(n_batches):
            sl = slice(k * config.batch_size, (k + 1) * config.batch_size)
            canonical = permuted.sample_index[sl]
            positions = canon_at[canonical]
            # pairing audit: every consumed (sample, record) pair must agree
            if not np.array_equal(train_set.canonical_order[positions], canonical):
                raise ContractError(
                    f"record/sample pairing broken at epoch {epoch} batch {k}"
                )
            pair = BatchPair(
                cur_points=train_set.points[positions],
                cur_labels=train_set.labels[positions],
                cur_aug=permuted.aug[sl],
                cur_records_logits=permuted.logits[sl].astype(np.float64),
                prev_points=carry.cur_points if carry else None,
                prev_labels=carry.cur_labels if carry else None,
                cached_prev_logits=carry.cached_prev_logits if carry else None,
            )
            n_cur = pair.cur_points.shape[0]
            w_cur = 1.0 if pair.prev_points is None else n_cur / (
                n_cur + pair.prev_points.shape[0]
            )

            # replay graph: previous batch under the current batch's parameters
            self_value = 0.0
            ce_pre_value = 0.0
            if pair.prev_points is not None:
                replay_batch = _augment_batch(pair.prev_points, pair.cur_aug)
                replay_logits, _ = forward(model, replay_batch)
                ce_pre = cross_entropy_concat(None, replay_logits, None, pair.prev_labels)
                replay_total = scalar_mul(ce_pre, 1.0 - w_cur)
                if not config.disable_self_loss:
                    self_t = self_distil_loss(
                        replay_logits,
                        Tensor(pair.cached_prev_logits),
                        distil.t_self,
                        cap=distil.self_kl_cap,
                    )
                    self_value = self_t.item()
                    if distil.beta != 0.0:
                        replay_total = add(replay_total, scalar_mul(self_t, distil.beta))
                ce_pre_value = ce_pre.item()
                backward(replay_total)

            # current-batch graph: CE share plus the teacher term
            cur_batch = _augment_batch(pair.cur_points, pair.cur_aug)
            logits, _ = forward(model, cur_batch)
            ce_cur = cross_entropy_concat(None, logits, None, pair.cur_labels)
            tea_t = kd_teacher_loss(
                logits, Tensor(pair.cur_records_logits), distil.t_tea, distil.kd_direction
            )
            cur_total = scalar_mul(ce_cur, w_cur)
            if distil.alpha != 0.0:
                cur_total = add(cur_total, scalar_mul(tea_t, distil.alpha))
            cached = logits.data.copy()  # detach before backward consumes the tape
            tea_value = tea_t.item()
            ce_cur_value = ce_cur.item()
            backward(cur_total)
            _apply_adam(model, state, lr)

            ce_value = w_cur * ce_cur_value + (1.0 - w_cur) * ce_pre_value
            total_value = ce_value + distil.alpha * tea_value + distil.beta * self_value
            if not np.isfinite(total_value):
                raise TrainingError(f"non-finite loss at step {step_index}")
            if (
                not warned_self_scale
                and ce_value > 0
                and abs(distil.beta * self_value) >= 0.1 * ce_value
            ):
                logger.warning(
                    "self-distillation term |beta*self|=%.3g exceeds 0.1*ce=%.3g at step %d",
                    abs(distil.beta * self_value),
                    0.1 * ce_value,
                    step_index,
                )
                warned_self_scale = True
            if log is not None:
                log.step(
                    epoch,
                    k,
                    LossBreakdown(ce=ce_value, tea=tea_value, self_=self_value, total=total_value),
                    lr,
                )
            pair.cached_prev_logits = None  # consumed; drop the reference
            carry = BatchPair(
                cur_points=pair.cur_points,
                cur_labels=pair.cur_labels,
                cur_aug=pair.cur_aug,
                cur_records_logits=pair.cur_records_logits,
                prev_points=None,
                prev_labels=None,
                cached_prev_logits=cached,
            )
            step_index += 1
        metrics = evaluate(model, test_set)
        if log is not None:
            log.eval(epoch, metrics)
        if metrics["OA"] > best["oa"]:
            best = {"oa": metrics["OA"], "params": model.snapshot()}
    if best["params"] is not None:
        model.restore(best["params"])
    model.set_mode("inference")
    return model


def export_features(model: Model, dataset: Dataset, path, batch_size: int = 64):
    """CSV of pooled features and logits per sample, in canonical order."""
    prev_mode = model.mode
    model.set_mode("inference")
    order = np.argsort(dataset.canonical_order)
    feature_dim = model.config.feature_dim
    num_classes = model.config.num_classes
    header = (
        ["canonical_index", "label"]
        + [f"feat_{i}" for i in range(feature_dim)]
        + [f"logit_{i}" for i in range(num_classes)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        with no_grad():
            for lo in range(0, len(order), batch_size):
                pos = order[lo : lo + batch_size]
                logits, pooled = forward(model, dataset.points[pos])
                for j, p in enumerate(pos):
                    row = [int(dataset.canonical_order[p]), int(dataset.labels[p])]
                    row += [f"{v:.10e}" for v in pooled.data[j]]
                    row += [f"{v:.10e}" for v in logits.data[j]]
                    writer.writerow(row)
    model.set_mode(prev_mode)
