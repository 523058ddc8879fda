"""Loss components for record-driven distillation training.

Three pieces combine into the training objective:

  * classification cross-entropy over the concatenation of the replayed
    previous batch and the current batch,
  * teacher-student KL at temperature T_tea against recorded logits,
    scaled by T_tea^2,
  * self-distillation KL at temperature T_self between a fresh forward of
    the previous batch and the logits cached when that batch trained,
    scaled by T_self^2 and weighted NEGATIVELY in the total.

The KL kernel is written student-distribution-first, exactly as the
method defines it; ``kd_direction="teacher-first"`` switches the
teacher-student term to the conventional direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    clamp_max,
    exp,
    log_softmax_temperature,
    mul,
    reduce_mean,
    reduce_sum,
    scalar_mul,
    sub,
)
from .errors import ContractError, NumericError, ParameterError, TrainingError


@dataclass
class DistilConfig:
    """Loss weights and temperatures; defaults follow the reference recipe."""

    alpha: float = 2.0
    beta: float = -0.01
    t_tea: float = 3.0
    t_self: float = 3.0
    kd_direction: str = "student-first"  # or "teacher-first"
    self_kl_cap: float | None = None

    def validate(self):
        if self.t_tea <= 0 or self.t_self <= 0:
            raise ParameterError("temperatures must be > 0")
        if self.kd_direction not in ("student-first", "teacher-first"):
            raise ParameterError(f"unknown kd_direction {self.kd_direction!r}")


@dataclass
class LossBreakdown:
    """Scalar components of one step; total == ce + alpha*tea + beta*self."""

    ce: float
    tea: float
    self_: float
    total: float


def _check_logits(name: str, logits: Tensor, num_classes=None):
    if logits.data.ndim != 2:
        raise ContractError(f"{name}: expected (n, C) logits, got {logits.data.shape}")
    if num_classes is not None and logits.data.shape[1] != num_classes:
        raise ContractError(
            f"{name}: expected {num_classes} classes, got {logits.data.shape[1]}"
        )
    if not np.all(np.isfinite(logits.data)):
        raise NumericError(f"{name}: non-finite logits")


def _nll_sum(logits: Tensor, labels) -> Tensor:
    """Sum over rows of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.data.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label out of range for {c} classes")
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = reduce_sum(mul(log_softmax_temperature(logits, 1.0), Tensor(onehot)), axis=1)
    return scalar_mul(reduce_sum(picked), -1.0)


def cross_entropy_concat(logits_pre, logits_cur: Tensor, labels_pre, labels_cur) -> Tensor:
    """Mean NLL over the concatenated previous-replay and current samples.

    ``logits_pre`` may be None or empty on the first batch of an epoch; the
    mean then runs over the current batch alone. Normalization is by the
    actual concatenated sample count.
    """
    _check_logits("cross_entropy_concat(cur)", logits_cur)
    n_cur = logits_cur.data.shape[0]
    have_pre = logits_pre is not None and logits_pre.data.shape[0] > 0
    if have_pre:
        _check_logits("cross_entropy_concat(pre)", logits_pre, logits_cur.data.shape[1])
        total = add(_nll_sum(logits_pre, labels_pre), _nll_sum(logits_cur, labels_cur))
        n = logits_pre.data.shape[0] + n_cur
    else:
        total = _nll_sum(logits_cur, labels_cur)
        n = n_cur
    return scalar_mul(total, 1.0 / n)


def _kl_rows(first_logits: Tensor, second_logits: Tensor, temperature: float) -> Tensor:
    """Row-wise KL(softmax(first/T) || softmax(second/T)), summed over rows."""
    lp = log_softmax_temperature(first_logits, temperature)
    lq = log_softmax_temperature(second_logits, temperature)
    p = exp(lp)
    return reduce_sum(mul(p, sub(lp, lq)))


def kd_teacher_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    t_tea: float,
    direction: str = "student-first",
) -> Tensor:
    """Mean temperature-softened KL against recorded teacher logits, x T^2."""
    _check_logits("kd_teacher_loss(student)", student_logits)
    _check_logits("kd_teacher_loss(teacher)", teacher_logits, student_logits.data.shape[1])
    if teacher_logits.requires_grad:
        raise ContractError("teacher logits must not carry gradient")
    if student_logits.data.shape != teacher_logits.data.shape:
        raise ContractError(
            f"logit shapes differ: {student_logits.data.shape} vs {teacher_logits.data.shape}"
        )
    n = student_logits.data.shape[0]
    if direction == "student-first":
        total = _kl_rows(student_logits, teacher_logits, t_tea)
    elif direction == "teacher-first":
        total = _kl_rows(teacher_logits, student_logits, t_tea)
    else:
        raise ParameterError(f"unknown kd_direction {direction!r}")
    return scalar_mul(total, (t_tea * t_tea) / n)


def self_distil_loss(
    replay_logits: Tensor,
    cached_logits: Tensor,
    t_self: float,
    cap: float | None = None,
) -> Tensor:
    """Mean KL between the fresh replay of the previous batch and its cache.

    The cache is the detached logits produced when the previous batch was
    itself the training batch; gradient flows only through replay_logits.
    """
    _check_logits("self_distil_loss(replay)", replay_logits)
    _check_logits("self_distil_loss(cache)", cached_logits, replay_logits.data.shape[1])
    if cached_logits.requires_grad:
        raise ContractError("cached logits must be detached")
    if replay_logits.data.shape != cached_logits.data.shape:
        raise ContractError(
            f"replay/cache shapes differ: {replay_logits.data.shape} vs {cached_logits.data.shape}"
        )
    n = replay_logits.data.shape[0]
    value = scalar_mul(
        _kl_rows(replay_logits, cached_logits, t_self), (t_self * t_self) / n
    )
    if cap is not None:
        value = clamp_max(value, cap)
    return value


def total_loss(ce: Tensor, tea, self_, config: DistilConfig):
    """Weighted sum per the training objective; returns (Tensor, LossBreakdown).

    Zero-weight terms are left out of the graph entirely, so alpha = beta = 0
    reduces the total to the cross-entropy node itself.
    """
    config.validate()
    total = ce
    tea_val = 0.0
    self_val = 0.0
    if tea is not None:
        tea_val = tea.item()
        if config.alpha != 0.0:
            total = add(total, scalar_mul(tea, config.alpha))
    if self_ is not None:
        self_val = self_.item()
        if config.beta != 0.0:
            total = add(total, scalar_mul(self_, config.beta))
    breakdown = LossBreakdown(ce=ce.item(), tea=tea_val, self_=self_val, total=total.item())
    for name, value in (("ce", breakdown.ce), ("tea", breakdown.tea),
                        ("self", breakdown.self_), ("total", breakdown.total)):
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss component: {name}")
    return total, breakdown
