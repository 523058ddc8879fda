"""Offline distillation for point-cloud classification.

Phase one runs a frozen teacher over augmented passes of the training set
and records (augmentation parameters, logits) per sample per epoch. Phase
two trains a compact student from those records alone: teacher-student KL
on the current batch plus a negatively weighted self-distillation KL that
pushes consecutive outputs of the same samples apart.
"""

from .augment import AugParams, AugRanges, apply_aug, derive_stream, sample_aug_params
from .autodiff import AdamState, Tensor, adam_step, backward, grad_check, no_grad
from .data import (
    Dataset,
    NeighborIndex,
    PointCloud,
    generate_synthetic_dataset,
    knn_indices,
    load_dataset,
    normalize_cloud,
    save_dataset,
)
from .losses import (
    DistilConfig,
    LossBreakdown,
    cross_entropy_concat,
    kd_teacher_loss,
    self_distil_loss,
    total_loss,
)
from .model import (
    Model,
    ModelConfig,
    StageConfig,
    build_model,
    forward,
    load_model,
    local_embed,
    param_count,
    save_model,
    student_config,
    teacher_config,
)
from .records import (
    EpochSelector,
    RecordSet,
    SoftLabelRecord,
    apply_permutation,
    open_records,
    select_epoch,
    write_records,
)
from .training import (
    BatchPair,
    MetricsLog,
    TrainConfig,
    evaluate,
    export_features,
    train_student,
    train_teacher,
)

__version__ = "0.1.0"
