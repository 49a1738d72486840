"""Entropy minimization and mean-teacher consistency on unlabeled data."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import PairingError, ProtocolError, ShapeError
from .net import autodiff as ad
from .net.model import SparseUNet

SEGMENTATION = "seg"
CLASSIFICATION = "cls"

# unlabeled-loss weights per task: (entropy, consistency)
DEFAULT_WEIGHTS = {CLASSIFICATION: (0.01, 10.0), SEGMENTATION: (0.25, 10.0)}
DEFAULT_EMA_ALPHA = 0.999
DEFAULT_RAMPUP_EPOCHS = 30


@dataclass(frozen=True)
class SemiConfig:
    entropy_weight: float = 0.25
    consistency_weight: float = 10.0
    alpha: float = DEFAULT_EMA_ALPHA
    rampup_epochs: int = DEFAULT_RAMPUP_EPOCHS
    task: str = SEGMENTATION

    def __post_init__(self):
        if self.entropy_weight < 0 or self.consistency_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("EMA alpha must lie in [0, 1]")
        if self.rampup_epochs < 0:
            raise ValueError("ramp-up epochs must be non-negative")
        if self.task not in DEFAULT_WEIGHTS:
            raise ValueError(f"unknown task {self.task!r}")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "SemiConfig":
        ent, cons = DEFAULT_WEIGHTS[task]
        kw = dict(entropy_weight=ent, consistency_weight=cons, task=task)
        kw.update(overrides)
        return cls(**kw)


def _check_rows(pred: ad.Tensor) -> None:
    v = pred.value
    if v.ndim != 2:
        raise ShapeError(f"expected an (N, C) probability matrix, got {v.shape}")
    if v.size and (v.min() < 0 or np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-6):
        raise ShapeError("prediction rows must be probability distributions")


def entropy_loss(pred) -> ad.Tensor:
    """Mean row entropy ``-sum_c y log y`` with ``0 log 0 = 0``."""
    pred = ad.as_tensor(pred)
    _check_rows(pred)
    n = pred.shape[0]
    # log(max(y, tiny)) makes y*log y vanish at y = 0 with a finite gradient
    return ad.scale(ad.total(ad.mul(pred, ad.log(pred, 1e-300))), -1.0 / n)


def consistency_loss(student_pred, teacher_pred) -> ad.Tensor:
    """Mean squared distance between rows; the teacher side is a constant."""
    student = ad.as_tensor(student_pred)
    teacher = np.asarray(ad.as_tensor(teacher_pred).value)
    if student.shape != teacher.shape:
        raise ShapeError(f"student {student.shape} vs teacher {teacher.shape}")
    diff = ad.sub(student, teacher)
    return ad.scale(ad.total(ad.mul(diff, diff)), 1.0 / student.shape[0])


def rampup_weight(epoch: float, rampup_epochs: int = DEFAULT_RAMPUP_EPOCHS) -> float:
    """``exp(-5 (1 - x)^2)`` with ``x = min(epoch / rampup_epochs, 1)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if rampup_epochs == 0:
        return 1.0
    x = min(epoch / rampup_epochs, 1.0)
    return math.exp(-5.0 * (1.0 - x) ** 2)


class TeacherStudentPair:
    """A student network and its exponential-moving-average teacher."""

    def __init__(self, student: SparseUNet, teacher: SparseUNet | None = None):
        self.student = student
        self.teacher = student.copy() if teacher is None else teacher
        self._check()

    def _check(self) -> None:
        s, t = self.student.params, self.teacher.params
        if list(s) != list(t):
            raise PairingError("student and teacher parameter names differ")
        for k in s:
            if s[k].value.shape != t[k].value.shape:
                raise PairingError(f"{k}: student {s[k].value.shape} vs teacher {t[k].value.shape}")


def _blend(target: np.ndarray, source: np.ndarray, alpha: float) -> None:
    if alpha == 0.0:
        target[...] = source
    else:
        target *= alpha
        target += (1.0 - alpha) * source


def ema_update(pair: TeacherStudentPair, alpha: float) -> None:
    """``teacher <- alpha * teacher + (1 - alpha) * student`` for every parameter.

    Normalization running statistics are averaged the same way so the
    teacher's eval-mode statistics track the student's.
    """
    pair._check()
    for name, tp in pair.teacher.params.items():
        _blend(tp.value, pair.student.params[name].value, alpha)
    for name, buf in getattr(pair.teacher, "buffers", {}).items():
        _blend(buf, pair.student.buffers[name], alpha)


@dataclass
class StepLosses:
    supervised: float
    entropy: float
    consistency: float
    total: float


@dataclass
class SemiBatch:
    """What one semi-supervised step sees.

    ``student(model)`` returns ``(supervised_loss, entropy_rows,
    consistency_rows)`` where the row tensors hold the student's predicted
    distributions on unlabeled data (either may be ``None`` when unused).
    ``teacher(model)`` returns the teacher's distributions aligned with
    ``consistency_rows`` as a plain array.
    """

    student: Callable[[SparseUNet], tuple]
    teacher: Callable[[SparseUNet], np.ndarray]
    labeled_count: int = 1


def semi_losses(pair: TeacherStudentPair, batch: SemiBatch, config: SemiConfig, epoch: float):
    """Build the combined objective; returns (total tensor, StepLosses)."""
    if batch.labeled_count < 1:
        raise ProtocolError("semi-supervised step needs at least one labeled element")
    sup, ent_rows, cons_rows = batch.student(pair.student)
    total = sup
    ent_v = cons_v = 0.0
    if config.entropy_weight > 0 and ent_rows is not None:
        ent = entropy_loss(ent_rows)
        ent_v = ent.item()
        total = ad.add(total, ad.scale(ent, config.entropy_weight))
    w_cons = config.consistency_weight * rampup_weight(epoch, config.rampup_epochs)
    if w_cons > 0 and cons_rows is not None:
        cons = consistency_loss(cons_rows, batch.teacher(pair.teacher))
        cons_v = cons.item()
        total = ad.add(total, ad.scale(cons, w_cons))
    return total, StepLosses(sup.item(), ent_v, cons_v, total.item())


def semi_train_step(pair: TeacherStudentPair, batch: SemiBatch, config: SemiConfig, epoch: float,
                    optimizer, lr: float) -> StepLosses:
    """One optimizer step on the student followed by the teacher EMA update."""
    total, losses = semi_losses(pair, batch, config, epoch)
    pair.student.backward(total)
    optimizer.step(pair.student.params, pair.student.grads(), lr)
    ema_update(pair, config.alpha)
    return losses
