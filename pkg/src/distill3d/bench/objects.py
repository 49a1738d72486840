"""Object-level classification on instances cut out of labeled scene clouds."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..cloud import PointCloud, augment, collate, voxelize
from ..distill import augment_seed, epoch_order, soft_cross_entropy
from ..errors import DivergenceError, EmptyInputError, ProtocolError
from ..net import autodiff as ad
from ..net.model import CLS_HEAD, SparseUNet
from ..net.optim import make_optimizer, poly_lr
from ..semi import SemiBatch, SemiConfig, TeacherStudentPair, semi_train_step
from .finetune import EvalReport, FinetuneConfig, FinetuneResult, onehot
from .metrics import ConfusionMatrix, accumulate, accuracy, miou

log = logging.getLogger(__name__)


@dataclass
class ObjectSample:
    name: str
    cloud: PointCloud
    label: int
    labeled: bool = True


def extract_objects(cloud: PointCloud, scene_id: str, skip=(0, 1), cell: float = 0.1,
                    min_points: int = 30) -> list[ObjectSample]:
    """Split each non-``skip`` class into spatially connected components."""
    if cloud.hard_labels is None:
        raise ProtocolError("object extraction needs labeled points")
    out = []
    lo = cloud.positions.min(axis=0)
    for c in np.unique(cloud.hard_labels):
        if c < 0 or c in skip:
            continue
        idx = np.flatnonzero(cloud.hard_labels == c)
        cells = np.floor((cloud.positions[idx] - lo) / cell).astype(np.int64)
        cells -= cells.min(axis=0)
        occ = np.zeros(tuple(cells.max(axis=0) + 1), dtype=bool)
        occ[tuple(cells.T)] = True
        comp, n = ndimage.label(occ, structure=np.ones((3, 3, 3)))
        member = comp[tuple(cells.T)]
        for k in range(1, n + 1):
            pts = idx[member == k]
            if len(pts) >= min_points:
                out.append(ObjectSample(f"{scene_id}/obj_{len(out)}", cloud.subset(pts), int(c)))
    return out


def _grid(objs, resolution, aug, seeds):
    clouds = [o.cloud if aug is None else augment(o.cloud, aug.with_seed(s)) for o, s in zip(objs, seeds)]
    return collate([voxelize(c, resolution) for c in clouds])


def evaluate_objects(model: SparseUNet, objects: Sequence[ObjectSample], resolution: int) -> EvalReport:
    cm = ConfusionMatrix(model.config.task_classes)
    gt = np.array([o.label for o in objects])
    pred = np.array([int(np.argmax(model.predict_classify(voxelize(o.cloud, resolution))[0])) for o in objects])
    accumulate(cm, gt, pred)
    iou, mean = miou(cm)
    return EvalReport(iou, mean, accuracy(gt, pred), cm.counts.copy())


def finetune_classify(model: SparseUNet, objects: Sequence[ObjectSample], config: FinetuneConfig,
                      eval_objects: Sequence[ObjectSample] | None = None,
                      semi: SemiConfig | None = None) -> FinetuneResult:
    """Supervised (optionally semi-supervised) training of the classification head.

    Objects with ``labeled=False`` only feed the unlabeled losses.
    """
    if not objects:
        raise EmptyInputError("no training objects")
    if not any(o.labeled for o in objects):
        raise ProtocolError("classification needs at least one labeled object")
    if not model.has_head(CLS_HEAD):
        model.attach_head(CLS_HEAD, np.random.default_rng([config.seed, 3]))
    opt = make_optimizer(config.optimizer, config.momentum)
    pair = TeacherStudentPair(model) if semi is not None else None
    pool = list(objects) if semi is not None else [o for o in objects if o.labeled]
    bs = max(1, config.batch_size)
    steps_per_epoch = -(-len(pool) // bs)
    total = config.epochs * steps_per_epoch
    history, step = [], 0
    c = model.config.task_classes
    for epoch in range(config.epochs):
        sums = {"supervised": 0.0, "entropy": 0.0, "consistency": 0.0, "total": 0.0}
        order = epoch_order(len(pool), config.seed, epoch)
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            objs = [pool[i] for i in idx]
            grid = _grid(objs, config.resolution, config.augment,
                         [augment_seed(config.seed, epoch, int(i)) for i in idx])
            lab = np.array([i for i, o in enumerate(objs) if o.labeled], dtype=np.int64)
            targets = onehot(np.array([objs[i].label for i in lab], dtype=np.int64), c)
            lr = poly_lr(step, total, config.lr, config.power)
            if pair is None:
                _, probs = model.forward_classify(grid, train=True)
                loss = soft_cross_entropy(probs, targets)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}")
                model.backward(loss)
                opt.step(model.params, model.grads(), lr)
                sums["supervised"] += loss.item()
                sums["total"] += loss.item()
            else:
                if len(lab) == 0:
                    step += 1
                    continue
                tgrid = _grid(objs, config.resolution, config.augment,
                              [augment_seed(config.seed + 7919, epoch, int(i)) for i in idx])
                sb = _cls_batch(grid, tgrid, lab, targets)
                losses = semi_train_step(pair, sb, semi, epoch, opt, lr)
                if not np.isfinite(losses.total):
                    raise DivergenceError(f"loss became {losses.total} at epoch {epoch}")
                for k in sums:
                    sums[k] += getattr(losses, k)
            step += 1
        history.append({k: v / steps_per_epoch for k, v in sums.items()})
        log.info("classify epoch %d %s", epoch, history[-1])
    report = evaluate_objects(model, eval_objects, config.resolution) if eval_objects else None
    teacher_state = pair.teacher.state() if pair is not None else None
    return FinetuneResult(model.state(), history, report, teacher_state)


def _cls_batch(grid, tgrid, lab, targets):
    def student(model: SparseUNet):
        _, probs = model.forward_classify(grid, train=True)
        sup = soft_cross_entropy(ad.gather_rows(probs, lab), targets)
        return sup, probs, probs

    def teacher(model: SparseUNet) -> np.ndarray:
        return model.predict_classify(tgrid)

    return SemiBatch(student=student, teacher=teacher, labeled_count=len(lab))
