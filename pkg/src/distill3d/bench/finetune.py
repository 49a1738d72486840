"""Supervised and semi-supervised fine-tuning on scenes with sparse labels."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..cloud import AugmentParams, PointCloud, SparseVoxelGrid, augment, collate, voxelize
from ..distill import augment_seed, epoch_order, soft_cross_entropy
from ..errors import DivergenceError, EmptyInputError, ProtocolError
from ..net import autodiff as ad
from ..net.model import SEG_HEAD, SparseUNet
from ..net.optim import make_optimizer, poly_lr
from ..semi import SemiBatch, SemiConfig, TeacherStudentPair, semi_train_step
from .metrics import ConfusionMatrix, accumulate, accuracy, miou
from .protocols import SceneSample, select_confident_pseudo_labels

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    epochs: int = 20
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    power: float = 0.9
    batch_size: int = 1
    resolution: int = 64
    augment: AugmentParams | None = field(default_factory=AugmentParams)
    seed: int = 0


@dataclass
class EvalReport:
    iou: np.ndarray
    miou: float
    accuracy: float
    confusion: np.ndarray


@dataclass
class FinetuneResult:
    state: "OrderedDict[str, np.ndarray]"
    losses: list[dict]
    report: EvalReport | None
    teacher_state: "OrderedDict[str, np.ndarray] | None" = None


def scene_view(scene: SceneSample, resolution: int, params: AugmentParams | None, seed: int):
    cloud = scene.cloud if params is None else augment(scene.cloud, params.with_seed(seed))
    return voxelize(cloud, resolution)


def _labeled_rows(grids: Sequence[SparseVoxelGrid], scenes: Sequence[SceneSample]):
    """Voxel row (in the collated grid) and label of every revealed point."""
    rows, labels = [], []
    offset = 0
    for g, s in zip(grids, scenes):
        idx = np.flatnonzero(s.mask)
        rows.append(g.point_to_voxel[idx] + offset)
        labels.append(s.cloud.hard_labels[idx])
        offset += g.num_voxels
    return np.concatenate(rows), np.concatenate(labels)


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def supervised_loss(probs: ad.Tensor, rows: np.ndarray, labels: np.ndarray) -> ad.Tensor:
    picked = ad.gather_rows(probs, rows)
    return soft_cross_entropy(picked, onehot(labels, probs.shape[1]))


def predict_points(model: SparseUNet, cloud: PointCloud, resolution: int) -> np.ndarray:
    """Eval-mode per-point class probabilities via nearest devoxelization."""
    grid = voxelize(cloud, resolution)
    return model.predict_segment(grid)[grid.point_to_voxel]


def evaluate(model: SparseUNet, scenes: Sequence[SceneSample], resolution: int,
             use_mask: bool = False) -> EvalReport:
    """Score argmax predictions against full ground truth (or only revealed points)."""
    cm = ConfusionMatrix(model.config.task_classes)
    gts, preds = [], []
    for s in scenes:
        pred = np.argmax(predict_points(model, s.cloud, resolution), axis=1)
        gt = s.revealed_labels if use_mask else s.cloud.hard_labels
        accumulate(cm, gt, pred)
        gts.append(gt)
        preds.append(pred)
    iou, mean = miou(cm)
    return EvalReport(iou, mean, accuracy(np.concatenate(gts), np.concatenate(preds)), cm.counts.copy())


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = epoch_order(n, seed, epoch)
    bs = max(1, batch_size)
    return [order[i:i + bs] for i in range(0, n, bs)]


def finetune(model: SparseUNet, scenes: Sequence[SceneSample], config: FinetuneConfig,
             eval_scenes: Sequence[SceneSample] | None = None,
             semi: SemiConfig | None = None,
             unlabeled: Sequence[SceneSample] | None = None) -> FinetuneResult:
    """Train the segmentation head and backbone on the revealed points.

    With ``semi`` set, the student additionally minimizes prediction entropy
    on unlabeled voxels and a consistency loss against an EMA teacher that
    sees a differently augmented view of the same points. Unlabeled data is
    drawn from ``unlabeled`` with a seeded sampler, or, when that is None,
    is the full point set of each labeled batch.
    """
    if not scenes:
        raise EmptyInputError("no training scenes")
    if sum(int(s.mask.sum()) for s in scenes) == 0:
        raise ProtocolError("fine-tuning needs at least one labeled point")
    if not model.has_head(SEG_HEAD):
        model.attach_head(SEG_HEAD, np.random.default_rng([config.seed, 2]))
    opt = make_optimizer(config.optimizer, config.momentum)
    res = config.resolution
    aug = config.augment
    pair = TeacherStudentPair(model) if semi is not None else None
    steps_per_epoch = len(_batches(len(scenes), config.batch_size, config.seed, 0))
    total_steps = config.epochs * steps_per_epoch
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        sums = {"supervised": 0.0, "entropy": 0.0, "consistency": 0.0, "total": 0.0}
        for b, idx in enumerate(_batches(len(scenes), config.batch_size, config.seed, epoch)):
            batch = [scenes[i] for i in idx]
            grids = [scene_view(s, res, aug, augment_seed(config.seed, epoch, int(i))) for s, i in zip(batch, idx)]
            grid = collate(grids)
            rows, labels = _labeled_rows(grids, batch)
            lr = poly_lr(step, total_steps, config.lr, config.power)
            if pair is None:
                _, probs = model.forward_segment(grid, train=True)
                loss = supervised_loss(probs, rows, labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"loss became {value} at epoch {epoch}")
                model.backward(loss)
                opt.step(model.params, model.grads(), lr)
                sums["supervised"] += value
                sums["total"] += value
            else:
                sb = _semi_batch(batch, idx, grid, rows, labels, unlabeled, config, epoch, b)
                losses = semi_train_step(pair, sb, semi, epoch, opt, lr)
                if not np.isfinite(losses.total):
                    raise DivergenceError(f"loss became {losses.total} at epoch {epoch}")
                for k in sums:
                    sums[k] += getattr(losses, k)
            step += 1
        history.append({k: v / steps_per_epoch for k, v in sums.items()})
        log.info("finetune epoch %d %s", epoch, history[-1])
    report = evaluate(model, eval_scenes, res) if eval_scenes else None
    teacher_state = pair.teacher.state() if pair is not None else None
    return FinetuneResult(model.state(), history, report, teacher_state)


def _semi_batch(batch, idx, grid, rows, labels, unlabeled, config: FinetuneConfig, epoch: int, b: int):
    res, aug = config.resolution, config.augment
    if unlabeled:
        rng = np.random.default_rng([config.seed, epoch, b, 0xBA7C])
        pool_idx = rng.choice(len(unlabeled), size=min(len(batch), len(unlabeled)), replace=False)
        u_scenes = [unlabeled[i] for i in pool_idx]
        u_ids = [10_000 + int(i) for i in pool_idx]
    else:
        u_scenes, u_ids = batch, [int(i) for i in idx]
    teacher_seeds = [augment_seed(config.seed + 7919, epoch, i) for i in u_ids]

    def student(model: SparseUNet):
        _, probs = model.forward_segment(grid, train=True)
        sup = supervised_loss(probs, rows, labels)
        if unlabeled:
            ugrids = [scene_view(s, res, aug, augment_seed(config.seed, epoch, i)) for s, i in zip(u_scenes, u_ids)]
            ugrid = collate(ugrids)
            _, uprobs = model.forward_segment(ugrid, train=True)
        else:
            ugrid, uprobs = grid, probs
        return sup, uprobs, ad.gather_rows(uprobs, ugrid.point_to_voxel)

    def teacher(model: SparseUNet) -> np.ndarray:
        tgrid = collate([scene_view(s, res, aug, sd) for s, sd in zip(u_scenes, teacher_seeds)])
        return model.predict_segment(tgrid)[tgrid.point_to_voxel]

    return SemiBatch(student=student, teacher=teacher, labeled_count=len(labels))


def pseudo_label_scenes(model: SparseUNet, scenes: Sequence[SceneSample], resolution: int,
                        fraction: float = 0.2) -> list[SceneSample]:
    """Reveal each scene's most confident predictions as hard pseudo-labels."""
    out = []
    for s in scenes:
        mask, pseudo = select_confident_pseudo_labels(predict_points(model, s.cloud, resolution), fraction)
        cloud = PointCloud(s.cloud.positions, s.cloud.colors, hard_labels=pseudo)
        out.append(SceneSample(s.scene_id, cloud, mask))
    return out
