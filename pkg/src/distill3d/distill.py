"""Knowledge transfer from a 2D scene parser to the 3D network.

A teacher turns each RGB image into per-pixel class distributions. Frames are
lifted to point clouds, every point inherits the distribution of its source
pixel, and the network (with a dedicated pre-training head) is trained to
match those soft targets with a cross-entropy objective. Afterwards the
pre-training head is discarded and the backbone is kept for downstream tasks.
"""
from __future__ import annotations

import logging
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .cloud import AugmentParams, PointCloud, SparseVoxelGrid, augment, collate, voxelize
from .errors import (CheckpointError, DivergenceError, EmptyInputError, InvalidTeacherError,
                     ShapeError)
from .geom import RgbdFrame, lift
from .io import read_slab
from .net import autodiff as ad
from .net.model import PRE_HEAD, NetConfig, SparseUNet
from .net.optim import make_optimizer, poly_lr

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class Teacher(Protocol):
    num_classes: int

    def predict(self, frame: RgbdFrame) -> np.ndarray:
        """``(H, W, C)`` per-pixel class distributions."""


@dataclass
class SyntheticOracleTeacher:
    """Stand-in 2D parser derived from a frame's ground-truth label image.

    Each pixel label is resampled uniformly with probability ``noise``; the
    one-hot maps are optionally box-blurred over ``blur`` pixels and then
    softened with ``softmax(onehot / temperature)``. ``temperature = 0``
    keeps hard one-hot outputs. Pixels without ground truth get a uniform
    distribution.
    """

    num_classes: int = 8
    noise: float = 0.0
    temperature: float = 1.0
    blur: int = 0
    seed: int = 0

    def _rng(self, frame: RgbdFrame) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(frame.name.encode("utf-8"))])

    def predict(self, frame: RgbdFrame) -> np.ndarray:
        if frame.labels is None:
            raise InvalidTeacherError("oracle teacher needs a ground-truth label image")
        c = self.num_classes
        labels = frame.labels.copy()
        known = labels >= 0
        if np.any(labels[known] >= c):
            raise InvalidTeacherError("label image has classes beyond the teacher's range")
        rng = self._rng(frame)
        flip = rng.random(labels.shape) < self.noise
        resampled = rng.integers(0, c, size=labels.shape)
        labels = np.where(flip & known, resampled, labels)
        onehot = np.zeros(labels.shape + (c,))
        rows, cols = np.nonzero(known)
        onehot[rows, cols, labels[known]] = 1.0
        if self.blur > 0:
            onehot = ndimage.uniform_filter(onehot, size=(self.blur, self.blur, 1), mode="nearest")
        if self.temperature > 0:
            z = onehot / self.temperature
            z -= z.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
        else:
            probs = onehot / np.maximum(onehot.sum(axis=-1, keepdims=True), PROB_FLOOR)
        probs[~known] = 1.0 / c
        return probs


@dataclass
class FileTeacher:
    """Serves precomputed SLAB maps stored as ``<root>/<frame name>.slab``."""

    root: Path
    num_classes: int

    def predict(self, frame: RgbdFrame) -> np.ndarray:
        probs = read_slab(Path(self.root) / f"{frame.name}.slab")
        if probs.shape != (frame.width * frame.height, self.num_classes):
            raise InvalidTeacherError(f"{frame.name}: SLAB shape {probs.shape} does not fit the frame")
        return probs.reshape(frame.height, frame.width, self.num_classes)


def parse_teacher(spec: str, num_classes: int, seed: int = 0):
    """``oracle:<noise>,<temperature>[,<blur>]`` or ``file:<dir>``."""
    kind, _, arg = spec.partition(":")
    if kind == "oracle":
        parts = [p for p in arg.split(",") if p] if arg else []
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"bad oracle teacher spec {spec!r}") from exc
        noise = values[0] if values else 0.0
        temp = values[1] if len(values) > 1 else 1.0
        blur = int(values[2]) if len(values) > 2 else 0
        return SyntheticOracleTeacher(num_classes, noise, temp, blur, seed)
    if kind == "file":
        return FileTeacher(Path(arg), num_classes)
    raise ValueError(f"unknown teacher spec {spec!r}")


def check_distributions(probs: np.ndarray, tol: float = 1e-5) -> None:
    if probs.size and (np.any(~np.isfinite(probs)) or probs.min() < 0
                       or np.max(np.abs(probs.sum(axis=-1) - 1.0)) > tol):
        raise InvalidTeacherError("teacher output is not a per-pixel probability distribution")


def generate_pseudo_labels(teacher: Teacher, frame: RgbdFrame) -> np.ndarray:
    probs = np.asarray(teacher.predict(frame), dtype=np.float64)
    if probs.shape[:2] != (frame.height, frame.width):
        raise InvalidTeacherError(f"teacher output {probs.shape} not aligned with {frame.height}x{frame.width}")
    check_distributions(probs)
    return probs


@dataclass
class PretrainSample:
    """A lifted frame: its cloud (with per-point soft labels) and voxelized targets."""

    cloud: PointCloud
    grid: SparseVoxelGrid
    targets: np.ndarray
    name: str = ""


def voxel_targets(grid: SparseVoxelGrid, soft: np.ndarray) -> np.ndarray:
    """Renormalized mean of the member-point distributions of every voxel."""
    m, c = grid.num_voxels, soft.shape[1]
    sums = np.zeros((m, c))
    np.add.at(sums, grid.point_to_voxel, soft)
    return sums / sums.sum(axis=1, keepdims=True)


def lifted_cloud(frame: RgbdFrame, labels: np.ndarray) -> PointCloud:
    if labels.shape[:2] != (frame.height, frame.width):
        raise ShapeError("pseudo-labels are not aligned with the frame")
    cloud = lift(frame)
    if len(cloud) == 0:
        raise EmptyInputError(f"frame {frame.name!r} has no valid depth pixels")
    soft = labels.reshape(-1, labels.shape[-1])[cloud.provenance]
    return PointCloud(cloud.positions, cloud.colors, soft_labels=soft, provenance=cloud.provenance)


def build_pretrain_sample(frame: RgbdFrame, labels: np.ndarray, resolution: int) -> PretrainSample:
    cloud = lifted_cloud(frame, labels)
    grid = voxelize(cloud, resolution)
    return PretrainSample(cloud, grid, voxel_targets(grid, cloud.soft_labels), frame.name)


def soft_cross_entropy(pred, target) -> ad.Tensor:
    """Mean over rows of ``-sum_c t[c] log y[c]`` with ``y`` clamped at 1e-12."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.value.ndim != 2:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    return ad.scale(ad.total(ad.mul(target, ad.log(pred, PROB_FLOOR))), -1.0 / n)


@dataclass
class TrainConfig:
    epochs: int = 10
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    power: float = 0.9
    batch_size: int = 1
    augment: AugmentParams | None = field(default_factory=AugmentParams)
    seed: int = 0


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def pretrain_batch(samples: Sequence[PretrainSample], resolution: int,
                   params: AugmentParams | None, seeds: Sequence[int]):
    """Augment, re-voxelize and collate samples; returns (grid, voxel targets)."""
    grids, targets = [], []
    for s, sd in zip(samples, seeds):
        if params is None:
            grid, tgt = s.grid, s.targets
        else:
            cloud = augment(s.cloud, params.with_seed(sd))
            grid = voxelize(cloud, resolution)
            tgt = voxel_targets(grid, cloud.soft_labels)
        grids.append(grid)
        targets.append(tgt)
    return collate(grids), np.concatenate(targets)


@dataclass
class PretrainResult:
    state: "OrderedDict[str, np.ndarray]"
    losses: list[float]


def pretrain(model: SparseUNet, samples: Sequence[PretrainSample], config: TrainConfig,
             resolution: int | None = None) -> PretrainResult:
    """Fit the backbone plus pre-training head to the soft voxel targets.

    The head is attached if the model lacks one. The returned per-epoch
    losses are means over steps; the state holds every tensor including the
    pre-training head.
    """
    if not samples:
        raise EmptyInputError("pre-training needs at least one sample")
    if not model.has_head(PRE_HEAD):
        model.attach_head(PRE_HEAD, np.random.default_rng([config.seed, 1]))
    resolution = resolution or samples[0].grid.resolution
    opt = make_optimizer(config.optimizer, config.momentum)
    bs = max(1, config.batch_size)
    steps_per_epoch = -(-len(samples) // bs)
    total_steps = config.epochs * steps_per_epoch
    params = OrderedDict((k, v) for k, v in model.params.items())
    losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = epoch_order(len(samples), config.seed, epoch)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            grid, targets = pretrain_batch([samples[i] for i in idx], resolution, config.augment,
                                           [augment_seed(config.seed, epoch, int(i)) for i in idx])
            _, probs = model.forward_segment(grid, head=PRE_HEAD, train=True)
            loss = soft_cross_entropy(probs, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"pre-training loss became {value} at epoch {epoch}, step {step}")
            model.backward(loss)
            opt.step(params, model.grads(), poly_lr(step, total_steps, config.lr, config.power))
            running += value
            step += 1
        losses.append(running / steps_per_epoch)
        log.info("pretrain epoch %d loss %.5f", epoch, losses[-1])
    return PretrainResult(model.state(), losses)


def pretrain_head_names(state) -> list[str]:
    return [k for k in state if k.startswith(PRE_HEAD + ".")]


def strip_pretrain_head(state) -> "OrderedDict[str, np.ndarray]":
    """Drop the pre-training head; all other entries are passed through untouched."""
    head = set(pretrain_head_names(state))
    if not head:
        raise CheckpointError("not a pre-training checkpoint: no pre-training head entries")
    return OrderedDict((k, v) for k, v in state.items() if k not in head)


def pseudo_label_histogram(label_maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-class sum of pseudo-label probability over every pixel of every map."""
    if not label_maps:
        raise EmptyInputError("histogram needs at least one label map")
    c = label_maps[0].shape[-1]
    out = np.zeros(c)
    for m in label_maps:
        out += np.asarray(m, dtype=np.float64).reshape(-1, c).sum(axis=0)
    return out


def histogram_csv(sums: np.ndarray) -> str:
    lines = ["class_id,sum,log10_sum"]
    for c, s in enumerate(sums):
        lg = np.log10(s) if s > 0 else float("-inf")
        lines.append(f"{c},{s:.6f},{lg:.6f}")
    return "\n".join(lines) + "\n"


def fresh_pretrain_model(config: NetConfig, seed: int) -> SparseUNet:
    return SparseUNet(config, heads=(PRE_HEAD,), seed=seed)
