"""Experiment orchestration shared by the CLI and the acceptance harness."""
from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np

from .bench.finetune import FinetuneConfig, FinetuneResult, finetune, pseudo_label_scenes
from .bench.objects import ObjectSample, extract_objects, finetune_classify
from .bench.protocols import (LabelBudget, SceneSample, sample_limited_annotations,
                              sample_limited_reconstructions)
from .cloud import AugmentParams, PointCloud
from .config import ExperimentConfig
from .distill import (PretrainSample, Teacher, TrainConfig, build_pretrain_sample,
                      generate_pseudo_labels, pretrain, pretrain_head_names, strip_pretrain_head)
from .errors import ConfigError, ProtocolError
from .geom import RgbdFrame
from .net.checkpoint import infer_config
from .net.model import CLS_HEAD, PRE_HEAD, SEG_HEAD, NetConfig, SparseUNet
from .semi import SemiConfig

Scene = tuple[str, PointCloud]


def net_config(cfg: ExperimentConfig) -> NetConfig:
    return NetConfig(levels=cfg.levels, base_channels=cfg.base_channels,
                     teacher_classes=cfg.teacher_classes, task_classes=cfg.task_classes)


def augment_params(cfg: ExperimentConfig) -> AugmentParams | None:
    return AugmentParams(seed=cfg.seed) if cfg.augment else None


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, optimizer=cfg.optimizer, lr=cfg.effective_lr,
                       momentum=cfg.momentum, power=cfg.power, batch_size=cfg.batch_size,
                       augment=augment_params(cfg), seed=cfg.seed)


def finetune_config(cfg: ExperimentConfig) -> FinetuneConfig:
    return FinetuneConfig(epochs=cfg.epochs, optimizer=cfg.optimizer, lr=cfg.effective_lr,
                          momentum=cfg.momentum, power=cfg.power, batch_size=cfg.batch_size,
                          resolution=cfg.resolution, augment=augment_params(cfg), seed=cfg.seed)


def semi_config(cfg: ExperimentConfig) -> SemiConfig:
    return SemiConfig(entropy_weight=cfg.entropy_weight, consistency_weight=cfg.consistency_weight,
                      alpha=cfg.ema_alpha, rampup_epochs=cfg.rampup_epochs, task=cfg.task)


def parse_budget(text: str) -> LabelBudget:
    try:
        return LabelBudget.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- pre-training ---------------------------------------------------------
def pretrain_samples(frames: Sequence[RgbdFrame], teacher: Teacher, resolution: int) -> list[PretrainSample]:
    out = []
    for frame in frames:
        labels = generate_pseudo_labels(teacher, frame)
        out.append(build_pretrain_sample(frame, labels, resolution))
    return out


def run_pretrain(cfg: ExperimentConfig, samples: Sequence[PretrainSample]):
    model = SparseUNet(net_config(cfg), heads=(PRE_HEAD,), seed=cfg.seed)
    return pretrain(model, samples, train_config(cfg), cfg.resolution)


# -- fine-tuning ----------------------------------------------------------
def budget_samples(scenes: Sequence[Scene], budget: LabelBudget, seed: int):
    """Split scenes into (labeled samples, unlabeled samples) under a label budget.

    LA reveals ``budget.value`` points in every scene and leaves no separate
    unlabeled pool; LR fully reveals a subset of scenes and returns the rest,
    with nothing revealed, as the unlabeled pool.
    """
    if budget.kind == "la":
        return [SceneSample(sid, cloud, sample_limited_annotations(sid, len(cloud), int(budget.value), seed,
                                                                   cloud.hard_labels))
                for sid, cloud in scenes], []
    chosen = set(sample_limited_reconstructions([sid for sid, _ in scenes], budget.value, seed))
    labeled, unlabeled = [], []
    for sid, cloud in scenes:
        if sid in chosen:
            labeled.append(SceneSample(sid, cloud, cloud.hard_labels >= 0))
        else:
            unlabeled.append(SceneSample(sid, cloud, np.zeros(len(cloud), dtype=bool)))
    return labeled, unlabeled


def full_samples(scenes: Sequence[Scene]) -> list[SceneSample]:
    return [SceneSample(sid, cloud, cloud.hard_labels >= 0) for sid, cloud in scenes]


def task_model(cfg: ExperimentConfig, init: "OrderedDict[str, np.ndarray] | None") -> SparseUNet:
    """Fresh network, or one initialized from a checkpoint.

    A pre-training checkpoint has its pre-training head stripped first; the
    task head is then taken from the checkpoint if present, else freshly
    initialized by the training routine.
    """
    if init is None:
        return SparseUNet(net_config(cfg), heads=(), seed=cfg.seed)
    state = strip_pretrain_head(init) if pretrain_head_names(init) else init
    shape = infer_config(state, teacher_classes=cfg.teacher_classes, task_classes=cfg.task_classes)
    if shape.levels != cfg.levels or shape.base_channels != cfg.base_channels:
        raise ConfigError(f"checkpoint has levels={shape.levels}, base_channels={shape.base_channels}; "
                          f"config asks for {cfg.levels}, {cfg.base_channels}")
    heads = [h for h in (SEG_HEAD, CLS_HEAD) if f"{h}.weight" in state]
    model = SparseUNet(net_config(cfg), heads=heads, seed=cfg.seed)
    model.load_state(state)
    return model


def run_finetune(cfg: ExperimentConfig, model: SparseUNet, train: Sequence[Scene],
                 eval_scenes: Sequence[Scene], semi: bool = False, self_train: bool = False) -> FinetuneResult:
    """Segmentation fine-tuning under ``cfg.budget``; semi adds the unlabeled losses."""
    budget = parse_budget(cfg.budget)
    labeled, unlabeled = budget_samples(train, budget, cfg.seed)
    if self_train:
        if not unlabeled:
            raise ProtocolError("self-training needs unlabeled scenes (use an lr budget)")
        if not model.has_head(SEG_HEAD):
            raise ProtocolError("self-training needs a model with a segmentation head")
        labeled = labeled + pseudo_label_scenes(model, unlabeled, cfg.resolution, cfg.pseudo_fraction)
    ev = full_samples(eval_scenes) if eval_scenes else full_samples(train)
    return finetune(model, labeled, finetune_config(cfg), ev,
                    semi=semi_config(cfg) if semi else None, unlabeled=unlabeled or None)


def budget_objects(scenes: Sequence[Scene], budget: LabelBudget, seed: int) -> list[ObjectSample]:
    """Objects of the given scenes; under an lr budget only a fraction keeps labels."""
    objs = [o for sid, cloud in scenes for o in extract_objects(cloud, sid)]
    if budget.kind == "la":
        raise ConfigError("classification takes an lr budget (fraction of labeled objects)")
    keep = set(sample_limited_reconstructions([o.name for o in objs], budget.value, seed))
    for o in objs:
        o.labeled = o.name in keep
    return objs


def run_classify(cfg: ExperimentConfig, model: SparseUNet, train: Sequence[Scene],
                 eval_scenes: Sequence[Scene], semi: bool = False) -> FinetuneResult:
    objs = budget_objects(train, parse_budget(cfg.budget), cfg.seed)
    ev = [o for sid, cloud in (eval_scenes or train) for o in extract_objects(cloud, sid)]
    return finetune_classify(model, objs, finetune_config(cfg), ev, semi=semi_config(cfg) if semi else None)
