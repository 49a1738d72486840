"""Sparse-voxel U-Net backbone with segmentation and classification heads."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..cloud import SparseVoxelGrid
from ..errors import CheckpointError, EmptyInputError, StateError
from . import autodiff as ad
from .sparse import OFFSETS, build_hierarchy, downsample, upsample

SEG_HEAD = "seg_head"
CLS_HEAD = "cls_head"
PRE_HEAD = "pre_head"
HEADS = (SEG_HEAD, CLS_HEAD, PRE_HEAD)


@dataclass(frozen=True)
class NetConfig:
    levels: int = 3
    base_channels: int = 16
    kernel_size: int = 3
    teacher_classes: int = 8
    task_classes: int = 8
    in_channels: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")
        if self.kernel_size != 3:
            raise ValueError("only 3x3x3 kernels are supported")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def latent_channels(self) -> int:
        return self.channels(self.levels - 1)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class SparseUNet:
    """Encoder-decoder over sparse voxels.

    Each encoder level is a submanifold convolution, normalization and ReLU;
    levels are joined by 2x max-pooling. The decoder mirrors the encoder,
    copying coarse features to children and concatenating the encoder skip.

    ``params`` maps names to trainable tensors and ``buffers`` holds running
    normalization statistics; both are saved in checkpoints.
    """

    def __init__(self, config: NetConfig, heads=(SEG_HEAD,), seed: int = 0):
        self.config = config
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._recorded = False
        rng = np.random.default_rng(seed)
        self._init_backbone(rng)
        for head in heads:
            self.attach_head(head, rng)

    # -- parameters -----------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ad.Tensor(value, requires_grad=True, name=name)

    def _conv_block(self, prefix: str, f_in: int, f_out: int, rng) -> None:
        k = len(OFFSETS)
        self._add(f"{prefix}.conv.weight", glorot(rng, (k, f_in, f_out), k * f_in, k * f_out))
        self._add(f"{prefix}.norm.scale", np.ones(f_out))
        self._add(f"{prefix}.norm.shift", np.zeros(f_out))
        self.buffers[f"{prefix}.norm.running_mean"] = np.zeros(f_out)
        self.buffers[f"{prefix}.norm.running_var"] = np.ones(f_out)

    def _init_backbone(self, rng) -> None:
        cfg = self.config
        f_in = cfg.in_channels
        for lvl in range(cfg.levels):
            self._conv_block(f"enc{lvl}", f_in, cfg.channels(lvl), rng)
            f_in = cfg.channels(lvl)
        for lvl in reversed(range(cfg.levels - 1)):
            self._conv_block(f"dec{lvl}", cfg.channels(lvl + 1) + cfg.channels(lvl),
                             cfg.channels(lvl), rng)

    def head_width(self, head: str) -> tuple[int, int]:
        cfg = self.config
        if head == SEG_HEAD:
            return cfg.base_channels, cfg.task_classes
        if head == CLS_HEAD:
            return cfg.latent_channels, cfg.task_classes
        if head == PRE_HEAD:
            return cfg.base_channels, cfg.teacher_classes
        raise ValueError(f"unknown head {head!r}")

    def attach_head(self, head: str, rng: np.random.Generator | int | None = None) -> None:
        """Add a freshly initialized linear head; existing parameters are untouched."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        f_in, f_out = self.head_width(head)
        self._add(f"{head}.weight", glorot(rng, (f_in, f_out), f_in, f_out))
        self._add(f"{head}.bias", np.zeros(f_out))

    def detach_head(self, head: str) -> None:
        for suffix in ("weight", "bias"):
            self.params.pop(f"{head}.{suffix}", None)

    def has_head(self, head: str) -> bool:
        return f"{head}.weight" in self.params

    @property
    def heads(self) -> tuple[str, ...]:
        return tuple(h for h in HEADS if self.has_head(h))

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # -- state ----------------------------------------------------------
    def state(self) -> "OrderedDict[str, np.ndarray]":
        """All parameters and buffers as plain arrays (copies)."""
        out = OrderedDict((k, v.value.copy()) for k, v in self.params.items())
        out.update((k, v.copy()) for k, v in self.buffers.items())
        return out

    def load_state(self, state, strict: bool = True) -> None:
        names = set(self.params) | set(self.buffers)
        missing = names - set(state)
        unknown = set(state) - names
        if strict and (missing or unknown):
            raise CheckpointError(f"state mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}")
        for name, value in state.items():
            if name in self.params:
                target = self.params[name].value
            elif name in self.buffers:
                target = self.buffers[name]
            else:
                continue
            if target.shape != np.shape(value):
                raise CheckpointError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def copy(self) -> "SparseUNet":
        twin = SparseUNet.__new__(SparseUNet)
        twin.config = self.config
        twin.params = OrderedDict((k, ad.Tensor(v.value.copy(), requires_grad=True, name=k))
                                  for k, v in self.params.items())
        twin.buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        twin._recorded = False
        return twin

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward --------------------------------------------------------
    def _block(self, prefix: str, x, neighbors, train: bool, grad: bool):
        p = self._view(grad)
        y = ad.sparse_conv(x, p[f"{prefix}.conv.weight"], None, neighbors)
        y = ad.batch_norm(y, p[f"{prefix}.norm.scale"], p[f"{prefix}.norm.shift"], train=train,
                          running_mean=self.buffers[f"{prefix}.norm.running_mean"],
                          running_var=self.buffers[f"{prefix}.norm.running_var"])
        return ad.relu(y)

    def _view(self, grad: bool):
        if grad:
            return self.params
        return {k: ad.Tensor(v.value) for k, v in self.params.items()}

    def encode(self, grid: SparseVoxelGrid, train: bool = True, grad: bool = True):
        """Run the encoder; returns (levels, per-level skip features)."""
        if grid.num_voxels == 0:
            raise EmptyInputError("empty voxel grid")
        cfg = self.config
        levels = build_hierarchy(grid, cfg.levels)
        x = ad.Tensor(grid.features)
        skips = []
        for lvl in range(cfg.levels):
            if lvl > 0:
                x = downsample(levels[lvl - 1], x)
            x = self._block(f"enc{lvl}", x, levels[lvl].neighbors, train, grad)
            skips.append(x)
        if grad:
            self._recorded = True
        return levels, skips

    def decode(self, levels, skips, train: bool = True, grad: bool = True):
        x = skips[-1]
        for lvl in reversed(range(self.config.levels - 1)):
            x = upsample(levels[lvl], x, skips[lvl])
            x = self._block(f"dec{lvl}", x, levels[lvl].neighbors, train, grad)
        return x

    def features(self, grid: SparseVoxelGrid, train: bool = True, grad: bool = True):
        levels, skips = self.encode(grid, train, grad)
        return self.decode(levels, skips, train, grad)

    def head_logits(self, head: str, z, grad: bool = True):
        if not self.has_head(head):
            raise StateError(f"model has no {head}")
        p = self._view(grad)
        return ad.linear(z, p[f"{head}.weight"], p[f"{head}.bias"])

    def forward_segment(self, grid: SparseVoxelGrid, head: str = SEG_HEAD, train: bool = True,
                        grad: bool = True):
        """Per-voxel (logits, probabilities) from the chosen segmentation head."""
        z = self.features(grid, train, grad)
        logits = self.head_logits(head, z, grad)
        return logits, ad.softmax(logits)

    def forward_classify(self, grid: SparseVoxelGrid, train: bool = True, grad: bool = True):
        """Per-sample (logits, probabilities) from the global max-pooled encoding."""
        levels, skips = self.encode(grid, train, grad)
        pooled = ad.segment_max(skips[-1], levels[-1].batch, grid.batch_size)
        logits = self.head_logits(CLS_HEAD, pooled, grad)
        return logits, ad.softmax(logits)

    def predict_segment(self, grid: SparseVoxelGrid, head: str = SEG_HEAD) -> np.ndarray:
        """Eval-mode voxel probabilities without recording a graph."""
        return self.forward_segment(grid, head, train=False, grad=False)[1].value

    def predict_classify(self, grid: SparseVoxelGrid) -> np.ndarray:
        return self.forward_classify(grid, train=False, grad=False)[1].value

    # -- backward -------------------------------------------------------
    def backward(self, loss: ad.Tensor) -> None:
        """Fill ``grad`` of every parameter; unused parameters get zeros."""
        if not self._recorded:
            raise StateError("backward called without a recorded forward pass")
        self.zero_grad()
        loss.backward()
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
        self._recorded = False

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.grad) for k, p in self.params.items())
