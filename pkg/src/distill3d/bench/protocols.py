"""Limited-annotation and limited-reconstruction sampling, and confident pseudo-labels."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from ..cloud import PointCloud
from ..errors import EmptyInputError, ProtocolError


@dataclass(frozen=True)
class LabelBudget:
    """``kind`` is ``"la"`` (points per scene) or ``"lr"`` (fraction of scenes)."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("la", "lr"):
            raise ValueError(f"unknown budget kind {self.kind!r}")
        if self.value <= 0 or (self.kind == "lr" and self.value > 1):
            raise ValueError(f"invalid {self.kind} budget {self.value}")

    @classmethod
    def parse(cls, text: str) -> "LabelBudget":
        """``la:20``, ``lr:0.05`` or ``full``."""
        if text == "full":
            return cls("lr", 1.0)
        kind, _, val = text.partition(":")
        try:
            value = float(val)
        except ValueError as exc:
            raise ValueError(f"bad budget {text!r}") from exc
        if kind == "la":
            if value != int(value):
                raise ValueError("LA budget must be a whole number of points")
            return cls("la", int(value))
        return cls(kind, value)

    def __str__(self) -> str:
        if self.kind == "la":
            return f"la:{int(self.value)}"
        return "full" if self.value == 1.0 else f"lr:{self.value!r}"


@dataclass
class SceneSample:
    """A scene cloud with full ground truth and the subset revealed for training."""

    scene_id: str
    cloud: PointCloud
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool).reshape(len(self.cloud))
        if self.cloud.hard_labels is None:
            raise ProtocolError("scene samples need ground-truth labels")
        if np.any(self.cloud.hard_labels[self.mask] < 0):
            raise ProtocolError("revealed points must carry a label")

    @property
    def revealed_labels(self) -> np.ndarray:
        return np.where(self.mask, self.cloud.hard_labels, -1)


def _scene_rng(scene_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode("utf-8"))])


def sample_limited_annotations(scene_id: str, num_points: int, n_points: int, seed: int,
                               labels: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask revealing ``min(n_points, N)`` distinct points chosen uniformly.

    When ``labels`` is given, only points with a label (>= 0) are eligible.
    """
    if n_points < 1:
        raise ValueError("annotation budget must be >= 1")
    eligible = np.arange(num_points) if labels is None else np.flatnonzero(np.asarray(labels) >= 0)
    k = min(int(n_points), len(eligible))
    pick = _scene_rng(scene_id, seed).choice(len(eligible), size=k, replace=False)
    mask = np.zeros(num_points, dtype=bool)
    mask[eligible[pick]] = True
    return mask


def lr_scene_count(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n + 0.5)))


def sample_limited_reconstructions(scene_ids: Sequence[str], fraction: float, seed: int) -> list[str]:
    """``max(1, round(fraction * n))`` scene ids drawn without replacement, in input order."""
    if not scene_ids:
        raise EmptyInputError("no scenes to subsample")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(scene_ids)
    k = lr_scene_count(n, fraction)
    rng = np.random.default_rng([seed, 0x4C52])
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    return [scene_ids[i] for i in chosen]


def per_class_quota(count: int, fraction: float) -> int:
    """``ceil(fraction * count)`` computed on the exact decimal fraction."""
    return math.ceil(Fraction(str(fraction)) * count)


def select_confident_pseudo_labels(probs: np.ndarray, fraction: float = 0.2):
    """Keep the most confident ``ceil(fraction * n_c)`` points of each predicted class.

    Returns ``(mask, labels)`` where ``labels`` is -1 for unselected points.
    Confidence ties go to the lower point index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(probs)), pred]
    mask = np.zeros(len(probs), dtype=bool)
    for c in np.unique(pred):
        members = np.flatnonzero(pred == c)
        order = np.lexsort((members, -conf[members]))
        mask[members[order[:per_class_quota(len(members), fraction)]]] = True
    return mask, np.where(mask, pred, -1)
