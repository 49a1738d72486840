"""Sparse voxel geometry: neighbor tables, pooling maps and layer wrappers."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..cloud import SparseVoxelGrid, grid_keys
from ..errors import ShapeError
from . import autodiff as ad

# (-1,-1,-1) ... (1,1,1); entry 26 - k is the negation of entry k.
OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER = 13


def neighbor_table(coords: np.ndarray, batch: np.ndarray, base: int) -> np.ndarray:
    """Row index of each 3x3x3 neighbor of every voxel, or -1 if unoccupied."""
    keys = grid_keys(coords, batch, base)
    if len(keys) > 1 and np.any(keys[1:] <= keys[:-1]):
        raise ShapeError("voxel coordinates must be unique and sorted")
    m = len(coords)
    table = np.full((m, len(OFFSETS)), -1, dtype=np.int64)
    if m == 0:
        return table
    for k, off in enumerate(OFFSETS):
        q = grid_keys(coords + off, batch, base)
        pos = np.minimum(np.searchsorted(keys, q), m - 1)
        table[:, k] = np.where(keys[pos] == q, pos, -1)
    return table


def parent_map(coords: np.ndarray, batch: np.ndarray, base: int):
    """Coarser level at ``coords // 2``: (parent coords, parent batch, child -> parent)."""
    pc = coords // 2
    keys = grid_keys(pc, batch, base)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return pc[first], batch[first], inverse.reshape(-1)


@dataclass
class Level:
    coords: np.ndarray
    batch: np.ndarray
    neighbors: np.ndarray
    to_parent: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.coords)


def build_hierarchy(grid: SparseVoxelGrid, levels: int) -> list[Level]:
    """Neighbor tables for ``levels`` resolutions, finest first."""
    base = grid.resolution + 3
    coords, batch = grid.coords.astype(np.int64), grid.batch.astype(np.int64)
    out: list[Level] = []
    for lvl in range(levels):
        level = Level(coords, batch, neighbor_table(coords, batch, base))
        out.append(level)
        if lvl + 1 < levels:
            coords, batch, level.to_parent = parent_map(coords, batch, base)
    return out


def downsample(level: Level, features) -> ad.Tensor:
    """Max-pool features onto the parent level."""
    if level.to_parent is None:
        raise ShapeError("level has no parent")
    if len(ad.as_tensor(features).value) != level.size:
        raise ShapeError("feature rows do not match the level")
    return ad.segment_max(features, level.to_parent, int(level.to_parent.max()) + 1)


def upsample(level: Level, coarse, skip=None) -> ad.Tensor:
    """Copy each parent's value to its children, then append skip features."""
    if level.to_parent is None:
        raise ShapeError("level has no parent")
    up = ad.gather_rows(coarse, level.to_parent)
    if skip is None:
        return up
    if len(ad.as_tensor(skip).value) != level.size:
        raise ShapeError("skip features do not match the level")
    return ad.concat([up, skip], axis=1)


def sparse_conv(coords: np.ndarray, features, weight, bias=None, batch=None,
                resolution: int | None = None) -> ad.Tensor:
    """Convenience wrapper computing the neighbor table from raw coordinates."""
    coords = np.asarray(coords, dtype=np.int64)
    batch = np.zeros(len(coords), dtype=np.int64) if batch is None else batch
    base = (int(coords.max()) + 3) if resolution is None else resolution + 3
    return ad.sparse_conv(features, weight, bias, neighbor_table(coords, batch, base))
