"""Point clouds, sparse voxelization, devoxelization and augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import EmptyInputError, ShapeError

UNLABELED = -1


@dataclass
class PointCloud:
    """Per-point arrays sharing a leading dimension N.

    ``hard_labels`` uses -1 for unlabeled points. ``soft_labels`` rows are
    categorical distributions. ``provenance`` maps each point back to the
    row-major pixel index it was lifted from.
    """

    positions: np.ndarray
    colors: np.ndarray
    hard_labels: np.ndarray | None = None
    soft_labels: np.ndarray | None = None
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.hard_labels is not None:
            self.hard_labels = np.asarray(self.hard_labels, dtype=np.int64).reshape(n)
            if np.any(self.hard_labels < UNLABELED):
                raise ShapeError("hard labels must be -1 or a class index")
        if self.soft_labels is not None:
            self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
            if self.soft_labels.ndim != 2 or len(self.soft_labels) != n:
                raise ShapeError(f"soft labels {self.soft_labels.shape} for {n} points")
            if n and np.max(np.abs(self.soft_labels.sum(axis=1) - 1.0)) > 1e-5:
                raise ShapeError("soft label rows must sum to 1")
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return PointCloud(
            positions=self.positions[index],
            colors=self.colors[index],
            hard_labels=pick(self.hard_labels),
            soft_labels=pick(self.soft_labels),
            provenance=pick(self.provenance),
        )


@dataclass
class SparseVoxelGrid:
    """Occupied voxels of a cubic grid with side ``resolution``.

    ``coords`` are unique and sorted lexicographically by (batch, x, y, z).
    ``origin`` and ``scale`` record how point positions were mapped into
    grid units: ``(p - origin) * scale``. Batched grids carry one origin and
    scale row per sample and a per-point ``point_batch``.
    """

    resolution: int
    coords: np.ndarray
    features: np.ndarray
    point_to_voxel: np.ndarray
    origin: np.ndarray
    scale: np.ndarray
    batch: np.ndarray | None = None
    point_batch: np.ndarray | None = None

    def __post_init__(self):
        m = len(self.coords)
        if self.batch is None:
            self.batch = np.zeros(m, dtype=np.int64)
        if self.point_batch is None:
            self.point_batch = np.zeros(len(self.point_to_voxel), dtype=np.int64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(-1, 3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def num_points(self) -> int:
        return len(self.point_to_voxel)

    @property
    def batch_size(self) -> int:
        return len(self.scale)

    def normalized_positions(self, positions: np.ndarray) -> np.ndarray:
        """Positions in continuous grid units, using each point's sample transform."""
        b = self.point_batch
        return (positions - self.origin[b]) * self.scale[b][:, None]


def grid_keys(coords: np.ndarray, batch: np.ndarray, base: int) -> np.ndarray:
    """Scalar keys that order like lexicographic (batch, x, y, z).

    Coordinates may lie in ``[-1, base - 1)``; the +1 shift keeps
    out-of-grid neighbor queries distinct.
    """
    c = coords.astype(np.int64) + 1
    return ((batch.astype(np.int64) * base + c[:, 0]) * base + c[:, 1]) * base + c[:, 2]


def _normalize(positions: np.ndarray, resolution: int):
    lo = positions.min(axis=0)
    extent = float((positions.max(axis=0) - lo).max())
    scale = resolution / extent if extent > 0 else 0.0
    return lo, scale


def voxelize(cloud: PointCloud, resolution: int) -> SparseVoxelGrid:
    """Discretize a cloud into a sparse grid of mean colors in [-1, 1].

    The cloud's bounding box is scaled uniformly so its longest side spans
    ``[0, resolution)``; points on the far boundary clamp into the last cell.
    """
    if len(cloud) == 0:
        raise EmptyInputError("cannot voxelize an empty cloud")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    origin, scale = _normalize(cloud.positions, resolution)
    cell = np.floor((cloud.positions - origin) * scale).astype(np.int64)
    np.clip(cell, 0, resolution - 1, out=cell)
    keys = (cell[:, 0] * resolution + cell[:, 1]) * resolution + cell[:, 2]
    uniq, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    coords = np.stack([uniq // (resolution * resolution), (uniq // resolution) % resolution,
                       uniq % resolution], axis=1)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    mean = np.stack([np.bincount(inverse, weights=cloud.colors[:, k], minlength=m)
                     for k in range(3)], axis=1) / counts[:, None]
    return SparseVoxelGrid(
        resolution=resolution,
        coords=coords,
        features=2.0 * mean - 1.0,
        point_to_voxel=inverse.astype(np.int64),
        origin=origin,
        scale=np.array([scale]),
    )


def collate(grids: list[SparseVoxelGrid]) -> SparseVoxelGrid:
    """Stack single-sample grids into one batched grid."""
    if not grids:
        raise EmptyInputError("no grids to collate")
    res = grids[0].resolution
    if any(g.resolution != res for g in grids):
        raise ShapeError("all grids in a batch must share a resolution")
    offsets = np.cumsum([0] + [g.num_voxels for g in grids[:-1]])
    return SparseVoxelGrid(
        resolution=res,
        coords=np.concatenate([g.coords for g in grids]),
        features=np.concatenate([g.features for g in grids]),
        point_to_voxel=np.concatenate([g.point_to_voxel + o for g, o in zip(grids, offsets)]),
        origin=np.concatenate([g.origin for g in grids]),
        scale=np.concatenate([g.scale for g in grids]),
        batch=np.concatenate([np.full(g.num_voxels, i, dtype=np.int64) for i, g in enumerate(grids)]),
        point_batch=np.concatenate([np.full(g.num_points, i, dtype=np.int64)
                                    for i, g in enumerate(grids)]),
    )


def devoxelize_nearest(voxel_values: np.ndarray, grid: SparseVoxelGrid) -> np.ndarray:
    voxel_values = np.asarray(voxel_values)
    if len(voxel_values) != grid.num_voxels:
        raise ShapeError(f"{len(voxel_values)} voxel rows for a grid of {grid.num_voxels}")
    return voxel_values[grid.point_to_voxel]


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def trilinear_weights(grid: SparseVoxelGrid, positions: np.ndarray):
    """Neighbor voxel rows and renormalized weights, each ``(N, 8)``.

    Unoccupied corners carry index -1 and weight 0. Points with no occupied
    corner fall back to their own voxel with weight 1.
    """
    p = grid.normalized_positions(positions) - 0.5
    base = np.floor(p).astype(np.int64)
    frac = p - base
    corners = base[:, None, :] + _CORNERS[None, :, :]
    w = np.prod(np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)

    kb = grid.resolution + 2
    keys = grid_keys(grid.coords, grid.batch, kb)
    pb = np.repeat(grid.point_batch, 8)
    flat = corners.reshape(-1, 3)
    inside = np.all((flat >= -1) & (flat <= grid.resolution), axis=1)
    qkeys = grid_keys(np.clip(flat, -1, grid.resolution), pb, kb)
    pos = np.searchsorted(keys, qkeys)
    pos_c = np.minimum(pos, len(keys) - 1)
    found = inside & (keys[pos_c] == qkeys)
    index = np.where(found, pos_c, -1).reshape(-1, 8)
    w = np.where(index >= 0, w, 0.0)
    total = w.sum(axis=1)
    empty = total <= 0
    w[~empty] /= total[~empty, None]
    if np.any(empty):
        index[empty] = -1
        index[empty, 0] = grid.point_to_voxel[empty]
        w[empty] = 0.0
        w[empty, 0] = 1.0
    return index, w


def devoxelize_trilinear(voxel_values: np.ndarray, grid: SparseVoxelGrid,
                         cloud: PointCloud) -> np.ndarray:
    voxel_values = np.asarray(voxel_values, dtype=np.float64)
    if len(voxel_values) != grid.num_voxels:
        raise ShapeError(f"{len(voxel_values)} voxel rows for a grid of {grid.num_voxels}")
    if len(cloud) != grid.num_points:
        raise ShapeError("cloud does not match the grid it supposedly produced")
    index, w = trilinear_weights(grid, cloud.positions)
    vals = voxel_values[np.maximum(index, 0)]
    return np.einsum("nk,nk...->n...", w, vals)


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for the augmentation stages; degenerate ranges disable a stage.

    ``elastic_granularity`` and ``elastic_magnitude`` are fractions of the
    bounding-box diagonal.
    """

    rotation: tuple[float, float] = (-math.pi, math.pi)
    scale: tuple[float, float] = (0.9, 1.1)
    elastic_granularity: float = 4.0 / 64.0
    elastic_magnitude: float = 0.01
    contrast: tuple[float, float] = (0.8, 1.2)
    jitter_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.scale[0] <= 0 or self.scale[1] <= 0:
            raise ValueError("scale range must be positive")
        if self.elastic_magnitude < 0 or self.jitter_std < 0 or self.elastic_granularity < 0:
            raise ValueError("augmentation magnitudes must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentParams":
        return cls(rotation=(0.0, 0.0), scale=(1.0, 1.0), elastic_magnitude=0.0,
                   contrast=(1.0, 1.0), jitter_std=0.0, seed=seed)

    def with_seed(self, seed: int) -> "AugmentParams":
        return replace(self, seed=seed)


def _draw(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    lo, hi = lo_hi
    return lo if lo == hi else float(rng.uniform(lo, hi))


def elastic_offsets(positions: np.ndarray, granularity: float, magnitude: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement field sampled on a coarse lattice."""
    lo = positions.min(axis=0)
    diag = float(np.linalg.norm(positions.max(axis=0) - lo))
    if diag == 0.0 or magnitude == 0.0:
        return np.zeros_like(positions)
    step = max(granularity * diag, 1e-9)
    shape = tuple(int(s) for s in np.floor((positions.max(axis=0) - lo) / step).astype(int) + 3)
    grid_pos = (positions - lo) / step + 1.0
    out = np.empty_like(positions)
    for axis in range(3):
        noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=1.0, mode="constant")
        peak = np.abs(noise).max()
        if peak > 0:
            noise /= peak
        out[:, axis] = ndimage.map_coordinates(noise, grid_pos.T, order=1, mode="nearest")
    return out * magnitude * diag


def augment(cloud: PointCloud, params: AugmentParams) -> PointCloud:
    """Random rotation about z, scaling, elastic distortion, contrast, jitter."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot augment an empty cloud")
    rng = np.random.default_rng(params.seed)
    pos = cloud.positions.copy()
    col = cloud.colors.copy()

    angle = _draw(rng, params.rotation)
    if angle != 0.0:
        c, s = math.cos(angle), math.sin(angle)
        x, y = pos[:, 0].copy(), pos[:, 1].copy()
        pos[:, 0] = c * x - s * y
        pos[:, 1] = s * x + c * y
    factor = _draw(rng, params.scale)
    if factor != 1.0:
        pos *= factor
    if params.elastic_magnitude > 0:
        pos += elastic_offsets(pos, params.elastic_granularity, params.elastic_magnitude, rng)
    gain = _draw(rng, params.contrast)
    if gain != 1.0:
        col = np.clip(0.5 + gain * (col - 0.5), 0.0, 1.0)
    if params.jitter_std > 0:
        col = np.clip(col + rng.normal(0.0, params.jitter_std, size=col.shape), 0.0, 1.0)

    return PointCloud(positions=pos, colors=col, hard_labels=cloud.hard_labels,
                      soft_labels=cloud.soft_labels, provenance=cloud.provenance)
