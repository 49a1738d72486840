import math

import numpy as np
import pytest

from distill3d.cloud import (AugmentParams, PointCloud, augment, collate, devoxelize_nearest,
                             devoxelize_trilinear, trilinear_weights, voxelize)
from distill3d.errors import EmptyInputError, ShapeError
from oracles import voxelize_bruteforce


def cloud_of(pos, col=None, **kw):
    pos = np.asarray(pos, dtype=float)
    return PointCloud(pos, np.full((len(pos), 3), 0.5) if col is None else col, **kw)


def test_single_point():
    g = voxelize(cloud_of([[1, 2, 3]], np.array([[0.0, 0.5, 1.0]])), 8)
    assert g.num_voxels == 1
    assert np.allclose(g.features, [[-1, 0, 1]])


def test_two_points_same_voxel_average():
    c = cloud_of([[0, 0, 0], [0.01, 0, 0], [1, 1, 1]], np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0.]]))
    g = voxelize(c, 4)
    assert g.point_to_voxel[0] == g.point_to_voxel[1]
    assert np.allclose(g.features[g.point_to_voxel[0]], 0)


@pytest.mark.parametrize("res", [4, 16, 64])
def test_matches_bruteforce(rng, res):
    for _ in range(5):
        n = int(rng.integers(1, 1000))
        pos = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
        col = rng.uniform(0, 1, (n, 3))
        g = voxelize(PointCloud(pos, col), res)
        coords, feats, p2v = voxelize_bruteforce(pos, col, res)
        assert np.array_equal(g.coords, coords)
        assert np.array_equal(g.point_to_voxel, p2v)
        assert np.max(np.abs(g.features - feats)) < 1e-9


def test_permutation_invariance(rng):
    pos, col = rng.uniform(0, 1, (500, 3)), rng.uniform(0, 1, (500, 3))
    perm = rng.permutation(500)
    a = voxelize(PointCloud(pos, col), 16)
    b = voxelize(PointCloud(pos[perm], col[perm]), 16)
    assert np.array_equal(a.coords, b.coords)
    assert np.allclose(a.features, b.features, atol=1e-6)
    assert np.array_equal(a.point_to_voxel[perm], b.point_to_voxel)


def test_voxelize_errors():
    with pytest.raises(EmptyInputError):
        voxelize(cloud_of(np.zeros((0, 3))), 4)


def test_nearest_devoxelization(rng):
    pos = rng.uniform(0, 1, (300, 3))
    g = voxelize(cloud_of(pos), 8)
    vals = rng.normal(size=(g.num_voxels, 5))
    out = devoxelize_nearest(vals, g)
    for i in range(len(pos)):
        assert np.array_equal(out[i], vals[g.point_to_voxel[i]])
    with pytest.raises(ShapeError):
        devoxelize_nearest(vals[:-1], g)


def test_trilinear_examples():
    # two voxel centers along x at grid coords 0 and 1 of a 2-wide grid
    pos = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    c = cloud_of(pos)
    g = voxelize(c, 2)
    vals = np.array([[1.0], [3.0]])
    center = (g.coords[0] + 0.5) / g.scale[0] + g.origin[0]
    mid = ((g.coords[0] + g.coords[1]) / 2 + 0.5) / g.scale[0] + g.origin[0]
    idx, w = trilinear_weights(g, np.array([center, mid]))
    assert np.all(w >= 0) and np.allclose(w.sum(axis=1), 1)
    vals_pts = np.einsum("nk,nk...->n...", w, vals[np.maximum(idx, 0)])
    assert np.allclose(vals_pts[:, 0], [1.0, 2.0])


def test_trilinear_constant_field(rng):
    pos = rng.uniform(0, 1, (400, 3))
    c = cloud_of(pos)
    g = voxelize(c, 6)
    out = devoxelize_trilinear(np.full((g.num_voxels, 2), 7.0), g, c)
    assert np.allclose(out, 7.0)
    _, w = trilinear_weights(g, pos)
    assert np.all(w >= 0) and np.allclose(w.sum(axis=1), 1)


def test_collate_offsets(rng):
    a = voxelize(cloud_of(rng.uniform(0, 1, (50, 3))), 4)
    b = voxelize(cloud_of(rng.uniform(0, 1, (60, 3))), 4)
    g = collate([a, b])
    assert g.num_voxels == a.num_voxels + b.num_voxels
    assert g.point_to_voxel[50] == a.num_voxels + b.point_to_voxel[0]
    assert g.batch_size == 2


def test_augment_identity_and_determinism(rng):
    c = PointCloud(rng.normal(size=(200, 3)), rng.uniform(0, 1, (200, 3)),
                   hard_labels=rng.integers(0, 4, 200))
    same = augment(c, AugmentParams.identity())
    assert np.array_equal(same.positions, c.positions) and np.array_equal(same.colors, c.colors)
    a = augment(c, AugmentParams(seed=5))
    b = augment(c, AugmentParams(seed=5))
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.colors, b.colors)
    assert np.array_equal(a.hard_labels, c.hard_labels)


def test_augment_rotation_quarter_turn():
    p = AugmentParams(rotation=(math.pi / 2, math.pi / 2), scale=(1, 1), elastic_magnitude=0,
                      contrast=(1, 1), jitter_std=0)
    out = augment(cloud_of([[1, 0, 0], [0, 0, 1]]), p)
    assert np.allclose(out.positions[0], [0, 1, 0], atol=1e-6)


def test_augment_preserves_distance_ratios(rng):
    c = cloud_of(rng.normal(size=(50, 3)))
    p = AugmentParams(elastic_magnitude=0, contrast=(1, 1), jitter_std=0, seed=9)
    out = augment(c, p)
    d0 = np.linalg.norm(c.positions[:, None] - c.positions[None], axis=2)
    d1 = np.linalg.norm(out.positions[:, None] - out.positions[None], axis=2)
    mask = d0 > 0
    ratio = d1[mask] / d0[mask]
    assert np.allclose(ratio, ratio[0], rtol=1e-9)
    assert len(out) == len(c)


def test_pointcloud_validation():
    with pytest.raises(ShapeError):
        cloud_of([[0, 0, 0]], soft_labels=np.array([[0.3, 0.3]]))
    with pytest.raises(ShapeError):
        cloud_of([[0, 0, 0]], hard_labels=[-2])
