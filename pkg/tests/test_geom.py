import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distill3d.errors import BoundsError, CameraError, ShapeError
from distill3d.geom import (CameraIntrinsics, DepthImage, DepthSemantics, PanoramicCamera, RgbdFrame,
                            lift, lift_panoramic, lift_perspective, pixel_to_uv, project_perspective,
                            unproject_panoramic, unproject_perspective)


def persp_frame(depth, K, w, h):
    return RgbdFrame(np.zeros((h, w, 3)), DepthImage(w, h, depth), K)


def test_unproject_identity_intrinsics():
    K = CameraIntrinsics(1, 1, 0, 0)
    assert np.allclose(unproject_perspective(0, 0, 5, K), [0, 0, 5])


def test_unproject_hand_example():
    K = CameraIntrinsics(2, 2, 1, 1)
    assert np.allclose(unproject_perspective(3, 1, 4, K), [4, 0, 4])
    assert np.allclose(project_perspective([4, 0, 4], K), [3, 1, 4])


def test_project_behind_camera():
    with pytest.raises(CameraError):
        project_perspective([1, 1, -1], CameraIntrinsics(1, 1, 0, 0))


def test_bad_intrinsics():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0)


def test_lift_skips_invalid_depth():
    K = CameraIntrinsics(2, 2, 1, 1)
    depth = np.array([1.0, 0.0, np.nan, 2.0])
    cloud = lift_perspective(persp_frame(depth, K, 2, 2))
    assert len(cloud) == 2
    assert cloud.provenance.tolist() == [0, 3]
    # pixel 3 is (col 1, row 1), center (1.5, 1.5)
    assert np.allclose(cloud.positions[1], [2 * 0.5 / 2, 2 * 0.5 / 2, 2])


def test_lift_all_invalid_is_empty():
    cloud = lift_perspective(persp_frame(np.zeros(4), CameraIntrinsics(1, 1, 0, 0), 2, 2))
    assert len(cloud) == 0


def test_lift_depth_scaling(rng):
    K = CameraIntrinsics(30, 25, 8, 6)
    d = rng.uniform(0.5, 4, 16 * 12)
    a = lift_perspective(persp_frame(d, K, 16, 12)).positions
    b = lift_perspective(persp_frame(3.0 * d, K, 16, 12)).positions
    assert np.allclose(b, 3.0 * a, rtol=1e-14, atol=0)


def test_wrong_camera_errors():
    pano = RgbdFrame(np.zeros((2, 4, 3)), DepthImage(4, 2, np.ones(8), DepthSemantics.RAY_DISTANCE),
                     PanoramicCamera())
    with pytest.raises(CameraError):
        lift_perspective(pano)
    with pytest.raises(CameraError):
        lift_panoramic(persp_frame(np.ones(4), CameraIntrinsics(1, 1, 0, 0), 2, 2))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        DepthImage(3, 3, np.ones(8))
    with pytest.raises(ShapeError):
        RgbdFrame(np.zeros((2, 2, 3)), DepthImage(3, 2, np.ones(6)), CameraIntrinsics(1, 1, 0, 0))


@pytest.mark.parametrize("uvd, expected", [
    ((0.0, 0.0, 1.0), (1, 0, 0)),
    ((math.pi / 2, 0.0, 2.0), (0, 2, 0)),
    ((0.0, math.pi / 2, 1.0), (0, 0, -1)),
])
def test_panoramic_analytic_points(uvd, expected):
    assert np.allclose(unproject_panoramic(*uvd), expected, atol=1e-12)


def test_pixel_to_uv_examples():
    assert np.allclose(pixel_to_uv(0, 0, 4, 2), (-3 * math.pi / 4, -math.pi / 4))
    assert np.allclose(pixel_to_uv(0, 1, 2, 1), (math.pi / 2, 0))
    assert np.allclose(pixel_to_uv(0, 0, 1, 1), (0, 0))
    with pytest.raises(BoundsError):
        pixel_to_uv(2, 0, 4, 2)


def test_panoramic_norm_equals_depth(rng):
    w, h = 32, 16
    d = rng.uniform(0.2, 9, w * h)
    frame = RgbdFrame(rng.uniform(0, 1, (h, w, 3)), DepthImage(w, h, d, DepthSemantics.RAY_DISTANCE),
                      PanoramicCamera())
    cloud = lift(frame)
    assert len(cloud) == w * h
    assert np.max(np.abs(np.linalg.norm(cloud.positions, axis=1) - d)) < 1e-12
    assert len(np.unique(cloud.provenance)) == len(cloud)


@settings(max_examples=200, deadline=None)
@given(st.floats(1, 500), st.floats(1, 500), st.floats(-50, 50), st.floats(-50, 50),
       st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 100))
def test_round_trip_property(fx, fy, cx, cy, u, v, d):
    K = CameraIntrinsics(fx, fy, cx, cy)
    back = project_perspective(unproject_perspective(u, v, d, K), K)
    assert np.allclose(back, [u, v, d], atol=1e-6, rtol=0)
