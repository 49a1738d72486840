import math

import numpy as np
import pytest

from distill3d.cloud import PointCloud, voxelize
from distill3d.errors import CheckpointError, FormatError, ShapeError, StateError
from distill3d.net import autodiff as ad
from distill3d.net.checkpoint import (decode_checkpoint, encode_checkpoint, infer_config, load_checkpoint,
                                      model_from_state, save_checkpoint)
from distill3d.net.gradcheck import check_gradients
from distill3d.net.model import CLS_HEAD, PRE_HEAD, SEG_HEAD, NetConfig, SparseUNet
from distill3d.net.optim import SGD, Adam, poly_lr
from distill3d.net.sparse import OFFSETS, build_hierarchy, downsample, sparse_conv, upsample
from gradsuite import layer_errors, unet_error
from oracles import dense_conv_oracle


def small_grid(rng, n=200, res=8):
    return voxelize(PointCloud(rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, (n, 3))), res)


def test_offsets_are_antisymmetric():
    assert np.array_equal(OFFSETS[::-1], -OFFSETS)


def test_conv_single_voxel_identity():
    w = np.zeros((27, 2, 2))
    w[13] = np.eye(2)
    out = sparse_conv(np.array([[3, 3, 3]]), ad.Tensor([[1.5, -2.0]]), ad.Tensor(w))
    assert np.array_equal(out.value, [[1.5, -2.0]])


def test_conv_two_voxel_stencil():
    coords = np.array([[0, 0, 0], [1, 0, 0]])
    w = np.zeros((27, 1, 1))
    k = int(np.flatnonzero((OFFSETS == [1, 0, 0]).all(axis=1))[0])
    w[k] = 2.0
    out = sparse_conv(coords, ad.Tensor([[1.0], [5.0]]), ad.Tensor(w), ad.Tensor([0.5]))
    assert np.allclose(out.value[:, 0], [10.5, 0.5])


def test_conv_matches_dense_oracle(rng):
    for _ in range(5):
        coords = np.unique(rng.integers(0, 5, (20, 3)), axis=0)
        x = rng.normal(size=(len(coords), 3))
        w = rng.normal(size=(27, 3, 4))
        got = sparse_conv(coords, ad.Tensor(x), ad.Tensor(w)).value
        assert np.allclose(got, dense_conv_oracle(coords, x, w, OFFSETS), atol=1e-12)


def test_pool_and_unpool():
    grid = voxelize(PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [4.0, 4, 4]]), np.zeros((3, 3))), 4)
    levels = build_hierarchy(grid, 2)
    feats = ad.Tensor(np.array([[1.0], [3.0], [2.0]]))
    pooled = downsample(levels[0], feats)
    assert pooled.value[levels[0].to_parent[0], 0] == 3.0
    back = upsample(levels[0], pooled)
    assert np.array_equal(back.value, pooled.value[levels[0].to_parent])


def test_single_voxel_pool_identity():
    grid = voxelize(PointCloud(np.zeros((1, 3)), np.zeros((1, 3))), 4)
    levels = build_hierarchy(grid, 2)
    assert np.array_equal(downsample(levels[0], ad.Tensor([[2.0, -1.0]])).value, [[2.0, -1.0]])


def test_submanifold_occupancy(rng):
    g = small_grid(rng)
    model = SparseUNet(NetConfig(levels=3, base_channels=4))
    z = model.features(g)
    assert z.shape == (g.num_voxels, 4)


def test_zero_head_gives_uniform(rng):
    g = small_grid(rng)
    model = SparseUNet(NetConfig(levels=2, base_channels=4, task_classes=5))
    model.params[f"{SEG_HEAD}.weight"].value[:] = 0
    probs = model.predict_segment(g)
    assert np.allclose(probs, 0.2, atol=1e-12)


def test_forward_determinism_and_rows(rng):
    g = small_grid(rng)
    a = SparseUNet(NetConfig(levels=2, base_channels=4), seed=3)
    b = SparseUNet(NetConfig(levels=2, base_channels=4), seed=3)
    la, pa = a.forward_segment(g)
    lb, _ = b.forward_segment(g)
    assert np.array_equal(la.value, lb.value)
    assert np.max(np.abs(pa.value.sum(axis=1) - 1)) < 1e-9


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(6, 4))
    assert np.allclose(ad.softmax(x).value, ad.softmax(x + 100.0).value, atol=1e-9)


def test_classify_pooling(rng):
    g = voxelize(PointCloud(np.zeros((1, 3)), np.full((1, 3), 0.3)), 4)
    model = SparseUNet(NetConfig(levels=2, base_channels=4), heads=(CLS_HEAD,))
    probs = model.predict_classify(g)
    assert probs.shape == (1, 8) and abs(probs.sum() - 1) < 1e-9
    g2 = small_grid(rng)
    levels, skips = model.encode(g2, train=False, grad=False)
    feats = skips[-1].value
    pooled = ad.segment_max(np.vstack([feats, feats]), np.r_[levels[-1].batch, levels[-1].batch], 1)
    assert np.array_equal(pooled.value[0], feats.max(axis=0))


def test_layer_gradients():
    errs = layer_errors()
    assert max(errs.values()) < 1e-4, errs
    assert errs["linear_softmax_ce"] < 1e-6


def test_unet_gradients():
    err, voxels, _ = unet_error()
    assert voxels <= 10
    assert err < 1e-4


def test_linear_sum_gradient():
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    w = ad.Tensor(np.zeros((2, 3)), requires_grad=True)
    ad.total(ad.linear(x, w)).backward()
    assert np.allclose(w.grad, np.repeat(x.sum(axis=0)[:, None], 3, axis=1))


def test_constant_loss_zero_gradient():
    w = ad.Tensor(np.ones(3), requires_grad=True)
    loss = ad.add(ad.total(ad.scale(w, 0.0)), 4.0)
    loss.backward()
    assert np.array_equal(w.grad, np.zeros(3))


def test_gradcheck_vacuous():
    assert check_gradients({}, None, lambda g: ad.Tensor(0.0)) == 0.0


def test_backward_without_forward():
    with pytest.raises(StateError):
        SparseUNet(NetConfig(levels=1, base_channels=2)).backward(ad.Tensor(1.0))


def test_sgd_two_steps():
    p = {"w": ad.Tensor(np.array([1.0]), requires_grad=True)}
    opt = SGD(0.9)
    opt.step(p, {"w": np.array([2.0])}, 0.1)
    assert np.isclose(p["w"].value[0], 1.0 - 0.2)
    opt.step(p, {"w": np.array([2.0])}, 0.1)
    assert np.isclose(p["w"].value[0], 0.8 - 0.1 * 1.9 * 2.0)
    with pytest.raises(ShapeError):
        opt.step(p, {"w": np.zeros(2)}, 0.1)


def test_adam_first_step_is_lr():
    p = {"w": ad.Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    Adam().step(p, {"w": np.array([0.3, -7.0])}, 0.01)
    assert np.allclose(p["w"].value, [0.99, -0.99], atol=1e-8)


def test_poly_lr():
    assert poly_lr(0, 100, 0.05) == 0.05
    assert poly_lr(100, 100, 0.05) == 0.0
    assert math.isclose(poly_lr(50, 100, 0.05), 0.05 * 0.5 ** 0.9)
    assert abs(poly_lr(50, 100, 0.05) - 0.02679) < 1e-5


def test_head_attach_detach_keeps_backbone():
    m = SparseUNet(NetConfig(levels=2, base_channels=4), heads=(PRE_HEAD,))
    before = {k: v.value.copy() for k, v in m.params.items() if not k.startswith(PRE_HEAD)}
    m.detach_head(PRE_HEAD)
    m.attach_head(SEG_HEAD, 0)
    for k, v in before.items():
        assert np.array_equal(m.params[k].value, v)
    assert m.heads == (SEG_HEAD,)


def test_checkpoint_round_trip(tmp_path, rng):
    m = SparseUNet(NetConfig(levels=2, base_channels=4, task_classes=5), heads=(SEG_HEAD, CLS_HEAD))
    m.forward_segment(small_grid(rng))  # touch running statistics
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, m.state())
    state = load_checkpoint(path)
    save_checkpoint(tmp_path / "b.ckpt", state)
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    twin = model_from_state(state)
    assert twin.config.task_classes == 5 and twin.config.levels == 2
    cfg = infer_config(state)
    assert cfg.base_channels == 4


def test_checkpoint_errors(tmp_path):
    raw = encode_checkpoint({"a": np.ones((2, 2))})
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(raw[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(raw + b"\0")
    m = SparseUNet(NetConfig(levels=2, base_channels=4))
    bad = m.state()
    bad["enc0.conv.weight"] = np.zeros((1, 1, 1))
    with pytest.raises(CheckpointError):
        m.load_state(bad)
