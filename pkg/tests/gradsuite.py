"""Finite-difference checks of every differentiable layer and the toy U-Net."""
from __future__ import annotations

import numpy as np

from distill3d.cloud import PointCloud, voxelize
from distill3d.distill import soft_cross_entropy
from distill3d.net import autodiff as ad
from distill3d.net.gradcheck import check_gradients
from distill3d.net.model import NetConfig, SparseUNet
from distill3d.net.sparse import build_hierarchy, downsample, upsample
from distill3d.semi import consistency_loss, entropy_loss
from oracles import numeric_grad, rel_error


def _check(build, arrays, rng):
    """Compare autodiff and central differences of ``sum(build(*tensors) * probe)``."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    probe = rng.normal(size=out.shape)
    loss = ad.total(ad.mul(out, probe))
    loss.backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            return float(np.sum(build(*[ad.Tensor(x) for x in arrays]).value * probe))
        worst = max(worst, rel_error(t.grad, numeric_grad(f, a)))
    return worst


def layer_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    grid = voxelize(PointCloud(rng.uniform(0, 1, (40, 3)), rng.uniform(0, 1, (40, 3))), 4)
    levels = build_hierarchy(grid, 2)
    m, mp = levels[0].size, levels[1].size
    nb = levels[0].neighbors
    probs = lambda n, c: rng.dirichlet(np.ones(c), n)  # noqa: E731
    x = rng.normal(size=(m, 3))
    t_ce, t_cons = probs(4, 3), probs(4, 3)
    out = {
        "linear": _check(ad.linear, [rng.normal(size=(5, 3)), rng.normal(size=(3, 4)),
                                     rng.normal(size=4)], rng),
        "relu": _check(ad.relu, [rng.normal(size=(6, 3)) + 0.05], rng),
        "softmax": _check(ad.softmax, [rng.normal(size=(5, 4))], rng),
        "log": _check(ad.log, [rng.uniform(0.1, 2, (4, 3))], rng),
        "sparse_conv": _check(lambda a, w, b: ad.sparse_conv(a, w, b, nb),
                              [x, rng.normal(size=(27, 3, 2)), rng.normal(size=2)], rng),
        "batch_norm_train": _check(
            lambda a, g, b: ad.batch_norm(a, g, b, train=True, running_mean=np.zeros(3),
                                          running_var=np.ones(3)),
            [x, rng.uniform(0.5, 1.5, 3), rng.normal(size=3)], rng),
        "batch_norm_eval": _check(
            lambda a, g, b: ad.batch_norm(a, g, b, train=False, running_mean=np.full(3, 0.1),
                                          running_var=np.full(3, 2.0)),
            [x, rng.uniform(0.5, 1.5, 3), rng.normal(size=3)], rng),
        "max_pool": _check(lambda a: downsample(levels[0], a), [x], rng),
        "unpool_concat": _check(lambda c, s: upsample(levels[0], c, s),
                                [rng.normal(size=(mp, 2)), rng.normal(size=(m, 3))], rng),
        "soft_cross_entropy": _check(lambda p: soft_cross_entropy(p, t_ce),
                                     [probs(4, 3)], rng),
        # the row-validating losses are checked on softmax outputs of free logits
        "entropy": _check(lambda z: entropy_loss(ad.softmax(z)), [rng.normal(size=(4, 3))], rng),
        "consistency": _check(lambda z: consistency_loss(ad.softmax(z), t_cons),
                              [rng.normal(size=(4, 3))], rng),
    }
    # linear + softmax + cross-entropy on 3 voxels
    xs, target = rng.normal(size=(3, 4)), probs(3, 3)
    params = {"w": ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True),
              "b": ad.Tensor(np.zeros(3), requires_grad=True)}
    out["linear_softmax_ce"] = check_gradients(
        params, None, lambda _: soft_cross_entropy(ad.softmax(ad.linear(xs, params["w"], params["b"])), target))
    return out


def unet_error(seed: int = 0, n_points: int = 10) -> tuple[float, int, int]:
    """Max relative error of the full 2-level U-Net; also returns (voxels, parameters)."""
    rng = np.random.default_rng(seed)
    grid = voxelize(PointCloud(rng.uniform(0, 1, (n_points, 3)), rng.uniform(0, 1, (n_points, 3))), 4)
    model = SparseUNet(NetConfig(levels=2, base_channels=2, task_classes=3), seed=seed)
    target = rng.dirichlet(np.ones(3), grid.num_voxels)

    def loss_fn(g):
        return soft_cross_entropy(model.forward_segment(g, train=True)[1], target)

    return check_gradients(model.params, grid, loss_fn), grid.num_voxels, model.num_parameters()
