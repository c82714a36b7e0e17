"""Finite-difference checks for tape ops, shared by unit and acceptance tests."""

import numpy as np

from mmsf import autodiff as ad
from mmsf.losses import iou_loss_op, sigmoid_bce_op, smooth_l1_op, softmax_cross_entropy_op
from mmsf.network import roi_max_pool

from oracles import central_diff


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_op(fn, arrays, rng, eps=1e-6):
    """Max relative error between tape and central-difference gradients of
    ``sum(fn(*tensors) * R)`` over every input."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    loss = ad.sum(ad.mul(out, weights))
    ad.backward(loss)
    worst = 0.0
    for i, arr in enumerate(arrays):
        def f(v, i=i):
            vals = [ad.Tensor(a) for a in arrays]
            vals[i] = ad.Tensor(v)
            return float((fn(*vals).data * weights).sum())
        numeric = central_diff(f, arr, eps)
        worst = max(worst, relative_error(tensors[i].grad, numeric))
    return worst


def _spread(rng, shape, gap=0.05):
    """Random values kept away from each other and from zero, so max/relu kinks sit
    further than the finite-difference step."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * gap + rng.uniform(-0.01, 0.01, n)
    return vals.reshape(shape)


def op_cases():
    """(name, builder) pairs; ``builder(rng)`` returns (fn, arrays)."""
    def conv_case(rng):
        k = int(rng.choice([1, 3]))
        s = int(rng.choice([1, 2]))
        p = int(rng.integers(0, k // 2 + 1))
        spec = ad.ConvSpec(k, 2, 3, s, p)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, k, k))
        b = rng.normal(size=(3,))
        return (lambda x, w, b: ad.conv2d(x, w, spec, b)), [x, w, b]

    def roi_case(rng):
        maps = [_spread(rng, (2, 1, 8, 8)), _spread(rng, (1, 1, 4, 4))]
        rois = np.array([[0, 0, 32, 32], [4, 8, 20, 28], [10, 3, 30, 31]], float)
        bidx = np.array([0, 0, 1])
        levels = np.array([1, 2, 1])
        return (lambda a, b: roi_max_pool([a, b], (4, 8), rois, bidx, levels)), maps

    def iou_case(rng):
        gt = rng.uniform(1.0, 5.0, size=(3, 4))
        pred = gt * rng.choice([0.6, 1.5], size=(3, 4)) + rng.uniform(-0.1, 0.1, size=(3, 4))
        return (lambda x: iou_loss_op(x, gt)), [pred]

    idx = np.array([2, 0, 2, 1])
    sl1_gt = np.array([[1.0, 2.0, 0.5, 0.0], [0.0, 0.0, 0.0, 0.0], [3.0, -1.0, 2.0, 1.0]])
    sl1_scale = np.array([1.0, 2.0, 0.5])
    ce_labels = np.array([0, 1, 1])
    bce_targets = np.array([1.0, 0.0, 1.0, 0.0])
    return [
        ("add", lambda r: (ad.add, [r.normal(size=(3, 4)), r.normal(size=(1, 4))])),
        ("sub", lambda r: (ad.sub, [r.normal(size=(3, 4)), r.normal(size=(3, 1))])),
        ("mul", lambda r: (ad.mul, [r.normal(size=(3, 4)), r.normal(size=(3, 4))])),
        ("relu", lambda r: (ad.relu, [_spread(r, (4, 5))])),
        ("sigmoid", lambda r: (ad.sigmoid, [r.normal(size=(4, 5)) * 3])),
        ("exp", lambda r: (ad.exp, [r.normal(size=(6,))])),
        ("log", lambda r: (ad.log, [r.uniform(0.5, 3.0, size=(6,))])),
        ("softmax", lambda r: (ad.softmax, [r.normal(size=(3, 4))])),
        ("log_softmax", lambda r: (ad.log_softmax, [r.normal(size=(3, 4))])),
        ("sum", lambda r: ((lambda x: ad.sum(x, axis=1)), [r.normal(size=(3, 4))])),
        ("mean", lambda r: (ad.mean, [r.normal(size=(3, 4))])),
        ("reshape", lambda r: ((lambda x: ad.reshape(x, (4, 3))), [r.normal(size=(3, 4))])),
        ("flatten", lambda r: (ad.flatten, [r.normal(size=(2, 2, 3))])),
        ("transpose", lambda r: ((lambda x: ad.transpose(x, (2, 0, 1))), [r.normal(size=(2, 3, 4))])),
        ("concat", lambda r: ((lambda a, b: ad.concat([a, b], axis=1)), [r.normal(size=(2, 3)), r.normal(size=(2, 2))])),
        ("take_rows", lambda r: ((lambda x: ad.take_rows(x, idx)), [r.normal(size=(3, 2))])),
        ("matmul", lambda r: (ad.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))])),
        ("linear", lambda r: (ad.linear, [r.normal(size=(3, 4)), r.normal(size=(2, 4)), r.normal(size=(2,))])),
        ("conv2d", conv_case),
        ("max_pool2x2", lambda r: (ad.max_pool2x2, [_spread(r, (1, 2, 4, 4))])),
        ("avg_pool2x2", lambda r: (ad.avg_pool2x2, [r.normal(size=(1, 2, 4, 4))])),
        ("nearest_upsample2x", lambda r: (ad.nearest_upsample2x, [r.normal(size=(1, 2, 3, 3))])),
        ("roi_max_pool", roi_case),
        ("iou_loss", iou_case),
        ("smooth_l1", lambda r: ((lambda x: smooth_l1_op(x, sl1_gt, sl1_scale)), [r.normal(size=(3, 4)) * 3])),
        ("softmax_cross_entropy", lambda r: ((lambda x: softmax_cross_entropy_op(x, ce_labels)), [r.normal(size=(3, 2))])),
        ("sigmoid_bce", lambda r: ((lambda x: sigmoid_bce_op(x, bce_targets)), [r.normal(size=(4,)) * 2])),
    ]
