import math

import numpy as np
import pytest

from mmsf import autodiff as ad
from mmsf.geometry import TblrBox
from mmsf.losses import (EPS, ClassTarget, LossConfig, RegressionKind, bce, iou_loss_backward,
                         iou_loss_forward, iou_loss_grad, iou_loss_op, iou_loss_values,
                         smooth_l1, total_loss)

from oracles import numeric_log_iou


def tb(*d):
    return TblrBox(0.0, 0.0, *d)


class TestSmoothL1:
    @pytest.mark.parametrize("d,expected", [(0, 0), (0.5, 0.125), (2, 1.5), (-2, 1.5)])
    def test_values(self, d, expected):
        assert smooth_l1(d) == expected

    def test_smooth_at_knee(self):
        h = 1e-7
        left = (smooth_l1(1 - h) - smooth_l1(1 - 2 * h)) / h
        right = (smooth_l1(1 + 2 * h) - smooth_l1(1 + h)) / h
        assert left == pytest.approx(1.0, abs=1e-5)
        assert right == pytest.approx(1.0, abs=1e-5)
        assert smooth_l1(1 - 1e-12) == pytest.approx(smooth_l1(1 + 1e-12), abs=1e-9)


class TestIouForward:
    def test_identical(self):
        loss, _ = iou_loss_forward(tb(1, 1, 1, 1), tb(1, 1, 1, 1))
        assert loss == 0.0

    def test_nested(self):
        loss, (i, u, _, _) = iou_loss_forward(tb(2, 2, 2, 2), tb(1, 1, 1, 1))
        assert (i, u) == (4, 16)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_interpolation_is_monotone(self):
        gt = tb(2, 2, 2, 2)
        vals = [iou_loss_forward(gt, tb(*[1 + s] * 4))[0] for s in np.linspace(0, 1, 21)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 0.0

    def test_no_intersection(self):
        loss, terms = iou_loss_forward(tb(0, 1, 0, 1), tb(1, 0, 1, 0))
        assert loss is None and terms[0] == 0

    def test_positive_and_scale_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            g, p = rng.uniform(0.5, 10, (2, 4))
            loss = iou_loss_forward(tb(*g), tb(*p))[0]
            assert loss > 0
            c = rng.uniform(0.1, 10)
            assert iou_loss_forward(tb(*(c * g)), tb(*(c * p)))[0] == pytest.approx(loss, rel=1e-10)
            assert loss == pytest.approx(numeric_log_iou(g, p), rel=1e-10)

    def test_vectorised_agrees(self):
        rng = np.random.default_rng(1)
        g, p = rng.uniform(0.5, 10, (2, 50, 4))
        scalar = [iou_loss_forward(tb(*a), tb(*b))[0] for a, b in zip(g, p)]
        np.testing.assert_allclose(iou_loss_values(g, p), scalar, rtol=1e-12)


class TestIouBackward:
    def test_tie_convention(self):
        grad = iou_loss_backward(tb(1, 1, 1, 1), tb(1, 1, 1, 1))
        assert grad == pytest.approx((0.5, 0.5, 0.5, 0.5), abs=1e-12)

    def test_no_intersection(self):
        assert iou_loss_backward(tb(0, 1, 0, 1), tb(1, 0, 1, 0)) is None

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(200):
            g = rng.uniform(0.5, 10, 4)
            p = g * rng.choice([0.5, 1.6], 4) + rng.uniform(-0.05, 0.05, 4)
            grad = iou_loss_grad(g[None], p[None])[0]
            for k in range(4):
                e = np.zeros(4)
                e[k] = h
                num = (numeric_log_iou(g, p + e) - numeric_log_iou(g, p - e)) / (2 * h)
                assert grad[k] == pytest.approx(num, rel=1e-5, abs=1e-9)

    def test_homogeneity(self):
        rng = np.random.default_rng(3)
        g, p = rng.uniform(0.5, 10, (2, 4))
        c = 3.7
        np.testing.assert_allclose(iou_loss_grad(c * g[None], c * p[None]),
                                   iou_loss_grad(g[None], p[None]) / c, rtol=1e-10)

    def test_tape_op_uses_closed_form(self):
        g = np.array([[2.0, 2.0, 2.0, 2.0], [1.0, 3.0, 2.0, 1.0]])
        p = ad.Tensor(np.array([[1.0, 1.0, 1.0, 1.0], [2.0, 2.0, 1.0, 1.5]]), requires_grad=True)
        loss = iou_loss_op(p, g)
        ad.backward(loss)
        assert loss.item() == pytest.approx(iou_loss_values(g, p.data).sum())
        np.testing.assert_allclose(p.grad, iou_loss_grad(g, p.data))


class TestBce:
    def test_near_perfect(self):
        assert bce([ClassTarget(1, 1 - EPS)]) == pytest.approx(0.0, abs=1e-6)

    def test_half(self):
        assert bce([ClassTarget(1, 0.5)]) == pytest.approx(math.log(2), abs=1e-12)

    def test_wrong_side(self):
        assert bce([ClassTarget(0, 0.9)]) == pytest.approx(-math.log(0.1), abs=1e-12)

    def test_clamped(self):
        assert math.isfinite(bce([ClassTarget(1, 0.0)]))
        assert bce([ClassTarget(1, 0.0)]) > 0

    def test_bad_label(self):
        with pytest.raises(ValueError):
            ClassTarget(2, 0.5)


class TestTotal:
    def test_weighted(self):
        assert total_loss(1.0, 0.5, LossConfig(lam=2.0, n_pred=1)) == 2.0

    def test_no_loc(self):
        assert total_loss(3.0, 0.0, LossConfig(lam=1.0, n_pred=4)) == 0.75

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lam=0)
        with pytest.raises(ValueError):
            LossConfig(n_pred=0)

    def test_kind_parse(self):
        assert RegressionKind.parse("iou_loss") is RegressionKind.IOU
        assert RegressionKind.parse("smooth_l1") is RegressionKind.SMOOTH_L1
        with pytest.raises(ValueError):
            RegressionKind.parse("l2")
