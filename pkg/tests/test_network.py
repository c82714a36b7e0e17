import numpy as np
import pytest

from mmsf import autodiff as ad
from mmsf.autodiff import ShapeError, Tensor
from mmsf.network import (BackboneOutput, Model, ModelConfig, clip_boxes, decode_tblr, encode_tblr,
                          half_extents, roi_bins, roi_max_pool)

from gradcheck import relative_error
from oracles import central_diff

MICRO = ModelConfig(image_size=32, stem_channels=2, block_channels=(2, 3, 3, 4), sfe_width=2,
                    fc_width=4, anchor_scales=(8, 16, 32, 64), rpn_pre_nms=20, rpn_post_nms=5)


@pytest.fixture(scope="module")
def model():
    return Model(ModelConfig(), seed=0)


def images(n=1, size=64, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 1, size, size)))


class TestBackbone:
    def test_strides(self, model):
        c = model.backbone_forward(images())
        assert [t.shape[2] for t in c.as_list()] == [16, 8, 4, 2]
        assert [t.shape[1] for t in c.as_list()] == [16, 32, 64, 128]

    def test_indivisible_rejected(self, model):
        with pytest.raises(ShapeError, match="pad to 64x64"):
            model.backbone_forward(images(size=48))

    def test_identity_residuals(self):
        cfg = ModelConfig(stem_channels=4, block_channels=(4, 4, 4, 4))
        m = Model(cfg, seed=1)
        for name, p in m.params.items():
            if name.startswith("c") and (".conv" in name):
                p.data[...] = 0.0
            if name.endswith("proj.w"):
                p.data[...] = np.eye(4)[:, :, None, None]
        x = images(2, 64, seed=3)
        centered = ad.mul(ad.sub(x, cfg.pixel_mean), 1.0 / cfg.pixel_std)
        stem = ad.relu(m.conv(ad.relu(m.conv(centered, "stem.conv1")), "stem.conv2")).data
        c = m.backbone_forward(x)
        for i, t in enumerate(c.as_list()):
            step = 2 ** i
            np.testing.assert_array_equal(t.data, stem[:, :, ::step, ::step])

    def test_gradient_reaches_stem(self, model):
        model.zero_grad()
        c = model.backbone_forward(images())
        ad.backward(ad.sum(ad.mul(c.c4, c.c4)))
        assert np.linalg.norm(model.params["stem.conv1.w"].grad) > 0
        model.zero_grad()


class TestSfe:
    @pytest.mark.parametrize("size", [64, 128, 256])
    def test_shape_law(self, model, size):
        p = model.sfe_encode(model.backbone_forward(images(size=size)))
        spatial = [m.shape[2] for m in p.m]
        assert spatial == [size // 32, size // 16, size // 8, size // 4]
        assert all(b == 2 * a for a, b in zip(spatial, spatial[1:]))
        assert {m.shape[1] for m in p.m} == {32}
        assert [h.shape[2] for h in p.head_maps] == spatial[::-1]

    def test_zero_laterals(self):
        m = Model(ModelConfig(), seed=2)
        for i in range(1, 5):
            m.params[f"sfe.lateral{i}.w"].data[...] = 0.0
            m.params[f"sfe.lateral{i}.b"].data[...] = 0.0
        p = m.sfe_encode(m.backbone_forward(images()))
        for t in p.m:
            assert np.all(t.data == 0.0)

    def test_constant_propagation(self):
        m = Model(ModelConfig(), seed=2)
        consts = {1: 0.5, 2: -1.25, 3: 2.0, 4: 3.0}     # lateral i reads C_i
        for i, v in consts.items():
            m.params[f"sfe.lateral{i}.w"].data[...] = 0.0
            m.params[f"sfe.lateral{i}.b"].data[...] = v
        c = m.backbone_forward(images())
        p = m.sfe_encode(c)
        # M1 = L(C4), M_k = L(C_{5-k}) + U(M_{k-1})
        expected = [3.0, 3.0 + 2.0, 3.0 + 2.0 - 1.25, 3.0 + 2.0 - 1.25 + 0.5]
        for t, e in zip(p.m, expected):
            assert np.all(t.data == e)

    def test_channel_mismatch(self, model):
        c = model.backbone_forward(images())
        bad = BackboneOutput(c.c1, c.c2, c.c2, c.c4)
        with pytest.raises(ShapeError, match="C3"):
            model.sfe_encode(bad)

    def test_single_level_ablation(self):
        m = Model(ModelConfig(use_sfe=False), seed=0)
        p = m.sfe_encode(m.backbone_forward(images(size=128)))
        assert len(p.head_maps) == 1 and p.strides == (32,)
        rpn = m.rpn_head(p)
        assert rpn.logits.shape == (1, m.anchors.num_anchors)


class TestRpn:
    def test_deterministic_and_clipped(self):
        outs = []
        for _ in range(2):
            m = Model(ModelConfig(), seed=5)
            props = m.rpn_forward(m.sfe_encode(m.backbone_forward(images(2, 128))))
            outs.append([[(p.box.as_tuple(), p.objectness) for p in per] for per in props])
            for per in props:
                assert 0 < len(per) <= 50
                for p in per:
                    assert 0 <= p.box.x1 <= p.box.x2 <= 128 and 0 <= p.box.y1 <= p.box.y2 <= 128
        assert outs[0] == outs[1]

    def test_forced_cell_dominates(self):
        m = Model(ModelConfig(), seed=5)
        pyr = m.sfe_encode(m.backbone_forward(images(1, 128)))
        rpn = m.rpn_head(pyr)
        target = np.arange(3) + 3 * (5 * 32 + 7)       # level-1 cell (y=5, x=7)
        rpn.logits.data[0, target] = 50.0
        props = m.rpn_forward(pyr, rpn=rpn)[0]
        top = props[0]
        assert top.objectness == pytest.approx(1.0)
        cx, cy = top.box.center
        assert abs(cx - (7.5 * 4)) < 16 and abs(cy - (5.5 * 4)) < 16

    def test_anchor_layout_mismatch(self, model):
        from mmsf.anchors import generate_anchors
        pyr = model.sfe_encode(model.backbone_forward(images(1, 128)))
        with pytest.raises(ShapeError):
            model.rpn_forward(pyr, generate_anchors(64))


class TestRoiPool:
    def test_constant_map(self):
        fmap = Tensor(np.full((1, 3, 8, 8), 2.5))
        out = roi_max_pool([fmap], (4,), np.array([[0, 0, 32, 32.0]]), np.array([0]), np.array([1]))
        assert out.shape == (1, 3, 7, 7)
        assert np.all(out.data == 2.5)

    def test_aligned_subgrid(self):
        rng = np.random.default_rng(0)
        fmap = rng.normal(size=(2, 2, 16, 16))
        roi = np.array([[4 * 2, 4 * 1, 4 * 16, 4 * 15.0]])      # 14x14 cells, 2x2 per bin
        out = roi_max_pool([Tensor(fmap)], (4,), roi, np.array([1]), np.array([1])).data[0]
        expected = fmap[1, :, 1:15, 2:16].reshape(2, 7, 2, 7, 2).max(axis=(2, 4))
        np.testing.assert_array_equal(out, expected)

    def test_bins_cover_at_least_one_cell(self):
        rng = np.random.default_rng(1)
        xs = np.sort(rng.uniform(0, 128, (200, 2)), axis=1)
        ys = np.sort(rng.uniform(0, 128, (200, 2)), axis=1)
        rois = np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)
        y0, y1, x0, x1 = roi_bins(rois, 4, 32, 32)
        assert np.all(y1 > y0) and np.all(x1 > x0)
        assert y0.min() >= 0 and y1.max() <= 32

    def test_routing(self, model):
        levels = model.roi_levels(np.array([[0, 0, 64, 64], [0, 0, 256, 256.0]]))
        assert levels.tolist() == [2, 4]

    def test_degenerate_roi_rejected(self, model):
        pyr = model.sfe_encode(model.backbone_forward(images(1, 128)))
        with pytest.raises(ValueError, match="zero-area"):
            model.roi_pool(pyr, np.array([[200, 10, 300, 40.0]]))

    def test_outside_roi_is_clipped(self, model):
        pyr = model.sfe_encode(model.backbone_forward(images(1, 128)))
        a = model.roi_pool(pyr, np.array([[-20, -20, 40, 40.0]])).data
        b = model.roi_pool(pyr, np.array([[0, 0, 40, 40.0]])).data
        np.testing.assert_array_equal(a, b)


class TestBoxCoding:
    def test_round_trip(self):
        ref = np.array([[10, 10, 42, 42], [0, 20, 30, 60.0]])
        gt = np.array([[15, 12, 40, 39], [5, 25, 28, 55.0]])
        dist, inside = encode_tblr(ref, gt)
        assert inside.all()
        raw = np.log(dist / half_extents(ref))
        np.testing.assert_allclose(decode_tblr(ref, raw), gt)

    def test_zero_delta_is_identity(self):
        ref = np.array([[3, 4, 20, 40.0]])
        np.testing.assert_allclose(decode_tblr(ref, np.zeros((1, 4))), ref)

    def test_outside_center_flagged(self):
        _, inside = encode_tblr(np.array([[0, 0, 10, 10.0]]), np.array([[20, 20, 30, 30.0]]))
        assert not inside[0]

    def test_clip(self):
        np.testing.assert_array_equal(clip_boxes(np.array([[-3, 5, 140, 90.0]]), 128), [[0, 5, 128, 90]])


class TestDetect:
    def test_blank_image(self, model):
        dets = model.detect(np.zeros((1, 128, 128)))[0]
        assert len(dets) <= 100
        assert all(np.isfinite(d.score) and 0 <= d.score <= 1 for d in dets)

    def test_deterministic(self):
        x = np.random.default_rng(4).uniform(size=(2, 128, 128))
        a = Model(ModelConfig(), seed=3).detect(x)
        b = Model(ModelConfig(), seed=3).detect(x)
        assert a == b


def test_every_parameter_gets_gradient():
    from mmsf.config import RunConfig
    from mmsf.train import compute_losses
    cfg = RunConfig()
    m = Model(cfg.model_config(), seed=0)
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(2, 128, 128))
    boxes = np.array([[30, 40, 60, 75], [70, 20, 100, 48.0]])
    total, _ = compute_losses(m, imgs, boxes, np.array([0, 1]), cfg, rng)
    ad.backward(total)
    dead = [k for k, p in m.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_batch_without_regression_targets_still_steps():
    """A small gt between the stride-32 anchor centres of the single-level model
    leaves no regression pair; every parameter must still get a gradient."""
    from mmsf.config import RunConfig
    from mmsf.train import compute_losses
    cfg = RunConfig(sfe=False)
    m = Model(cfg.model_config(), seed=0)
    rng = np.random.default_rng(0)
    total, parts = compute_losses(m, rng.uniform(size=(1, 128, 128)), np.array([[20, 20, 30, 30.0]]),
                                  np.array([1]), cfg, rng)
    assert parts["rpn_loc"] == 0.0
    ad.backward(total)
    ad.sgd_step(m.parameters(), 0.01, 1e-4, 0.9)
    ad.reset_velocity(m.parameters())


def test_end_to_end_finite_differences():
    """Scalar head loss of a micro model: tape gradient w.r.t. the input image
    against central differences."""
    m = Model(MICRO, seed=0)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(size=(1, 1, 32, 32))
    rois = np.array([[2, 3, 20, 25], [8, 1, 30, 31.0]])
    weights = rng.normal(size=(2, 2))

    def loss_of(x):
        pyr = m.sfe_encode(m.backbone_forward(x))
        rpn = m.rpn_head(pyr)
        cls, reg = m.decoder(m.roi_pool(pyr, rois))
        head = ad.sum(ad.mul(cls, weights))
        return ad.add(ad.add(head, ad.mean(ad.sigmoid(rpn.logits))), ad.mean(reg))

    x = Tensor(x0.copy(), requires_grad=True)
    ad.backward(loss_of(x))
    numeric = central_diff(lambda v: loss_of(Tensor(v)).item(), x0, 1e-6)
    assert relative_error(x.grad, numeric) < 1e-3
