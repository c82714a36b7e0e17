"""Two-stage detector: residual backbone, top-down SFE fusion, per-level RPN,
quantised RoI pooling and a two-layer decoder.

Pyramid indexing follows the fusion order: ``M1 = L(C4)`` is the coarsest map
and ``M4`` the finest.  Anchor levels count the other way (level 1 = stride 4),
so level ``k`` reads ``M_{5-k}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet, assign_levels, generate_anchors
from .autodiff import ConvSpec, Tensor, ShapeError
from .geometry import Box, Detection, greedy_nms_indices, nms

MAX_LOG_SCALE = math.log(64.0)
POOL = 7


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    stem_channels: int = 8
    block_channels: tuple = (16, 32, 64, 128)
    units_per_block: int = 1
    sfe_width: int = 32
    use_sfe: bool = True
    smoothing_conv: bool = True
    fc_width: int = 128
    anchor_scales: tuple = (32, 64, 128, 256)
    anchor_ratios: tuple = (0.6, 1.0, 1.1)
    rpn_pre_nms: int = 200
    rpn_post_nms: int = 50
    rpn_nms: float = 0.7
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    pixel_mean: float = 0.2
    pixel_std: float = 0.2

    @property
    def strides(self) -> tuple:
        return (4, 8, 16, 32)

    @property
    def anchors_per_cell(self) -> int:
        n = len(self.anchor_ratios)
        return n if self.use_sfe else n * len(self.anchor_scales)


@dataclass
class BackboneOutput:
    c1: Tensor
    c2: Tensor
    c3: Tensor
    c4: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.c1, self.c2, self.c3, self.c4]


@dataclass
class FeaturePyramid:
    """Fused maps ``m[0..3] = M1..M4`` (coarse to fine) and the maps fed to
    the heads, ordered by anchor level (fine to coarse)."""

    m: list
    head_maps: list
    strides: tuple

    @property
    def width(self) -> int:
        return self.m[0].shape[1]


@dataclass
class Proposal:
    box: Box
    objectness: float
    level: int


@dataclass
class RpnOutput:
    logits: Tensor           # (N, A_total)
    deltas: Tensor           # (N, A_total, 4) raw log-scale (t, b, l, r)


class Model:
    """Parameter container plus the forward passes."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        if cfg.image_size % 32:
            raise ValueError("image_size must be divisible by 32")
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.specs: dict[str, ConvSpec] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)
        if cfg.use_sfe:
            self.anchors = generate_anchors(cfg.image_size, cfg.anchor_scales, cfg.anchor_ratios, cfg.strides)
        else:
            self.anchors = generate_anchors(cfg.image_size, cfg.anchor_scales, cfg.anchor_ratios,
                                            single_level_stride=32)

    # ------------------------------------------------------------ construction
    def _conv(self, rng, name, k, cin, cout, stride=1, bias=True, std=None):
        pad = k // 2
        self.specs[name] = ConvSpec(k, cin, cout, stride, pad)
        if std is None:
            w = ad.he_normal(rng, (cout, cin, k, k), cin * k * k, name=f"{name}.w")
        else:
            w = Tensor(rng.normal(0, std, (cout, cin, k, k)), requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.w"] = w
        if bias:
            self.params[f"{name}.b"] = ad.zeros((cout,), name=f"{name}.b")

    def _fc(self, rng, name, fin, fout, std=None):
        if std is None:
            w = ad.he_normal(rng, (fout, fin), fin, name=f"{name}.w")
        else:
            w = Tensor(rng.normal(0, std, (fout, fin)), requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.w"] = w
        self.params[f"{name}.b"] = ad.zeros((fout,), name=f"{name}.b")

    def _build(self, rng):
        cfg = self.cfg
        s = cfg.stem_channels
        self._conv(rng, "stem.conv1", 3, 1, s, stride=2)
        self._conv(rng, "stem.conv2", 3, s, s, stride=2)
        cin = s
        for i, cout in enumerate(cfg.block_channels, start=1):
            stride = 1 if i == 1 else 2
            for u in range(cfg.units_per_block):
                pre = f"c{i}.u{u}"
                st = stride if u == 0 else 1
                self._conv(rng, f"{pre}.conv1", 3, cin, cout, stride=st)
                self._conv(rng, f"{pre}.conv2", 3, cout, cout)
                if u == 0:
                    self._conv(rng, f"{pre}.proj", 1, cin, cout, stride=st, bias=False)
                cin = cout
        width = cfg.sfe_width
        lateral_from = range(1, 5) if cfg.use_sfe else [4]
        for i in lateral_from:
            self._conv(rng, f"sfe.lateral{i}", 1, cfg.block_channels[i - 1], width)
        if cfg.smoothing_conv:
            for k in (range(1, 5) if cfg.use_sfe else [1]):
                self._conv(rng, f"sfe.smooth{k}", 3, width, width)
        a = cfg.anchors_per_cell
        self._conv(rng, "rpn.conv", 3, width, width)
        self._conv(rng, "rpn.obj", 1, width, a, std=0.01)
        self._conv(rng, "rpn.reg", 1, width, 4 * a, std=0.01)
        self._fc(rng, "head.fc1", width * POOL * POOL, cfg.fc_width)
        self._fc(rng, "head.fc2", cfg.fc_width, cfg.fc_width)
        self._fc(rng, "head.cls", cfg.fc_width, 2, std=0.01)
        self._fc(rng, "head.reg", cfg.fc_width, 4, std=0.001)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def conv(self, x: Tensor, name: str) -> Tensor:
        return ad.conv2d(x, self.params[f"{name}.w"], self.specs[name], self.params.get(f"{name}.b"))

    # ------------------------------------------------------------ stages
    def backbone_forward(self, image: Tensor) -> BackboneOutput:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"expected an (N, 1, H, W) image batch, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image {h}x{w} is not divisible by 32; pad to "
                             f"{-(-h // 32) * 32}x{-(-w // 32) * 32}")
        # centered input keeps some stem units active whatever sign the weights drift to
        x = ad.mul(ad.sub(image, self.cfg.pixel_mean), 1.0 / self.cfg.pixel_std)
        x = ad.relu(self.conv(x, "stem.conv1"))
        x = ad.relu(self.conv(x, "stem.conv2"))
        outs = []
        for i in range(1, 5):
            for u in range(self.cfg.units_per_block):
                pre = f"c{i}.u{u}"
                f = self.conv(ad.relu(self.conv(x, f"{pre}.conv1")), f"{pre}.conv2")
                short = self.conv(x, f"{pre}.proj") if u == 0 else x
                x = ad.relu(ad.add(f, short))
            outs.append(x)
        return BackboneOutput(*outs)

    def sfe_encode(self, c: BackboneOutput) -> FeaturePyramid:
        cs = c.as_list()
        for i, t in enumerate(cs, start=1):
            expect = self.cfg.block_channels[i - 1]
            if t.shape[1] != expect:
                raise ShapeError(f"C{i} has {t.shape[1]} channels, lateral expects {expect}")
        if not self.cfg.use_sfe:
            m1 = self.conv(cs[3], "sfe.lateral4")
            head = self.conv(m1, "sfe.smooth1") if self.cfg.smoothing_conv else m1
            return FeaturePyramid([m1], [head], (32,))
        m = [self.conv(cs[3], "sfe.lateral4")]
        for k in range(2, 5):
            lat = self.conv(cs[4 - k], f"sfe.lateral{5 - k}")
            m.append(ad.add(lat, ad.nearest_upsample2x(m[-1])))
        heads = []
        for k in range(4, 0, -1):  # anchor level 1 (finest) first
            mk = m[k - 1]
            heads.append(self.conv(mk, f"sfe.smooth{k}") if self.cfg.smoothing_conv else mk)
        return FeaturePyramid(m, heads, self.cfg.strides)

    def rpn_head(self, pyramid: FeaturePyramid) -> RpnOutput:
        a = self.cfg.anchors_per_cell
        logits, deltas = [], []
        for fmap in pyramid.head_maps:
            n, _, h, w = fmap.shape
            hid = ad.relu(self.conv(fmap, "rpn.conv"))
            obj = self.conv(hid, "rpn.obj")
            reg = self.conv(hid, "rpn.reg")
            logits.append(ad.reshape(ad.transpose(obj, (0, 2, 3, 1)), (n, h * w * a)))
            reg = ad.reshape(reg, (n, a, 4, h, w))
            deltas.append(ad.reshape(ad.transpose(reg, (0, 3, 4, 1, 2)), (n, h * w * a, 4)))
        return RpnOutput(ad.concat(logits, axis=1), ad.concat(deltas, axis=1))

    def rpn_forward(self, pyramid: FeaturePyramid, anchors: AnchorSet | None = None,
                    rpn: RpnOutput | None = None) -> list[list[Proposal]]:
        """Proposals per image: top-K by objectness, decoded, clipped, NMS-ed."""
        anchors = self.anchors if anchors is None else anchors
        rpn = self.rpn_head(pyramid) if rpn is None else rpn
        if rpn.logits.shape[1] != anchors.num_anchors:
            raise ShapeError("anchor set does not match the RPN output layout")
        boxes, scores, levels = self.proposals_arrays(rpn, anchors)
        return [[Proposal(Box(*b), float(s), int(l)) for b, s, l in zip(bb, ss, ll)]
                for bb, ss, ll in zip(boxes, scores, levels)]

    def proposals_arrays(self, rpn: RpnOutput, anchors: AnchorSet | None = None):
        anchors = self.anchors if anchors is None else anchors
        cfg = self.cfg
        size = cfg.image_size
        out_boxes, out_scores, out_levels = [], [], []
        for i in range(rpn.logits.shape[0]):
            logit = rpn.logits.data[i]
            k = min(cfg.rpn_pre_nms, len(logit))
            top = np.argsort(-logit, kind="stable")[:k]
            boxes = decode_tblr(anchors.boxes[top], rpn.deltas.data[i, top])
            boxes = clip_boxes(boxes, size)
            score = ad._sigmoid(logit[top])
            ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
            boxes, score, lv = boxes[ok], score[ok], anchors.levels[top][ok]
            keep = greedy_nms_indices(boxes, score, cfg.rpn_nms)[: cfg.rpn_post_nms]
            out_boxes.append(boxes[keep])
            out_scores.append(score[keep])
            out_levels.append(lv[keep])
        return out_boxes, out_scores, out_levels

    def roi_levels(self, rois: np.ndarray) -> np.ndarray:
        if not self.cfg.use_sfe:
            return np.ones(len(rois), dtype=int)
        return assign_levels(rois)

    def roi_pool(self, pyramid: FeaturePyramid, rois: np.ndarray, batch_index: np.ndarray | None = None) -> Tensor:
        """7x7 max-pooled features per RoI, read from the routed pyramid level.

        RoIs are clipped to the image first; one left with zero area raises.
        """
        rois = clip_boxes(np.asarray(rois, float).reshape(-1, 4), self.cfg.image_size)
        if batch_index is None:
            batch_index = np.zeros(len(rois), dtype=int)
        return roi_max_pool(pyramid.head_maps, pyramid.strides, rois, np.asarray(batch_index), self.roi_levels(rois))

    def decoder(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        x = ad.flatten(pooled)
        x = ad.relu(ad.linear(x, p["head.fc1.w"], p["head.fc1.b"]))
        x = ad.relu(ad.linear(x, p["head.fc2.w"], p["head.fc2.b"]))
        return ad.linear(x, p["head.cls.w"], p["head.cls.b"]), ad.linear(x, p["head.reg.w"], p["head.reg.b"])

    def detect(self, images: np.ndarray) -> list[list[Detection]]:
        """Detections per image for an ``(N, H, W)`` or ``(N, 1, H, W)`` batch."""
        images = np.asarray(images, float)
        if images.ndim == 2:
            images = images[None]
        if images.ndim == 3:
            images = images[:, None]
        cfg = self.cfg
        x = Tensor(images)
        pyramid = self.sfe_encode(self.backbone_forward(x))
        rpn = self.rpn_head(pyramid)
        boxes, scores, _ = self.proposals_arrays(rpn)
        results = []
        for i in range(len(images)):
            if len(boxes[i]) == 0:
                results.append([])
                continue
            pooled = self.roi_pool(pyramid, boxes[i], np.full(len(boxes[i]), i))
            cls_logits, reg = self.decoder(pooled)
            probs = ad.softmax(cls_logits).data
            refined = clip_boxes(decode_tblr(boxes[i], reg.data), cfg.image_size)
            dets = []
            for c in (0, 1):
                s = scores[i] * probs[:, c]
                for j in np.flatnonzero(s >= cfg.score_thresh):
                    b = refined[j]
                    if b[2] - b[0] <= 0 or b[3] - b[1] <= 0:
                        continue
                    dets.append(Detection(Box(*map(float, b)), float(min(max(s[j], 0.0), 1.0)), c, i))
            results.append(nms(dets, cfg.nms_iou)[: cfg.max_detections])
        return results


# ---------------------------------------------------------------- box coding

def ref_geometry(ref: np.ndarray):
    """Center and half extents of ``(n, 4)`` reference boxes."""
    cx = 0.5 * (ref[:, 0] + ref[:, 2])
    cy = 0.5 * (ref[:, 1] + ref[:, 3])
    hw = 0.5 * (ref[:, 2] - ref[:, 0])
    hh = 0.5 * (ref[:, 3] - ref[:, 1])
    return cx, cy, hw, hh


def half_extents(ref: np.ndarray) -> np.ndarray:
    """Per-coordinate (t, b, l, r) normaliser: half height for t/b, half width for l/r."""
    _, _, hw, hh = ref_geometry(ref)
    return np.stack([hh, hh, hw, hw], axis=1)


def decode_tblr(ref: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Corner boxes from log-scale side distances measured from the ref center."""
    ref = np.asarray(ref, float).reshape(-1, 4)
    cx, cy, _, _ = ref_geometry(ref)
    d = np.exp(np.clip(deltas, -MAX_LOG_SCALE, MAX_LOG_SCALE)) * half_extents(ref)
    return np.stack([cx - d[:, 2], cy - d[:, 0], cx + d[:, 3], cy + d[:, 1]], axis=1)


def encode_tblr(ref: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Side distances (t, b, l, r) of ``gt`` from each ref center, and a mask of
    rows whose center lies strictly inside the gt box."""
    ref = np.asarray(ref, float).reshape(-1, 4)
    gt = np.asarray(gt, float).reshape(-1, 4)
    cx, cy, _, _ = ref_geometry(ref)
    d = np.stack([cy - gt[:, 1], gt[:, 3] - cy, cx - gt[:, 0], gt[:, 2] - cx], axis=1)
    return d, np.all(d > 0, axis=1)


def clip_boxes(boxes: np.ndarray, size: float) -> np.ndarray:
    return np.clip(boxes, 0.0, float(size))


# ---------------------------------------------------------------- RoI pooling

def roi_bins(rois: np.ndarray, stride: int, height: int, width: int, pool: int = POOL):
    """Integer cell ranges ``[start, end)`` of each pooling bin.

    The RoI is snapped outward to whole cells (floor start, ceil end), then
    split into ``pool`` bins whose edges are floored at the start and ceiled at
    the end, so every bin holds at least one cell.
    """
    def axis_bins(lo, hi, limit):
        start = np.clip(np.floor(lo / stride), 0, limit - 1)
        end = np.clip(np.ceil(hi / stride), start + 1, limit)
        size = (end - start) / pool
        j = np.arange(pool)
        b0 = start[:, None] + np.floor(j[None, :] * size[:, None])
        b1 = start[:, None] + np.ceil((j[None, :] + 1) * size[:, None])
        b0 = np.clip(b0, 0, limit - 1)
        b1 = np.clip(np.maximum(b1, b0 + 1), 1, limit)
        return b0.astype(int), b1.astype(int)

    y0, y1 = axis_bins(rois[:, 1], rois[:, 3], height)
    x0, x1 = axis_bins(rois[:, 0], rois[:, 2], width)
    return y0, y1, x0, x1


def roi_max_pool(maps: Sequence[Tensor], strides: Sequence[int], rois: np.ndarray,
                 batch_index: np.ndarray, levels: np.ndarray) -> Tensor:
    """Quantised RoI max pooling over a list of maps; ``levels`` are 1-based."""
    r = len(rois)
    c = maps[0].shape[1]
    out = np.zeros((r, POOL, POOL, c))
    picks = []
    for li, fmap in enumerate(maps):
        sel = np.flatnonzero(levels == li + 1)
        if len(sel) == 0:
            picks.append(None)
            continue
        feat = fmap.data.transpose(0, 2, 3, 1)   # N, H, W, C
        h, w = feat.shape[1:3]
        y0, y1, x0, x1 = roi_bins(rois[sel], strides[li], h, w)
        kh = int((y1 - y0).max())
        kw = int((x1 - x0).max())
        ys = np.minimum(y0[:, :, None] + np.arange(kh), y1[:, :, None] - 1)   # (R, P, kh)
        xs = np.minimum(x0[:, :, None] + np.arange(kw), x1[:, :, None] - 1)   # (R, P, kw)
        b = batch_index[sel][:, None, None, None, None]
        yy = ys[:, :, None, :, None]
        xx = xs[:, None, :, None, :]
        win = feat[b, yy, xx]                               # (R, P, P, kh, kw, C)
        win = win.reshape(len(sel), POOL, POOL, kh * kw, c)
        arg = win.argmax(axis=3)                            # (R, P, P, C)
        out[sel] = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        yb = np.broadcast_to(yy, (len(sel), POOL, POOL, kh, kw)).reshape(len(sel), POOL, POOL, kh * kw)
        xb = np.broadcast_to(xx, (len(sel), POOL, POOL, kh, kw)).reshape(len(sel), POOL, POOL, kh * kw)
        src_y = np.take_along_axis(yb[..., None], arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        src_x = np.take_along_axis(xb[..., None], arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        picks.append((sel, src_y, src_x))

    def grad_fn(g):
        g = g.transpose(0, 2, 3, 1)                        # R, P, P, C
        grads = []
        for fmap, pk in zip(maps, picks):
            if pk is None or not fmap.requires_grad:
                grads.append(None)
                continue
            sel, src_y, src_x = pk
            gfeat = np.zeros(fmap.data.transpose(0, 2, 3, 1).shape)
            bb = np.broadcast_to(batch_index[sel][:, None, None, None], src_y.shape)
            cc = np.broadcast_to(np.arange(c), src_y.shape)
            np.add.at(gfeat, (bb.ravel(), src_y.ravel(), src_x.ravel(), cc.ravel()), g[sel].ravel())
            grads.append(gfeat.transpose(0, 3, 1, 2))
        return tuple(grads)

    return ad.make_result(out.transpose(0, 3, 1, 2).copy(), list(maps), grad_fn)
