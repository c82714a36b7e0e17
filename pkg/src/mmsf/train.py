"""Training loop, loss assembly and dataset-level inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .anchors import POSITIVE, NEGATIVE, match_anchors
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .evalmetrics import EvalReport, GroundTruth, evaluate
from .geometry import Box, Detection, iou_matrix
from .losses import (RegressionKind, iou_loss_op, sigmoid_bce_op, smooth_l1_op,
                     softmax_cross_entropy_op)
from .network import Model, encode_tblr, half_extents

log = logging.getLogger(__name__)

Sample = tuple  # (image (H, W) float array, Box, class_id)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    lr: float
    total: float
    rpn_cls: float
    rpn_loc: float
    cls: float
    loc: float
    val_map: float | None = None
    val_iou: float | None = None

    def line(self) -> str:
        val = "" if self.val_map is None else f" val_mAP={self.val_map:.4f}"
        if self.val_iou is not None:
            val += f" val_IoU={self.val_iou:.4f}"
        return (f"epoch {self.epoch:3d} lr={self.lr:.5f} total={self.total:.4f} "
                f"rpn_cls={self.rpn_cls:.4f} rpn_loc={self.rpn_loc:.4f} "
                f"cls={self.cls:.4f} loc={self.loc:.4f}{val}")


@dataclass
class TrainResult:
    model: Model
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_map: float = -1.0


# ---------------------------------------------------------------- losses

def regression_loss(kind: RegressionKind, raw: ad.Tensor, ref: np.ndarray, gt_dist: np.ndarray) -> ad.Tensor:
    """Summed box loss for log-scale predictions ``raw`` measured from ``ref`` centers."""
    pred = ad.mul(ad.exp(raw), half_extents(ref))
    if kind is RegressionKind.IOU:
        return iou_loss_op(pred, gt_dist)
    scale = np.sqrt((ref[:, 2] - ref[:, 0]) * (ref[:, 3] - ref[:, 1]))
    return smooth_l1_op(pred, gt_dist, scale)


def jitter_boxes(box: np.ndarray, n: int, rng: np.random.Generator, size: int) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    cx, cy = box[0] + w / 2, box[1] + h / 2
    shift = rng.uniform(-0.15, 0.15, size=(n, 2)) * [w, h]
    scale = np.exp(rng.uniform(-0.2, 0.2, size=(n, 2))) * [w, h]
    c = np.array([cx, cy]) + shift
    out = np.concatenate([c - scale / 2, c + scale / 2], axis=1)
    return np.clip(out, 0, size)


def compute_losses(model: Model, images: np.ndarray, boxes: np.ndarray, labels: np.ndarray,
                   cfg: RunConfig, rng: np.random.Generator):
    """Total training loss for a batch with one gt per image, plus its parts."""
    kind = RegressionKind.parse(cfg.regression)
    n = len(images)
    x = ad.Tensor(images[:, None])
    pyramid = model.sfe_encode(model.backbone_forward(x))
    rpn = model.rpn_head(pyramid)
    anchors = model.anchors
    a_total = anchors.num_anchors

    # RPN targets
    cls_idx, cls_tgt, reg_idx, reg_ref, reg_gt = [], [], [], [], []
    for i in range(n):
        match = match_anchors(anchors, boxes[i:i + 1], cfg.rpn_pos_iou, cfg.rpn_neg_iou)
        pos = match.positives
        neg = match.negatives
        n_pos = min(len(pos), cfg.rpn_batch // 2)
        pos = rng.choice(pos, n_pos, replace=False) if len(pos) > n_pos else pos
        n_neg = min(len(neg), cfg.rpn_batch - len(pos))
        neg = rng.choice(neg, n_neg, replace=False)
        cls_idx += [i * a_total + pos, i * a_total + neg]
        cls_tgt += [np.ones(len(pos)), np.zeros(len(neg))]
        dist, inside = encode_tblr(anchors.boxes[pos], np.repeat(boxes[i:i + 1], len(pos), axis=0))
        reg_idx.append(i * a_total + pos[inside])
        reg_ref.append(anchors.boxes[pos[inside]])
        reg_gt.append(dist[inside])
    cls_idx = np.concatenate(cls_idx)
    logits = ad.take_rows(ad.reshape(rpn.logits, (n * a_total,)), cls_idx)
    rpn_cls = ad.mul(sigmoid_bce_op(logits, np.concatenate(cls_tgt)), 1.0 / max(len(cls_idx), 1))
    reg_idx = np.concatenate(reg_idx)
    if len(reg_idx):
        raw = ad.take_rows(ad.reshape(rpn.deltas, (n * a_total, 4)), reg_idx)
        rpn_loc = ad.mul(regression_loss(kind, raw, np.concatenate(reg_ref), np.concatenate(reg_gt)),
                         1.0 / len(reg_idx))
    else:
        # no usable target in this batch: keep the head on the tape with a zero gradient
        rpn_loc = ad.mul(ad.sum(rpn.deltas), 0.0)

    # second stage: positives among proposals, the gt itself and jittered copies
    props, _, _ = model.proposals_arrays(rpn)
    rois, bidx, roi_labels, roi_gt = [], [], [], []
    for i in range(n):
        gt = boxes[i]
        cand = np.concatenate([props[i], gt[None], jitter_boxes(gt, 8, rng, cfg.image_size)])
        ov = iou_matrix(cand, gt[None])[:, 0]
        keep = np.flatnonzero(ov >= cfg.roi_pos_iou)
        if len(keep) > cfg.roi_per_image:
            keep = rng.choice(keep, cfg.roi_per_image, replace=False)
        rois.append(cand[keep])
        bidx.append(np.full(len(keep), i))
        roi_labels.append(np.full(len(keep), labels[i]))
        roi_gt.append(np.repeat(gt[None], len(keep), axis=0))
    rois = np.concatenate(rois)
    bidx = np.concatenate(bidx)
    roi_labels = np.concatenate(roi_labels)
    roi_gt = np.concatenate(roi_gt)
    n_pred = max(len(rois), 1)
    pooled = model.roi_pool(pyramid, rois, bidx)
    cls_logits, reg = model.decoder(pooled)
    l_cls = softmax_cross_entropy_op(cls_logits, roi_labels)
    dist, inside = encode_tblr(rois, roi_gt)
    sel = np.flatnonzero(inside)
    if len(sel):
        l_loc = regression_loss(kind, ad.take_rows(reg, sel), rois[sel], dist[sel])
    else:
        l_loc = ad.mul(ad.sum(reg), 0.0)
    det = ad.mul(ad.add(l_cls, ad.mul(l_loc, cfg.lam)), 1.0 / n_pred)
    total = ad.add(ad.add(rpn_cls, rpn_loc), det)
    parts = {"rpn_cls": rpn_cls.item(), "rpn_loc": rpn_loc.item(),
             "cls": l_cls.item() / n_pred, "loc": l_loc.item() / n_pred}
    return total, parts


# ---------------------------------------------------------------- data helpers

def augment(image: np.ndarray, box: np.ndarray, rng: np.random.Generator):
    size_h, size_w = image.shape
    box = box.copy()
    if rng.random() < 0.5:
        image = image[:, ::-1]
        box[[0, 2]] = size_w - box[[2, 0]]
    if rng.random() < 0.5:
        image = image[::-1, :]
        box[[1, 3]] = size_h - box[[3, 1]]
    return np.ascontiguousarray(image), box


def split_train_val(samples: Sequence[Sample], val_fraction: float):
    n_val = int(round(len(samples) * val_fraction))
    if n_val == 0 or n_val >= len(samples):
        return list(samples), []
    return list(samples[:-n_val]), list(samples[-n_val:])


def detect_samples(model: Model, samples: Sequence[Sample], batch_size: int = 8):
    """Run the detector over samples; returns (detections, ground truths)."""
    dets, gts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s[0] for s in chunk])
        for j, per_image in enumerate(model.detect(images)):
            idx = start + j
            dets += [Detection(d.box, d.score, d.class_id, idx) for d in per_image]
        gts += [GroundTruth(start + j, s[1], s[2]) for j, s in enumerate(chunk)]
    return dets, gts


def evaluate_model(model: Model, samples: Sequence[Sample], batch_size: int = 8) -> EvalReport:
    dets, gts = detect_samples(model, samples, batch_size)
    return evaluate(dets, gts, classes=2)


# ---------------------------------------------------------------- loop

def lr_at(cfg: RunConfig, epoch: int, it: int) -> float:
    """Linear warm-up then x0.1 steps at 2/3 and 11/12 of the schedule."""
    lr = cfg.lr
    for milestone in (math.floor(cfg.epochs * 2 / 3), math.floor(cfg.epochs * 11 / 12)):
        if milestone > 0 and epoch >= milestone:
            lr *= 0.1
    if cfg.warmup_iters and it < cfg.warmup_iters:
        lr *= 0.001 + (1 - 0.001) * it / cfg.warmup_iters
    return lr


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _dump_divergence(out_dir, payload: dict) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / "diverged.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def train(cfg: RunConfig, train_samples: Sequence[Sample], val_samples: Sequence[Sample] = (),
          out_dir=None, on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train a fresh model; the best-validation weights are returned (and
    written to ``out_dir/best.ckpt`` when ``out_dir`` is given)."""
    model = Model(cfg.model_config(), seed=cfg.seed)
    params = model.parameters()
    ad.reset_velocity(params)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(train_samples)
    result = TrainResult(model)
    best_state = None
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"total": 0.0, "rpn_cls": 0.0, "rpn_loc": 0.0, "cls": 0.0, "loc": 0.0}
        steps = 0
        lr = cfg.lr
        for start in range(0, n, cfg.batch_size):
            batch = [train_samples[k] for k in order[start:start + cfg.batch_size]]
            imgs, bxs = [], []
            for img, box, _ in batch:
                box = np.array(box.as_tuple(), float)
                if cfg.flip:
                    img, box = augment(img, box, rng)
                imgs.append(img)
                bxs.append(box)
            labels = np.array([s[2] for s in batch])
            model.zero_grad()
            total, parts = compute_losses(model, np.stack(imgs), np.stack(bxs), labels, cfg, rng)
            value = total.item()
            if not math.isfinite(value):
                dump = _dump_divergence(out_dir, {"epoch": epoch, "iteration": it, "parts": parts,
                                                  "param_norms": {k: float(np.linalg.norm(p.data))
                                                                  for k, p in model.params.items()}})
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} iteration {it}: {parts}"
                                       + (f" (diagnostics in {dump})" if dump else ""))
            ad.backward(total)
            clip_gradients(params, cfg.grad_clip)
            lr = lr_at(cfg, epoch, it)
            ad.sgd_step(params, lr, cfg.weight_decay, cfg.momentum)
            sums["total"] += value
            for k, v in parts.items():
                sums[k] += v
            steps += 1
            it += 1
        entry = EpochLog(epoch + 1, lr, *(sums[k] / steps for k in ("total", "rpn_cls", "rpn_loc", "cls", "loc")))
        if val_samples:
            rep = evaluate_model(model, val_samples)
            entry.val_map, entry.val_iou = rep.map, rep.mean_iou
        result.history.append(entry)
        log.info(entry.line())
        if on_epoch:
            on_epoch(entry)
        score = entry.val_map if entry.val_map is not None else -entry.total
        if best_state is None or score > result.best_val_map:
            result.best_val_map = score
            result.best_epoch = epoch + 1
            best_state = {k: p.data.copy() for k, p in model.params.items()}
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "best.ckpt", model.params, cfg.to_text())
    for k, p in model.params.items():
        p.data[...] = best_state[k]
    return result


def load_model(path) -> tuple[Model, RunConfig]:
    params, text = load_checkpoint(path)
    cfg = RunConfig.from_text(text)
    model = Model(cfg.model_config(), seed=cfg.seed)
    missing = set(model.params) ^ set(params)
    if missing:
        raise ValueError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
    for k, p in model.params.items():
        if p.shape != params[k].shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {params[k].shape}")
        p.data[...] = params[k]
    return model, cfg
