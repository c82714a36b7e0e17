"""Regression and classification losses.

Scalar reference forms (``smooth_l1``, ``iou_loss_forward``,
``iou_loss_backward``, ``bce``) sit next to batched tape ops used in
training.  The IoU-loss tape op does not differentiate through its forward
expression; it applies the closed-form partials from ``iou_loss_grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .autodiff import Tensor, make_result
from .geometry import TblrBox, tblr_overlap

EPS = 1e-7


class RegressionKind(str, Enum):
    SMOOTH_L1 = "smooth_l1"
    IOU = "iou"

    @classmethod
    def parse(cls, value: "str | RegressionKind") -> "RegressionKind":
        if isinstance(value, cls):
            return value
        value = str(value).strip().lower()
        if value in ("iou", "iou_loss"):
            return cls.IOU
        if value in ("smooth_l1", "smoothl1", "sl1"):
            return cls.SMOOTH_L1
        raise ValueError(f"unknown regression kind {value!r}")


@dataclass(frozen=True)
class ClassTarget:
    p_star: int
    p: float

    def __post_init__(self):
        if self.p_star not in (0, 1):
            raise ValueError("p_star must be 0 or 1")

    @property
    def clamped_p(self) -> float:
        return min(max(self.p, EPS), 1.0 - EPS)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 2.0
    n_pred: int = 1
    regression_kind: RegressionKind = RegressionKind.IOU

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.n_pred < 1:
            raise ValueError("n_pred must be >= 1")


def smooth_l1(d: float) -> float:
    ad = abs(d)
    return 0.5 * d * d if ad < 1.0 else ad - 0.5


def iou_loss_forward(gt: TblrBox, pred: TblrBox) -> tuple[float | None, tuple[float, float, float, float]]:
    """``-ln(I/U)`` with I and U floored at ``EPS``.

    Returns ``(None, terms)`` when the boxes do not intersect; such a pair
    carries no loss.
    """
    inter, union, x_gt, x_pred = tblr_overlap(gt, pred)
    terms = (inter, union, x_gt, x_pred)
    if inter <= 0:
        return None, terms
    return -math.log(max(inter, EPS) / max(union, EPS)), terms


def iou_loss_backward(gt: TblrBox, pred: TblrBox) -> tuple[float, float, float, float] | None:
    """Partials of the IoU loss w.r.t. the predicted (t, b, l, r) distances.

    dL/dx = dX_pred/dx / U - (U + I) / (U I) * dI/dx, where a predicted side
    only moves I while it lies strictly inside the gt side.
    """
    inter, union, _, _ = tblr_overlap(gt, pred)
    if inter <= 0:
        return None
    g = iou_loss_grad(np.array([gt.distances]), np.array([pred.distances]))[0]
    return tuple(float(v) for v in g)


def _overlap_terms(gt: np.ndarray, pred: np.ndarray):
    xt, xb, xl, xr = gt.T
    pt, pb, pl, pr = pred.T
    x_pred = (pt + pb) * (pl + pr)
    x_gt = (xt + xb) * (xl + xr)
    i_h = np.minimum(xt, pt) + np.minimum(xb, pb)
    i_w = np.minimum(xl, pl) + np.minimum(xr, pr)
    inter = i_w * i_h
    union = x_gt + x_pred - inter
    return x_gt, x_pred, i_h, i_w, inter, union


def iou_loss_values(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Per-row IoU loss for ``(n, 4)`` arrays of (t, b, l, r) distances."""
    _, _, _, _, inter, union = _overlap_terms(np.asarray(gt, float), np.asarray(pred, float))
    return -np.log(np.maximum(inter, EPS) / np.maximum(union, EPS))


def iou_loss_grad(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Closed-form partials of the per-row IoU loss w.r.t. ``pred``."""
    gt = np.asarray(gt, float)
    pred = np.asarray(pred, float)
    _, _, i_h, i_w, inter, union = _overlap_terms(gt, pred)
    inter = np.maximum(inter, EPS)
    union = np.maximum(union, EPS)
    pt, pb, pl, pr = pred.T
    dxp = np.stack([pl + pr, pl + pr, pt + pb, pt + pb], axis=1)
    binding = pred < gt
    di = np.where(binding, np.stack([i_w, i_w, i_h, i_h], axis=1), 0.0)
    return dxp / union[:, None] - ((union + inter) / (union * inter))[:, None] * di


def bce(targets: Sequence[ClassTarget]) -> float:
    total = 0.0
    for t in targets:
        p = t.clamped_p
        total += -math.log(t.p_star * p + (1 - t.p_star) * (1.0 - p))
    return total


def total_loss(l_cls: float, l_loc: float, cfg: LossConfig) -> float:
    return (l_cls + cfg.lam * l_loc) / cfg.n_pred


# ---------------------------------------------------------------- tape ops

def iou_loss_op(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Summed IoU loss over rows of ``pred`` (n, 4) against fixed targets."""
    gt = np.asarray(gt, float)
    value = iou_loss_values(gt, pred.data).sum()
    return make_result(np.asarray(value), (pred,), lambda g: (g * iou_loss_grad(gt, pred.data),))


def smooth_l1_op(pred: Tensor, gt: np.ndarray, scale: np.ndarray) -> Tensor:
    """Summed Smooth-L1 over ``(pred - gt) / scale`` per coordinate."""
    scale = np.asarray(scale, float).reshape(-1, 1)
    d = (pred.data - np.asarray(gt, float)) / scale
    ad = np.abs(d)
    value = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum()
    dd = np.where(ad < 1.0, d, np.sign(d)) / scale
    return make_result(np.asarray(value), (pred,), lambda g: (g * dd,))


def softmax_cross_entropy_op(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed ``-log softmax(logits)[label]`` with probabilities clamped to [EPS, 1-EPS]."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    rows = np.arange(len(labels))
    p_true = probs[rows, labels]
    value = -np.log(np.clip(p_true, EPS, 1.0 - EPS)).sum()

    def grad_fn(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        # the clamp is flat outside [EPS, 1 - EPS]
        grad[(p_true < EPS) | (p_true > 1.0 - EPS)] = 0.0
        return (g * grad,)

    return make_result(np.asarray(value), (logits,), grad_fn)


def sigmoid_bce_op(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed binary cross-entropy on raw logits (numerically stable form)."""
    t = np.asarray(targets, float)
    z = logits.data
    value = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum()
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return make_result(np.asarray(value), (logits,), lambda g: (g * (p - t),))
