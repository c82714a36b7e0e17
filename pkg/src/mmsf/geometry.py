"""Boxes, IoU, the distance-to-sides (tblr) box form, and greedy NMS.

Coordinates are continuous: a box ``(x1, y1, x2, y2)`` has width ``x2 - x1``
with no +1 pixel convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

NMIBC, MIBC = 0, 1
CLASS_NAMES = ("NMIBC", "MIBC")


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box corners {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def clip(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        x2 = min(max(self.x2, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class TblrBox:
    """A box given by distances from an interior point to its four sides."""

    px: float
    py: float
    xt: float
    xb: float
    xl: float
    xr: float

    def __post_init__(self):
        if min(self.xt, self.xb, self.xl, self.xr) < 0:
            raise ValueError(f"negative side distance in {self}")

    @property
    def distances(self) -> tuple[float, float, float, float]:
        return (self.xt, self.xb, self.xl, self.xr)

    def to_box(self) -> Box:
        return Box(self.px - self.xl, self.py - self.xt, self.px + self.xr, self.py + self.xb)

    @classmethod
    def from_box(cls, box: Box, px: float, py: float) -> "TblrBox":
        return cls(px, py, py - box.y1, box.y2 - py, px - box.x1, box.x2 - px)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int
    image_id: int | str = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def tblr_overlap(gt: TblrBox, pred: TblrBox) -> tuple[float, float, float, float]:
    """Return ``(I, U, X, X_pred)`` for two boxes sharing an anchor point.

    ``X`` and ``X_pred`` are the gt and predicted areas.
    """
    if (gt.px, gt.py) != (pred.px, pred.py):
        raise ValueError("tblr boxes must share an anchor point")
    xt, xb, xl, xr = gt.distances
    pt, pb, pl, pr = pred.distances
    if min(xt, xb, xl, xr, pt, pb, pl, pr) < 0:
        raise ValueError("negative side distance")
    x_pred = (pt + pb) * (pl + pr)
    x_gt = (xt + xb) * (xl + xr)
    i_h = min(xt, pt) + min(xb, pb)
    i_w = min(xl, pl) + min(xr, pr)
    inter = i_w * i_h
    return inter, x_gt + x_pred - inter, x_gt, x_pred


def greedy_nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Indices kept by class-agnostic greedy NMS, in descending-score order.

    Ties in score go to the smaller index.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    if len(order) == 0:
        return order
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        order = rest[ov < iou_threshold]
    return np.asarray(keep, dtype=np.intp)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Class-wise greedy non-maximum suppression.

    Survivors come back in descending-score order (ties by input position).
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=float)
    scores = np.array([d.score for d in dets], dtype=float)
    classes = np.array([d.class_id for d in dets])
    kept = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        kept.extend(idx[greedy_nms_indices(boxes[idx], scores[idx], iou_threshold)].tolist())
    kept.sort(key=lambda i: (-scores[i], i))
    return [dets[i] for i in kept]
