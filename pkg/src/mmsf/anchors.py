"""Anchor tiling, k-means++ shape clustering, anchor/gt matching, RoI level routing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, iou_matrix

DEFAULT_SCALES = (32, 64, 128, 256)
DEFAULT_RATIOS = (0.6, 1.0, 1.1)
POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def receptive_field(layers: Sequence[tuple[int, int]]) -> list[int]:
    """Receptive field after each ``(kernel, stride)`` layer, starting from 1."""
    if not layers:
        raise ValueError("receptive_field needs at least one layer")
    rf, jump, out = 1, 1, []
    for k, s in layers:
        if k < 1 or s < 1:
            raise ValueError(f"invalid layer (k={k}, s={s})")
        rf += (k - 1) * jump
        jump *= s
        out.append(rf)
    return out


def anchor_shapes(scale: float, ratios: Sequence[float]) -> np.ndarray:
    """(w, h) per ratio, where ratio is w/h and the area stays ``scale**2``."""
    r = np.asarray(ratios, float)
    return np.stack([scale * np.sqrt(r), scale / np.sqrt(r)], axis=1)


@dataclass
class AnchorSet:
    """Anchors tiled over one or more feature maps.

    ``levels[i]`` is the pyramid level (1 = finest) of anchor row ``i`` and
    ``boxes[i]`` its corner box in image coordinates.  Within a level, anchors
    are ordered (y, x, shape) so they line up with head outputs reshaped from
    ``(A, H, W)`` maps transposed to ``(H, W, A)``.
    """

    image_size: int
    scales: tuple
    ratios: tuple
    strides: tuple
    boxes: np.ndarray
    levels: np.ndarray
    per_level: list = field(default_factory=list)

    @property
    def num_anchors(self) -> int:
        return len(self.boxes)

    def level_slice(self, i: int) -> slice:
        start = sum(self.per_level[:i])
        return slice(start, start + self.per_level[i])


def generate_anchors(image_size: int, scales: Sequence[float] = DEFAULT_SCALES,
                     ratios: Sequence[float] = DEFAULT_RATIOS,
                     strides: Sequence[int] = (4, 8, 16, 32),
                     single_level_stride: int | None = None) -> AnchorSet:
    """Tile anchors on each level's grid of cell centers.

    With ``single_level_stride`` every scale goes on one map of that stride
    (the no-pyramid ablation); otherwise scale ``i`` goes on stride ``i``.
    """
    if single_level_stride is not None:
        groups = [(1, single_level_stride, list(scales))]
    else:
        if len(strides) != len(scales):
            raise ValueError("one stride per scale is required")
        groups = [(i + 1, s, [sc]) for i, (s, sc) in enumerate(zip(strides, scales))]
    all_boxes, all_levels, per_level = [], [], []
    for level, stride, level_scales in groups:
        shapes = np.concatenate([anchor_shapes(sc, ratios) for sc in level_scales])
        n = image_size // stride
        centers = (np.arange(n) + 0.5) * stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        cx = cx.reshape(-1, 1)
        cy = cy.reshape(-1, 1)
        w, h = shapes[:, 0][None, :], shapes[:, 1][None, :]
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1).reshape(-1, 4)
        all_boxes.append(boxes)
        all_levels.append(np.full(len(boxes), level))
        per_level.append(len(boxes))
    return AnchorSet(image_size, tuple(scales), tuple(ratios),
                     tuple(g[1] for g in groups), np.concatenate(all_boxes),
                     np.concatenate(all_levels), per_level)


@dataclass
class ClusterResult:
    centroids: np.ndarray        # (k, 2) of (w, h), sorted by w/h
    assignment: np.ndarray       # cluster index per input box
    ratios: list[float]          # w/h of each centroid
    inertia_history: list[float]
    iterations: int
    duplicate_centroids: bool


def _box_shapes(gt_boxes) -> np.ndarray:
    if len(gt_boxes) and isinstance(gt_boxes[0], Box):
        return np.array([[b.width, b.height] for b in gt_boxes], float)
    arr = np.asarray(gt_boxes, float)
    if arr.ndim == 2 and arr.shape[1] == 4:
        return np.stack([arr[:, 2] - arr[:, 0], arr[:, 3] - arr[:, 1]], axis=1)
    return arr.reshape(-1, 2)


def kmeanspp_cluster(gt_boxes, k: int, seed: int = 0, max_iter: int = 300) -> ClusterResult:
    """Cluster box (w, h) pairs with k-means++ seeding and Lloyd updates.

    ``gt_boxes`` may be a list of :class:`Box`, an ``(n, 4)`` corner array, or
    an ``(n, 2)`` array of shapes.
    """
    x = _box_shapes(gt_boxes)
    n = len(x)
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least k={k} boxes, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, 2))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    assignment = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignment = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), new_assignment].sum()))
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = x[assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    ratio = centroids[:, 0] / centroids[:, 1]
    order = np.argsort(ratio, kind="stable")
    remap = np.empty(k, dtype=int)
    remap[order] = np.arange(k)
    centroids = centroids[order]
    duplicate = len(np.unique(np.round(centroids, 9), axis=0)) < k
    return ClusterResult(centroids, remap[assignment], [float(r) for r in ratio[order]],
                         history, it, duplicate)


@dataclass
class MatchResult:
    labels: np.ndarray       # POSITIVE / NEGATIVE / IGNORE per anchor
    assigned: np.ndarray     # gt index per anchor, -1 when none
    max_iou: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def match_anchors(anchors, gts, t_pos: float = 0.7, t_neg: float = 0.3) -> MatchResult:
    """Label anchors against ground-truth boxes.

    Positive at IoU >= ``t_pos``, negative below ``t_neg``, ignored between.
    Each gt also claims the anchor(s) achieving its highest IoU, so no gt is
    left without a positive.
    """
    if not 0 < t_neg <= t_pos < 1:
        raise ValueError("need 0 < t_neg <= t_pos < 1")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, float).reshape(-1, 4)
    gt_arr = _gt_array(gts)
    a = len(boxes)
    if len(gt_arr) == 0:
        return MatchResult(np.full(a, NEGATIVE), np.full(a, -1), np.zeros(a))
    ious = iou_matrix(boxes, gt_arr)
    assigned = ious.argmax(axis=1)
    max_iou = ious[np.arange(a), assigned]
    labels = np.full(a, IGNORE)
    labels[max_iou < t_neg] = NEGATIVE
    labels[max_iou >= t_pos] = POSITIVE
    # Forced matches, strongest gt first; a gt whose best anchors were all
    # claimed already takes its best unclaimed one instead.
    claimed = np.zeros(a, dtype=bool)
    for g in np.argsort(-ious.max(axis=0), kind="stable"):
        col = np.where(claimed, -1.0, ious[:, g])
        best = col.max()
        if best <= 0:
            continue
        winners = np.flatnonzero(col == best)
        labels[winners] = POSITIVE
        assigned[winners] = g
        claimed[winners] = True
    assigned = np.where(labels == POSITIVE, assigned, -1)
    return MatchResult(labels, assigned, max_iou)


def _gt_array(gts) -> np.ndarray:
    if gts is None or len(gts) == 0:
        return np.zeros((0, 4))
    first = gts[0]
    if isinstance(first, Box):
        return np.array([g.as_tuple() for g in gts], float)
    if hasattr(first, "box"):
        return np.array([g.box.as_tuple() for g in gts], float)
    return np.asarray(gts, float).reshape(-1, 4)


def assign_level(roi, canonical: float = 64.0, canonical_level: int = 2,
                 min_level: int = 1, max_level: int = 4) -> int:
    """Pyramid level for a RoI: one level per doubling of side length."""
    area = roi.area if isinstance(roi, Box) else float((roi[2] - roi[0]) * (roi[3] - roi[1]))
    if area <= 0:
        raise ValueError("cannot route a zero-area RoI")
    level = canonical_level + math.floor(math.log2(math.sqrt(area) / canonical))
    return int(min(max(level, min_level), max_level))


def assign_levels(rois: np.ndarray, **kw) -> np.ndarray:
    """Vectorised :func:`assign_level` over ``(n, 4)`` corner rows."""
    rois = np.asarray(rois, float).reshape(-1, 4)
    area = (rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1])
    if np.any(area <= 0):
        raise ValueError("cannot route a zero-area RoI")
    canonical = kw.get("canonical", 64.0)
    level = kw.get("canonical_level", 2) + np.floor(np.log2(np.sqrt(area) / canonical))
    return np.clip(level, kw.get("min_level", 1), kw.get("max_level", 4)).astype(int)
