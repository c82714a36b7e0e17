"""Precision/recall curves, all-point AP, mAP and mean localisation IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CLASS_NAMES, Box, Detection, iou

REPORT_KEYS = ("ap", "map", "mean_iou", "tp", "fp", "fn", "num_classes", "iou_threshold", "notes")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int | str
    box: Box
    class_id: int

    def __post_init__(self):
        if self.box.area <= 0:
            raise ValueError("ground-truth boxes must have positive area")
        if self.class_id not in (0, 1):
            raise ValueError(f"class_id must be 0 or 1, got {self.class_id}")


@dataclass
class PRCurve:
    recalls: list[float]
    precisions: list[float]
    delta_r: list[float]
    is_tp: list[bool]
    matched_iou: list[float]         # IoU of each TP, nan for FPs
    num_gt: int
    note: str | None = None


@dataclass
class EvalReport:
    ap: dict
    map: float
    mean_iou: float | None
    tp: int
    fp: int
    fn: int
    num_classes: int
    iou_threshold: float = 0.5
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ap": {str(k): float(v) for k, v in sorted(self.ap.items())},
            "map": float(self.map),
            "mean_iou": None if self.mean_iou is None else float(self.mean_iou),
            "tp": int(self.tp), "fp": int(self.fp), "fn": int(self.fn),
            "num_classes": int(self.num_classes),
            "iou_threshold": float(self.iou_threshold),
            "notes": list(self.notes),
        }

    def to_json(self, extra: dict | None = None) -> str:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        for c, v in sorted(self.ap.items()):
            name = CLASS_NAMES[c] if isinstance(c, int) and c < len(CLASS_NAMES) else str(c)
            lines.append(f"AP50[{name}]: {v:.4f}")
        lines.append(f"mAP: {self.map:.4f}")
        lines.append("mean_iou: " + ("absent" if self.mean_iou is None else f"{self.mean_iou:.4f}"))
        lines += [f"TP: {self.tp}", f"FP: {self.fp}", f"FN: {self.fn}"]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def validate_report(doc: dict) -> None:
    """Raise ``ValueError`` if ``doc`` does not follow the report schema."""
    missing = [k for k in REPORT_KEYS if k not in doc]
    if missing:
        raise ValueError(f"report missing keys {missing}")
    if not isinstance(doc["ap"], dict) or not all(0.0 <= v <= 1.0 for v in doc["ap"].values()):
        raise ValueError("ap must map class ids to values in [0, 1]")
    if not 0.0 <= doc["map"] <= 1.0:
        raise ValueError("map outside [0, 1]")
    if doc["mean_iou"] is not None and not 0.0 <= doc["mean_iou"] <= 1.0:
        raise ValueError("mean_iou outside [0, 1]")
    for k in ("tp", "fp", "fn", "num_classes"):
        if not isinstance(doc[k], int) or doc[k] < 0:
            raise ValueError(f"{k} must be a non-negative integer")


def build_pr(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int,
             iou_thresh: float = 0.5) -> PRCurve:
    """Greedy score-ordered matching of one class's detections to its gts.

    Each detection takes the highest-IoU still-unmatched gt in its image
    (ties to the earlier gt) when that IoU reaches ``iou_thresh``.
    """
    dets = [d for d in dets if d.class_id == class_id]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_image: dict = {}
    for g in gts:
        if g.class_id == class_id:
            by_image.setdefault(g.image_id, []).append(g)
    n_gt = sum(len(v) for v in by_image.values())
    used = {k: [False] * len(v) for k, v in by_image.items()}
    tp_flags, ious = [], []
    for i in order:
        d = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(by_image.get(d.image_id, ())):
            if used[d.image_id][j]:
                continue
            v = iou(d.box, g.box)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            used[d.image_id][best_j] = True
            tp_flags.append(True)
            ious.append(best)
        else:
            tp_flags.append(False)
            ious.append(float("nan"))
    recalls, precisions, deltas = [], [], []
    tp = fp = 0
    prev_r = 0.0
    for flag in tp_flags:
        tp += flag
        fp += not flag
        r = tp / n_gt if n_gt else 0.0
        recalls.append(r)
        precisions.append(tp / (tp + fp))
        deltas.append(r - prev_r)
        prev_r = r
    note = None if n_gt else f"class {class_id} has no ground truth; AP set to 0"
    return PRCurve(recalls, precisions, deltas, tp_flags, ious, n_gt, note)


def ap(curve: PRCurve) -> float:
    """All-point sum of precision times recall increment."""
    if curve.num_gt == 0:
        return 0.0
    return float(sum(p * dr for p, dr in zip(curve.precisions, curve.delta_r)))


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], classes: int = 2,
             iou_thresh: float = 0.5) -> EvalReport:
    aps, notes, tp_ious = {}, [], []
    tp = fp = n_gt = 0
    for c in range(classes):
        curve = build_pr(dets, gts, c, iou_thresh)
        aps[c] = ap(curve)
        if curve.note:
            notes.append(curve.note)
        tp += sum(curve.is_tp)
        fp += len(curve.is_tp) - sum(curve.is_tp)
        n_gt += curve.num_gt
        tp_ious += [v for v, f in zip(curve.matched_iou, curve.is_tp) if f]
    if not dets:
        notes.append("no detections")
    m = sum(aps.values()) / classes
    mean_iou = float(np.mean(tp_ious)) if tp_ious else None
    return EvalReport(aps, m, mean_iou, tp, fp, n_gt - tp, classes, iou_thresh, notes)
