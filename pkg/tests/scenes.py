"""Random detection scenes shared by the unit and acceptance tests."""

import numpy as np

from mmsf.evalmetrics import GroundTruth
from mmsf.geometry import Box, Detection


def random_box(rng, size=100.0, lo=4.0, hi=40.0):
    x1, y1 = rng.uniform(0, size, 2)
    w, h = rng.uniform(lo, hi, 2)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def nms_scene(rng, max_n=200):
    """Clustered boxes on a coarse score grid, so ties and heavy overlap both occur."""
    n = int(rng.integers(1, max_n + 1))
    centers = rng.uniform(10, 90, (int(rng.integers(1, 8)), 2))
    dets = []
    for _ in range(n):
        cx, cy = centers[rng.integers(len(centers))] + rng.normal(0, 4, 2)
        w, h = rng.uniform(8, 30, 2)
        score = float(rng.choice(np.linspace(0, 1, 41)))
        dets.append(Detection(Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), score, int(rng.integers(0, 2))))
    return dets


def eval_scene(rng, n_images=None):
    """Ground truths plus a mix of near-hit, loose and spurious detections."""
    n_images = n_images or int(rng.integers(1, 12))
    gts, dets = [], []
    for img in range(n_images):
        for _ in range(int(rng.integers(0, 3))):
            g = GroundTruth(img, random_box(rng), int(rng.integers(0, 2)))
            gts.append(g)
            for _ in range(int(rng.integers(0, 3))):
                jit = rng.normal(0, rng.choice([0.5, 4.0]), 4)
                x1, y1, x2, y2 = np.array(g.box.as_tuple()) + jit
                cls = g.class_id if rng.random() < 0.8 else 1 - g.class_id
                dets.append(Detection(Box(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)),
                                      float(rng.uniform()), cls, img))
        for _ in range(int(rng.integers(0, 3))):
            dets.append(Detection(random_box(rng), float(rng.uniform()), int(rng.integers(0, 2)), img))
    return dets, gts


def as_oracle_inputs(dets, gts):
    return ([(d.image_id, d.box.as_tuple(), d.score, d.class_id) for d in dets],
            [(g.image_id, g.box.as_tuple(), g.class_id) for g in gts])
