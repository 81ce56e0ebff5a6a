"""Detection domain types, box geometry and prediction/ground-truth matching."""
from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable, Iterable, Optional, Sequence

__all__ = [
    "NormBox",
    "Detection",
    "GroundTruthObject",
    "MatchedDetection",
    "iou",
    "match_detections",
]


@dataclass(frozen=True)
class NormBox:
    """Normalized (cx, cy, w, h) box; coordinates relative to image size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside the unit square: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size must lie in (0, 1]: {vals}")

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2) -> "NormBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    image_id: Hashable
    label: int
    score: float
    box: NormBox
    score_vector: Optional[tuple[float, ...]] = None
    # raw pre-softmax scores; length K, or K + 1 with a trailing background entry
    logits: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.label < 0:
            raise ValueError(f"negative class index {self.label}")
        sv = self.score_vector
        if sv is not None:
            if abs(math.fsum(sv) - 1.0) > 1e-6:
                raise ValueError("score_vector must sum to 1")
            if abs(sv[self.label] - self.score) > 1e-6 or abs(max(sv) - self.score) > 1e-6:
                raise ValueError("score must equal score_vector[label] == max(score_vector)")


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: Hashable
    label: int
    box: NormBox
    gt_id: Optional[Hashable] = None


@dataclass(frozen=True)
class MatchedDetection:
    detection: Detection
    m: int
    matched_gt: Optional[Hashable] = None
    iou: float = 0.0

    @property
    def score(self) -> float:
        return self.detection.score

    @property
    def box(self) -> NormBox:
        return self.detection.box


def iou(a: NormBox, b: NormBox) -> float:
    ax1, ay1, ax2, ay2 = a.xyxy()
    bx1, by1, bx2, by2 = b.xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def _match_image(dets, gts, iou_threshold):
    """Greedy class-aware matching inside one image.

    ``dets`` and ``gts`` are lists of (original_index, object).  Returns a
    list of (original_index, MatchedDetection).
    """
    gts_by_class = defaultdict(list)
    for gi, g in gts:
        gts_by_class[g.label].append((gi, g))
    used = set()
    out = []
    # stable sort: ties keep input order
    for di, d in sorted(dets, key=lambda t: -t[1].score):
        best, best_iou = None, -1.0
        for gi, g in gts_by_class.get(d.label, ()):
            if gi in used:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:
                best, best_iou = (gi, g), v
        if best is not None and best_iou > iou_threshold:
            gi, g = best
            used.add(gi)
            gt_key = g.gt_id if g.gt_id is not None else gi
            out.append((di, MatchedDetection(d, 1, gt_key, best_iou)))
        else:
            out.append((di, MatchedDetection(d, 0, None, 0.0)))
    return out


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    iou_threshold: float = 0.5,
    num_classes: Optional[int] = None,
    min_score: float = 0.0,
    workers: int = 1,
) -> list[MatchedDetection]:
    """Mark each detection correct (m=1) or not against the ground truth.

    Per image, detections are visited in descending score order and take the
    unmatched same-class ground truth with the highest IoU; the detection is
    correct iff that IoU exceeds ``iou_threshold``.  Each ground truth is
    consumed at most once, so duplicates count as incorrect.  Output follows
    input order.  Detections scoring below ``min_score`` are dropped.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if num_classes is not None:
        for obj in list(dets) + list(gts):
            if not 0 <= obj.label < num_classes:
                raise ValueError(f"class index {obj.label} outside [0, {num_classes})")

    by_image_d = defaultdict(list)
    by_image_g = defaultdict(list)
    for i, d in enumerate(dets):
        if d.score >= min_score:
            by_image_d[d.image_id].append((i, d))
    for i, g in enumerate(gts):
        by_image_g[g.image_id].append((i, g))

    images = list(by_image_d)
    jobs = [(by_image_d[k], by_image_g.get(k, [])) for k in images]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: _match_image(j[0], j[1], iou_threshold), jobs))
    else:
        parts = [_match_image(d, g, iou_threshold) for d, g in jobs]

    merged = [pair for part in parts for pair in part]
    merged.sort(key=lambda t: t[0])
    return [md for _, md in merged]


def group_by_image(objs: Iterable) -> dict:
    out = defaultdict(list)
    for o in objs:
        out[o.image_id].append(o)
    return dict(out)
