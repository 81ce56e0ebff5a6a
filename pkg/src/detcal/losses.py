"""Multiclass confidence (MCC) and localization (LC) calibration losses.

Both losses work on a minibatch of positive locations, each carrying the
N x K logits and N x 4 decoded boxes of its MC-dropout passes.  Entries may be
floats or tape Values; with Values the returned losses are differentiable.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .core import NormBox
from .uncertainty import box_certainty, box_mean, classwise_certainty, mean_confidence

__all__ = [
    "PositiveLocation",
    "AuxLossOutput",
    "fuse",
    "iou_cxcywh",
    "mcc_from_fused",
    "mcc_loss",
    "lc_from_terms",
    "lc_loss",
    "mccl_aux",
]


@dataclass
class PositiveLocation:
    sample_index: int
    location: int
    logits: Sequence[Sequence]   # N x K
    boxes: Sequence[Sequence]    # N x 4, decoded (cx, cy, w, h)
    gt_class: int
    gt_box: NormBox

    def q(self, num_classes: int) -> list[float]:
        if not 0 <= self.gt_class < num_classes:
            raise ValueError(f"gt class {self.gt_class} outside [0, {num_classes})")
        return [1.0 if k == self.gt_class else 0.0 for k in range(num_classes)]


@dataclass
class AuxLossOutput:
    l_mcc: object
    l_lc: object
    total: object
    beta: float


def fuse(mean_conf, certainty) -> list:
    """Class-wise mean of mean confidence and certainty."""
    if len(mean_conf) != len(certainty):
        raise ValueError("mean confidence and certainty lengths differ")
    return [(s + c) * 0.5 for s, c in zip(mean_conf, certainty)]


def iou_cxcywh(a, b):
    """IoU of two (cx, cy, w, h) boxes built from min/max so it can be
    differentiated; ``a`` and ``b`` may mix floats and Values."""
    acx, acy, aw, ah = a
    bcx, bcy, bw, bh = b
    iw = ad.minimum(acx + aw * 0.5, bcx + bw * 0.5) - ad.maximum(acx - aw * 0.5, bcx - bw * 0.5)
    ih = ad.minimum(acy + ah * 0.5, bcy + bh * 0.5) - ad.maximum(acy - ah * 0.5, bcy - bh * 0.5)
    inter = ad.maximum(iw, 0.0) * ad.maximum(ih, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union


def _num_classes(batch):
    return len(batch[0].logits[0])


def mcc_from_fused(fused: Sequence[Sequence], qs: Sequence[Sequence[float]]):
    """Mean over classes of |mean_i fused[i][k] - mean_i q[i][k]|."""
    if not fused:
        raise ValueError("no positive locations")
    if len(fused) != len(qs):
        raise ValueError("one one-hot target per fused vector required")
    k = len(fused[0])
    terms = []
    for j in range(k):
        v_bar = ad.vmean([v[j] for v in fused])
        q_bar = sum(q[j] for q in qs) / len(qs)
        terms.append(ad.absolute(v_bar - q_bar))
    return ad.vmean(terms)


def mcc_loss(batch: Sequence[PositiveLocation]):
    """Mean over classes of |batch mean of fused vector - class frequency|.

    The batch means run over all M positive locations in the minibatch.
    """
    if not batch:
        raise ValueError("no positive locations")
    k = _num_classes(batch)
    fused = [fuse(mean_confidence(loc.logits), classwise_certainty(loc.logits)) for loc in batch]
    return mcc_from_fused(fused, [loc.q(k) for loc in batch])


def lc_from_terms(sample_ids: Sequence, ious: Sequence, certainties: Sequence):
    """Mean over samples of the per-sample mean |IoU - g|."""
    if not ious:
        raise ValueError("no positive locations")
    if not len(sample_ids) == len(ious) == len(certainties):
        raise ValueError("sample ids, IoUs and certainties differ in length")
    per_sample = defaultdict(list)
    for s, v, g in zip(sample_ids, ious, certainties):
        per_sample[s].append(ad.absolute(v - g))
    return ad.vmean([ad.vmean(per_sample[s]) for s in sorted(per_sample)])


def lc_loss(batch: Sequence[PositiveLocation]):
    """Mean over samples of the per-sample mean |IoU(mean box, gt) - g|.

    Samples without positives never appear in ``batch`` and so do not count.
    """
    if not batch:
        raise ValueError("no positive locations")
    ious = [iou_cxcywh(box_mean(loc.boxes), loc.gt_box.as_tuple()) for loc in batch]
    certs = [box_certainty(loc.boxes) for loc in batch]
    return lc_from_terms([loc.sample_index for loc in batch], ious, certs)


def mccl_aux(batch: Sequence[PositiveLocation], beta: float = 1.0) -> AuxLossOutput:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    l_mcc = mcc_loss(batch)
    l_lc = lc_loss(batch)
    return AuxLossOutput(l_mcc, l_lc, l_mcc + beta * l_lc, beta)
