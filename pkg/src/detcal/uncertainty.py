"""MC-dropout aggregation: mean-logit confidence, class-wise certainty,
mean box and joint box certainty.

Inputs are N x K (logits) or N x J (boxes) matrices with one row per
stochastic pass.  They may be numpy arrays or nested sequences of
:class:`~detcal.autodiff.Value`; in the latter case the results are Values on
the same tape and can be differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

__all__ = [
    "McSamples",
    "UncertaintySummary",
    "mean_confidence",
    "classwise_certainty",
    "box_mean",
    "box_uncertainty",
    "box_certainty",
    "summarize",
]

BOX_PARAMS = 4


def _columns(mat):
    """(n_rows, columns, symbolic) of an N x K matrix."""
    if isinstance(mat, np.ndarray):
        if mat.ndim != 2 or mat.size == 0:
            raise ValueError("need a non-empty N x K matrix")
        if not np.isfinite(mat).all():
            raise ValueError("non-finite entry in sample matrix")
        return mat.shape[0], [c.tolist() for c in mat.T], False
    rows = [list(r) for r in mat]
    if not rows or not rows[0]:
        raise ValueError("need a non-empty N x K matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("ragged sample matrix")
    symbolic = False
    for r in rows:
        for x in r:
            if isinstance(x, Value):
                symbolic = True
            elif not math.isfinite(x):
                raise ValueError("non-finite entry in sample matrix")
    return len(rows), [list(c) for c in zip(*rows)], symbolic


def _out(xs, symbolic):
    return xs if symbolic else np.array([float(x) for x in xs])


@dataclass(frozen=True)
class McSamples:
    logits: np.ndarray   # N x K
    boxes: np.ndarray    # N x J

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=float)
        r = np.asarray(self.boxes, dtype=float)
        if z.ndim != 2 or r.ndim != 2 or z.shape[0] != r.shape[0]:
            raise ValueError("logits and boxes must be N x K and N x J with matching N")
        if z.shape[0] < 2:
            raise ValueError("need at least two stochastic passes")
        if r.shape[1] != BOX_PARAMS:
            raise ValueError("boxes must carry 4 parameters per pass")
        if not (np.isfinite(z).all() and np.isfinite(r).all()):
            raise ValueError("non-finite MC samples")
        object.__setattr__(self, "logits", z)
        object.__setattr__(self, "boxes", r)

    @property
    def n_passes(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class UncertaintySummary:
    mean_conf: np.ndarray
    class_certainty: np.ndarray
    mean_box: np.ndarray
    box_certainty: float


def mean_confidence(z):
    """Softmax of the per-class mean logit over passes."""
    _, cols, sym = _columns(z)
    return _out(ad.softmax([ad.vmean(c) for c in cols]), sym)


def classwise_certainty(z):
    """1 - tanh(per-class population variance of the logits)."""
    n, cols, sym = _columns(z)
    if n < 2:
        raise ValueError("variance undefined for fewer than two passes")
    return _out([ad.tanh_complement(ad.pvar(c)) for c in cols], sym)


def box_mean(r):
    _, cols, sym = _columns(r)
    return _out([ad.vmean(c) for c in cols], sym)


def box_uncertainty(r):
    """Joint box uncertainty: mean over parameters of the per-parameter
    variance plus the squared deviation of that parameter's mean from the
    mean of all parameter means."""
    n, cols, _ = _columns(r)
    if n < 2:
        raise ValueError("variance undefined for fewer than two passes")
    if len(cols) != BOX_PARAMS:
        raise ValueError("box samples must have 4 parameters")
    mus = [ad.vmean(c) for c in cols]
    mu_com = ad.vmean(mus)
    terms = [ad.pvar(c) + ad.powi(mu - mu_com, 2) for c, mu in zip(cols, mus)]
    return ad.vmean(terms)


def box_certainty(r):
    u = box_uncertainty(r)
    g = ad.tanh_complement(u)
    return g if isinstance(g, Value) else float(g)


def summarize(samples: McSamples) -> UncertaintySummary:
    return UncertaintySummary(
        mean_conf=mean_confidence(samples.logits),
        class_certainty=classwise_certainty(samples.logits),
        mean_box=box_mean(samples.boxes),
        box_certainty=box_certainty(samples.boxes),
    )
