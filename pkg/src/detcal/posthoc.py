"""Temperature scaling: a single scalar T > 0 divides the logits before the
softmax.  T is fitted on held-out data by minimizing the mean negative
log-likelihood with a golden-section search over log T.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Detection

__all__ = [
    "TemperatureModel",
    "softmax_t",
    "nll",
    "golden_section",
    "fit_temperature",
    "apply_temperature",
]

LOG_T_RANGE = (-3.0, 3.0)
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TemperatureModel:
    T: float

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0.0):
            raise ValueError(f"temperature must be finite and positive, got {self.T}")

    def to_dict(self) -> dict:
        return {"temperature": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "TemperatureModel":
        try:
            return cls(float(d["temperature"]))
        except (KeyError, TypeError) as exc:
            raise ValueError("temperature file needs a numeric 'temperature' field") from exc


def softmax_t(logits, T: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / T``."""
    z = np.asarray(logits, dtype=float) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_inputs(logits, labels):
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("logits must be a non-empty list of equal-length vectors")
    if y.shape != (z.shape[0],):
        raise ValueError(f"got {z.shape[0]} logit vectors but {y.size} labels")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError(f"labels must lie in [0, {z.shape[1]})")
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    return z, y


def nll(logits, labels, T: float = 1.0) -> float:
    """Mean negative log-likelihood of the labels under softmax(logits / T)."""
    z, y = _as_inputs(logits, labels)
    s = z / T
    m = s.max(axis=1)
    lse = m + np.log(np.exp(s - m[:, None]).sum(axis=1))
    return float(np.mean(lse - s[np.arange(len(y)), y]))


def golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Minimizer of a unimodal ``f`` on [lo, hi], bracketed to width ``tol``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(logits: Sequence[Sequence[float]], labels: Sequence[int],
                    tol: float = 1e-6) -> TemperatureModel:
    z, y = _as_inputs(logits, labels)
    if np.unique(y).size < 2:
        raise ValueError("temperature fitting needs at least two distinct labels")
    log_t = golden_section(lambda lt: nll(z, y, math.exp(lt)), *LOG_T_RANGE, tol=tol)
    T = math.exp(log_t)
    # the search is bracketed; never hand back something worse than no scaling
    if nll(z, y, 1.0) < nll(z, y, T):
        T = 1.0
    return TemperatureModel(T)


def apply_temperature(model: TemperatureModel, detections: Sequence[Detection]) -> list[Detection]:
    """Rescale the stored logits of every detection by 1/T.

    The score vector becomes softmax(logits / T) and the score its entry at
    the detection's label, which stays the argmax.
    """
    out = []
    for i, d in enumerate(detections):
        if d.logits is None:
            raise ValueError(f"detection {i} (image {d.image_id!r}) carries no logits")
        z = np.asarray(d.logits, dtype=float)
        if d.label >= z.size or int(np.argmax(z)) != d.label:
            raise ValueError(f"detection {i}: label {d.label} is not the argmax of its logits")
        sv = softmax_t(z, model.T)
        out.append(dataclasses.replace(d, score=float(sv[d.label]),
                                       score_vector=tuple(float(v) for v in sv)))
    return out
