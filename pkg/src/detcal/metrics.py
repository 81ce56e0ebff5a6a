"""Calibration error metrics for detectors.

All metrics share one binning scheme: equal-width bins over [0, 1] in every
dimension, left-closed except the top bin, which is closed on the right so a
score of exactly 1.0 is counted.  The per-bin gap is |prec - conf| where prec
is the fraction of correct (m = 1) detections in the bin.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import MatchedDetection

__all__ = [
    "DIMENSIONS",
    "BinGrid",
    "BinStats",
    "CalibrationReport",
    "accumulate",
    "merge_stats",
    "dece_from_stats",
    "compute_ece",
    "compute_dece",
    "reliability_table",
    "confidence_histogram",
    "property_curve",
    "heatmap_2d",
]

log = logging.getLogger(__name__)

DIMENSIONS = ("conf", "cx", "cy", "w", "h")
DEFAULT_CONF_BINS = 10
DEFAULT_PROPERTY_BINS = 5


@dataclass(frozen=True)
class BinGrid:
    dims: tuple[str, ...]
    bins_per_dim: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(self.dims)
        bins = tuple(int(b) for b in self.bins_per_dim)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "bins_per_dim", bins)
        if not dims or dims[0] != "conf":
            raise ValueError("'conf' must be the first grid dimension")
        if len(set(dims)) != len(dims):
            raise ValueError(f"repeated grid dimension in {dims}")
        unknown = set(dims) - set(DIMENSIONS)
        if unknown:
            raise ValueError(f"unknown grid dimension(s): {sorted(unknown)}")
        if len(bins) != len(dims) or any(b < 1 for b in bins):
            raise ValueError("need one positive bin count per dimension")

    @classmethod
    def make(cls, dims: Sequence[str] = DIMENSIONS, conf_bins: int = DEFAULT_CONF_BINS,
             property_bins: int = DEFAULT_PROPERTY_BINS) -> "BinGrid":
        dims = tuple(dims)
        return cls(dims, (conf_bins,) + (property_bins,) * (len(dims) - 1))

    @property
    def edges(self) -> list[np.ndarray]:
        return [np.linspace(0.0, 1.0, n + 1) for n in self.bins_per_dim]

    @property
    def n_total(self) -> int:
        return int(np.prod(self.bins_per_dim))

    def values(self, matched: Sequence[MatchedDetection]) -> np.ndarray:
        """(|D|, len(dims)) array of the binned quantities."""
        out = np.empty((len(matched), len(self.dims)))
        for i, md in enumerate(matched):
            box = md.detection.box
            row = {"conf": md.detection.score, "cx": box.cx, "cy": box.cy, "w": box.w, "h": box.h}
            out[i] = [row[d] for d in self.dims]
        return out

    def assign(self, values: np.ndarray) -> tuple[np.ndarray, int]:
        """Bin indices per row, plus the number of coordinates clamped into range."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        idx = np.empty(values.shape, dtype=np.int64)
        clamped = 0
        for k, (edges, n) in enumerate(zip(self.edges, self.bins_per_dim)):
            col = values[:, k]
            outside = (col < 0.0) | (col > 1.0)
            clamped += int(outside.sum())
            idx[:, k] = np.clip(np.searchsorted(edges, col, side="right") - 1, 0, n - 1)
        return idx, clamped


@dataclass
class BinStats:
    """Detections of one bin: count, their scores and how many are correct."""

    index: tuple[int, ...]
    count: int = 0
    scores: list[float] = field(default_factory=list)
    sum_correct: int = 0

    def add(self, score: float, correct: int):
        self.count += 1
        self.scores.append(score)
        self.sum_correct += correct

    @property
    def sum_conf(self) -> float:
        return math.fsum(self.scores)

    @property
    def conf(self) -> float:
        return self.sum_conf / self.count

    @property
    def prec(self) -> float:
        return self.sum_correct / self.count

    @property
    def abs_gap_mass(self) -> float:
        """|sum of correctness - sum of scores|, rounded once; equals
        count * |prec - conf|."""
        return abs(math.fsum([float(self.sum_correct)] + [-v for v in self.scores]))

    def merge(self, other: "BinStats") -> "BinStats":
        if other.index != self.index:
            raise ValueError("cannot merge different bins")
        return BinStats(self.index, self.count + other.count, self.scores + other.scores,
                        self.sum_correct + other.sum_correct)


@dataclass
class CalibrationReport:
    dece: float
    ece: float
    grid: BinGrid
    bins: list[BinStats]
    n_detections: int
    iou_threshold: Optional[float] = None
    clamped: int = 0

    def to_dict(self) -> dict:
        return {
            "dece": self.dece,
            "ece": self.ece,
            "n_detections": self.n_detections,
            "iou_threshold": self.iou_threshold,
            "dims": list(self.grid.dims),
            "bins": [
                {"index": list(b.index), "count": b.count, "conf": b.conf, "prec": b.prec}
                for b in self.bins
            ],
        }


def _require(matched):
    if len(matched) == 0:
        raise ValueError("no detections to calibrate")


def accumulate(matched: Sequence[MatchedDetection], grid: BinGrid) -> tuple[dict, int]:
    """Per-bin sufficient statistics keyed by multidimensional bin index."""
    idx, clamped = grid.assign(grid.values(matched)) if len(matched) else (np.empty((0, len(grid.dims)), int), 0)
    if clamped:
        log.warning("%d box coordinate(s) outside [0, 1] clamped into edge bins", clamped)
    stats: dict[tuple, BinStats] = {}
    for row, md in zip(idx, matched):
        key = tuple(int(i) for i in row)
        b = stats.get(key)
        if b is None:
            b = stats[key] = BinStats(key)
        b.add(md.detection.score, int(md.m))
    return stats, clamped


def merge_stats(shards: Iterable[dict]) -> dict:
    out: dict[tuple, BinStats] = {}
    for shard in shards:
        for key, b in shard.items():
            out[key] = out[key].merge(b) if key in out else BinStats(key, b.count, list(b.scores), b.sum_correct)
    return out


def dece_from_stats(stats: dict) -> float:
    total = sum(b.count for b in stats.values())
    if total == 0:
        raise ValueError("no detections to calibrate")
    # sum_b (n_b / n) |prec_b - conf_b| == sum_b |sum_b(m) - sum_b(s)| / n,
    # accumulated with exactly rounded sums
    return math.fsum(stats[key].abs_gap_mass for key in sorted(stats)) / total


def compute_dece(matched: Sequence[MatchedDetection], grid: Optional[BinGrid] = None,
                 iou_threshold: Optional[float] = None) -> CalibrationReport:
    """Binned detection calibration error over confidence and box properties."""
    _require(matched)
    grid = grid or BinGrid.make()
    stats, clamped = accumulate(matched, grid)
    dece = dece_from_stats(stats)
    if grid.dims == ("conf",):
        ece = dece
    else:
        ece = compute_ece(matched, grid.bins_per_dim[0])
    return CalibrationReport(dece, ece, grid, [stats[k] for k in sorted(stats)],
                             len(matched), iou_threshold, clamped)


def compute_ece(matched: Sequence[MatchedDetection], n_bins: int = DEFAULT_CONF_BINS) -> float:
    _require(matched)
    stats, _ = accumulate(matched, BinGrid(("conf",), (n_bins,)))
    return dece_from_stats(stats)


def _centers(n):
    return (np.arange(n) + 0.5) / n


def reliability_table(matched: Sequence[MatchedDetection], n_bins: int = DEFAULT_CONF_BINS) -> list[tuple]:
    """Rows (bin_center, conf, acc, count) for every confidence bin.

    Empty bins keep their row with conf and acc set to None.
    """
    _require(matched)
    stats, _ = accumulate(matched, BinGrid(("conf",), (n_bins,)))
    rows = []
    for i, c in enumerate(_centers(n_bins)):
        b = stats.get((i,))
        if b is None:
            rows.append((float(c), None, None, 0))
        else:
            rows.append((float(c), b.conf, b.prec, b.count))
    return rows


def confidence_histogram(matched: Sequence[MatchedDetection], n_bins: int = DEFAULT_CONF_BINS):
    """Per-bin detection counts with the overall mean confidence and precision."""
    _require(matched)
    stats, _ = accumulate(matched, BinGrid(("conf",), (n_bins,)))
    counts = [stats[(i,)].count if (i,) in stats else 0 for i in range(n_bins)]
    scores = np.array([md.detection.score for md in matched])
    correct = np.array([md.m for md in matched], dtype=float)
    return counts, float(scores.mean()), float(correct.mean())


@dataclass
class CurvePoint:
    bin_center: float
    count: int
    prec: Optional[float]
    conf: Optional[float]
    partial_dece: float


def property_curve(matched: Sequence[MatchedDetection], dim: str, n_bins: int = DEFAULT_PROPERTY_BINS) -> list[CurvePoint]:
    """Precision, confidence and weighted gap along one box property.

    The weighted gaps sum to the calibration error of a grid that bins on
    ``dim`` alone.
    """
    _require(matched)
    if dim not in DIMENSIONS[1:]:
        raise ValueError(f"unknown box property {dim!r}")
    grid = BinGrid(("conf", dim), (1, n_bins))
    stats, _ = accumulate(matched, grid)
    total = len(matched)
    out = []
    for i, c in enumerate(_centers(n_bins)):
        b = stats.get((0, i))
        if b is None:
            out.append(CurvePoint(float(c), 0, None, None, 0.0))
        else:
            out.append(CurvePoint(float(c), b.count, b.prec, b.conf,
                                  b.abs_gap_mass / total))
    return out


def heatmap_2d(matched: Sequence[MatchedDetection], dim_a: str, dim_b: str,
               n_a: int = DEFAULT_PROPERTY_BINS, n_b: int = DEFAULT_PROPERTY_BINS) -> list[list[Optional[float]]]:
    """|prec - conf| per (dim_a, dim_b) cell; None where a cell is empty."""
    _require(matched)
    for d in (dim_a, dim_b):
        if d not in DIMENSIONS[1:]:
            raise ValueError(f"unknown box property {d!r}")
    if dim_a == dim_b:
        raise ValueError("heatmap needs two distinct dimensions")
    stats, _ = accumulate(matched, BinGrid(("conf", dim_a, dim_b), (1, n_a, n_b)))
    grid: list[list[Optional[float]]] = [[None] * n_b for _ in range(n_a)]
    for (_, i, j), b in stats.items():
        grid[i][j] = abs(b.prec - b.conf)
    return grid
