"""Curve and box similarity kernels: arc-length resampling, discrete
Frechet and Chamfer distances, IoU and generalized IoU."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .core import Centerline, InvalidInputError

logger = logging.getLogger(__name__)

Box = Sequence[float]  # (x1, y1, x2, y2)


@dataclass(frozen=True)
class Coupling:
    """A monotone pairing between two point sequences.

    ``pairs[k] = (i, j)`` couples point i of curve A with point j of curve B.
    A valid coupling starts at (0, 0), ends at (n-1, k-1), and each step
    advances each index by at most one.
    """

    pairs: Tuple[Tuple[int, int], ...]

    def validate(self, len_a: int, len_b: int) -> None:
        if not self.pairs:
            raise InvalidInputError("coupling must be non-empty")
        if self.pairs[0] != (0, 0):
            raise InvalidInputError("coupling must start at (0, 0)")
        if self.pairs[-1] != (len_a - 1, len_b - 1):
            raise InvalidInputError("coupling must end at the final point pair")
        for (a0, b0), (a1, b1) in zip(self.pairs, self.pairs[1:]):
            if not (0 <= a1 - a0 <= 1 and 0 <= b1 - b0 <= 1):
                raise InvalidInputError(
                    "coupling indices must be non-decreasing and advance by at most 1"
                )

    def norm(self, a: np.ndarray, b: np.ndarray) -> float:
        """Distance of the most dissimilar coupled pair."""
        return max(
            float(np.linalg.norm(a[i] - b[j])) for i, j in self.pairs
        )


def _points(line: Centerline) -> np.ndarray:
    return np.asarray(line.points, dtype=np.float64)


def resample(line: Centerline, n: int = 11) -> Centerline:
    """Resample a polyline to ``n`` points at equal arc-length spacing.

    Endpoints are reproduced exactly and the direction is preserved.  A
    degenerate polyline (total length zero) resamples to ``n`` copies of its
    first point.
    """
    if n < 2:
        raise InvalidInputError(f"resample requires n >= 2, got {n}")
    pts = _points(line)
    if pts.shape[0] < 2:
        raise InvalidInputError("resample requires a polyline with at least 2 points")

    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    total = cum[-1]
    if total == 0.0:
        out = np.repeat(pts[:1], n, axis=0)
        return Centerline(out, line.confidence)

    targets = np.linspace(0.0, total, n)
    out = np.column_stack(
        [np.interp(targets, cum, pts[:, axis]) for axis in range(3)]
    )
    out[0] = pts[0]
    out[-1] = pts[-1]
    return Centerline(out, line.confidence)


def frechet_distance(a: Centerline, b: Centerline) -> float:
    """Discrete Frechet distance: the minimum over monotone couplings of the
    largest coupled-pair distance.  Direction-sensitive."""
    pa, pb = _points(a), _points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise InvalidInputError("frechet_distance requires non-empty curves")

    dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    n, k = dist.shape
    dp = np.empty((n, k), dtype=np.float64)
    dp[0, 0] = dist[0, 0]
    for i in range(1, n):
        dp[i, 0] = max(dp[i - 1, 0], dist[i, 0])
    for j in range(1, k):
        dp[0, j] = max(dp[0, j - 1], dist[0, j])
    for i in range(1, n):
        row = dp[i]
        prev = dp[i - 1]
        for j in range(1, k):
            row[j] = max(min(prev[j], prev[j - 1], row[j - 1]), dist[i, j])
    return float(dp[-1, -1])


def chamfer_distance(a: Centerline, b: Centerline) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets.

    Ignores point ordering, hence lane direction.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise InvalidInputError("chamfer_distance requires non-empty curves")
    dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    return 0.5 * float(dist.min(axis=1).mean() + dist.min(axis=0).mean())


def _box_area(box: np.ndarray) -> float:
    return max(0.0, float(box[2] - box[0])) * max(0.0, float(box[3] - box[1]))


def iou_2d(a: Box, b: Box) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes.

    Degenerate (zero-area) boxes yield 0 with a diagnostic log line.
    """
    ba = np.asarray(a, dtype=np.float64)
    bb = np.asarray(b, dtype=np.float64)
    area_a, area_b = _box_area(ba), _box_area(bb)
    if area_a == 0.0 or area_b == 0.0:
        logger.warning("iou_2d called with a degenerate (zero-area) box")
        return 0.0
    iw = min(ba[2], bb[2]) - max(ba[0], bb[0])
    ih = min(ba[3], bb[3]) - max(ba[1], bb[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def giou_2d(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the hull area not covered by the union,
    normalized by the hull area.  Lies in (-1, 1]."""
    ba = np.asarray(a, dtype=np.float64)
    bb = np.asarray(b, dtype=np.float64)
    area_a, area_b = _box_area(ba), _box_area(bb)
    if area_a == 0.0 or area_b == 0.0:
        logger.warning("giou_2d called with a degenerate (zero-area) box")
        return 0.0
    iw = max(0.0, min(ba[2], bb[2]) - max(ba[0], bb[0]))
    ih = max(0.0, min(ba[3], bb[3]) - max(ba[1], bb[1]))
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (max(ba[2], bb[2]) - min(ba[0], bb[0])) * (
        max(ba[3], bb[3]) - min(ba[1], bb[1])
    )
    iou = inter / union
    if hull <= 0.0:
        return float(iou)
    return float(iou - (hull - union) / hull)
