"""Optimal bipartite assignment and the matching-cost constructions used
for label assignment (training style) and evaluation-time vertex projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import Centerline, InvalidInputError, TrafficElement
from .geometry import chamfer_distance, frechet_distance, giou_2d, iou_2d
from .heads_losses import focal_loss

DEFAULT_IMAGE_SIZE = (1550.0, 1550.0)


@dataclass(frozen=True)
class Matching:
    """A one-to-one matching between predictions and ground truths."""

    pairs: Tuple[Tuple[int, int], ...]
    unmatched_preds: Tuple[int, ...]
    unmatched_gts: Tuple[int, ...]

    def __post_init__(self) -> None:
        preds = [p for p, _ in self.pairs] + list(self.unmatched_preds)
        gts = [g for _, g in self.pairs] + list(self.unmatched_gts)
        if len(set(preds)) != len(preds) or len(set(gts)) != len(gts):
            raise InvalidInputError("matching indices must be unique on each side")

    def gt_for_pred(self) -> dict:
        return {p: g for p, g in self.pairs}

    def pred_for_gt(self) -> dict:
        return {g: p for p, g in self.pairs}


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Potentials-based Hungarian method on a square matrix.

    Returns ``col_of_row`` such that row i is assigned column col_of_row[i].
    Deterministic: strict comparisons keep the first (lowest-index) candidate
    on ties.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row assigned to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            cur_row = cost[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cur_row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j] > 0:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian(cost: np.ndarray) -> Matching:
    """Minimum-total-cost one-to-one assignment on a rectangular cost matrix.

    Rows are predictions, columns ground truths.  Entries may be ``+inf`` to
    forbid a pair; forbidden pairs never appear in the result, so an all-inf
    matrix yields an empty matching.  The number of non-forbidden matched
    pairs is maximized first, then their total cost is minimized.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InvalidInputError("cost matrix must be 2-dimensional")
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return Matching((), tuple(range(rows)), tuple(range(cols)))
    if np.isnan(cost).any() or (cost == -np.inf).any():
        raise InvalidInputError("cost entries must be finite or +inf")

    finite = np.isfinite(cost)
    n = max(rows, cols)
    if finite.any():
        big = float(np.abs(cost[finite]).sum()) + 1.0
    else:
        big = 1.0
    padded = np.zeros((n, n))
    padded[:rows, :cols] = np.where(finite, cost, big)

    col_of_row = _solve_square(padded)

    pairs = []
    for i in range(rows):
        j = int(col_of_row[i])
        if j < cols and finite[i, j]:
            pairs.append((i, j))
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return Matching(
        tuple(pairs),
        tuple(i for i in range(rows) if i not in matched_p),
        tuple(j for j in range(cols) if j not in matched_g),
    )


@dataclass(frozen=True)
class TeCostWeights:
    cls: float = 1.0
    reg: float = 2.5
    iou: float = 1.0


@dataclass(frozen=True)
class LcCostWeights:
    cls: float = 1.5
    reg: float = 0.0075


def box_to_cxcywh(box: np.ndarray, image_size: Tuple[float, float]) -> np.ndarray:
    """Corner-pixel box to image-normalized (cx, cy, w, h)."""
    w, h = image_size
    x1, y1, x2, y2 = np.asarray(box, dtype=np.float64)
    return np.array(
        [(x1 + x2) / (2 * w), (y1 + y2) / (2 * h), (x2 - x1) / w, (y2 - y1) / h]
    )


def classification_cost(prob_of_gt_class: float) -> float:
    """The focal term for a positive target, evaluated at the prediction's
    score for the ground-truth class.  Shares alpha/gamma with the loss so
    the matching cost equals the loss contribution by construction."""
    return focal_loss(prob_of_gt_class, 1)


def te_assignment_cost(
    pred: TrafficElement,
    gt: TrafficElement,
    weights: TeCostWeights = TeCostWeights(),
    image_size: Tuple[float, float] = DEFAULT_IMAGE_SIZE,
) -> float:
    """Label-assignment cost between a predicted and a ground-truth traffic
    element: focal classification + L1 on normalized boxes - GIoU."""
    cls = classification_cost(float(pred.class_scores[int(gt.attribute)]))
    l1 = float(
        np.abs(
            box_to_cxcywh(pred.box, image_size) - box_to_cxcywh(gt.box, image_size)
        ).sum()
    )
    return weights.cls * cls + weights.reg * l1 + weights.iou * (-giou_2d(pred.box, gt.box))


def lc_assignment_cost(
    pred: Centerline, gt: Centerline, weights: LcCostWeights = LcCostWeights()
) -> float:
    """Label-assignment cost between a predicted and a ground-truth
    centerline: focal classification + L1 over the denormalized coordinates."""
    if len(pred) != len(gt):
        raise InvalidInputError(
            f"centerline point counts differ: {len(pred)} vs {len(gt)}"
        )
    cls = classification_cost(pred.confidence)
    l1 = float(np.abs(pred.points - gt.points).sum())
    return weights.cls * cls + weights.reg * l1


def projection_from_cost(
    cost: np.ndarray,
    method: str = "hungarian",
    confidences: Optional[np.ndarray] = None,
) -> Matching:
    """One-to-one projection from a prediction-by-ground-truth cost matrix
    whose forbidden pairs are already +inf."""
    if method == "hungarian":
        return hungarian(cost)
    if method != "greedy":
        raise InvalidInputError(f"unknown projection method: {method!r}")
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = cost.shape
    if confidences is None:
        confidences = np.zeros(rows)
    order = sorted(range(rows), key=lambda i: (-float(confidences[i]), i))
    taken = set()
    pairs = []
    for i in order:
        best_j, best_c = -1, np.inf
        for j in range(cols):
            if j not in taken and cost[i, j] < best_c:
                best_j, best_c = j, cost[i, j]
        if best_j >= 0 and np.isfinite(best_c):
            pairs.append((i, best_j))
            taken.add(best_j)
    pairs.sort()
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return Matching(
        tuple(pairs),
        tuple(i for i in range(rows) if i not in matched_p),
        tuple(j for j in range(cols) if j not in matched_g),
    )


def evaluation_projection(
    gts: Sequence,
    preds: Sequence,
    similarity: str,
    threshold: float,
    method: str = "hungarian",
) -> Matching:
    """Project ground-truth vertices onto predicted vertices.

    ``similarity`` is ``"frechet"`` or ``"chamfer"`` for centerlines (cost is
    the distance, pairs beyond ``threshold`` forbidden) or ``"iou"`` for
    traffic elements (cost is 1 - IoU, pairs below ``threshold`` forbidden).
    Returned pairs are (prediction index, ground-truth index).
    """
    rows, cols = len(preds), len(gts)
    cost = np.full((rows, cols), np.inf)
    confidences = np.zeros(rows)
    if similarity in ("frechet", "chamfer"):
        measure = frechet_distance if similarity == "frechet" else chamfer_distance
        for i, pred in enumerate(preds):
            confidences[i] = pred.confidence
            for j, gt in enumerate(gts):
                d = measure(pred, gt)
                if d <= threshold:
                    cost[i, j] = d
    elif similarity == "iou":
        for i, pred in enumerate(preds):
            confidences[i] = pred.score
            for j, gt in enumerate(gts):
                s = iou_2d(pred.box, gt.box)
                if s >= threshold:
                    cost[i, j] = 1.0 - s
    else:
        raise InvalidInputError(f"unknown similarity measure: {similarity!r}")
    return projection_from_cost(cost, method=method, confidences=confidences)
