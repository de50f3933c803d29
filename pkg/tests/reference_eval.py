"""A second, deliberately naive evaluator used to cross-check the package's
`evaluate`.  Distances use memoized recursion instead of the DP table,
matching uses plain loops, the vertex projection uses scipy, and AP is
integrated point by point."""

from __future__ import annotations

from functools import lru_cache
from typing import Dict, List, Tuple

import numpy as np

from oracles import chamfer_loops, iou_loops, projection_scipy, top_terms_reference


def frechet_recursive(a: np.ndarray, b: np.ndarray) -> float:
    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> float:
        d = float(np.linalg.norm(a[i] - b[j]))
        if i == 0 and j == 0:
            return d
        if i == 0:
            return max(go(0, j - 1), d)
        if j == 0:
            return max(go(i - 1, 0), d)
        return max(min(go(i - 1, j), go(i, j - 1), go(i - 1, j - 1)), d)

    return go(len(a) - 1, len(b) - 1)


def ap_reference(entries: List[Tuple[float, bool]], num_gt: int) -> float:
    if num_gt == 0 or not entries:
        return 0.0
    ranked = sorted(range(len(entries)), key=lambda i: -entries[i][0])
    precisions, recalls = [], []
    tp = 0
    for rank, idx in enumerate(ranked, start=1):
        if entries[idx][1]:
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)
    total = 0.0
    prev_recall = 0.0
    for k in range(len(ranked)):
        envelope = max(precisions[k:])
        total += (recalls[k] - prev_recall) * envelope
        prev_recall = recalls[k]
    return total


def greedy_reference(
    confs: List[float], measure: np.ndarray, threshold: float, larger_better: bool
) -> List[bool]:
    order = sorted(range(len(confs)), key=lambda i: (-confs[i], i))
    used = set()
    out = [False] * len(confs)
    for i in order:
        candidates = [j for j in range(measure.shape[1]) if j not in used]
        if not candidates:
            continue
        # min/max keep the first optimum, so ties prefer the lowest index,
        # matching the production convention
        if larger_better:
            best = max(candidates, key=lambda j: measure[i, j])
            ok = measure[i, best] >= threshold
        else:
            best = min(candidates, key=lambda j: measure[i, j])
            ok = measure[i, best] <= threshold
        if ok:
            out[i] = True
            used.add(best)
    return out


def evaluate_reference(gt_frames, pred_frames, config) -> Dict[str, float]:
    lane_entries: Dict[float, List[Tuple[float, bool]]] = {
        t: [] for t in config.frechet_thresholds
    }
    chamfer_entries: Dict[float, List[Tuple[float, bool]]] = {
        t: [] for t in config.chamfer_thresholds
    }
    te_entries: Dict[int, List[Tuple[float, bool]]] = {a: [] for a in range(13)}
    te_gt: Dict[int, int] = {a: 0 for a in range(13)}
    num_gt_lanes = 0
    top_ll_terms: List[float] = []
    top_lt_terms: List[float] = []

    for gt, pred in zip(gt_frames, pred_frames):
        frechet = np.array(
            [
                [frechet_recursive(p.points, g.points) for g in gt.lanes]
                for p in pred.lanes
            ]
        ).reshape(len(pred.lanes), len(gt.lanes))
        chamfer = np.array(
            [
                [chamfer_loops(p.points, g.points) for g in gt.lanes]
                for p in pred.lanes
            ]
        ).reshape(len(pred.lanes), len(gt.lanes))
        confs = [p.confidence for p in pred.lanes]
        num_gt_lanes += len(gt.lanes)
        for t in config.frechet_thresholds:
            labels = greedy_reference(confs, frechet, t, larger_better=False)
            lane_entries[t].extend(zip(confs, labels))
        for t in config.chamfer_thresholds:
            labels = greedy_reference(confs, chamfer, t, larger_better=False)
            chamfer_entries[t].extend(zip(confs, labels))

        iou = np.array(
            [[iou_loops(p.box, g.box) for g in gt.tes] for p in pred.tes]
        ).reshape(len(pred.tes), len(gt.tes))
        for a in range(13):
            p_idx = [i for i, p in enumerate(pred.tes) if int(p.attribute) == a]
            g_idx = [j for j, g in enumerate(gt.tes) if int(g.attribute) == a]
            te_gt[a] += len(g_idx)
            if not p_idx:
                continue
            sub = iou[np.ix_(p_idx, g_idx)] if g_idx else np.zeros((len(p_idx), 0))
            sub_confs = [pred.tes[i].score for i in p_idx]
            labels = greedy_reference(
                sub_confs, sub, config.te_iou_threshold, larger_better=True
            )
            te_entries[a].extend(zip(sub_confs, labels))

        lane_cost = np.where(
            frechet <= max(config.frechet_thresholds), frechet, np.inf
        )
        lane_pairs = projection_scipy(lane_cost)
        te_cost = np.where(iou >= config.te_iou_threshold, 1.0 - iou, np.inf)
        te_pairs = projection_scipy(te_cost)
        lane_map = {g: p for p, g in lane_pairs}
        te_map = {g: p for p, g in te_pairs}
        top_ll_terms.extend(
            top_terms_reference(
                gt.adj_ll, pred.adj_ll, lane_map, lane_map,
                config.edge_confidence_threshold,
            )
        )
        top_lt_terms.extend(
            top_terms_reference(
                gt.adj_lt, pred.adj_lt, lane_map, te_map,
                config.edge_confidence_threshold,
            )
        )
        top_lt_terms.extend(
            top_terms_reference(
                gt.adj_lt.T, pred.adj_lt.T, te_map, lane_map,
                config.edge_confidence_threshold,
            )
        )

    det_l = float(
        np.mean(
            [ap_reference(lane_entries[t], num_gt_lanes) for t in config.frechet_thresholds]
        )
    )
    det_l_chamfer = float(
        np.mean(
            [
                ap_reference(chamfer_entries[t], num_gt_lanes)
                for t in config.chamfer_thresholds
            ]
        )
    )
    present = [a for a in range(13) if te_gt[a] > 0]
    det_t = (
        float(np.mean([ap_reference(te_entries[a], te_gt[a]) for a in present]))
        if present
        else 0.0
    )
    top_ll = float(np.mean(top_ll_terms)) if top_ll_terms else 0.0
    top_lt = float(np.mean(top_lt_terms)) if top_lt_terms else 0.0
    return {
        "det_l": det_l,
        "det_l_chamfer": det_l_chamfer,
        "det_t": det_t,
        "top_ll": top_ll,
        "top_lt": top_lt,
        "ols": 0.25 * (det_l + det_t + np.sqrt(top_ll) + np.sqrt(top_lt)),
    }
