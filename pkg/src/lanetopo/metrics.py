"""The evaluation suite: detection mAP over distance/IoU thresholds for
lanes and traffic elements, graph topology mAP, and the combined lane-scene
score."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .assignment import Matching, projection_from_cost
from .core import (
    Centerline,
    EvalConfig,
    FrameGraph,
    InvalidInputError,
    LANE_POINTS,
    TEAttribute,
    identity_relaxation,
)
from .geometry import chamfer_distance, frechet_distance, iou_2d

logger = logging.getLogger(__name__)

ALL_POINT = "all_point"
ELEVEN_POINT = "eleven_point"


@dataclass
class PrCurve:
    """Pooled detection outcomes: (confidence, is_true_positive) per
    prediction, plus the total ground-truth count."""

    entries: List[Tuple[float, bool]] = field(default_factory=list)
    num_gt: int = 0

    def add(self, confidence: float, is_tp: bool) -> None:
        self.entries.append((float(confidence), bool(is_tp)))

    def merge(self, other: "PrCurve") -> None:
        self.entries.extend(other.entries)
        self.num_gt += other.num_gt


def average_precision(curve: PrCurve, mode: str = ALL_POINT) -> float:
    """Area under the precision-recall curve.

    ``all_point`` integrates the monotone precision envelope over every
    recall step; ``eleven_point`` averages the envelope at recalls
    0, 0.1, ..., 1.  A curve with no ground truth scores 0 with a diagnostic.
    """
    if curve.num_gt == 0:
        logger.warning("average_precision over a curve with no ground truth")
        return 0.0
    if not curve.entries:
        return 0.0
    order = sorted(range(len(curve.entries)), key=lambda i: -curve.entries[i][0])
    tp = np.array([1.0 if curve.entries[i][1] else 0.0 for i in order])
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / curve.num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if mode == ALL_POINT:
        prev = np.concatenate(([0.0], recall[:-1]))
        return float(((recall - prev) * envelope).sum())
    if mode == ELEVEN_POINT:
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            total += float(envelope[mask].max()) if mask.any() else 0.0
        return total / 11.0
    raise InvalidInputError(f"unknown AP mode {mode!r}")


def _greedy_labels(
    confidences: Sequence[float],
    measure: np.ndarray,
    threshold: float,
    greater_is_better: bool,
) -> List[bool]:
    """Confidence-ranked greedy matching; each ground truth is consumed once.

    A prediction is a true positive iff its best unconsumed ground truth
    passes the threshold.
    """
    n_pred, n_gt = measure.shape
    order = sorted(range(n_pred), key=lambda i: (-confidences[i], i))
    consumed = [False] * n_gt
    labels = [False] * n_pred
    for i in order:
        best_j = -1
        best_val = -np.inf if greater_is_better else np.inf
        for j in range(n_gt):
            if consumed[j]:
                continue
            val = measure[i, j]
            if (greater_is_better and val > best_val) or (
                not greater_is_better and val < best_val
            ):
                best_j, best_val = j, val
        if best_j < 0:
            continue
        hit = best_val >= threshold if greater_is_better else best_val <= threshold
        if hit:
            labels[i] = True
            consumed[best_j] = True
    return labels


def lane_distance_matrix(
    gt_lanes: Sequence[Centerline],
    pred_lanes: Sequence[Centerline],
    measure: str,
) -> np.ndarray:
    """(num predictions, num ground truths) matrix of curve distances."""
    if measure == "frechet":
        fn = frechet_distance
    elif measure == "chamfer":
        fn = chamfer_distance
    else:
        raise InvalidInputError(f"unknown lane measure {measure!r}")
    out = np.zeros((len(pred_lanes), len(gt_lanes)))
    for i, pred in enumerate(pred_lanes):
        for j, gt in enumerate(gt_lanes):
            out[i, j] = fn(pred, gt)
    return out


def _check_resampled(lanes: Sequence[Centerline], what: str) -> None:
    for lane in lanes:
        if len(lane) != LANE_POINTS:
            raise InvalidInputError(
                f"{what} lane has {len(lane)} points; expected {LANE_POINTS} "
                "(resample first)"
            )


def det_lanes(
    gt_frames: Sequence[Sequence[Centerline]],
    pred_frames: Sequence[Sequence[Centerline]],
    thresholds: Sequence[float],
    measure: str = "frechet",
    relaxation: Callable[[Centerline], float] = identity_relaxation,
    ap_mode: str = ALL_POINT,
) -> Tuple[float, Dict[float, float]]:
    """Lane detection score: mean AP over distance thresholds.

    Per-ground-truth thresholds may be relaxed through the ``relaxation``
    hook (distance is divided by the hook's scale; the default is identity).
    """
    if len(gt_frames) != len(pred_frames):
        raise InvalidInputError("gt and prediction frame counts differ")
    curves = {float(t): PrCurve() for t in thresholds}
    for gt_lanes, pred_lanes in zip(gt_frames, pred_frames):
        _check_resampled(gt_lanes, "ground-truth")
        _check_resampled(pred_lanes, "predicted")
        dist = lane_distance_matrix(gt_lanes, pred_lanes, measure)
        scale = np.array([relaxation(g) for g in gt_lanes])
        if scale.size:
            dist = dist / scale[None, :]
        confs = [p.confidence for p in pred_lanes]
        for t, curve in curves.items():
            labels = _greedy_labels(confs, dist, t, greater_is_better=False)
            for conf, tp in zip(confs, labels):
                curve.add(conf, tp)
            curve.num_gt += len(gt_lanes)
    per_threshold = {t: average_precision(c, ap_mode) for t, c in curves.items()}
    score = float(np.mean(list(per_threshold.values())))
    return score, per_threshold


def det_traffic(
    gt_frames: Sequence[Sequence],
    pred_frames: Sequence[Sequence],
    iou_threshold: float = 0.75,
    ap_mode: str = ALL_POINT,
) -> Tuple[float, Dict[str, float]]:
    """Traffic-element detection score: mean AP over the attributes present
    in the ground truth.  Predictions compete only within their argmax
    attribute."""
    if len(gt_frames) != len(pred_frames):
        raise InvalidInputError("gt and prediction frame counts differ")
    curves = {attr: PrCurve() for attr in TEAttribute}
    for gt_tes, pred_tes in zip(gt_frames, pred_frames):
        iou = np.zeros((len(pred_tes), len(gt_tes)))
        for i, pred in enumerate(pred_tes):
            for j, gt in enumerate(gt_tes):
                iou[i, j] = iou_2d(pred.box, gt.box)
        for attr in TEAttribute:
            p_idx = [i for i, p in enumerate(pred_tes) if p.attribute == attr]
            g_idx = [j for j, g in enumerate(gt_tes) if g.attribute == attr]
            curve = curves[attr]
            curve.num_gt += len(g_idx)
            if not p_idx:
                continue
            confs = [pred_tes[i].score for i in p_idx]
            sub = iou[np.ix_(p_idx, g_idx)] if g_idx else np.zeros((len(p_idx), 0))
            labels = _greedy_labels(confs, sub, iou_threshold, greater_is_better=True)
            for conf, tp in zip(confs, labels):
                curve.add(conf, tp)
    present = {a: c for a, c in curves.items() if c.num_gt > 0}
    if not present:
        logger.warning("det_traffic: no ground-truth traffic elements")
        return 0.0, {}
    per_attribute = {a.name.lower(): average_precision(c, ap_mode) for a, c in present.items()}
    return float(np.mean(list(per_attribute.values()))), per_attribute


@dataclass
class TopResult:
    """Graph mAP plus the raw per-vertex terms (for cross-frame pooling)."""

    score: float
    vertex_terms: List[float]


def _neighbor_terms(
    gt_adj: np.ndarray,
    pred_adj: np.ndarray,
    vertex_matching: Matching,
    neighbor_matching: Matching,
    edge_threshold: float,
) -> List[float]:
    """Per-vertex precision-weighted neighbor recall.

    Rows of ``gt_adj``/``pred_adj`` are the vertices being scored, columns
    their potential neighbors.  Only ground-truth vertices with at least one
    neighbor produce a term; an unmatched vertex contributes 0.  Predicted
    neighbors must themselves be matched to count at all, are ranked by edge
    confidence (ties broken by ground-truth index), and contribute their
    cumulative precision when correct.
    """
    n_gt_v, n_gt_n = gt_adj.shape
    pred_of_gt = vertex_matching.pred_for_gt()
    gt_of_pred_n = neighbor_matching.gt_for_pred()
    if pred_adj.size:
        if max(pred_of_gt.values(), default=-1) >= pred_adj.shape[0]:
            raise InvalidInputError("projection refers to a missing predicted vertex")
        if max(gt_of_pred_n.keys(), default=-1) >= pred_adj.shape[1]:
            raise InvalidInputError("projection refers to a missing predicted neighbor")
    terms: List[float] = []
    for v in range(n_gt_v):
        neighbors = {j for j in range(n_gt_n) if gt_adj[v, j] >= 0.5}
        if not neighbors:
            continue
        u = pred_of_gt.get(v)
        if u is None:
            terms.append(0.0)
            continue
        ranked = sorted(
            (
                (float(pred_adj[u, w]), gid)
                for w, gid in gt_of_pred_n.items()
                if pred_adj[u, w] > edge_threshold
            ),
            key=lambda cg: (-cg[0], cg[1]),
        )
        hits = 0
        acc = 0.0
        for rank, (_conf, gid) in enumerate(ranked, start=1):
            if gid in neighbors:
                hits += 1
                acc += hits / rank
        terms.append(acc / len(neighbors))
    return terms


def top_score(
    gt_adj: np.ndarray,
    pred_adj: np.ndarray,
    projection: Matching,
    edge_threshold: float = 0.5,
) -> TopResult:
    """Topology score for a directed graph over one vertex set (lane-lane).

    A vertex's neighbors are its successors (its adjacency row).  Vertices
    with no ground-truth neighbors are excluded from the average.
    """
    gt_adj = np.asarray(gt_adj, dtype=np.float64)
    pred_adj = np.asarray(pred_adj, dtype=np.float64)
    if gt_adj.ndim != 2 or gt_adj.shape[0] != gt_adj.shape[1]:
        raise InvalidInputError("gt adjacency must be square")
    if pred_adj.ndim != 2 or pred_adj.shape[0] != pred_adj.shape[1]:
        raise InvalidInputError("predicted adjacency must be square")
    terms = _neighbor_terms(gt_adj, pred_adj, projection, projection, edge_threshold)
    score = float(np.mean(terms)) if terms else 0.0
    return TopResult(score, terms)


def top_score_bipartite(
    gt_adj_lt: np.ndarray,
    pred_adj_lt: np.ndarray,
    lane_projection: Matching,
    te_projection: Matching,
    edge_threshold: float = 0.5,
) -> TopResult:
    """Topology score for the lane/traffic-element bipartite graph.

    Both sides are vertices: lanes read their neighbor lists from rows (the
    traffic elements they map to), traffic elements from columns.
    """
    gt_adj_lt = np.asarray(gt_adj_lt, dtype=np.float64)
    pred_adj_lt = np.asarray(pred_adj_lt, dtype=np.float64)
    if gt_adj_lt.ndim != 2 or pred_adj_lt.ndim != 2:
        raise InvalidInputError("adjacency matrices must be 2-dimensional")
    lane_terms = _neighbor_terms(
        gt_adj_lt, pred_adj_lt, lane_projection, te_projection, edge_threshold
    )
    te_terms = _neighbor_terms(
        gt_adj_lt.T, pred_adj_lt.T, te_projection, lane_projection, edge_threshold
    )
    terms = lane_terms + te_terms
    score = float(np.mean(terms)) if terms else 0.0
    return TopResult(score, terms)


def ols(det_l: float, det_t: float, top_ll: float, top_lt: float) -> float:
    """Overall lane-scene score: the mean of the two detection scores and
    the square roots of the two topology scores."""
    for name, value in (
        ("det_l", det_l),
        ("det_t", det_t),
        ("top_ll", top_ll),
        ("top_lt", top_lt),
    ):
        if not (0.0 <= value <= 1.0):
            raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")
    return 0.25 * (det_l + det_t + np.sqrt(top_ll) + np.sqrt(top_lt))


@dataclass
class EvalReport:
    """Aggregate scores plus per-threshold and per-attribute breakdowns."""

    det_l: float
    det_l_chamfer: float
    det_t: float
    top_ll: float
    top_lt: float
    ols: float
    det_l_per_threshold: Dict[float, float]
    det_l_chamfer_per_threshold: Dict[float, float]
    det_t_per_attribute: Dict[str, float]
    counts: Dict[str, int]

    def to_dict(self) -> dict:
        return {
            "scores": {
                "det_l": self.det_l,
                "det_l_chamfer": self.det_l_chamfer,
                "det_t": self.det_t,
                "top_ll": self.top_ll,
                "top_lt": self.top_lt,
                "ols": self.ols,
            },
            "det_l_per_threshold": {
                format(t, "g"): v for t, v in sorted(self.det_l_per_threshold.items())
            },
            "det_l_chamfer_per_threshold": {
                format(t, "g"): v
                for t, v in sorted(self.det_l_chamfer_per_threshold.items())
            },
            "det_t_per_attribute": dict(sorted(self.det_t_per_attribute.items())),
            "counts": dict(sorted(self.counts.items())),
        }


@dataclass
class _FrameEval:
    lane_curve_entries: Dict[float, List[Tuple[float, bool]]]
    chamfer_curve_entries: Dict[float, List[Tuple[float, bool]]]
    te_curve_entries: Dict[TEAttribute, List[Tuple[float, bool]]]
    te_gt_counts: Dict[TEAttribute, int]
    num_gt_lanes: int
    num_pred_lanes: int
    num_gt_tes: int
    num_pred_tes: int
    top_ll_terms: List[float]
    top_lt_terms: List[float]


def _evaluate_frame(
    gt: FrameGraph,
    pred: FrameGraph,
    config: EvalConfig,
    projection_method: str,
    relaxation: Callable[[Centerline], float],
) -> _FrameEval:
    _check_resampled(gt.lanes, "ground-truth")
    _check_resampled(pred.lanes, "predicted")
    frechet = lane_distance_matrix(gt.lanes, pred.lanes, "frechet")
    chamfer = lane_distance_matrix(gt.lanes, pred.lanes, "chamfer")
    scale = np.array([relaxation(g) for g in gt.lanes])
    if scale.size:
        frechet_n = frechet / scale[None, :]
        chamfer_n = chamfer / scale[None, :]
    else:
        frechet_n, chamfer_n = frechet, chamfer
    lane_confs = [p.confidence for p in pred.lanes]

    lane_entries: Dict[float, List[Tuple[float, bool]]] = {}
    for t in config.frechet_thresholds:
        labels = _greedy_labels(lane_confs, frechet_n, t, greater_is_better=False)
        lane_entries[t] = list(zip(lane_confs, labels))
    chamfer_entries: Dict[float, List[Tuple[float, bool]]] = {}
    for t in config.chamfer_thresholds:
        labels = _greedy_labels(lane_confs, chamfer_n, t, greater_is_better=False)
        chamfer_entries[t] = list(zip(lane_confs, labels))

    iou = np.zeros((pred.num_tes, gt.num_tes))
    for i, p in enumerate(pred.tes):
        for j, g in enumerate(gt.tes):
            iou[i, j] = iou_2d(p.box, g.box)
    te_entries: Dict[TEAttribute, List[Tuple[float, bool]]] = {}
    te_gt_counts: Dict[TEAttribute, int] = {}
    for attr in TEAttribute:
        p_idx = [i for i, p in enumerate(pred.tes) if p.attribute == attr]
        g_idx = [j for j, g in enumerate(gt.tes) if g.attribute == attr]
        te_gt_counts[attr] = len(g_idx)
        if not p_idx:
            te_entries[attr] = []
            continue
        confs = [pred.tes[i].score for i in p_idx]
        sub = iou[np.ix_(p_idx, g_idx)] if g_idx else np.zeros((len(p_idx), 0))
        labels = _greedy_labels(
            confs, sub, config.te_iou_threshold, greater_is_better=True
        )
        te_entries[attr] = list(zip(confs, labels))

    # vertex projections: lanes at the laxest distance threshold, TEs at the
    # IoU threshold
    lane_cost = np.where(
        frechet_n <= max(config.frechet_thresholds), frechet_n, np.inf
    )
    lane_proj = projection_from_cost(
        lane_cost, method=projection_method, confidences=np.array(lane_confs)
    )
    te_cost = np.where(iou >= config.te_iou_threshold, 1.0 - iou, np.inf)
    te_proj = projection_from_cost(
        te_cost,
        method=projection_method,
        confidences=np.array([p.score for p in pred.tes]),
    )
    top_ll = top_score(
        gt.adj_ll, pred.adj_ll, lane_proj, config.edge_confidence_threshold
    )
    top_lt = top_score_bipartite(
        gt.adj_lt, pred.adj_lt, lane_proj, te_proj, config.edge_confidence_threshold
    )
    return _FrameEval(
        lane_entries,
        chamfer_entries,
        te_entries,
        te_gt_counts,
        gt.num_lanes,
        pred.num_lanes,
        gt.num_tes,
        pred.num_tes,
        top_ll.vertex_terms,
        top_lt.vertex_terms,
    )


def evaluate(
    gt_frames: Sequence[FrameGraph],
    pred_frames: Sequence[FrameGraph],
    config: EvalConfig = EvalConfig(),
    frame_ids: Optional[Sequence[str]] = None,
    threads: int = 1,
    projection_method: str = "hungarian",
    ap_mode: str = ALL_POINT,
    relaxation: Callable[[Centerline], float] = identity_relaxation,
) -> EvalReport:
    """Evaluate predictions against ground truth across frames.

    Detection curves are pooled globally before computing AP (one ranking
    per threshold/attribute, not per-frame averages) and topology terms are
    pooled over vertices.  Frames are processed in ``frame_ids`` order, in
    parallel when ``threads > 1``; the result is identical either way.
    """
    if len(gt_frames) != len(pred_frames):
        raise InvalidInputError("gt and prediction frame counts differ")
    if frame_ids is not None:
        if len(frame_ids) != len(gt_frames):
            raise InvalidInputError("frame_ids length does not match frames")
        order = sorted(range(len(gt_frames)), key=lambda i: frame_ids[i])
        gt_frames = [gt_frames[i] for i in order]
        pred_frames = [pred_frames[i] for i in order]

    def work(pair):
        gt, pred = pair
        return _evaluate_frame(gt, pred, config, projection_method, relaxation)

    pairs = list(zip(gt_frames, pred_frames))
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frame_evals = list(pool.map(work, pairs))
    else:
        frame_evals = [work(p) for p in pairs]

    lane_curves = {t: PrCurve() for t in config.frechet_thresholds}
    chamfer_curves = {t: PrCurve() for t in config.chamfer_thresholds}
    te_curves = {attr: PrCurve() for attr in TEAttribute}
    counts = {
        "frames": len(frame_evals),
        "gt_lanes": 0,
        "pred_lanes": 0,
        "gt_tes": 0,
        "pred_tes": 0,
    }
    top_ll_terms: List[float] = []
    top_lt_terms: List[float] = []
    for fe in frame_evals:
        for t, entries in fe.lane_curve_entries.items():
            for conf, tp in entries:
                lane_curves[t].add(conf, tp)
            lane_curves[t].num_gt += fe.num_gt_lanes
        for t, entries in fe.chamfer_curve_entries.items():
            for conf, tp in entries:
                chamfer_curves[t].add(conf, tp)
            chamfer_curves[t].num_gt += fe.num_gt_lanes
        for attr, entries in fe.te_curve_entries.items():
            for conf, tp in entries:
                te_curves[attr].add(conf, tp)
        for attr, n in fe.te_gt_counts.items():
            te_curves[attr].num_gt += n
        counts["gt_lanes"] += fe.num_gt_lanes
        counts["pred_lanes"] += fe.num_pred_lanes
        counts["gt_tes"] += fe.num_gt_tes
        counts["pred_tes"] += fe.num_pred_tes
        top_ll_terms.extend(fe.top_ll_terms)
        top_lt_terms.extend(fe.top_lt_terms)

    det_l_per = {t: average_precision(c, ap_mode) for t, c in lane_curves.items()}
    det_lc_per = {t: average_precision(c, ap_mode) for t, c in chamfer_curves.items()}
    det_l = float(np.mean(list(det_l_per.values())))
    det_l_chamfer = float(np.mean(list(det_lc_per.values())))
    present = {a: c for a, c in te_curves.items() if c.num_gt > 0}
    if present:
        det_t_per = {
            a.name.lower(): average_precision(c, ap_mode) for a, c in present.items()
        }
        det_t = float(np.mean(list(det_t_per.values())))
    else:
        logger.warning("evaluate: no ground-truth traffic elements in any frame")
        det_t_per = {}
        det_t = 0.0
    top_ll = float(np.mean(top_ll_terms)) if top_ll_terms else 0.0
    top_lt = float(np.mean(top_lt_terms)) if top_lt_terms else 0.0
    if not top_ll_terms:
        logger.warning("evaluate: no lane-lane vertices with neighbors")
    if not top_lt_terms:
        logger.warning("evaluate: no lane-TE vertices with neighbors")
    counts["top_ll_vertices"] = len(top_ll_terms)
    counts["top_lt_vertices"] = len(top_lt_terms)

    return EvalReport(
        det_l=det_l,
        det_l_chamfer=det_l_chamfer,
        det_t=det_t,
        top_ll=top_ll,
        top_lt=top_lt,
        ols=float(ols(det_l, det_t, top_ll, top_lt)),
        det_l_per_threshold=det_l_per,
        det_l_chamfer_per_threshold=det_lc_per,
        det_t_per_attribute=det_t_per,
        counts=counts,
    )
