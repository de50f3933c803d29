"""Prediction heads (lane/TE detection, pairwise topology) and the full
training-loss assembly, with hand-derived reverse-mode gradients.

The Hungarian matchings that induce the loss targets are inputs here and are
treated as gradient-opaque: they are recomputed by callers, never
differentiated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .core import (
    Centerline,
    FrameGraph,
    InvalidInputError,
    LANE_FEATURE_DIM,
    LANE_POINTS,
    NUM_TE_ATTRIBUTES,
    TE_FEATURE_DIM,
    TEAttribute,
    TrafficElement,
)
from .nn import (
    Mlp,
    init_linear,
    init_mlp,
    linear_backward,
    linear_forward,
    mlp_backward,
    mlp_forward,
    mlp_min_preactivation_margin,
    param_blocks,
    sigmoid,
    sigmoid_backward,
)

logger = logging.getLogger(__name__)

DEFAULT_FOCAL_ALPHA = 0.25
DEFAULT_FOCAL_GAMMA = 2.0
PROB_CLAMP = 1e-7
DEFAULT_TOPO_DIM = 128
DEFAULT_IMAGE_SIZE = (1550.0, 1550.0)
DEFAULT_Z_RANGE = (-10.0, 10.0)


# ---------------------------------------------------------------------------
# focal loss


def focal_terms(
    prob: np.ndarray,
    target: np.ndarray,
    alpha: float = DEFAULT_FOCAL_ALPHA,
    gamma: float = DEFAULT_FOCAL_GAMMA,
) -> np.ndarray:
    """Elementwise focal terms for probabilities in [0, 1] and 0/1 targets.

    Probabilities are clamped away from {0, 1} so the logarithms stay finite.
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log(1.0 - p)
    return np.where(t >= 0.5, pos, neg)


def focal_terms_backward(
    prob: np.ndarray,
    target: np.ndarray,
    alpha: float = DEFAULT_FOCAL_ALPHA,
    gamma: float = DEFAULT_FOCAL_GAMMA,
) -> np.ndarray:
    """d(focal term)/d(probability); zero where the clamp is active."""
    raw = np.asarray(prob, dtype=np.float64)
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    one_m = 1.0 - p
    d_pos = alpha * gamma * one_m ** (gamma - 1.0) * np.log(p) - alpha * one_m**gamma / p
    d_neg = (
        -(1.0 - alpha) * gamma * p ** (gamma - 1.0) * np.log(1.0 - p)
        + (1.0 - alpha) * p**gamma / (1.0 - p)
    )
    grad = np.where(t >= 0.5, d_pos, d_neg)
    return np.where((raw > PROB_CLAMP) & (raw < 1.0 - PROB_CLAMP), grad, 0.0)


def focal_loss(
    pred_prob: float,
    target: int,
    alpha: float = DEFAULT_FOCAL_ALPHA,
    gamma: float = DEFAULT_FOCAL_GAMMA,
) -> float:
    """Scalar focal loss for a single probability and a 0/1 target."""
    if not (0.0 <= pred_prob <= 1.0):
        raise InvalidInputError(f"pred_prob must lie in [0, 1], got {pred_prob}")
    if pred_prob in (0.0, 1.0):
        logger.warning("focal_loss probability %s clamped away from {0, 1}", pred_prob)
    if target not in (0, 1):
        raise InvalidInputError(f"target must be 0 or 1, got {target}")
    return float(focal_terms(np.float64(pred_prob), np.float64(target), alpha, gamma))


# ---------------------------------------------------------------------------
# coordinate normalization


@dataclass(frozen=True)
class BevNormalization:
    """Affine map between normalized [0, 1] lane coordinates and meters."""

    x_range: Tuple[float, float] = (-50.0, 50.0)
    y_range: Tuple[float, float] = (-25.0, 25.0)
    z_range: Tuple[float, float] = DEFAULT_Z_RANGE

    @classmethod
    def from_bev_range(
        cls, bev_range: Tuple[float, float, float, float], z_range=DEFAULT_Z_RANGE
    ) -> "BevNormalization":
        x_min, x_max, y_min, y_max = bev_range
        return cls((x_min, x_max), (y_min, y_max), tuple(z_range))

    def _bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.x_range[0], self.y_range[0], self.z_range[0]])
        hi = np.array([self.x_range[1], self.y_range[1], self.z_range[1]])
        return lo, hi

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        lo, hi = self._bounds()
        return lo + np.asarray(unit, dtype=np.float64) * (hi - lo)

    def normalize(self, meters: np.ndarray) -> np.ndarray:
        lo, hi = self._bounds()
        return (np.asarray(meters, dtype=np.float64) - lo) / (hi - lo)

    def scale(self) -> np.ndarray:
        lo, hi = self._bounds()
        return hi - lo


def cxcywh_to_corners(cxcywh: np.ndarray, image_size: Tuple[float, float]) -> np.ndarray:
    """Normalized (cx, cy, w, h) to pixel (x1, y1, x2, y2)."""
    w_img, h_img = image_size
    cx, cy, w, h = np.moveaxis(np.asarray(cxcywh, dtype=np.float64), -1, 0)
    return np.stack(
        [
            (cx - w / 2.0) * w_img,
            (cy - h / 2.0) * h_img,
            (cx + w / 2.0) * w_img,
            (cy + h / 2.0) * h_img,
        ],
        axis=-1,
    )


def corners_grad_to_cxcywh(
    d_corners: np.ndarray, image_size: Tuple[float, float]
) -> np.ndarray:
    """Chain a corner-box gradient back to normalized (cx, cy, w, h)."""
    w_img, h_img = image_size
    dx1, dy1, dx2, dy2 = np.moveaxis(np.asarray(d_corners, dtype=np.float64), -1, 0)
    return np.stack(
        [
            (dx1 + dx2) * w_img,
            (dy1 + dy2) * h_img,
            (dx2 - dx1) * w_img / 2.0,
            (dy2 - dy1) * h_img / 2.0,
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class TopoHeadParams:
    """Per-relationship topology head: two dimension-reducing MLPs and the
    pair classifier applied to their concatenated outputs."""

    mlp_a: Mlp
    mlp_b: Mlp
    mlp_top: Mlp


@dataclass
class HeadParams:
    """All learnable tensors of the prediction heads."""

    te_cls_w: np.ndarray
    te_cls_b: np.ndarray
    te_reg: Mlp
    lc_cls: Mlp
    lc_reg: Mlp
    topo_ll: TopoHeadParams
    topo_lt: TopoHeadParams

    @property
    def lane_dim(self) -> int:
        return self.lc_cls.weights[0].shape[0]

    @property
    def te_dim(self) -> int:
        return self.te_cls_w.shape[0]

    def blocks(self) -> Dict[str, np.ndarray]:
        return param_blocks(self)


def _init_topo(
    rng: np.random.Generator, dim_a: int, dim_b: int, reduced: int
) -> TopoHeadParams:
    return TopoHeadParams(
        mlp_a=init_mlp(rng, (dim_a, dim_a, dim_a, reduced)),
        mlp_b=init_mlp(rng, (dim_b, dim_b, dim_b, reduced)),
        mlp_top=init_mlp(rng, (2 * reduced, 2 * reduced, 2 * reduced, 1)),
    )


def init_head_params(
    rng: np.random.Generator,
    lane_dim: int = LANE_FEATURE_DIM,
    te_dim: int = TE_FEATURE_DIM,
    topo_dim: int = DEFAULT_TOPO_DIM,
    num_classes: int = NUM_TE_ATTRIBUTES,
    lane_points: int = LANE_POINTS,
) -> HeadParams:
    te_cls_w, te_cls_b = init_linear(rng, te_dim, num_classes)
    return HeadParams(
        te_cls_w=te_cls_w,
        te_cls_b=te_cls_b,
        te_reg=init_mlp(rng, (te_dim, te_dim, te_dim, 4)),
        lc_cls=init_mlp(rng, (lane_dim, lane_dim, lane_dim, 1), layernorm=True),
        lc_reg=init_mlp(rng, (lane_dim, lane_dim, lane_dim, 3 * lane_points)),
        topo_ll=_init_topo(rng, lane_dim, lane_dim, topo_dim),
        topo_lt=_init_topo(rng, lane_dim, te_dim, topo_dim),
    )


def _zeros_like_mlp(m: Mlp) -> Mlp:
    return Mlp(
        [np.zeros_like(w) for w in m.weights],
        [np.zeros_like(b) for b in m.biases],
        None if m.ln_gammas is None else [np.zeros_like(g) for g in m.ln_gammas],
        None if m.ln_betas is None else [np.zeros_like(b) for b in m.ln_betas],
    )


def _acc_mlp(into: Mlp, grads: Mlp) -> None:
    for i in range(len(into.weights)):
        into.weights[i] += grads.weights[i]
        into.biases[i] += grads.biases[i]
    if into.ln_gammas is not None:
        for i in range(len(into.ln_gammas)):
            into.ln_gammas[i] += grads.ln_gammas[i]
            into.ln_betas[i] += grads.ln_betas[i]


def zeros_like_head_params(params: HeadParams) -> HeadParams:
    return HeadParams(
        np.zeros_like(params.te_cls_w),
        np.zeros_like(params.te_cls_b),
        _zeros_like_mlp(params.te_reg),
        _zeros_like_mlp(params.lc_cls),
        _zeros_like_mlp(params.lc_reg),
        TopoHeadParams(
            _zeros_like_mlp(params.topo_ll.mlp_a),
            _zeros_like_mlp(params.topo_ll.mlp_b),
            _zeros_like_mlp(params.topo_ll.mlp_top),
        ),
        TopoHeadParams(
            _zeros_like_mlp(params.topo_lt.mlp_a),
            _zeros_like_mlp(params.topo_lt.mlp_b),
            _zeros_like_mlp(params.topo_lt.mlp_top),
        ),
    )


# ---------------------------------------------------------------------------
# topology head


def topology_head(q_a: np.ndarray, q_b: np.ndarray, params: TopoHeadParams):
    """Pairwise relationship confidences.

    Each side is reduced by its own MLP; every (row, column) pair of reduced
    features is concatenated and classified with a sigmoid.  Returns the
    (n_a, n_b) confidence matrix and a cache.
    """
    q_a = np.asarray(q_a, dtype=np.float64)
    q_b = np.asarray(q_b, dtype=np.float64)
    a, cache_a = mlp_forward(params.mlp_a, q_a)
    b, cache_b = mlp_forward(params.mlp_b, q_b)
    n_a, n_b, d = a.shape[0], b.shape[0], a.shape[1]
    pair = np.concatenate(
        [
            np.broadcast_to(a[:, None, :], (n_a, n_b, d)),
            np.broadcast_to(b[None, :, :], (n_a, n_b, d)),
        ],
        axis=2,
    )
    logits, cache_top = mlp_forward(params.mlp_top, pair)
    conf = sigmoid(logits[..., 0])
    return conf, (cache_a, cache_b, cache_top, conf, d)


def topology_head_backward(
    params: TopoHeadParams, d_conf: np.ndarray, cache
) -> Tuple[np.ndarray, np.ndarray, TopoHeadParams]:
    cache_a, cache_b, cache_top, conf, d = cache
    d_logits = sigmoid_backward(d_conf, conf)[..., None]
    d_pair, g_top = mlp_backward(params.mlp_top, d_logits, cache_top)
    d_a = d_pair[:, :, :d].sum(axis=1)
    d_b = d_pair[:, :, d:].sum(axis=0)
    d_q_a, g_a = mlp_backward(params.mlp_a, d_a, cache_a)
    d_q_b, g_b = mlp_backward(params.mlp_b, d_b, cache_b)
    return d_q_a, d_q_b, TopoHeadParams(g_a, g_b, g_top)


# ---------------------------------------------------------------------------
# detection heads


@dataclass
class DetectionOutputs:
    """Raw and decoded head outputs for one frame."""

    te_scores: np.ndarray  # (n_t, 13) sigmoid probabilities
    te_cxcywh: np.ndarray  # (n_t, 4) normalized boxes
    te_boxes: np.ndarray  # (n_t, 4) corner pixels
    lc_scores: np.ndarray  # (n_l,) sigmoid confidences
    lc_points_norm: np.ndarray  # (n_l, 11, 3) in [0, 1]
    lc_points: np.ndarray  # (n_l, 11, 3) meters


def detection_heads(
    q_l: np.ndarray,
    q_t: np.ndarray,
    params: HeadParams,
    norm: BevNormalization = BevNormalization(),
    image_size: Tuple[float, float] = DEFAULT_IMAGE_SIZE,
):
    """Decode lane and TE detections from query features.

    TE boxes regress normalized (cx, cy, w, h) mapped to corner pixels; lane
    points regress a normalized point set mapped to meters via the BEV range.
    """
    q_l = np.asarray(q_l, dtype=np.float64)
    q_t = np.asarray(q_t, dtype=np.float64)
    n_l, n_t = q_l.shape[0], q_t.shape[0]

    te_logits, te_cls_cache = linear_forward(q_t, params.te_cls_w, params.te_cls_b)
    te_scores = sigmoid(te_logits)
    te_reg_raw, te_reg_cache = mlp_forward(params.te_reg, q_t)
    te_cxcywh = sigmoid(te_reg_raw)
    te_boxes = cxcywh_to_corners(te_cxcywh, image_size)

    lc_logits, lc_cls_cache = mlp_forward(params.lc_cls, q_l)
    lc_scores = sigmoid(lc_logits[:, 0])
    lc_reg_raw, lc_reg_cache = mlp_forward(params.lc_reg, q_l)
    lc_norm = sigmoid(lc_reg_raw).reshape(n_l, -1, 3)
    lc_points = norm.denormalize(lc_norm)

    out = DetectionOutputs(te_scores, te_cxcywh, te_boxes, lc_scores, lc_norm, lc_points)
    cache = (te_cls_cache, te_reg_cache, lc_cls_cache, lc_reg_cache, out, norm, image_size)
    return out, cache


@dataclass
class DetectionGrads:
    """Upstream gradients w.r.t. selected :class:`DetectionOutputs` fields."""

    te_scores: Optional[np.ndarray] = None
    te_cxcywh: Optional[np.ndarray] = None
    te_boxes: Optional[np.ndarray] = None
    lc_scores: Optional[np.ndarray] = None
    lc_points: Optional[np.ndarray] = None


def detection_heads_backward(
    params: HeadParams, d: DetectionGrads, cache
) -> Tuple[np.ndarray, np.ndarray, HeadParams]:
    te_cls_cache, te_reg_cache, lc_cls_cache, lc_reg_cache, out, norm, image_size = cache
    grads = zeros_like_head_params(params)

    # TE classification
    d_q_t = np.zeros_like(te_cls_cache[0])
    if d.te_scores is not None:
        d_logits = sigmoid_backward(d.te_scores, out.te_scores)
        dx, dw, db = linear_backward(d_logits, te_cls_cache)
        d_q_t += dx
        grads.te_cls_w += dw
        grads.te_cls_b += db

    # TE regression: corner-box and normalized-box gradients both land on the
    # sigmoid output.
    d_cxcywh = np.zeros_like(out.te_cxcywh)
    if d.te_boxes is not None:
        d_cxcywh += corners_grad_to_cxcywh(d.te_boxes, image_size)
    if d.te_cxcywh is not None:
        d_cxcywh += d.te_cxcywh
    if d_cxcywh.any():
        d_raw = sigmoid_backward(d_cxcywh, out.te_cxcywh)
        dx, g = mlp_backward(params.te_reg, d_raw, te_reg_cache)
        d_q_t += dx
        _acc_mlp(grads.te_reg, g)

    # lane classification
    d_q_l = np.zeros((out.lc_scores.shape[0], params.lane_dim))
    if d.lc_scores is not None:
        d_logit = sigmoid_backward(d.lc_scores, out.lc_scores)[:, None]
        dx, g = mlp_backward(params.lc_cls, d_logit, lc_cls_cache)
        d_q_l += dx
        _acc_mlp(grads.lc_cls, g)

    # lane regression
    if d.lc_points is not None:
        d_norm = np.asarray(d.lc_points, dtype=np.float64) * norm.scale()
        d_raw = sigmoid_backward(d_norm, out.lc_points_norm).reshape(
            out.lc_points_norm.shape[0], -1
        )
        dx, g = mlp_backward(params.lc_reg, d_raw, lc_reg_cache)
        d_q_l += dx
        _acc_mlp(grads.lc_reg, g)

    return d_q_l, d_q_t, grads


def outputs_to_objects(
    det: DetectionOutputs,
) -> Tuple[Tuple[Centerline, ...], Tuple[TrafficElement, ...]]:
    """Decode head outputs into centerline and traffic-element values."""
    lanes = tuple(
        Centerline(det.lc_points[i], float(det.lc_scores[i]))
        for i in range(det.lc_points.shape[0])
    )
    tes = tuple(
        TrafficElement(
            det.te_boxes[j],
            TEAttribute(int(np.argmax(det.te_scores[j]))),
            det.te_scores[j],
        )
        for j in range(det.te_boxes.shape[0])
    )
    return lanes, tes


# ---------------------------------------------------------------------------
# GIoU with gradient


def giou_pairs_with_grad(
    pred: np.ndarray, gt: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized GIoU of paired corner boxes plus d(GIoU)/d(pred box)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    px1, py1, px2, py2 = pred.T
    gx1, gy1, gx2, gy2 = gt.T

    ix1, ix2 = np.maximum(px1, gx1), np.minimum(px2, gx2)
    iy1, iy2 = np.maximum(py1, gy1), np.minimum(py2, gy2)
    iw, ih = np.maximum(ix2 - ix1, 0.0), np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    hx1, hx2 = np.minimum(px1, gx1), np.maximum(px2, gx2)
    hy1, hy2 = np.minimum(py1, gy1), np.maximum(py2, gy2)
    hull = (hx2 - hx1) * (hy2 - hy1)
    giou = inter / union - (hull - union) / hull

    # d inter / d pred corners (zero where the intersection is clipped away
    # or the other box is the active bound)
    pos = (iw > 0) & (ih > 0)
    d_inter = np.zeros_like(pred)
    d_inter[:, 0] = np.where(pos & (px1 > gx1), -ih, 0.0)
    d_inter[:, 2] = np.where(pos & (px2 < gx2), ih, 0.0)
    d_inter[:, 1] = np.where(pos & (py1 > gy1), -iw, 0.0)
    d_inter[:, 3] = np.where(pos & (py2 < gy2), iw, 0.0)

    d_area = np.stack(
        [-(py2 - py1), -(px2 - px1), (py2 - py1), (px2 - px1)], axis=1
    )
    d_union = d_area - d_inter

    d_hull = np.zeros_like(pred)
    hw, hh = hx2 - hx1, hy2 - hy1
    d_hull[:, 0] = np.where(px1 < gx1, -hh, 0.0)
    d_hull[:, 2] = np.where(px2 > gx2, hh, 0.0)
    d_hull[:, 1] = np.where(py1 < gy1, -hw, 0.0)
    d_hull[:, 3] = np.where(py2 > gy2, hw, 0.0)

    u2 = union[:, None] ** 2
    h2 = hull[:, None] ** 2
    d_giou = (
        (d_inter * union[:, None] - inter[:, None] * d_union) / u2
        + (d_union * hull[:, None] - union[:, None] * d_hull) / h2
    )
    return giou, d_giou


def giou_kink_margin(pred: np.ndarray, gt: np.ndarray) -> float:
    """Distance to the nearest non-differentiable GIoU configuration."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.size == 0:
        return np.inf
    corner_gaps = np.abs(pred - gt)
    ix1 = np.maximum(pred[:, 0], gt[:, 0])
    ix2 = np.minimum(pred[:, 2], gt[:, 2])
    iy1 = np.maximum(pred[:, 1], gt[:, 1])
    iy2 = np.minimum(pred[:, 3], gt[:, 3])
    clip_gaps = np.abs(np.stack([ix2 - ix1, iy2 - iy1], axis=1))
    return float(min(corner_gaps.min(), clip_gaps.min()))


# ---------------------------------------------------------------------------
# total loss


@dataclass(frozen=True)
class LossWeights:
    """Loss term weights plus the focal hyperparameters."""

    te_cls: float = 1.0
    te_reg: float = 2.5
    te_iou: float = 1.0
    lc_cls: float = 1.5
    lc_reg: float = 0.0075
    top_ll: float = 5.0
    top_lt: float = 5.0
    focal_alpha: float = DEFAULT_FOCAL_ALPHA
    focal_gamma: float = DEFAULT_FOCAL_GAMMA

    def __post_init__(self) -> None:
        for name in (
            "te_cls", "te_reg", "te_iou", "lc_cls", "lc_reg", "top_ll", "top_lt",
        ):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"loss weight {name} must be non-negative")


@dataclass
class FramePrediction:
    """Everything the loss needs from one decoder layer's heads."""

    det: DetectionOutputs
    adj_ll: np.ndarray
    adj_lt: np.ndarray


def _pair_labels(
    gt_adj: np.ndarray,
    n_rows: int,
    n_cols: int,
    row_match: Dict[int, int],
    col_match: Dict[int, int],
    unmatched_pair_negatives: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    """Edge labels on prediction pairs induced by the vertex matchings, plus
    a 0/1 mask of pairs that participate in the loss.

    Pairs involving an unmatched query are negatives; pairs where both
    queries are unmatched can optionally be dropped from the loss entirely.
    """
    labels = np.zeros((n_rows, n_cols))
    for i, gi in row_match.items():
        for j, gj in col_match.items():
            labels[i, j] = gt_adj[gi, gj]
    mask = np.ones((n_rows, n_cols))
    if not unmatched_pair_negatives:
        row_unmatched = np.ones(n_rows, dtype=bool)
        col_unmatched = np.ones(n_cols, dtype=bool)
        for i in row_match:
            row_unmatched[i] = False
        for j in col_match:
            col_unmatched[j] = False
        mask[np.ix_(row_unmatched, col_unmatched)] = 0.0
    return labels, mask


def total_loss(
    pred: FramePrediction,
    gt: FrameGraph,
    te_matching,
    lc_matching,
    weights: LossWeights = LossWeights(),
    image_size: Tuple[float, float] = DEFAULT_IMAGE_SIZE,
    unmatched_pair_negatives: bool = True,
):
    """The full loss: TE detection + lane detection + topology.

    Focal classification runs over every query (unmatched queries are
    background); regression and GIoU terms run over matched pairs only; edge
    labels for the topology terms are induced by the two matchings (with
    ``unmatched_pair_negatives=False``, pairs whose queries are both
    unmatched are dropped instead of counted as negatives).  All reductions
    are sums.  Returns (total, components, cache).
    """
    det = pred.det
    n_t = det.te_scores.shape[0]
    n_l = det.lc_scores.shape[0]
    alpha, gamma = weights.focal_alpha, weights.focal_gamma

    te_pairs = list(te_matching.pairs)
    lc_pairs = list(lc_matching.pairs)
    for p, g in te_pairs:
        if not (0 <= p < n_t and 0 <= g < gt.num_tes):
            raise InvalidInputError("te matching index out of range")
    for p, g in lc_pairs:
        if not (0 <= p < n_l and 0 <= g < gt.num_lanes):
            raise InvalidInputError("lc matching index out of range")

    # TE classification: one-hot targets at matched queries
    te_targets = np.zeros((n_t, NUM_TE_ATTRIBUTES))
    for p, g in te_pairs:
        te_targets[p, int(gt.tes[g].attribute)] = 1.0
    te_focal = float(focal_terms(det.te_scores, te_targets, alpha, gamma).sum())

    # TE regression and GIoU over matched pairs
    if te_pairs:
        pred_idx = np.array([p for p, _ in te_pairs])
        gt_boxes = np.stack([gt.tes[g].box for _, g in te_pairs])
        gt_cxcywh = _boxes_to_cxcywh(gt_boxes, image_size)
        reg_diff = det.te_cxcywh[pred_idx] - gt_cxcywh
        te_l1 = float(np.abs(reg_diff).sum())
        giou, d_giou = giou_pairs_with_grad(det.te_boxes[pred_idx], gt_boxes)
        te_giou = float((1.0 - giou).sum())
    else:
        pred_idx = np.array([], dtype=int)
        gt_boxes = np.zeros((0, 4))
        reg_diff = np.zeros((0, 4))
        d_giou = np.zeros((0, 4))
        te_l1 = 0.0
        te_giou = 0.0

    # lane classification
    lc_targets = np.zeros(n_l)
    for p, _ in lc_pairs:
        lc_targets[p] = 1.0
    lc_focal = float(focal_terms(det.lc_scores, lc_targets, alpha, gamma).sum())

    # lane regression on denormalized coordinates
    if lc_pairs:
        lc_pred_idx = np.array([p for p, _ in lc_pairs])
        gt_points = np.stack([gt.lanes[g].points for _, g in lc_pairs])
        lc_diff = det.lc_points[lc_pred_idx] - gt_points
        lc_l1 = float(np.abs(lc_diff).sum())
    else:
        lc_pred_idx = np.array([], dtype=int)
        lc_diff = np.zeros((0, 0, 3))
        lc_l1 = 0.0

    # topology edges
    lc_map = lc_matching.gt_for_pred()
    te_map = te_matching.gt_for_pred()
    ll_labels, ll_mask = _pair_labels(
        gt.adj_ll, n_l, n_l, lc_map, lc_map, unmatched_pair_negatives
    )
    lt_labels, lt_mask = _pair_labels(
        gt.adj_lt, n_l, n_t, lc_map, te_map, unmatched_pair_negatives
    )
    top_ll_focal = float(
        (ll_mask * focal_terms(pred.adj_ll, ll_labels, alpha, gamma)).sum()
    )
    top_lt_focal = float(
        (lt_mask * focal_terms(pred.adj_lt, lt_labels, alpha, gamma)).sum()
    )

    det_te = weights.te_cls * te_focal + weights.te_reg * te_l1 + weights.te_iou * te_giou
    det_lc = weights.lc_cls * lc_focal + weights.lc_reg * lc_l1
    top = weights.top_ll * top_ll_focal + weights.top_lt * top_lt_focal
    total = det_te + det_lc + top
    components = {
        "det_te": det_te,
        "det_lc": det_lc,
        "top": top,
        "te_focal": te_focal,
        "te_l1": te_l1,
        "te_giou": te_giou,
        "lc_focal": lc_focal,
        "lc_l1": lc_l1,
        "top_ll_focal": top_ll_focal,
        "top_lt_focal": top_lt_focal,
    }
    cache = (
        pred, te_targets, lc_targets, ll_labels, lt_labels, ll_mask, lt_mask,
        pred_idx, reg_diff, d_giou, lc_pred_idx, lc_diff, weights,
    )
    return total, components, cache


def _boxes_to_cxcywh(boxes: np.ndarray, image_size: Tuple[float, float]) -> np.ndarray:
    w, h = image_size
    x1, y1, x2, y2 = boxes.T
    return np.stack(
        [(x1 + x2) / (2 * w), (y1 + y2) / (2 * h), (x2 - x1) / w, (y2 - y1) / h],
        axis=1,
    )


@dataclass
class LossGrads:
    """Gradients of the total loss w.r.t. the prediction arrays."""

    te_scores: np.ndarray
    te_cxcywh: np.ndarray
    te_boxes: np.ndarray
    lc_scores: np.ndarray
    lc_points: np.ndarray
    adj_ll: np.ndarray
    adj_lt: np.ndarray


def loss_backward(cache) -> LossGrads:
    (
        pred, te_targets, lc_targets, ll_labels, lt_labels, ll_mask, lt_mask,
        pred_idx, reg_diff, d_giou, lc_pred_idx, lc_diff, weights,
    ) = cache
    det = pred.det
    alpha, gamma = weights.focal_alpha, weights.focal_gamma

    d_te_scores = weights.te_cls * focal_terms_backward(
        det.te_scores, te_targets, alpha, gamma
    )
    d_te_cxcywh = np.zeros_like(det.te_cxcywh)
    d_te_boxes = np.zeros_like(det.te_boxes)
    if pred_idx.size:
        np.add.at(d_te_cxcywh, pred_idx, weights.te_reg * np.sign(reg_diff))
        np.add.at(d_te_boxes, pred_idx, weights.te_iou * (-d_giou))

    d_lc_scores = weights.lc_cls * focal_terms_backward(
        det.lc_scores, lc_targets, alpha, gamma
    )
    d_lc_points = np.zeros_like(det.lc_points)
    if lc_pred_idx.size:
        np.add.at(d_lc_points, lc_pred_idx, weights.lc_reg * np.sign(lc_diff))

    d_adj_ll = (
        weights.top_ll * ll_mask * focal_terms_backward(pred.adj_ll, ll_labels, alpha, gamma)
    )
    d_adj_lt = (
        weights.top_lt * lt_mask * focal_terms_backward(pred.adj_lt, lt_labels, alpha, gamma)
    )
    return LossGrads(
        d_te_scores, d_te_cxcywh, d_te_boxes, d_lc_scores, d_lc_points, d_adj_ll, d_adj_lt
    )


def stacked_total_loss(
    preds,
    gt: FrameGraph,
    matchings,
    weights: LossWeights = LossWeights(),
    image_size: Tuple[float, float] = DEFAULT_IMAGE_SIZE,
):
    """Deep supervision: the loss summed over several decoder layers'
    predictions, each with its own (te_matching, lc_matching) pair."""
    if len(preds) != len(matchings):
        raise InvalidInputError("one matching pair is required per layer output")
    total = 0.0
    per_layer = []
    for pred, (te_matching, lc_matching) in zip(preds, matchings):
        value, components, _ = total_loss(
            pred, gt, te_matching, lc_matching, weights, image_size
        )
        total += value
        per_layer.append(components)
    return total, per_layer


# ---------------------------------------------------------------------------
# full head-and-loss chain (used for gradient verification and by the CLI)


def frame_loss(
    q_l: np.ndarray,
    q_t: np.ndarray,
    params: HeadParams,
    gt: FrameGraph,
    te_matching,
    lc_matching,
    weights: LossWeights = LossWeights(),
    norm: BevNormalization = BevNormalization(),
    image_size: Tuple[float, float] = DEFAULT_IMAGE_SIZE,
):
    """Heads + topology + loss as one scalar function of the queries."""
    det, det_cache = detection_heads(q_l, q_t, params, norm, image_size)
    adj_ll, ll_cache = topology_head(q_l, q_l, params.topo_ll)
    adj_lt, lt_cache = topology_head(q_l, q_t, params.topo_lt)
    pred = FramePrediction(det, adj_ll, adj_lt)
    total, components, cache = total_loss(
        pred, gt, te_matching, lc_matching, weights, image_size
    )
    return total, components, (det_cache, ll_cache, lt_cache, cache)


def frame_loss_backward(params: HeadParams, chain_cache):
    det_cache, ll_cache, lt_cache, cache = chain_cache
    g = loss_backward(cache)
    grads = zeros_like_head_params(params)

    d_q_l, d_q_t, det_grads = detection_heads_backward(
        params,
        DetectionGrads(
            te_scores=g.te_scores,
            te_cxcywh=g.te_cxcywh,
            te_boxes=g.te_boxes,
            lc_scores=g.lc_scores,
            lc_points=g.lc_points,
        ),
        det_cache,
    )
    _acc_head_grads(grads, det_grads)

    d_a, d_b, topo_grads = topology_head_backward(params.topo_ll, g.adj_ll, ll_cache)
    d_q_l += d_a + d_b
    _acc_mlp(grads.topo_ll.mlp_a, topo_grads.mlp_a)
    _acc_mlp(grads.topo_ll.mlp_b, topo_grads.mlp_b)
    _acc_mlp(grads.topo_ll.mlp_top, topo_grads.mlp_top)

    d_a, d_b, topo_grads = topology_head_backward(params.topo_lt, g.adj_lt, lt_cache)
    d_q_l += d_a
    d_q_t += d_b
    _acc_mlp(grads.topo_lt.mlp_a, topo_grads.mlp_a)
    _acc_mlp(grads.topo_lt.mlp_b, topo_grads.mlp_b)
    _acc_mlp(grads.topo_lt.mlp_top, topo_grads.mlp_top)
    return d_q_l, d_q_t, grads


def _acc_head_grads(into: HeadParams, add: HeadParams) -> None:
    into.te_cls_w += add.te_cls_w
    into.te_cls_b += add.te_cls_b
    _acc_mlp(into.te_reg, add.te_reg)
    _acc_mlp(into.lc_cls, add.lc_cls)
    _acc_mlp(into.lc_reg, add.lc_reg)
    for rel in ("topo_ll", "topo_lt"):
        for part in ("mlp_a", "mlp_b", "mlp_top"):
            _acc_mlp(getattr(getattr(into, rel), part), getattr(getattr(add, rel), part))


def frame_loss_kink_margin(chain_cache, gt: FrameGraph, te_matching) -> float:
    """Smallest margin to any non-smooth point in the loss chain: ReLU
    preactivations, L1 residuals, and GIoU corner/clip ties."""
    det_cache, ll_cache, lt_cache, cache = chain_cache
    (_, _, _, _, _, _, _, pred_idx, reg_diff, _, _, lc_diff, _) = cache
    te_cls_cache, te_reg_cache, lc_cls_cache, lc_reg_cache, out, _, _ = det_cache

    margin = min(
        mlp_min_preactivation_margin(te_reg_cache),
        mlp_min_preactivation_margin(lc_cls_cache),
        mlp_min_preactivation_margin(lc_reg_cache),
    )
    for topo_cache in (ll_cache, lt_cache):
        cache_a, cache_b, cache_top, _, _ = topo_cache
        margin = min(
            margin,
            mlp_min_preactivation_margin(cache_a),
            mlp_min_preactivation_margin(cache_b),
            mlp_min_preactivation_margin(cache_top),
        )
    if reg_diff.size:
        margin = min(margin, float(np.min(np.abs(reg_diff))))
    if lc_diff.size:
        margin = min(margin, float(np.min(np.abs(lc_diff))))
    if pred_idx.size:
        gt_boxes = np.stack([gt.tes[g].box for _, g in te_matching.pairs])
        margin = min(margin, giou_kink_margin(out.te_boxes[pred_idx], gt_boxes))
    return margin
