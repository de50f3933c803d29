"""Central finite-difference verification of every analytic gradient path:
network layers (both variants), the topology and detection heads, and the
full loss chain.

Relative error for a parameter block is ``max|a - n| / max(max|a|, max|n|,
1e-3)`` where ``a`` is the analytic gradient and ``n`` the central
finite-difference estimate; instances that land too close to a ReLU, L1, or
box-clip kink are redrawn (differentiability holds almost everywhere, so the
probe must not straddle a kink)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

from . import assignment
from .core import Centerline, FrameGraph, InvalidInputError, TEAttribute, TrafficElement
from .heads_losses import (
    BevNormalization,
    DetectionGrads,
    HeadParams,
    LossWeights,
    detection_heads,
    detection_heads_backward,
    frame_loss,
    frame_loss_backward,
    frame_loss_kink_margin,
    init_head_params,
    outputs_to_objects,
    topology_head,
    topology_head_backward,
)
from .nn import param_blocks
from .sgnn import (
    LayerState,
    init_sgnn_params,
    sgnn_layer,
    sgnn_layer_backward,
    sgnn_layer_kink_margin,
)

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
MAX_REDRAWS = 64

# small dimensions keep the exhaustive probe fast without changing any code path
LANE_DIM = 6
TE_DIM = 6
EMBED_HIDDEN = 10
TOPO_DIM = 4
N_LANES = 4
N_TES = 3
IMAGE_SIZE = (64.0, 64.0)


def finite_difference(
    f: Callable[[], float], blocks: Dict[str, np.ndarray], eps: float = DEFAULT_EPS
) -> Dict[str, np.ndarray]:
    """Central finite differences of a scalar function over named arrays,
    perturbing each entry in place."""
    out: Dict[str, np.ndarray] = {}
    for name, arr in blocks.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        out[name] = grad
    return out


def block_relative_errors(
    analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray]
) -> Dict[str, float]:
    errors = {}
    for name, num in numeric.items():
        ana = analytic[name]
        scale = max(float(np.max(np.abs(ana), initial=0.0)),
                    float(np.max(np.abs(num), initial=0.0)),
                    KINK_MARGIN)
        errors[name] = float(np.max(np.abs(ana - num), initial=0.0)) / scale
    return errors


@dataclass
class GradcheckReport:
    """Per-group worst relative errors plus the opaque-state check."""

    seed: int
    eps: float
    groups: Dict[str, Dict[str, float]] = field(default_factory=dict)
    state_grads_zero: bool = True

    @property
    def max_relative_error(self) -> float:
        return max(
            (e for group in self.groups.values() for e in group.values()), default=0.0
        )

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.state_grads_zero and self.max_relative_error < tolerance


def _sgnn_instance(rng: np.random.Generator):
    params = init_sgnn_params(rng, LANE_DIM, TE_DIM, EMBED_HIDDEN)
    q_l = rng.normal(size=(N_LANES, LANE_DIM))
    q_t = rng.normal(size=(N_TES, TE_DIM))
    state = LayerState(
        rng.uniform(0.1, 0.9, size=(N_LANES, N_LANES)),
        rng.uniform(0.1, 0.9, size=(N_LANES, N_TES)),
        rng.uniform(0.1, 0.9, size=(13, N_TES)),
    )
    u_l = rng.normal(size=(N_LANES, LANE_DIM))
    u_t = rng.normal(size=(N_TES, TE_DIM))
    return params, q_l, q_t, state, u_l, u_t


def check_sgnn_layer(
    seed: int, variant: str, eps: float = DEFAULT_EPS
) -> Tuple[Dict[str, float], bool]:
    """Probe every parameter block plus the input queries of one layer."""
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, attempt, 101])
        params, q_l, q_t, state, u_l, u_t = _sgnn_instance(rng)
        out_l, out_t, cache = sgnn_layer(q_l, q_t, state, params, variant, 1)
        if sgnn_layer_kink_margin(cache) > KINK_MARGIN:
            break
    else:
        raise InvalidInputError("could not draw a kink-free layer instance")

    def scalar() -> float:
        a, b, _ = sgnn_layer(q_l, q_t, state, params, variant, 1)
        return float((u_l * a).sum() + (u_t * b).sum())

    d_q_l, d_q_t, grads, state_grads = sgnn_layer_backward(cache, params, u_l, u_t)

    blocks = dict(params.blocks())
    blocks["q_l"] = q_l
    blocks["q_t"] = q_t
    numeric = finite_difference(scalar, blocks, eps)
    analytic = dict(param_blocks(grads))
    analytic["q_l"] = d_q_l
    analytic["q_t"] = d_q_t
    state_zero = (
        not state_grads.a_ll_prev.any()
        and not state_grads.a_lt_prev.any()
        and not state_grads.s_t.any()
    )
    return block_relative_errors(analytic, numeric), state_zero


def check_topology_head(seed: int, eps: float = DEFAULT_EPS) -> Dict[str, float]:
    from .nn import mlp_min_preactivation_margin

    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, attempt, 202])
        heads = init_head_params(rng, LANE_DIM, TE_DIM, TOPO_DIM)
        params = heads.topo_lt
        q_a = rng.normal(size=(N_LANES, LANE_DIM))
        q_b = rng.normal(size=(N_TES, TE_DIM))
        u = rng.normal(size=(N_LANES, N_TES))
        conf, cache = topology_head(q_a, q_b, params)
        margin = min(
            mlp_min_preactivation_margin(cache[0]),
            mlp_min_preactivation_margin(cache[1]),
            mlp_min_preactivation_margin(cache[2]),
        )
        if margin > KINK_MARGIN:
            break
    else:
        raise InvalidInputError("could not draw a kink-free topology instance")

    def scalar() -> float:
        c, _ = topology_head(q_a, q_b, params)
        return float((u * c).sum())

    d_q_a, d_q_b, grads = topology_head_backward(params, u, cache)
    blocks = dict(param_blocks(params))
    blocks["q_a"] = q_a
    blocks["q_b"] = q_b
    numeric = finite_difference(scalar, blocks, eps)
    analytic = dict(param_blocks(grads))
    analytic["q_a"] = d_q_a
    analytic["q_b"] = d_q_b
    return block_relative_errors(analytic, numeric)


def _head_margins(det_cache) -> float:
    from .nn import mlp_min_preactivation_margin

    _, te_reg_cache, lc_cls_cache, lc_reg_cache, _, _, _ = det_cache
    return min(
        mlp_min_preactivation_margin(te_reg_cache),
        mlp_min_preactivation_margin(lc_cls_cache),
        mlp_min_preactivation_margin(lc_reg_cache),
    )


def check_detection_heads(seed: int, eps: float = DEFAULT_EPS) -> Dict[str, float]:
    norm = BevNormalization()
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, attempt, 303])
        params = init_head_params(rng, LANE_DIM, TE_DIM, TOPO_DIM)
        q_l = rng.normal(size=(N_LANES, LANE_DIM))
        q_t = rng.normal(size=(N_TES, TE_DIM))
        u_scores = rng.normal(size=(N_TES, 13))
        u_cxcywh = rng.normal(size=(N_TES, 4))
        u_lc = rng.normal(size=N_LANES)
        u_points = rng.normal(size=(N_LANES, 11, 3))
        det, cache = detection_heads(q_l, q_t, params, norm, IMAGE_SIZE)
        if _head_margins(cache) > KINK_MARGIN:
            break
    else:
        raise InvalidInputError("could not draw a kink-free heads instance")

    def scalar() -> float:
        d, _ = detection_heads(q_l, q_t, params, norm, IMAGE_SIZE)
        return float(
            (u_scores * d.te_scores).sum()
            + (u_cxcywh * d.te_cxcywh).sum()
            + (u_lc * d.lc_scores).sum()
            + (u_points * d.lc_points).sum()
        )

    d_q_l, d_q_t, grads = detection_heads_backward(
        params,
        DetectionGrads(
            te_scores=u_scores, te_cxcywh=u_cxcywh, lc_scores=u_lc, lc_points=u_points
        ),
        cache,
    )
    blocks = {
        name: arr
        for name, arr in param_blocks(params).items()
        if not name.startswith("topo_")
    }
    blocks["q_l"] = q_l
    blocks["q_t"] = q_t
    numeric = finite_difference(scalar, blocks, eps)
    analytic = dict(param_blocks(grads))
    analytic["q_l"] = d_q_l
    analytic["q_t"] = d_q_t
    return block_relative_errors(analytic, numeric)


def _random_gt_frame(rng: np.random.Generator) -> FrameGraph:
    lanes = []
    for _ in range(2):
        start = np.array([rng.uniform(-40, 0), rng.uniform(-20, 20), rng.uniform(-1, 1)])
        direction = np.array([rng.uniform(2, 4), rng.uniform(-0.5, 0.5), 0.0])
        pts = start[None, :] + np.arange(11)[:, None] * direction[None, :]
        lanes.append(Centerline(pts, 1.0))
    tes = []
    for _ in range(2):
        x1, y1 = rng.uniform(5, 40, size=2)
        w, h = rng.uniform(5, 15, size=2)
        attr = TEAttribute(int(rng.integers(0, 13)))
        tes.append(TrafficElement(np.array([x1, y1, x1 + w, y1 + h]), attr))
    adj_ll = np.array([[0.0, 1.0], [0.0, 0.0]])
    adj_lt = np.array([[1.0, 0.0], [0.0, 1.0]])
    return FrameGraph(tuple(lanes), tuple(tes), adj_ll, adj_lt)


def check_total_loss(seed: int, eps: float = DEFAULT_EPS) -> Dict[str, float]:
    """Full chain: heads + topology + loss, matchings frozen."""
    norm = BevNormalization()
    weights = LossWeights()
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, attempt, 404])
        params = init_head_params(rng, LANE_DIM, TE_DIM, TOPO_DIM)
        q_l = rng.normal(size=(N_LANES, LANE_DIM))
        q_t = rng.normal(size=(N_TES, TE_DIM))
        gt = _random_gt_frame(rng)

        det, _ = detection_heads(q_l, q_t, params, norm, IMAGE_SIZE)
        pred_lanes, pred_tes = outputs_to_objects(det)
        te_cost = np.array(
            [
                [
                    assignment.te_assignment_cost(p, g, image_size=IMAGE_SIZE)
                    for g in gt.tes
                ]
                for p in pred_tes
            ]
        )
        lc_cost = np.array(
            [[assignment.lc_assignment_cost(p, g) for g in gt.lanes] for p in pred_lanes]
        )
        te_matching = assignment.hungarian(te_cost)
        lc_matching = assignment.hungarian(lc_cost)

        total, _, cache = frame_loss(
            q_l, q_t, params, gt, te_matching, lc_matching, weights, norm, IMAGE_SIZE
        )
        if frame_loss_kink_margin(cache, gt, te_matching) > KINK_MARGIN:
            break
    else:
        raise InvalidInputError("could not draw a kink-free loss instance")

    def scalar() -> float:
        value, _, _ = frame_loss(
            q_l, q_t, params, gt, te_matching, lc_matching, weights, norm, IMAGE_SIZE
        )
        return float(value)

    d_q_l, d_q_t, grads = frame_loss_backward(params, cache)
    blocks = dict(param_blocks(params))
    blocks["q_l"] = q_l
    blocks["q_t"] = q_t
    numeric = finite_difference(scalar, blocks, eps)
    analytic = dict(param_blocks(grads))
    analytic["q_l"] = d_q_l
    analytic["q_t"] = d_q_t
    return block_relative_errors(analytic, numeric)


def run_gradcheck(seed: int = 0, eps: float = DEFAULT_EPS) -> GradcheckReport:
    report = GradcheckReport(seed=seed, eps=eps)
    sg_errors, sg_zero = check_sgnn_layer(seed, "sg", eps)
    skg_errors, skg_zero = check_sgnn_layer(seed, "skg", eps)
    report.groups["sgnn_layer_sg"] = sg_errors
    report.groups["sgnn_layer_skg"] = skg_errors
    report.state_grads_zero = sg_zero and skg_zero
    report.groups["topology_head"] = check_topology_head(seed, eps)
    report.groups["detection_heads"] = check_detection_heads(seed, eps)
    report.groups["total_loss"] = check_total_loss(seed, eps)
    return report
