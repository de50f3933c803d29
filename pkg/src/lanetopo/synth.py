"""Deterministic synthetic scene generation and perturbation.

Randomness comes from the Philox 4x64 counter-based generator keyed by
(seed, frame_index), so identical specs reproduce scenes bit-exactly and
frames are independent (embarrassingly parallel).  Perturbation draws are
consumed at fixed positions regardless of the rate values, which makes the
corrupted-instance sets nested as rates grow and noise scale linearly in
sigma: metric-degradation sweeps are monotone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .core import (
    Centerline,
    FrameGraph,
    NUM_TE_ATTRIBUTES,
    TEAttribute,
    TrafficElement,
)
from .geometry import resample

# Distinct stream for perturbation so predictions never reuse scene draws.
_PERTURB_SALT = 0x70657274757262  # "perturb"

TRAFFIC_LIGHTS = (TEAttribute.RED, TEAttribute.GREEN, TEAttribute.YELLOW)


class GenerationError(ValueError):
    """Raised when a synthesis spec cannot produce a valid scene."""


@dataclass(frozen=True)
class SynthSpec:
    """Scene-synthesis and perturbation parameters."""

    seed: int = 0
    lanes_per_frame: Tuple[int, int] = (4, 10)
    intersection_probability: float = 0.7
    te_count: Tuple[int, int] = (2, 6)
    point_noise_sigma: float = 0.0  # meters; displacement clipped at 2*sigma
    box_noise_pixels: float = 0.0
    lane_drop_rate: float = 0.0
    lane_add_rate: float = 0.0
    te_drop_rate: float = 0.0
    te_add_rate: float = 0.0
    attribute_flip_rate: float = 0.0
    edge_flip_rate: float = 0.0
    tp_confidence: Tuple[float, float] = (1.0, 1.0)
    fp_confidence: Tuple[float, float] = (0.05, 0.45)
    true_edge_confidence: Tuple[float, float] = (1.0, 1.0)
    spurious_edge_confidence: Tuple[float, float] = (0.55, 0.9)
    absent_edge_confidence: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        for name in (
            "lane_drop_rate",
            "lane_add_rate",
            "te_drop_rate",
            "te_add_rate",
            "attribute_flip_rate",
            "edge_flip_rate",
            "intersection_probability",
        ):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise GenerationError(f"{name} must lie in [0, 1], got {v}")
        if self.point_noise_sigma < 0 or self.box_noise_pixels < 0:
            raise GenerationError("noise scales must be non-negative")
        for name in ("lanes_per_frame", "te_count"):
            lo, hi = getattr(self, name)
            if lo > hi or hi < 0:
                raise GenerationError(f"{name} range ({lo}, {hi}) is invalid")
        if self.lanes_per_frame[1] < 1:
            raise GenerationError("spec admits no lanes; cannot generate a scene")


def _rng(seed: int, frame_index: int, salt: int = 0) -> np.random.Generator:
    key = np.array([(seed ^ salt) & 0xFFFFFFFFFFFFFFFF, frame_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def frame_name(frame_index: int) -> str:
    return f"frame_{frame_index:06d}"


def _band(rng: np.random.Generator, band: Tuple[float, float]) -> float:
    lo, hi = band
    return lo + (hi - lo) * float(rng.uniform())


def _band_value(u: float, band: Tuple[float, float]) -> float:
    lo, hi = band
    return lo + (hi - lo) * u


def _bezier(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, n: int = 33) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t**2 * p2


def generate(spec: SynthSpec, frame_index: int) -> FrameGraph:
    """Generate one ground-truth frame.

    Lanes are parallel corridors; with some probability the frame is an
    intersection: corridors split into a left (approaching) and right
    (departing) half bridged by turning-curve connectors, which produces an
    asymmetric lane graph where approach lanes can have several successors.
    Traffic elements attach to lanes consistently with their attribute
    (lights govern approach lanes, turn signs sit on turning connectors).
    """
    rng = _rng(spec.seed, frame_index)
    lo, hi = spec.lanes_per_frame
    n_lanes = int(rng.integers(max(lo, 1), hi + 1))
    intersection = bool(rng.uniform() < spec.intersection_probability) and n_lanes >= 4

    polylines: List[np.ndarray] = []
    edges: List[Tuple[int, int]] = []
    connector_attrs: dict = {}
    approach_lanes: List[int] = []
    straight_lanes: List[int] = []

    if intersection:
        n_conn = int(np.clip(rng.integers(2, 5), 2, n_lanes - 2))
        remaining = n_lanes - n_conn
        n_left = max(1, remaining // 2)
        n_right = remaining - n_left
        ys = np.linspace(-20.0, 20.0, remaining) + rng.uniform(-1.0, 1.0, remaining)
        left, right = [], []
        for i in range(n_left):
            y, z = ys[i], float(rng.uniform(-0.3, 0.3))
            x0, x1 = float(rng.uniform(-48, -40)), float(rng.uniform(-12, -4))
            left.append(len(polylines))
            polylines.append(np.array([[x0, y, z], [x1, y, z]]))
        for i in range(n_right):
            y, z = ys[n_left + i], float(rng.uniform(-0.3, 0.3))
            x0, x1 = float(rng.uniform(4, 12)), float(rng.uniform(40, 48))
            right.append(len(polylines))
            polylines.append(np.array([[x0, y, z], [x1, y, z]]))
        approach_lanes = list(left)
        straight_lanes = list(right)
        for c in range(n_conn):
            # the first two connectors share a source so some approach lane
            # always has at least two successors
            src = left[0] if c < 2 else left[int(rng.integers(0, n_left))]
            dst = right[int(rng.integers(0, n_right))]
            p0 = polylines[src][-1]
            p2 = polylines[dst][0]
            mid = np.array([(p0[0] + p2[0]) / 2.0, p0[1], (p0[2] + p2[2]) / 2.0])
            conn = len(polylines)
            polylines.append(_bezier(p0, mid, p2))
            edges.append((src, conn))
            edges.append((conn, dst))
            dy = p2[1] - p0[1]
            if dy > 1.5:
                connector_attrs[conn] = TEAttribute.TURN_LEFT
            elif dy < -1.5:
                connector_attrs[conn] = TEAttribute.TURN_RIGHT
            else:
                connector_attrs[conn] = TEAttribute.GO_STRAIGHT
    else:
        ys = np.linspace(-20.0, 20.0, n_lanes) + rng.uniform(-1.0, 1.0, n_lanes)
        if n_lanes == 1:
            ys = np.array([float(rng.uniform(-20, 20))])
        for i in range(n_lanes):
            y, z = float(ys[i]), float(rng.uniform(-0.3, 0.3))
            x0, x1 = float(rng.uniform(-48, -30)), float(rng.uniform(30, 48))
            straight_lanes.append(len(polylines))
            polylines.append(np.array([[x0, y, z], [x1, y, z]]))

    lanes = tuple(resample(Centerline(p, 1.0)) for p in polylines)
    n = len(lanes)
    adj_ll = np.zeros((n, n))
    for i, j in edges:
        adj_ll[i, j] = 1.0

    te_lo, te_hi = spec.te_count
    n_te = int(rng.integers(te_lo, te_hi + 1)) if te_hi > 0 else 0
    tes: List[TrafficElement] = []
    adj_lt = np.zeros((n, n_te))
    connectors = sorted(connector_attrs)
    for t in range(n_te):
        x1 = float(rng.uniform(80, 1300))
        y1 = float(rng.uniform(80, 650))
        w = float(rng.uniform(30, 140))
        h = float(rng.uniform(30, 140))
        box = np.array([x1, y1, x1 + w, y1 + h])
        pick = float(rng.uniform())
        if intersection and pick < 0.5:
            # a light governing an approach lane
            attr = TRAFFIC_LIGHTS[int(rng.integers(0, len(TRAFFIC_LIGHTS)))]
            lane = approach_lanes[int(rng.integers(0, len(approach_lanes)))]
        elif connectors and pick < 0.8:
            # a sign matching a turning connector's direction
            lane = connectors[int(rng.integers(0, len(connectors)))]
            attr = connector_attrs[lane]
        else:
            attr = TEAttribute.GO_STRAIGHT if pick < 0.95 else TEAttribute.UNKNOWN
            pool = straight_lanes if straight_lanes else list(range(n))
            lane = pool[int(rng.integers(0, len(pool)))]
        tes.append(TrafficElement(box, attr))
        adj_lt[lane, t] = 1.0

    return FrameGraph(lanes, tuple(tes), adj_ll, adj_lt)


def _clip_vector_noise(noise: np.ndarray, limit: float = 2.0) -> np.ndarray:
    """Scale each 3D noise vector so its norm is at most ``limit``."""
    norms = np.linalg.norm(noise, axis=-1, keepdims=True)
    factor = np.where(norms > limit, limit / np.maximum(norms, 1e-12), 1.0)
    return noise * factor


def perturb(gt: FrameGraph, spec: SynthSpec, frame_index: int = 0) -> FrameGraph:
    """Derive a prediction frame from ground truth.

    Applies point jitter (clipped at twice the noise scale), instance drops
    and additions, attribute corruption, edge flips, and confidence
    calibration, each gated by its spec rate.  With all rates and noise at
    zero (and the default confidence bands) the ground truth is returned
    with confidence 1.0 everywhere.
    """
    rng = _rng(spec.seed, frame_index, salt=_PERTURB_SALT)
    n_l, n_t = gt.num_lanes, gt.num_tes

    # Draw everything up front at rate-independent stream positions.
    lane_noise = [
        _clip_vector_noise(rng.normal(size=(len(lane), 3))) for lane in gt.lanes
    ]
    lane_drop_u = rng.uniform(size=n_l) if n_l else np.zeros(0)
    lane_conf_u = rng.uniform(size=n_l) if n_l else np.zeros(0)
    lane_add_u = rng.uniform(size=n_l) if n_l else np.zeros(0)
    added_lane_geom = [
        (
            float(rng.uniform(-45, 5)),
            float(rng.uniform(-20, 20)),
            float(rng.uniform(-0.3, 0.3)),
            float(rng.uniform(15, 35)),
            float(rng.uniform()),
        )
        for _ in range(n_l)
    ]
    box_noise = [np.clip(rng.normal(size=4), -2.0, 2.0) for _ in range(n_t)]
    te_drop_u = rng.uniform(size=n_t) if n_t else np.zeros(0)
    te_attr_u = rng.uniform(size=n_t) if n_t else np.zeros(0)
    te_attr_new = rng.integers(1, NUM_TE_ATTRIBUTES, size=n_t) if n_t else np.zeros(0)
    te_conf_u = rng.uniform(size=n_t) if n_t else np.zeros(0)
    te_add_u = rng.uniform(size=n_t) if n_t else np.zeros(0)
    added_te_geom = [
        (
            float(rng.uniform(80, 1300)),
            float(rng.uniform(80, 650)),
            float(rng.uniform(30, 140)),
            float(rng.uniform(30, 140)),
            int(rng.integers(0, NUM_TE_ATTRIBUTES)),
            float(rng.uniform()),
        )
        for _ in range(n_t)
    ]
    ll_flip_u = rng.uniform(size=(n_l, n_l)) if n_l else np.zeros((0, 0))
    ll_true_u = rng.uniform(size=(n_l, n_l)) if n_l else np.zeros((0, 0))
    ll_spur_u = rng.uniform(size=(n_l, n_l)) if n_l else np.zeros((0, 0))
    lt_flip_u = rng.uniform(size=(n_l, n_t)) if n_l and n_t else np.zeros((n_l, n_t))
    lt_true_u = rng.uniform(size=(n_l, n_t)) if n_l and n_t else np.zeros((n_l, n_t))
    lt_spur_u = rng.uniform(size=(n_l, n_t)) if n_l and n_t else np.zeros((n_l, n_t))

    sigma = spec.point_noise_sigma
    kept_lanes = [i for i in range(n_l) if lane_drop_u[i] >= spec.lane_drop_rate]
    lanes: List[Centerline] = []
    for i in kept_lanes:
        pts = gt.lanes[i].points + sigma * lane_noise[i]
        lanes.append(Centerline(pts, _band_value(lane_conf_u[i], spec.tp_confidence)))
    for i in range(n_l):
        if lane_add_u[i] < spec.lane_add_rate:
            x0, y0, z0, length, conf_u = added_lane_geom[i]
            n_pts = len(gt.lanes[i])
            pts = np.column_stack(
                [
                    np.linspace(x0, x0 + length, n_pts),
                    np.full(n_pts, y0),
                    np.full(n_pts, z0),
                ]
            )
            lanes.append(Centerline(pts, _band_value(conf_u, spec.fp_confidence)))

    kept_tes = [j for j in range(n_t) if te_drop_u[j] >= spec.te_drop_rate]
    tes: List[TrafficElement] = []
    for j in kept_tes:
        box = gt.tes[j].box + spec.box_noise_pixels * box_noise[j]
        box = np.array(
            [box[0], box[1], max(box[2], box[0] + 1.0), max(box[3], box[1] + 1.0)]
        )
        attr = int(gt.tes[j].attribute)
        if te_attr_u[j] < spec.attribute_flip_rate:
            attr = (attr + int(te_attr_new[j])) % NUM_TE_ATTRIBUTES
        conf = _band_value(te_conf_u[j], spec.tp_confidence)
        scores = np.zeros(NUM_TE_ATTRIBUTES)
        scores[attr] = conf
        tes.append(TrafficElement(box, TEAttribute(attr), scores))
    for j in range(n_t):
        if te_add_u[j] < spec.te_add_rate:
            x1, y1, w, h, attr, conf_u = added_te_geom[j]
            conf = _band_value(conf_u, spec.fp_confidence)
            scores = np.zeros(NUM_TE_ATTRIBUTES)
            scores[attr] = conf
            tes.append(
                TrafficElement(
                    np.array([x1, y1, x1 + w, y1 + h]), TEAttribute(attr), scores
                )
            )

    def edge_value(base: float, flip_u: float, true_u: float, spur_u: float) -> float:
        present = base >= 0.5
        if flip_u < spec.edge_flip_rate:
            present = not present
        if not present:
            return _band_value(spur_u, spec.absent_edge_confidence)
        if base >= 0.5:
            return _band_value(true_u, spec.true_edge_confidence)
        return _band_value(spur_u, spec.spurious_edge_confidence)

    n_pl, n_pt = len(lanes), len(tes)
    adj_ll = np.zeros((n_pl, n_pl))
    for a, i in enumerate(kept_lanes):
        for b, j in enumerate(kept_lanes):
            adj_ll[a, b] = edge_value(
                gt.adj_ll[i, j], ll_flip_u[i, j], ll_true_u[i, j], ll_spur_u[i, j]
            )
    adj_lt = np.zeros((n_pl, n_pt))
    for a, i in enumerate(kept_lanes):
        for b, j in enumerate(kept_tes):
            adj_lt[a, b] = edge_value(
                gt.adj_lt[i, j], lt_flip_u[i, j], lt_true_u[i, j], lt_spur_u[i, j]
            )
    return FrameGraph(tuple(lanes), tuple(tes), adj_ll, adj_lt)
