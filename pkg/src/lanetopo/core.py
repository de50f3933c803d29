"""Core domain types for driving-scene topology: centerlines, traffic
elements, frame graphs, and the evaluation configuration."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives input that violates its contract."""


class TEAttribute(enum.IntEnum):
    """The 13 traffic-element attributes (lights, signs, road markers)."""

    UNKNOWN = 0
    RED = 1
    GREEN = 2
    YELLOW = 3
    GO_STRAIGHT = 4
    TURN_LEFT = 5
    TURN_RIGHT = 6
    NO_LEFT_TURN = 7
    NO_RIGHT_TURN = 8
    U_TURN = 9
    NO_U_TURN = 10
    SLIGHT_LEFT = 11
    SLIGHT_RIGHT = 12


NUM_TE_ATTRIBUTES = len(TEAttribute)

# Vertex feature widths carried through the network stack.
LANE_FEATURE_DIM = 256
TE_FEATURE_DIM = 256
LANE_POINTS = 11


def _as_float_array(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Point3:
    """A 3D point in the ego frame (x forward, y left, z up), meters."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        for v in (self.x, self.y, self.z):
            if not math.isfinite(v):
                raise InvalidInputError("Point3 coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class Centerline:
    """Directed lane centerline: an ordered polyline of 3D points.

    ``points`` has shape (n, 3) with n >= 1; row 0 is the starting point and
    row n-1 the ending point.  ``confidence`` is 1.0 for ground truth.
    """

    points: np.ndarray
    confidence: float = 1.0

    def __post_init__(self) -> None:
        pts = _as_float_array(self.points, "Centerline.points")
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InvalidInputError(
                f"Centerline.points must have shape (n, 3) with n >= 1, got {pts.shape}"
            )
        if not (0.0 <= self.confidence <= 1.0):
            raise InvalidInputError(
                f"Centerline.confidence must be in [0, 1], got {self.confidence}"
            )
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def reversed(self) -> "Centerline":
        return Centerline(self.points[::-1], self.confidence)


def one_hot_scores(attribute: TEAttribute) -> np.ndarray:
    scores = np.zeros(NUM_TE_ATTRIBUTES, dtype=np.float64)
    scores[int(attribute)] = 1.0
    return scores


@dataclass(frozen=True)
class TrafficElement:
    """Traffic element: a 2D front-view box with one of 13 attributes.

    ``box`` is (x1, y1, x2, y2) in image pixels.  ``class_scores`` holds one
    score per attribute (one-hot for ground truth); ``attribute`` should be
    its argmax, which :func:`validate_frame` checks rather than enforcing at
    construction so malformed inputs can be diagnosed.
    """

    box: np.ndarray
    attribute: TEAttribute
    class_scores: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        box = _as_float_array(self.box, "TrafficElement.box")
        if box.shape != (4,):
            raise InvalidInputError(
                f"TrafficElement.box must have shape (4,), got {box.shape}"
            )
        box = box.copy()
        box.flags.writeable = False
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "attribute", TEAttribute(self.attribute))
        scores = self.class_scores
        if scores is None:
            scores = one_hot_scores(self.attribute)
        scores = _as_float_array(scores, "TrafficElement.class_scores")
        if scores.shape != (NUM_TE_ATTRIBUTES,):
            raise InvalidInputError(
                f"TrafficElement.class_scores must have shape ({NUM_TE_ATTRIBUTES},), "
                f"got {scores.shape}"
            )
        scores = scores.copy()
        scores.flags.writeable = False
        object.__setattr__(self, "class_scores", scores)

    @property
    def score(self) -> float:
        """Detection confidence: the score of the element's own attribute."""
        return float(self.class_scores[int(self.attribute)])


def _as_matrix(value, name: str) -> np.ndarray:
    """Coerce to a finite 2D float64 matrix (the dense-matrix carrier)."""
    arr = _as_float_array(value, name)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-dimensional, got ndim={arr.ndim}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FrameGraph:
    """One frame's scene graph: lanes, traffic elements, and adjacencies.

    ``adj_ll[i, j] == 1`` means the ending point of lane i connects to the
    starting point of lane j (directed, generally asymmetric).  ``adj_lt``
    is the lane-to-traffic-element bipartite assignment.  Shapes are not
    enforced here; :func:`validate_frame` reports mismatches.
    """

    lanes: Tuple[Centerline, ...]
    tes: Tuple[TrafficElement, ...]
    adj_ll: np.ndarray
    adj_lt: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "tes", tuple(self.tes))
        object.__setattr__(self, "adj_ll", _as_matrix(self.adj_ll, "FrameGraph.adj_ll"))
        object.__setattr__(self, "adj_lt", _as_matrix(self.adj_lt, "FrameGraph.adj_lt"))

    @property
    def num_lanes(self) -> int:
        return len(self.lanes)

    @property
    def num_tes(self) -> int:
        return len(self.tes)


def empty_frame() -> FrameGraph:
    return FrameGraph((), (), np.zeros((0, 0)), np.zeros((0, 0)))


def identity_relaxation(lane: Centerline) -> float:
    """Default distance-threshold relaxation hook: no relaxation."""
    return 1.0


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation thresholds and the BEV region of interest."""

    frechet_thresholds: Tuple[float, ...] = (1.0, 2.0, 3.0)
    chamfer_thresholds: Tuple[float, ...] = (0.5, 1.0, 1.5)
    te_iou_threshold: float = 0.75
    edge_confidence_threshold: float = 0.5
    bev_range: Tuple[float, float, float, float] = (-50.0, 50.0, -25.0, 25.0)

    def __post_init__(self) -> None:
        for name in ("frechet_thresholds", "chamfer_thresholds"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values:
                raise InvalidInputError(f"{name} must be non-empty")
            if any(v <= 0 for v in values):
                raise InvalidInputError(f"{name} must be strictly positive")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise InvalidInputError(f"{name} must be sorted strictly ascending")
            object.__setattr__(self, name, values)
        if not (0.0 < self.te_iou_threshold):
            raise InvalidInputError("te_iou_threshold must be positive")
        if not (0.0 < self.edge_confidence_threshold < 1.0):
            raise InvalidInputError("edge_confidence_threshold must be in (0, 1)")
        x_min, x_max, y_min, y_max = (float(v) for v in self.bev_range)
        if not (x_min < x_max and y_min < y_max):
            raise InvalidInputError("bev_range must satisfy x_min < x_max, y_min < y_max")
        object.__setattr__(self, "bev_range", (x_min, x_max, y_min, y_max))


@dataclass(frozen=True)
class Violation:
    """A single frame-validation finding (diagnostic, never fatal)."""

    code: str
    path: str
    message: str


def _check_adjacency(
    matrix: np.ndarray,
    expected_shape: Tuple[int, int],
    name: str,
    ground_truth: bool,
    out: List[Violation],
) -> None:
    if matrix.shape != expected_shape:
        out.append(
            Violation(
                "shape",
                name,
                f"{name} has shape {matrix.shape}, expected {expected_shape}",
            )
        )
        return
    if matrix.size == 0:
        return
    if matrix.min() < 0.0 or matrix.max() > 1.0:
        out.append(Violation("range", name, f"{name} entries must lie in [0, 1]"))
    if ground_truth and not np.all((matrix == 0.0) | (matrix == 1.0)):
        out.append(
            Violation("binary", name, f"ground-truth {name} entries must be 0 or 1")
        )


def validate_frame(
    frame: FrameGraph, config: EvalConfig, ground_truth: bool = True
) -> List[Violation]:
    """Check all frame invariants; returns one violation record per breach.

    With ``ground_truth=True`` the adjacency matrices must be {0,1}-valued,
    confidences must be 1.0, and every lane point must lie inside the BEV
    range.  Predicted frames skip those three checks.
    """
    out: List[Violation] = []
    n_l, n_t = frame.num_lanes, frame.num_tes
    x_min, x_max, y_min, y_max = config.bev_range

    for i, lane in enumerate(frame.lanes):
        path = f"lanes[{i}]"
        if len(lane) < 2:
            out.append(Violation("short_lane", path, "lane has fewer than 2 points"))
        if ground_truth:
            if lane.confidence != 1.0:
                out.append(
                    Violation(
                        "confidence", path, "ground-truth lane confidence must be 1.0"
                    )
                )
            xs, ys = lane.points[:, 0], lane.points[:, 1]
            if (
                xs.min() < x_min
                or xs.max() > x_max
                or ys.min() < y_min
                or ys.max() > y_max
            ):
                out.append(
                    Violation(
                        "bev_range", path, "lane point outside the BEV evaluation range"
                    )
                )

    for j, te in enumerate(frame.tes):
        path = f"traffic_elements[{j}]"
        x1, y1, x2, y2 = te.box
        if not (x1 < x2 and y1 < y2):
            out.append(Violation("box", path, "box must satisfy x1 < x2 and y1 < y2"))
        if te.class_scores.min() < 0.0 or te.class_scores.max() > 1.0:
            out.append(Violation("range", path, "class scores must lie in [0, 1]"))
        if int(np.argmax(te.class_scores)) != int(te.attribute):
            out.append(
                Violation(
                    "attribute", path, "attribute is not the argmax of class_scores"
                )
            )

    _check_adjacency(frame.adj_ll, (n_l, n_l), "adj_ll", ground_truth, out)
    _check_adjacency(frame.adj_lt, (n_l, n_t), "adj_lt", ground_truth, out)
    return out
