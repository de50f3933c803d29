"""Deterministic lane-graph topology engine: scene data model, graph-network
kernels with verified gradients, and the full perception/topology metric
suite."""

from .core import (
    Centerline,
    EvalConfig,
    FrameGraph,
    InvalidInputError,
    Point3,
    TEAttribute,
    TrafficElement,
    Violation,
    validate_frame,
)
from .geometry import (
    Coupling,
    chamfer_distance,
    frechet_distance,
    giou_2d,
    iou_2d,
    resample,
)
from .assignment import (
    Matching,
    evaluation_projection,
    hungarian,
    lc_assignment_cost,
    te_assignment_cost,
)
from .metrics import (
    EvalReport,
    PrCurve,
    average_precision,
    det_lanes,
    det_traffic,
    evaluate,
    ols,
    top_score,
    top_score_bipartite,
)
from .heads_losses import (
    BevNormalization,
    DetectionOutputs,
    HeadParams,
    LossWeights,
    detection_heads,
    focal_loss,
    frame_loss,
    init_head_params,
    topology_head,
    total_loss,
)
from .sgnn import (
    LayerState,
    SgnnParams,
    SgnnStack,
    build_t_ll,
    build_t_lt,
    embed_te,
    gcn_propagate,
    init_sgnn_params,
    init_sgnn_stack,
    run_sgnn_stack,
    sgnn_layer,
    sgnn_layer_backward,
    skg_ll_propagate,
    skg_lt_propagate,
)
from .scene_io import (
    ParseError,
    RunConfig,
    SceneDocument,
    load_run_config,
    load_scene,
    parse_scene,
    save_scene,
    serialize_scene,
)
from .synth import GenerationError, SynthSpec, generate, perturb
from .gradcheck import GradcheckReport, run_gradcheck
from .cli import cli

__version__ = "0.1.0"

__all__ = [
    "Centerline",
    "EvalConfig",
    "FrameGraph",
    "InvalidInputError",
    "Point3",
    "TEAttribute",
    "TrafficElement",
    "Violation",
    "validate_frame",
    "Coupling",
    "chamfer_distance",
    "frechet_distance",
    "giou_2d",
    "iou_2d",
    "resample",
    "Matching",
    "evaluation_projection",
    "hungarian",
    "lc_assignment_cost",
    "te_assignment_cost",
    "EvalReport",
    "PrCurve",
    "average_precision",
    "det_lanes",
    "det_traffic",
    "evaluate",
    "ols",
    "top_score",
    "top_score_bipartite",
    "BevNormalization",
    "DetectionOutputs",
    "HeadParams",
    "LossWeights",
    "detection_heads",
    "focal_loss",
    "frame_loss",
    "init_head_params",
    "topology_head",
    "total_loss",
    "LayerState",
    "SgnnParams",
    "SgnnStack",
    "build_t_ll",
    "build_t_lt",
    "embed_te",
    "gcn_propagate",
    "init_sgnn_params",
    "init_sgnn_stack",
    "run_sgnn_stack",
    "sgnn_layer",
    "sgnn_layer_backward",
    "skg_ll_propagate",
    "skg_lt_propagate",
    "ParseError",
    "RunConfig",
    "SceneDocument",
    "load_run_config",
    "load_scene",
    "parse_scene",
    "save_scene",
    "serialize_scene",
    "GenerationError",
    "SynthSpec",
    "generate",
    "perturb",
    "GradcheckReport",
    "run_gradcheck",
    "cli",
]
