"""File formats and configuration: scene JSON, canonical (byte-stable)
serialization, run configuration with TOML/JSON loading, and the named
tensor checkpoint format (JSON manifest plus float64 binary sidecar)."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .core import (
    Centerline,
    EvalConfig,
    FrameGraph,
    NUM_TE_ATTRIBUTES,
    TEAttribute,
    TrafficElement,
)
from .geometry import resample


class ParseError(ValueError):
    """A malformed input file; names the offending JSON path when known."""

    def __init__(self, message: str, path: str = "", offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        detail = message
        if path:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        super().__init__(detail)


# ---------------------------------------------------------------------------
# canonical JSON


def _format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ParseError("non-finite numbers cannot be serialized")
    return "%.17g" % x  # 17 significant digits: exact float64 round trip


def dumps_canonical(obj) -> str:
    """Serialize to compact JSON with deterministic bytes: insertion-ordered
    keys and 17-significant-digit floats."""
    parts: list = []
    _write_canonical(obj, parts)
    return "".join(parts)


def _write_canonical(obj, parts: list) -> None:
    if obj is None:
        parts.append("null")
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_format_float(float(obj)))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, dict):
        parts.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                parts.append(",")
            parts.append(json.dumps(str(k)))
            parts.append(":")
            _write_canonical(v, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, v in enumerate(obj):
            if i:
                parts.append(",")
            _write_canonical(v, parts)
        parts.append("]")
    elif isinstance(obj, np.ndarray):
        _write_canonical(obj.tolist(), parts)
    else:
        raise ParseError(f"cannot serialize object of type {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_canonical(obj) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# scene files


@dataclass(frozen=True)
class SceneDocument:
    """A frame graph plus its file-level identity and context."""

    frame_id: str
    graph: FrameGraph
    image_size: Optional[Tuple[float, float]] = None


def _expect(condition: bool, message: str, path: str) -> None:
    if not condition:
        raise ParseError(message, path=path)


def parse_scene_document(data, resample_lanes: bool = False) -> SceneDocument:
    """Parse scene JSON bytes into a :class:`SceneDocument`.

    Raises :class:`ParseError` naming the JSON path (and the byte offset for
    syntax errors).  With ``resample_lanes`` every lane is resampled to the
    standard 11 points on load.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"not valid UTF-8: {e}", offset=e.start) from e
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e.msg}", offset=e.pos) from e

    _expect(isinstance(doc, dict), "scene document must be a JSON object", "$")
    frame_id = doc.get("frame_id", "")
    _expect(isinstance(frame_id, str), "frame_id must be a string", "frame_id")

    raw_lanes = doc.get("lanes")
    _expect(isinstance(raw_lanes, list), "lanes must be a list", "lanes")
    confidences = doc.get("lane_confidences")
    if confidences is None:
        confidences = [1.0] * len(raw_lanes)
    _expect(
        isinstance(confidences, list) and len(confidences) == len(raw_lanes),
        "lane_confidences must match the number of lanes",
        "lane_confidences",
    )
    lanes = []
    for i, raw in enumerate(raw_lanes):
        path = f"lanes[{i}]"
        _expect(isinstance(raw, list) and len(raw) >= 1, "lane must be a point list", path)
        arr = _to_array(raw, path)
        _expect(arr.ndim == 2 and arr.shape[1] == 3, "lane points must be [x, y, z]", path)
        conf = confidences[i]
        _expect(
            isinstance(conf, (int, float)) and 0.0 <= conf <= 1.0,
            "confidence must lie in [0, 1]",
            f"lane_confidences[{i}]",
        )
        lane = Centerline(arr, float(conf))
        if resample_lanes:
            lane = resample(lane)
        lanes.append(lane)

    raw_tes = doc.get("traffic_elements", [])
    _expect(isinstance(raw_tes, list), "traffic_elements must be a list", "traffic_elements")
    tes = []
    for j, raw in enumerate(raw_tes):
        path = f"traffic_elements[{j}]"
        _expect(isinstance(raw, dict), "traffic element must be an object", path)
        box = _to_array(raw.get("box"), f"{path}.box")
        _expect(box.shape == (4,), "box must be [x1, y1, x2, y2]", f"{path}.box")
        attr = raw.get("attribute")
        _expect(
            isinstance(attr, int) and 0 <= attr < NUM_TE_ATTRIBUTES,
            f"attribute must be an integer in [0, {NUM_TE_ATTRIBUTES - 1}]",
            f"{path}.attribute",
        )
        scores = raw.get("scores")
        if scores is not None:
            scores = _to_array(scores, f"{path}.scores")
            _expect(
                scores.shape == (NUM_TE_ATTRIBUTES,),
                f"scores must have {NUM_TE_ATTRIBUTES} entries",
                f"{path}.scores",
            )
        tes.append(TrafficElement(box, TEAttribute(attr), scores))

    adj_ll = _adjacency(doc.get("adj_ll"), "adj_ll", (len(lanes), len(lanes)))
    adj_lt = _adjacency(doc.get("adj_lt"), "adj_lt", (len(lanes), len(tes)))

    image_size = doc.get("image_size")
    if image_size is not None:
        arr = _to_array(image_size, "image_size")
        _expect(arr.shape == (2,), "image_size must be [width, height]", "image_size")
        image_size = (float(arr[0]), float(arr[1]))

    known = {
        "frame_id", "lanes", "lane_confidences", "traffic_elements",
        "adj_ll", "adj_lt", "image_size",
    }
    unknown = sorted(set(doc) - known)
    _expect(not unknown, f"unknown keys: {unknown}", "$")

    graph = FrameGraph(tuple(lanes), tuple(tes), adj_ll, adj_lt)
    return SceneDocument(frame_id, graph, image_size)


def _to_array(raw, path: str, ndim: Optional[int] = None) -> np.ndarray:
    _expect(raw is not None, "missing required field", path)
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ParseError(f"not a numeric array: {e}", path=path) from e
    if arr.dtype == object:
        raise ParseError("ragged or non-numeric array", path=path)
    if ndim is not None and arr.ndim != ndim:
        # tolerate the [] encoding of an empty matrix
        if arr.size == 0 and ndim == 2:
            return arr.reshape((0, 0))
        raise ParseError(f"expected a {ndim}-dimensional array", path=path)
    if not np.all(np.isfinite(arr)):
        raise ParseError("contains non-finite values", path=path)
    return arr


def _adjacency(raw, path: str, expected: Tuple[int, int]) -> np.ndarray:
    arr = _to_array(raw, path)
    # [] and [[], []] are both valid encodings of a zero-width matrix
    if arr.size == 0 and expected[0] * expected[1] == 0:
        return arr.reshape(expected)
    if arr.ndim != 2 or arr.shape != expected:
        shape = "x".join(str(s) for s in arr.shape)
        raise ParseError(
            f"must be {expected[0]}x{expected[1]}, got shape {shape}", path=path
        )
    return arr


def parse_scene(data, resample_lanes: bool = False) -> FrameGraph:
    """Parse scene JSON into a :class:`FrameGraph` (drops file identity)."""
    return parse_scene_document(data, resample_lanes).graph


def scene_to_dict(doc: SceneDocument) -> dict:
    graph = doc.graph
    out: dict = {
        "frame_id": doc.frame_id,
        "lanes": [lane.points.tolist() for lane in graph.lanes],
        "lane_confidences": [lane.confidence for lane in graph.lanes],
        "traffic_elements": [
            {
                "box": te.box.tolist(),
                "attribute": int(te.attribute),
                "scores": te.class_scores.tolist(),
            }
            for te in graph.tes
        ],
        "adj_ll": graph.adj_ll.tolist(),
        "adj_lt": graph.adj_lt.tolist(),
    }
    if doc.image_size is not None:
        out["image_size"] = list(doc.image_size)
    return out


def serialize_scene(doc: SceneDocument) -> str:
    return dumps_canonical(scene_to_dict(doc)) + "\n"


def load_scene(path, resample_lanes: bool = False) -> SceneDocument:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    try:
        return parse_scene_document(data, resample_lanes)
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from e


def save_scene(path, doc: SceneDocument) -> None:
    Path(path).write_text(serialize_scene(doc), encoding="utf-8")


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Evaluation thresholds plus engine settings, loadable from TOML/JSON."""

    eval: EvalConfig = field(default_factory=EvalConfig)
    variant: str = "skg"
    layers: int = 6
    beta_ll: float = 0.5
    beta_lt: float = 0.5
    seed: int = 0
    threads: int = 1
    projection: str = "hungarian"
    ap_mode: str = "all_point"

    def __post_init__(self) -> None:
        if self.variant not in ("sg", "skg"):
            raise ParseError(f"variant must be 'sg' or 'skg', got {self.variant!r}")
        if self.layers < 1:
            raise ParseError("layers must be >= 1")
        if self.threads < 1:
            raise ParseError("threads must be >= 1")
        if self.projection not in ("hungarian", "greedy"):
            raise ParseError(f"unknown projection {self.projection!r}")
        if self.ap_mode not in ("all_point", "eleven_point"):
            raise ParseError(f"unknown ap_mode {self.ap_mode!r}")


_EVAL_KEYS = (
    "frechet_thresholds",
    "chamfer_thresholds",
    "te_iou_threshold",
    "edge_confidence_threshold",
    "bev_range",
)
_RUN_KEYS = (
    "variant", "layers", "beta_ll", "beta_lt", "seed", "threads",
    "projection", "ap_mode",
)


def run_config_from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - set(_EVAL_KEYS) - set(_RUN_KEYS))
    if unknown:
        raise ParseError(f"unknown configuration keys: {unknown}")
    eval_kwargs = {}
    for key in _EVAL_KEYS:
        if key in doc:
            value = doc[key]
            eval_kwargs[key] = tuple(value) if isinstance(value, list) else value
    run_kwargs = {key: doc[key] for key in _RUN_KEYS if key in doc}
    return RunConfig(eval=EvalConfig(**eval_kwargs), **run_kwargs)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        try:
            doc = tomllib.loads(data.decode("utf-8"))
        except Exception as e:
            raise ParseError(f"{path}: malformed TOML: {e}") from e
    else:
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: malformed JSON: {e.msg}", offset=e.pos) from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: configuration must be a table/object")
    return run_config_from_dict(doc)


def run_config_to_dict(config: RunConfig) -> dict:
    out = {
        "frechet_thresholds": list(config.eval.frechet_thresholds),
        "chamfer_thresholds": list(config.eval.chamfer_thresholds),
        "te_iou_threshold": config.eval.te_iou_threshold,
        "edge_confidence_threshold": config.eval.edge_confidence_threshold,
        "bev_range": list(config.eval.bev_range),
    }
    for key in _RUN_KEYS:
        out[key] = getattr(config, key)
    return out


# ---------------------------------------------------------------------------
# named-tensor checkpoints


TENSOR_FORMAT = "lanetopo-tensors-v1"


def save_tensors(manifest_path, blocks: Dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors as a JSON manifest plus a float64 little-endian
    binary sidecar (same stem, ``.bin`` suffix)."""
    manifest_path = Path(manifest_path)
    bin_path = manifest_path.with_suffix(".bin")
    tensors = {}
    offset = 0
    chunks = []
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.astype("<f8").tobytes())
        offset += arr.size
    manifest = {
        "format": TENSOR_FORMAT,
        "data_file": bin_path.name,
        "meta": meta,
        "tensors": tensors,
    }
    bin_path.write_bytes(b"".join(chunks))
    write_json(manifest_path, manifest)


def load_tensors(manifest_path) -> Tuple[Dict[str, np.ndarray], dict]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{manifest_path}: malformed JSON: {e.msg}", offset=e.pos) from e
    if manifest.get("format") != TENSOR_FORMAT:
        raise ParseError(f"{manifest_path}: not a {TENSOR_FORMAT} manifest")
    data = (manifest_path.parent / manifest["data_file"]).read_bytes()
    flat = np.frombuffer(data, dtype="<f8")
    blocks: Dict[str, np.ndarray] = {}
    for name, spec in manifest["tensors"].items():
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = int(spec["offset"])
        if start + size > flat.size:
            raise ParseError(f"{manifest_path}: tensor {name} overruns the data file")
        blocks[name] = flat[start : start + size].reshape(shape).astype(np.float64)
    return blocks, manifest.get("meta", {})
