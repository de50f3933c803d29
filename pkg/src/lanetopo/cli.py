"""Command-line interface: batch evaluation, synthetic scene generation,
network stack runs, parameter initialization, and gradient verification.

Exit codes: 0 success, 1 validation failure, 2 usage error.  Errors go to
standard error as ``error: <detail>`` lines; outputs are byte-deterministic
for fixed inputs, configuration, and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import gradcheck as gradcheck_mod
from .core import validate_frame
from .metrics import evaluate
from .scene_io import (
    ParseError,
    RunConfig,
    SceneDocument,
    dumps_canonical,
    load_run_config,
    load_scene,
    run_config_to_dict,
    save_scene,
    write_json,
)
from .sgnn import init_queries, init_sgnn_stack, load_stack, run_sgnn_stack, save_stack
from .synth import GenerationError, SynthSpec, frame_name, generate, perturb

THREADS_ENV = "LANETOPO_THREADS"


def _error(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _load_scene_dir(directory: Path, resample_lanes: bool) -> Dict[str, SceneDocument]:
    if not directory.is_dir():
        raise ParseError(f"{directory} is not a directory")
    docs: Dict[str, SceneDocument] = {}
    for path in sorted(directory.glob("*.json")):
        doc = load_scene(path, resample_lanes)
        frame_id = doc.frame_id or path.stem
        if frame_id in docs:
            raise ParseError(f"duplicate frame id {frame_id!r} in {directory}")
        docs[frame_id] = doc
    if not docs:
        raise ParseError(f"no scene files found in {directory}")
    return docs


def _cmd_evaluate(args) -> int:
    config = load_run_config(args.config) if args.config else RunConfig()
    threads = config.threads
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads:
        try:
            threads = max(1, int(env_threads))
        except ValueError:
            _error(f"{THREADS_ENV} must be an integer, got {env_threads!r}")
            return 1

    try:
        gt_docs = _load_scene_dir(Path(args.gt), args.resample)
        pred_docs = _load_scene_dir(Path(args.pred), args.resample)
    except ParseError as e:
        _error(str(e))
        return 1

    gt_ids, pred_ids = set(gt_docs), set(pred_docs)
    if gt_ids != pred_ids:
        missing = sorted(gt_ids - pred_ids)
        extra = sorted(pred_ids - gt_ids)
        _error(f"frame id mismatch: missing predictions {missing}, unexpected {extra}")
        return 1

    ids = sorted(gt_docs)
    violations = []
    for frame_id in ids:
        for v in validate_frame(gt_docs[frame_id].graph, config.eval, ground_truth=True):
            violations.append((frame_id, "gt", v))
        for v in validate_frame(
            pred_docs[frame_id].graph, config.eval, ground_truth=False
        ):
            violations.append((frame_id, "pred", v))
    if violations:
        for frame_id, side, v in violations:
            _error(f"{side} {frame_id} {v.path}: [{v.code}] {v.message}")
        return 1

    gt_frames = [gt_docs[i].graph for i in ids]
    pred_frames = [pred_docs[i].graph for i in ids]
    try:
        report = evaluate(
            gt_frames,
            pred_frames,
            config.eval,
            threads=threads,
            projection_method=config.projection,
            ap_mode=config.ap_mode,
        )
    except Exception as e:
        _error(str(e))
        return 1

    out = {"config": run_config_to_dict(config), **report.to_dict()}
    if args.per_frame:
        per_frame = []
        for frame_id, gt, pred in zip(ids, gt_frames, pred_frames):
            fr = evaluate(
                [gt],
                [pred],
                config.eval,
                projection_method=config.projection,
                ap_mode=config.ap_mode,
            )
            per_frame.append({"frame_id": frame_id, **fr.to_dict()})
        out["per_frame"] = per_frame
    write_json(args.out, out)
    return 0


def _parse_perturb_spec(text: str) -> dict:
    """Parse ``key=value,key=value`` perturbation overrides; ranges use
    ``lo:hi``."""
    overrides: dict = {}
    valid = set(SynthSpec.__dataclass_fields__)
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ParseError(f"perturbation entry {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in valid or key == "seed":
            raise ParseError(f"unknown perturbation key {key!r}")
        if ":" in value:
            lo, hi = value.split(":", 1)
            overrides[key] = (float(lo), float(hi))
        elif key in ("lanes_per_frame", "te_count"):
            raise ParseError(f"{key} must be a lo:hi range")
        else:
            overrides[key] = float(value)
    return overrides


def _cmd_synth(args) -> int:
    out_dir = Path(args.out)
    gt_dir = out_dir / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    try:
        gen_spec = SynthSpec(seed=args.seed)
        perturb_spec: Optional[SynthSpec] = None
        if args.perturb is not None:
            overrides = _parse_perturb_spec(args.perturb)
            int_fields = {"lanes_per_frame", "te_count"}
            kwargs = {
                k: (tuple(int(x) for x in v) if k in int_fields else v)
                for k, v in overrides.items()
            }
            perturb_spec = SynthSpec(seed=args.seed, **kwargs)
    except (ParseError, GenerationError) as e:
        _error(str(e))
        return 1

    pred_dir = out_dir / "pred"
    if perturb_spec is not None:
        pred_dir.mkdir(parents=True, exist_ok=True)
    try:
        for index in range(args.frames):
            frame_id = frame_name(index)
            gt = generate(gen_spec, index)
            save_scene(
                gt_dir / f"{frame_id}.json",
                SceneDocument(frame_id, gt, (1550.0, 1550.0)),
            )
            if perturb_spec is not None:
                pred = perturb(gt, perturb_spec, index)
                save_scene(
                    pred_dir / f"{frame_id}.json",
                    SceneDocument(frame_id, pred, (1550.0, 1550.0)),
                )
    except GenerationError as e:
        _error(str(e))
        return 1
    return 0


def _cmd_sgnn(args) -> int:
    try:
        stack = load_stack(args.params)
        scene = load_scene(args.scene)
    except ParseError as e:
        _error(str(e))
        return 1
    n_l, n_t = scene.graph.num_lanes, scene.graph.num_tes
    meta = stack.meta or {}
    q_l, q_t = init_queries(
        int(meta.get("seed", 0)),
        n_l,
        n_t,
        int(meta.get("lane_dim", stack.heads.lane_dim)),
        int(meta.get("te_dim", stack.heads.te_dim)),
    )
    try:
        outputs = run_sgnn_stack(
            stack, q_l, q_t, variant=args.variant, num_layers=args.layers
        )
    except Exception as e:
        _error(str(e))
        return 1
    write_json(
        args.out,
        {
            "frame_id": scene.frame_id,
            "variant": args.variant or stack.variant,
            "layers": args.layers or len(stack.layers),
            "q_l": outputs.q_l,
            "q_t_embedded": outputs.q_t_embedded,
            "adj_ll": outputs.adj_ll,
            "adj_lt": outputs.adj_lt,
            "te_scores": outputs.det.te_scores,
            "te_boxes": outputs.det.te_boxes,
            "lc_scores": outputs.det.lc_scores,
            "lc_points": outputs.det.lc_points,
        },
    )
    return 0


def _cmd_init_params(args) -> int:
    stack = init_sgnn_stack(
        seed=args.seed,
        num_layers=args.layers,
        variant=args.variant,
        lane_dim=args.lane_dim,
        te_dim=args.te_dim,
        embed_hidden=args.embed_hidden,
        topo_dim=args.topo_dim,
    )
    save_stack(args.out, stack)
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck_mod.run_gradcheck(args.seed, args.eps)
    for group, errors in report.groups.items():
        worst = max(errors.values()) if errors else 0.0
        print(f"{group}: max relative error {worst:.3e}")
    print(f"opaque-state gradients zero: {report.state_grads_zero}")
    print(f"overall max relative error: {report.max_relative_error:.3e}")
    if report.passed(args.tolerance):
        print(f"gradcheck PASS (tolerance {args.tolerance:g})")
        return 0
    print(f"gradcheck FAIL (tolerance {args.tolerance:g})")
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanetopo",
        description="Deterministic lane-graph topology engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--gt", required=True, help="directory of ground-truth scenes")
    p.add_argument("--pred", required=True, help="directory of predicted scenes")
    p.add_argument("--config", default=None, help="TOML/JSON run configuration")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--per-frame", action="store_true", help="add per-frame scores")
    p.add_argument(
        "--resample", action="store_true", help="resample lanes to 11 points on load"
    )
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory (gt/ and pred/)")
    p.add_argument(
        "--perturb",
        default=None,
        help="perturbation spec, e.g. 'point_noise_sigma=0.5,edge_flip_rate=0.2'",
    )
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("sgnn", help="run the network stack on a scene's query sets")
    p.add_argument("--params", required=True, help="checkpoint manifest (.json)")
    p.add_argument("--scene", required=True, help="scene file fixing the graph sizes")
    p.add_argument("--variant", choices=["sg", "skg"], default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=_cmd_sgnn)

    p = sub.add_parser("init-params", help="write a seeded parameter checkpoint")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint manifest path (.json)")
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--variant", choices=["sg", "skg"], default="skg")
    p.add_argument("--lane-dim", type=int, default=256)
    p.add_argument("--te-dim", type=int, default=256)
    p.add_argument("--embed-hidden", type=int, default=512)
    p.add_argument("--topo-dim", type=int, default=128)
    p.set_defaults(func=_cmd_init_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ParseError, GenerationError) as e:
        _error(str(e))
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
