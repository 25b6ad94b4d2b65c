"""Command-line entry point exposing every pipeline stage.

Exit codes: 0 success, 1 validation error (or failed verification), 2 I/O
error. With --json a single JSON document goes to stdout and human-readable
text to stderr. Option precedence: flags > --config JSON file > defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_GRID,
    GridSpec,
    OCCUPIED,
    ValidationError,
)
from .losses import (
    EmbeddingBatch,
    cosine_prediction_loss,
    finite_difference_grad,
    iou_metrics,
    l2_prediction_loss,
    sigreg,
    variance_reg,
)
from .masking import MaskConfig
from .pipeline import run_mask_prep, run_ocf_prep
from .raycast import raycast
from .scene_io import (
    SceneIOError,
    read_grid,
    read_points,
    read_sequence,
    read_tensor_file,
    write_grid,
    write_points,
)
from .sequence_transform import transform_sequence
from .synth import SceneConfig, write_scene
from .verify import SUITES, run_suites


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _info(args, msg: str) -> None:
    print(msg, file=sys.stderr if args.json else sys.stdout)


def _emit(args, doc: dict) -> None:
    if args.json:
        json.dump(doc, sys.stdout, sort_keys=True)
        sys.stdout.write("\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise SceneIOError(f"missing config file {p}")
    try:
        with open(p) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneIOError(f"config file {p} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise SceneIOError(f"config file {p} must hold a JSON object")
    return cfg


def _opt(args, cfg: dict, name: str, default):
    """flags > config file > default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    if name in cfg:
        return cfg[name]
    return default


def _grid_spec(args, cfg: dict) -> GridSpec:
    rng = _opt(args, cfg, "grid_range", DEFAULT_GRID.range)
    vox = _opt(args, cfg, "voxel_size", DEFAULT_GRID.voxel_size)
    return GridSpec(range=tuple(rng), voxel_size=tuple(vox))


def _threads(args, cfg: dict) -> int:
    return int(_opt(args, cfg, "threads", os.cpu_count() or 1))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json", action="store_true",
                   help="emit a single JSON document on stdout")
    p.add_argument("--config", help="JSON file with option defaults")


def _add_grid(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-range", type=float, nargs=6, dest="grid_range",
                   metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    p.add_argument("--voxel-size", type=float, nargs=3, dest="voxel_size",
                   metavar=("VX", "VY", "VZ"))


# ---------------------------------------------------------------------------

def _cmd_synth_gen(args) -> int:
    cfg = _load_config(args.config)
    scene = SceneConfig.from_json(cfg["scene"]) if "scene" in cfg else SceneConfig()
    if args.seed is not None or args.num_frames is not None:
        data = scene.to_json()
        if args.seed is not None:
            data["rng_seed"] = args.seed
        if args.num_frames is not None:
            data["num_frames"] = args.num_frames
        scene = SceneConfig.from_json(data)
    seq = write_scene(scene, args.out)
    total = sum(len(f.cloud) for f in seq.frames)
    _info(args, f"wrote {len(seq)} frames ({total} points) to {args.out}")
    _emit(args, {"out": str(args.out), "num_frames": len(seq),
                 "num_points": total, "rng_seed": scene.rng_seed})
    return 0


def _cmd_transform(args) -> int:
    cfg = _load_config(args.config)
    seq = read_sequence(args.sequence)
    id_start = int(_opt(args, cfg, "id_start", 0))
    id_end = _opt(args, cfg, "id_end", None)
    tr = transform_sequence(seq, args.cur, id_start=id_start,
                            id_end=None if id_end is None else int(id_end))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for i in sorted(tr.per_frame_points):
        write_points(tr.per_frame_points[i], out / f"transformed_{i}.pts")
        counts[str(i)] = len(tr.per_frame_points[i])
    with open(out / "provenance.json", "w") as fh:
        json.dump(
            {str(i): [[f, iid] for f, iid in prov]
             for i, prov in tr.provenance.items()},
            fh, sort_keys=True)
    _info(args, f"transformed {len(counts)} frames toward cur={args.cur}")
    _emit(args, {"out": str(args.out), "cur": args.cur,
                 "points_per_frame": counts})
    return 0


def _cmd_build_ocf(args) -> int:
    cfg = _load_config(args.config)
    result = run_ocf_prep(
        args.corpus, args.out,
        n_pre=int(_opt(args, cfg, "n_pre", 5)),
        n_post=int(_opt(args, cfg, "n_post", 5)),
        spec=_grid_spec(args, cfg),
        threads=_threads(args, cfg),
    )
    _info(args, f"{len(result['samples'])} samples, "
                f"{len(result['failures'])} failures -> {args.out}")
    _emit(args, result)
    return 0


def _cmd_build_masks(args) -> int:
    cfg = _load_config(args.config)
    mask_cfg = MaskConfig(
        ratio_nonempty=float(_opt(args, cfg, "ratio_nonempty", 0.5)),
        ratio_empty=float(_opt(args, cfg, "ratio_empty", 0.5)),
        rng_seed=int(_opt(args, cfg, "seed", 0)),
    )
    result = run_mask_prep(
        args.corpus, args.out,
        t_window=int(_opt(args, cfg, "t_window", 5)),
        cfg=mask_cfg,
        spec=_grid_spec(args, cfg),
        threads=_threads(args, cfg),
    )
    _info(args, f"{len(result['samples'])} samples, "
                f"{len(result['failures'])} failures -> {args.out}")
    _emit(args, result)
    return 0


def _cmd_raycast(args) -> int:
    cfg = _load_config(args.config)
    cloud = read_points(args.points)
    grid = raycast(np.array(args.origin), cloud, _grid_spec(args, cfg))
    write_grid(grid, args.out)
    from .core import FREE, INVALID

    counts = {
        "occupied": int(np.sum(grid.state == OCCUPIED)),
        "free": int(np.sum(grid.state == FREE)),
        "invalid": int(np.sum(grid.state == INVALID)),
    }
    _info(args, f"raycast {len(cloud)} points -> {args.out} "
                f"({counts['occupied']} occupied)")
    _emit(args, {"out": str(args.out), **counts})
    return 0


def _cmd_eval_iou(args) -> int:
    pred = read_grid(args.pred)
    label = read_grid(args.label)
    iou_full, iou_close = iou_metrics(pred.state == OCCUPIED, label,
                                      close_fraction=args.close_fraction)
    _info(args, f"iou_full={iou_full:.6f} iou_close={iou_close:.6f}")
    _emit(args, {"iou_full": iou_full, "iou_close": iou_close})
    return 0


def _cmd_loss_check(args) -> int:
    values_p, mask_p = read_tensor_file(args.pred)
    pred = EmbeddingBatch(values_p, mask_p)
    report = {}
    rng = np.random.default_rng(args.seed)
    probes = rng.choice(values_p.size, size=min(args.probes, values_p.size),
                        replace=False)

    def fd_rel(fn, grads):
        fd = finite_difference_grad(fn, values_p, probes)
        denom = max(float(np.linalg.norm(fd)), 1e-12)
        return float(np.linalg.norm(grads.ravel()[probes] - fd)) / denom

    if args.target is not None:
        values_t, mask_t = read_tensor_file(args.target)
        target = EmbeddingBatch(values_t, mask_t)
        v, g = cosine_prediction_loss(pred, target)
        report["cosine"] = {
            "value": v,
            "grad_rel_err": fd_rel(
                lambda x: cosine_prediction_loss(
                    EmbeddingBatch(x, mask_p), target)[0], g),
        }
        v, g = l2_prediction_loss(pred, target)
        report["l2"] = {
            "value": v,
            "grad_rel_err": fd_rel(
                lambda x: l2_prediction_loss(
                    EmbeddingBatch(x, mask_p), target)[0], g),
        }
    v, g = variance_reg(pred)
    report["variance"] = {
        "value": v,
        "grad_rel_err": fd_rel(
            lambda x: variance_reg(EmbeddingBatch(x, mask_p))[0], g),
    }
    v, g = sigreg(pred, k=args.projections, seed=args.seed)
    report["sigreg"] = {
        "value": v,
        "grad_rel_err": fd_rel(
            lambda x: sigreg(EmbeddingBatch(x, mask_p),
                             k=args.projections, seed=args.seed)[0], g),
    }
    for name, entry in report.items():
        _info(args, f"{name}: value={entry['value']:.6f} "
                    f"grad_rel_err={entry['grad_rel_err']:.2e}")
    _emit(args, report)
    return 0


def _cmd_verify(args) -> int:
    names = args.suite if args.suite else list(SUITES)
    results = run_suites(names)
    for res in results:
        status = "PASS" if res["passed"] else "FAIL"
        _info(args, f"{res['suite']}: {status}")
    _emit(args, {"suites": results, "passed": all(r["passed"] for r in results)})
    return 0 if all(r["passed"] for r in results) else 1


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="lidarworld",
                     description="LiDAR world-model data pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-frames", type=int, dest="num_frames")
    _add_common(p)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("transform",
                       help="ghost removal + instance alignment of a sequence")
    p.add_argument("--sequence", required=True)
    p.add_argument("--cur", type=int, required=True)
    p.add_argument("--id-start", type=int, dest="id_start")
    p.add_argument("--id-end", type=int, dest="id_end")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("build-ocf",
                       help="occupancy-completion samples for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-pre", type=int, dest="n_pre")
    p.add_argument("--n-post", type=int, dest="n_post")
    p.add_argument("--threads", type=int)
    _add_grid(p)
    _add_common(p)
    p.set_defaults(func=_cmd_build_ocf)

    p = sub.add_parser("build-masks", help="group BEV masks for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-window", type=int, dest="t_window")
    p.add_argument("--ratio-nonempty", type=float, dest="ratio_nonempty")
    p.add_argument("--ratio-empty", type=float, dest="ratio_empty")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    _add_grid(p)
    _add_common(p)
    p.set_defaults(func=_cmd_build_masks)

    p = sub.add_parser("raycast", help="single-frame ray-cast voxelization")
    p.add_argument("--points", required=True)
    p.add_argument("--origin", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.add_argument("--out", required=True)
    _add_grid(p)
    _add_common(p)
    p.set_defaults(func=_cmd_raycast)

    p = sub.add_parser("eval-iou", help="IoU of a prediction grid vs a label")
    p.add_argument("--pred", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--close-fraction", type=float, default=0.5,
                   dest="close_fraction")
    _add_common(p)
    p.set_defaults(func=_cmd_eval_iou)

    p = sub.add_parser("loss-check",
                       help="loss values + gradient checks on tensor files")
    p.add_argument("--pred", required=True)
    p.add_argument("--target")
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--projections", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_loss_check)

    p = sub.add_parser("verify", help="run oracle-equivalence suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES),
                   help="suite to run (repeatable; default: all)")
    _add_common(p)
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except (SceneIOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
