"""Command line front end.

One tool, nine subcommands: phantom, project-ip, project-topk, fbp,
optimize, segment, metrics, estimate, pipeline. Each accepts plain flags;
pipeline additionally reads a JSON config whose fields individual flags
override. Exit codes: 0 success, 1 usage error, 2 I/O or format error,
3 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from .estimator import parse_estimator_spec, run_estimator_from_files
from .geometry import MemoryBudgetError, ProjectionGeometry, make_geometry
from .metrics import cl_dice, psnr, segmentation_metrics, ssim
from .phantom import PhantomConfig, generate_ct_like, generate_vessel_tree
from .postprocess import (
    SegmentationConfig,
    connected_components,
    export_component_table,
    percentile_threshold,
    remove_small_components,
)
from .projection import (
    StackFormatError,
    TopKStack,
    export_image,
    integral_projection,
    load_stack,
    save_stack,
    topk_mip,
)
from .reconstruction import (
    DivergenceError,
    FbpConfig,
    OptimizerConfig,
    _min_max_scaled,
    fbp,
    suppress_artifacts,
)
from .volume import Volume, VolumeFormatError, load_volume, save_volume

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems by default; this tool reserves 2
    # for I/O errors, so remap.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_geometry_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--views", type=int, default=180, help="number of views (default 180)")
    p.add_argument("--angle-start", type=float, default=0.0, help="first angle in degrees")
    p.add_argument("--angle-step", type=float, default=1.0, help="angle increment in degrees")
    p.add_argument("--detector", type=int, nargs=2, metavar=("NU", "NV"), default=None,
                   help="detector pixels (default max(dims) square)")
    p.add_argument("--detector-spacing", type=float, nargs=2, metavar=("DU", "DV"),
                   default=(1.0, 1.0), help="detector pixel pitch in mm")


def _geometry_from_args(args, dims) -> ProjectionGeometry:
    return make_geometry(
        dims=dims,
        n_views=args.views,
        angle_start_deg=args.angle_start,
        angle_step_deg=args.angle_step,
        detector=tuple(args.detector) if args.detector else None,
        detector_spacing=tuple(args.detector_spacing),
    )


def _workers_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="worker threads for per-view parallel stages")


def _pct(x: float) -> float:
    return round(100.0 * x, 2)


def config_hash(config: dict) -> str:
    """sha256 over the canonical JSON form of a config dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------- cmds

def cmd_phantom(args) -> int:
    cfg = PhantomConfig(
        dims=tuple(args.dims), seed=args.seed, depth=args.depth,
        root_radius=args.root_radius, radius_decay=args.radius_decay,
        root_length=args.root_length, length_decay=args.length_decay,
        branch_angle_deg=tuple(args.branch_angle),
        background=args.background, vessel=args.vessel, noise_sigma=args.noise_sigma,
    )
    tree, graph = generate_vessel_tree(cfg)
    ct = generate_ct_like(tree, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    tree_path = os.path.join(args.out_dir, "tree.vol")
    ct_path = os.path.join(args.out_dir, "ct.vol")
    graph_path = os.path.join(args.out_dir, "centerline.json")
    save_volume(tree, tree_path)
    save_volume(ct, ct_path)
    graph.save(graph_path)
    print(json.dumps({
        "tree": tree_path, "ct": ct_path, "centerline": graph_path,
        "vessel_voxels": int(tree.data.sum()),
        "vessel_fraction": float(tree.data.sum() / tree.data.size),
        "clipped": graph.clipped,
    }))
    return 0


def cmd_project_ip(args) -> int:
    volume = load_volume(args.volume)
    geom = _geometry_from_args(args, volume.dims)
    t0 = time.perf_counter()
    stack = integral_projection(volume, geom, workers=args.workers)
    dt = time.perf_counter() - t0
    save_stack(stack, args.out)
    print(json.dumps({
        "out": args.out, "n_views": geom.n_views, "seconds": round(dt, 3),
        "views_per_sec": round(geom.n_views / dt, 1),
        "rays_per_sec": round(geom.n_rays / dt, 1),
    }))
    return 0


def cmd_project_topk(args) -> int:
    volume = load_volume(args.volume)
    if args.normalize:
        volume = _min_max_scaled(volume)
    geom = _geometry_from_args(args, volume.dims)
    t0 = time.perf_counter()
    stack = topk_mip(volume, geom, k=args.k, workers=args.workers)
    dt = time.perf_counter() - t0
    save_stack(stack, args.out)
    print(json.dumps({
        "out": args.out, "k": args.k, "n_views": geom.n_views, "seconds": round(dt, 3),
        "views_per_sec": round(geom.n_views / dt, 1),
        "rays_per_sec": round(geom.n_rays / dt, 1),
    }))
    return 0


def cmd_fbp(args) -> int:
    stack = load_stack(args.stack)
    if isinstance(stack, TopKStack):
        raise ValueError("fbp expects an integral projection stack, not top-k")
    cfg = FbpConfig(filter_name=args.filter, cutoff=args.cutoff)
    volume = fbp(stack, tuple(args.dims), tuple(args.spacing), cfg, workers=args.workers)
    save_volume(volume, args.out)
    print(json.dumps({"out": args.out, "filter": args.filter, "cutoff": args.cutoff}))
    return 0


def cmd_optimize(args) -> int:
    stack = load_stack(args.stack)
    if isinstance(stack, TopKStack):
        raise ValueError("optimize expects an integral projection stack, not top-k")
    init = load_volume(args.init)
    if args.scale_init:
        init = _min_max_scaled(init)
    cfg = OptimizerConfig(
        n_iterations=args.iterations,
        step_size=args.step_size,
        power_iterations=args.power_iterations,
    )
    volume, trace = suppress_artifacts(stack, init, cfg, workers=args.workers)
    save_volume(volume, args.out)
    if args.trace:
        trace.to_csv(args.trace)
    print(json.dumps({
        "out": args.out,
        "initial_residual": trace.residuals[0],
        "final_residual": trace.residuals[-1],
        "iterations": args.iterations,
        "step_size": trace.step_sizes[-1] if len(trace.step_sizes) > 1 else 0.0,
    }))
    return 0


def cmd_segment(args) -> int:
    volume = load_volume(args.volume)
    cfg = SegmentationConfig(
        percentile=args.percentile,
        connectivity=args.connectivity,
        min_component_size=args.min_size,
        keep_largest=args.keep_largest,
    )
    mask = percentile_threshold(volume, cfg.percentile)
    mask = remove_small_components(mask, cfg)
    save_volume(mask, args.out)
    if args.components:
        labels, sizes = connected_components(mask, cfg.connectivity)
        export_component_table(labels, sizes, args.components)
    print(json.dumps({
        "out": args.out,
        "foreground_voxels": int(mask.data.sum()),
        "percentile": cfg.percentile,
    }))
    return 0


def cmd_metrics(args) -> int:
    pred = load_volume(args.pred)
    gt = load_volume(args.gt)
    report = segmentation_metrics(pred, gt)
    if args.cldice:
        report.cldice = cl_dice(pred, gt)
    out = {
        "dsc": _pct(report.dsc),
        "cldice": _pct(report.cldice) if report.cldice is not None else None,
        "iou": _pct(report.iou),
        "sen": _pct(report.sensitivity),
        "spe": _pct(report.specificity),
    }
    if args.stack_a and args.stack_b:
        a = load_stack(args.stack_a)
        b = load_stack(args.stack_b)
        out["psnr"] = round(psnr(a.data, b.data), 2)
        out["ssim"] = round(ssim(a.data, b.data), 2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    print(json.dumps(out))
    return 0


def cmd_estimate(args) -> int:
    run_estimator_from_files(args.cond, args.estimator, args.out)
    print(json.dumps({"out": args.out, "estimator": args.estimator}))
    return 0


# ------------------------------------------------------------------ pipeline

_PIPELINE_DEFAULTS = {
    "seed": 0,
    "k": 32,
    "estimator": "oracle",
    "init_mode": "ct",
    "scale_init": True,
    "normalize_condition": True,
    "geometry": {},
    "phantom": None,
    "fbp": {},
    "optimizer": {},
    "segmentation": {},
}

# Keys that do not change the computed numbers and stay out of the config hash.
_NON_SEMANTIC_KEYS = ("paths", "workers")


def _resolve_pipeline_config(args) -> dict:
    cfg = dict(_PIPELINE_DEFAULTS)
    cfg["paths"] = {}
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        for key, value in loaded.items():
            if key not in cfg and key not in ("paths", "workers"):
                raise ValueError(f"unknown pipeline config key {key!r}")
            cfg[key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.k is not None:
        cfg["k"] = args.k
    if args.estimator is not None:
        cfg["estimator"] = args.estimator
    if args.out_dir is not None:
        cfg.setdefault("paths", {})["out_dir"] = args.out_dir
    cfg["workers"] = args.workers
    if "out_dir" not in cfg.get("paths", {}):
        raise ValueError("pipeline needs an output directory (config paths.out_dir or --out-dir)")
    return cfg


def cmd_pipeline(args) -> int:
    cfg = _resolve_pipeline_config(args)
    out_dir = cfg["paths"]["out_dir"]
    workers = cfg["workers"]
    os.makedirs(out_dir, exist_ok=True)

    semantic = {k: v for k, v in cfg.items() if k not in _NON_SEMANTIC_KEYS}
    digest = config_hash(semantic)
    stages: list[dict] = []
    inputs: dict = {}

    def run_stage(name, fn, **counters):
        t0 = time.perf_counter()
        result = fn()
        dt = time.perf_counter() - t0
        entry = {"name": name, "seconds": round(dt, 4)}
        for key, value in counters.items():
            entry[key] = value(dt) if callable(value) else value
        stages.append(entry)
        return result

    # Inputs: load, or synthesize from the phantom section when missing.
    ct_path = cfg["paths"].get("ct")
    gt_path = cfg["paths"].get("vessel_gt")
    if cfg["phantom"] is not None and (ct_path is None or not os.path.exists(ct_path)):
        ph = PhantomConfig(**{**cfg["phantom"], "seed": cfg["phantom"].get("seed", cfg["seed"])})

        def make_inputs():
            tree, graph = generate_vessel_tree(ph)
            ct = generate_ct_like(tree, ph)
            graph.save(os.path.join(out_dir, "centerline.json"))
            return tree, ct

        tree, ct = run_stage("phantom", make_inputs)
        ct_path = os.path.join(out_dir, "ct.vol")
        gt_path = os.path.join(out_dir, "tree.vol")
        save_volume(ct, ct_path)
        save_volume(tree, gt_path)
    else:
        if ct_path is None:
            raise ValueError("pipeline needs paths.ct or a phantom section")
        ct = load_volume(ct_path)
        tree = load_volume(gt_path) if gt_path and os.path.exists(gt_path) else None
    inputs["ct"] = {"path": ct_path, "sha256": _file_sha256(ct_path)}
    if gt_path and os.path.exists(gt_path):
        inputs["vessel_gt"] = {"path": gt_path, "sha256": _file_sha256(gt_path)}

    geom = make_geometry(dims=ct.dims, **{
        k: v for k, v in cfg["geometry"].items()
        if k in ("n_views", "angle_start_deg", "angle_step_deg", "detector", "detector_spacing")
    })
    n_rays = geom.n_rays

    gt_ip = None
    if tree is not None:
        gt_ip = run_stage(
            "project-gt", lambda: integral_projection(tree, geom, workers=workers),
            views_per_sec=lambda dt: round(geom.n_views / max(dt, 1e-9), 1),
        )
        save_stack(gt_ip, os.path.join(out_dir, "gt_ip.stack"))

    cond_src = _min_max_scaled(ct) if cfg["normalize_condition"] else ct
    cond = run_stage(
        "project-topk", lambda: topk_mip(cond_src, geom, k=cfg["k"], workers=workers),
        rays_per_sec=lambda dt: round(n_rays / max(dt, 1e-9), 1),
    )
    save_stack(cond, os.path.join(out_dir, "condition.stack"))

    est, extras = parse_estimator_spec(cfg["estimator"])
    ctx = gt_ip
    if "gt" in extras:
        ctx = load_stack(extras["gt"])
    if est.requires_ground_truth and ctx is None:
        raise ValueError(f"estimator {est.name!r} needs ground truth but none is available")
    xhat = run_stage("estimate", lambda: est.estimate(cond, ctx))
    save_stack(xhat, os.path.join(out_dir, "xhat.stack"))

    if cfg["init_mode"] == "ct":
        init = _min_max_scaled(ct) if cfg["scale_init"] else ct
    elif cfg["init_mode"] == "fbp":
        init = fbp(xhat, ct.dims, ct.spacing, FbpConfig(**cfg["fbp"]), workers=workers)
    else:
        raise ValueError(f"init_mode must be 'ct' or 'fbp', got {cfg['init_mode']!r}")

    opt_cfg = OptimizerConfig(**cfg["optimizer"])
    optimized, trace = run_stage(
        "optimize", lambda: suppress_artifacts(xhat, init, opt_cfg, workers=workers),
    )
    save_volume(optimized, os.path.join(out_dir, "optimized.vol"))
    trace.to_csv(os.path.join(out_dir, "trace.csv"))

    seg_cfg = SegmentationConfig(**cfg["segmentation"])
    pred = run_stage("segment", lambda: remove_small_components(
        percentile_threshold(optimized, seg_cfg.percentile), seg_cfg))
    save_volume(pred, os.path.join(out_dir, "pred.vol"))
    labels, sizes = connected_components(pred, seg_cfg.connectivity)
    export_component_table(labels, sizes, os.path.join(out_dir, "components.csv"))

    export_image(cond, 0, os.path.join(out_dir, "condition_view0.pgm"))
    export_image(xhat, 0, os.path.join(out_dir, "xhat_view0.pgm"))

    metrics_out: dict = {}
    if tree is not None:
        report = segmentation_metrics(pred, tree)
        report.cldice = cl_dice(pred, tree)
        metrics_out["segmentation"] = {
            "dsc": _pct(report.dsc), "cldice": _pct(report.cldice),
            "iou": _pct(report.iou), "sen": _pct(report.sensitivity),
            "spe": _pct(report.specificity),
        }
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    if gt_ip is not None:
        before = integral_projection(init, geom, workers=workers)
        after = integral_projection(optimized, geom, workers=workers)
        metrics_out["reprojection"] = {
            "before": {"psnr": round(psnr(before.data, gt_ip.data), 2),
                       "ssim": round(ssim(before.data, gt_ip.data), 4)},
            "after": {"psnr": round(psnr(after.data, gt_ip.data), 2),
                      "ssim": round(ssim(after.data, gt_ip.data), 4)},
        }

    manifest = {
        "config": semantic,
        "config_hash": digest,
        "workers": workers,
        "inputs": inputs,
        "stages": stages,
        "metrics": metrics_out,
        "outputs": {
            "optimized": os.path.join(out_dir, "optimized.vol"),
            "pred": os.path.join(out_dir, "pred.vol"),
            "trace": os.path.join(out_dir, "trace.csv"),
            "components": os.path.join(out_dir, "components.csv"),
        },
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    print(json.dumps({"manifest": manifest_path, "config_hash": digest,
                      "metrics": metrics_out}))
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vesseltomo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a seeded vessel-tree phantom")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64), metavar=("NX", "NY", "NZ"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--root-radius", type=float, default=8.5)
    p.add_argument("--radius-decay", type=float, default=0.75)
    p.add_argument("--root-length", type=float, default=20.0)
    p.add_argument("--length-decay", type=float, default=0.75)
    p.add_argument("--branch-angle", type=float, nargs=2, default=(18.0, 32.0),
                   metavar=("LO", "HI"))
    p.add_argument("--background", type=float, default=0.1)
    p.add_argument("--vessel", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project-ip", help="integral projections of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    _add_geometry_flags(p)
    _workers_flag(p)
    p.set_defaults(func=cmd_project_ip)

    p = sub.add_parser("project-topk", help="top-k maximum intensity projections")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--no-normalize", dest="normalize", action="store_false",
                   help="project raw values instead of min-max normalized")
    _add_geometry_flags(p)
    _workers_flag(p)
    p.set_defaults(func=cmd_project_topk)

    p = sub.add_parser("fbp", help="filtered back projection of a stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0),
                   metavar=("SX", "SY", "SZ"))
    p.add_argument("--filter", choices=("ram-lak", "hann"), default="ram-lak")
    p.add_argument("--cutoff", type=float, default=1.0)
    _workers_flag(p)
    p.set_defaults(func=cmd_fbp)

    p = sub.add_parser("optimize", help="Landweber artifact suppression")
    p.add_argument("--stack", required=True, help="target projection stack")
    p.add_argument("--init", required=True, help="initialization volume")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--power-iterations", type=int, default=20)
    p.add_argument("--scale-init", action="store_true",
                   help="min-max scale the init volume to [0, 1] first")
    p.add_argument("--trace", default=None, help="write residual trace CSV here")
    _workers_flag(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("segment", help="threshold and clean a volume into a mask")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    p.add_argument("--min-size", type=int, default=None)
    p.add_argument("--keep-largest", type=int, default=None)
    p.add_argument("--components", default=None, help="write component table CSV here")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("metrics", help="compare a predicted mask against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--no-cldice", dest="cldice", action="store_false")
    p.add_argument("--stack-a", default=None, help="stack to score with PSNR/SSIM")
    p.add_argument("--stack-b", default=None, help="reference stack for PSNR/SSIM")
    p.add_argument("--out", default=None, help="write the full-precision report JSON here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("estimate", help="run a projection estimator on a condition stack")
    p.add_argument("--cond", required=True)
    p.add_argument("--estimator", required=True,
                   help="spec string, e.g. oracle:gt=gt.stack or topk-sum:alpha=0.5")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("pipeline", help="run the full phantom-to-metrics pipeline")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--estimator", default=None)
    _workers_flag(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VolumeFormatError, StackFormatError, FileNotFoundError,
            json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, MemoryBudgetError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
