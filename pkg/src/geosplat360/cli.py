"""Command-line front end: synth, sweep, fit, render and eval subcommands.

Exit codes: 0 success, 2 usage or invalid input, 3 I/O error, 4 the fit
diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from ._validation import DivergenceError, DomainError
from .camera import read_poses, write_poses
from .costvol import PlaneSweepDepth, write_cost_volume
from .gaussians import read_gaussians, write_gaussians
from .losses import LossWeights, append_report
from .metrics import cloud_metrics, depth_metrics, format_table, psnr, ssim
from .optimizer import FitConfig, fit, init_from_depth, perturb_scene
from .panorama import PanoramaBuffer, ensure_dir, read_image, read_pfm, write_pfm, write_png
from .render import RenderOptions, render
from .synth import PRESETS, load_room, render_gt, sample_surface

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("geosplat360")


class UsageError(Exception):
    pass


# --- file helpers -------------------------------------------------------

def write_cloud(path, points, normals=None):
    """Plain-text point cloud, one ``x y z [nx ny nz]`` row per point."""
    data = points if normals is None else np.hstack([points, normals])
    np.savetxt(path, data, fmt="%.9g")


def read_cloud(path):
    """Points from a ``.xyz`` text cloud or the centers of a Gaussian set file."""
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head.startswith(b"geosplat360"):
        return read_gaussians(path).means
    try:
        data = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DomainError(f"{path}: unreadable point cloud ({exc})") from None
    if data.shape[1] < 3:
        raise DomainError(f"{path}: a point cloud needs at least 3 columns")
    return data[:, :3]


def _read_plane(path):
    if path.lower().endswith(".pfm"):
        return read_pfm(path)
    return read_image(path)


def _load_room(source):
    if source in PRESETS:
        return PRESETS[source]()
    return load_room(source)


def _cameras(args, count):
    cams = read_poses(args.poses)
    if len(cams) < count:
        raise DomainError(f"{args.poses}: {count} views need {count} poses, found {len(cams)}")
    return cams[:count]


def _set_threads(n):
    if not n:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# --- subcommands --------------------------------------------------------

def cmd_synth(args):
    room = _load_room(args.config)
    if args.width or args.height:
        if not (args.width and args.height):
            raise UsageError("--width and --height go together")
        room = room.with_resolution(args.width, args.height)
    ensure_dir(args.out)
    for i, cam in enumerate(room.cameras):
        gt = render_gt(room, cam, supersample=args.supersample)
        write_png(os.path.join(args.out, f"rgb_{i}.png"), gt.rgb)
        write_pfm(os.path.join(args.out, f"depth_{i}.pfm"), gt.depth)
        write_pfm(os.path.join(args.out, f"normal_{i}.pfm"), gt.normal)
    write_poses(os.path.join(args.out, "poses.txt"), room.cameras)
    pts, nrm = sample_surface(room, args.density, seed=args.seed)
    write_cloud(os.path.join(args.out, "cloud.xyz"), pts, nrm)
    print(f"wrote {len(room.cameras)} views and {len(pts)} surface points to {args.out}")


def cmd_sweep(args):
    if len(args.views) < 2:
        raise UsageError("sweep needs a reference view and at least one source view")
    cams = _cameras(args, len(args.views))
    images = [read_image(p) for p in args.views]
    ref = args.ref
    if not 0 <= ref < len(images):
        raise UsageError(f"--ref {ref} is out of range")
    sources = [(c, im) for i, (c, im) in enumerate(zip(cams, images)) if i != ref]
    est = PlaneSweepDepth(n_hypotheses=args.K, near=args.near, far=args.far,
                          temperature=args.tau, window=args.window)
    prior = est.fit((cams[ref], images[ref]), sources).transform()
    ensure_dir(args.out)
    write_pfm(os.path.join(args.out, "prior_depth.pfm"), prior.depth)
    write_pfm(os.path.join(args.out, "prior_confidence.pfm"), prior.confidence)
    if args.save_volume:
        write_cost_volume(os.path.join(args.out, "cost_volume.bin"), est.cost_volume_)
    print(f"depth prior {prior.depth.shape[1]}x{prior.depth.shape[0]}, "
          f"mean confidence {prior.confidence.mean():.4f}")


def _targets(args, cams):
    targets = []
    for i, path in enumerate(args.targets):
        rgb = read_image(path)
        depth = read_pfm(args.depths[i]) if args.depths else None
        normal = read_pfm(args.normals[i]) if args.normals else None
        targets.append(PanoramaBuffer(rgb=rgb, depth=depth, normal=normal))
    return targets


def _initial_scene(args, cams, targets):
    path = args.init
    with open(path, "rb") as fh:
        is_set = fh.read(11) == b"geosplat360"
    if is_set:
        return read_gaussians(path)
    depth = read_pfm(path)
    conf = read_pfm(args.confidence) if args.confidence else None
    prior = PanoramaBuffer(rgb=targets[0].rgb, depth=depth, confidence=conf)
    scene = init_from_depth(cams[0], prior, stride=args.stride, flatness=args.flatness,
                            polar_merge=not args.no_polar_merge)
    if args.perturb > 0 or args.randomize_normals:
        scene = perturb_scene(scene, args.perturb, args.randomize_normals, seed=args.seed)
    return scene


def _run_fit(args, init, cams, targets, lambda3, out_dir):
    weights = LossWeights(args.lambda1, args.lambda2, lambda3)
    cfg = FitConfig(iterations=args.iters, weights=weights, seed=args.seed,
                    render=RenderOptions(mode=args.mode), views_per_step=args.views_per_step)
    try:
        result = fit(init, cams, targets, cfg)
    except DivergenceError as exc:
        # keep the partial trace for diagnosis before reporting
        ensure_dir(out_dir)
        _write_trace(os.path.join(out_dir, "trace.jsonl"), exc.trace or [])
        raise
    ensure_dir(out_dir)
    write_gaussians(os.path.join(out_dir, "gaussians.gs"), result.scene)
    _write_trace(os.path.join(out_dir, "trace.jsonl"), result.trace)
    summary = {"initial_total": result.trace[0].total, "final_total": result.trace[-1].total,
               "lambda3": lambda3}
    if args.gt_cloud:
        summary.update(cloud_metrics(result.scene.means, read_cloud(args.gt_cloud)))
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def _write_trace(path, trace):
    if os.path.exists(path):
        os.remove(path)
    with open(path, "w", encoding="utf-8"):
        pass
    for report in trace:
        append_report(path, report)


def cmd_fit(args):
    if args.depths and len(args.depths) != len(args.targets):
        raise UsageError("--depths needs one file per target")
    if args.normals and len(args.normals) != len(args.targets):
        raise UsageError("--normals needs one file per target")
    cams = _cameras(args, len(args.targets))
    targets = _targets(args, cams)
    init = _initial_scene(args, cams, targets)
    runs = {"run": args.lambda3}
    if args.ablate:
        runs = {"full": args.lambda3, "no_dn": 0.0}
    results = {}
    for name, lam3 in runs.items():
        out = args.out if len(runs) == 1 else os.path.join(args.out, name)
        results[name] = _run_fit(args, init, cams, targets, lam3, out)
    if len(runs) > 1:
        with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    for name, summary in results.items():
        print(f"[{name}] loss {summary['initial_total']:.6g} -> {summary['final_total']:.6g}")
        if "chamfer_m" in summary:
            print(format_table({k: summary[k] for k in ("accuracy_m", "completeness_m", "chamfer_m")}))


def cmd_render(args):
    scene = read_gaussians(args.gaussians)
    cams = read_poses(args.poses)
    if not 0 <= args.index < len(cams):
        raise UsageError(f"--index {args.index} is out of range for {len(cams)} poses")
    cam = cams[args.index]
    if args.width or args.height:
        if not (args.width and args.height):
            raise UsageError("--width and --height go together")
        cam = cam.with_size(args.width, args.height)
    buf = render(cam, scene, RenderOptions(mode=args.mode, literal_depth=args.literal_depth))
    ensure_dir(args.out)
    write_png(os.path.join(args.out, "rgb.png"), np.clip(buf.rgb, 0.0, 1.0))
    write_pfm(os.path.join(args.out, "depth.pfm"), buf.depth)
    write_pfm(os.path.join(args.out, "normal.pfm"), buf.normal)
    print(f"rendered {cam.width}x{cam.height} view {args.index} to {args.out}")


def _band_mask(shape, band):
    H = shape[0]
    lat = 90.0 - 180.0 * (np.arange(H) + 0.5) / H
    return np.broadcast_to((np.abs(lat) <= band)[:, None], shape[:2]).copy()


def cmd_eval(args):
    if args.mode == "cloud":
        metrics = cloud_metrics(read_cloud(args.pred), read_cloud(args.gt))
    else:
        pred, gt = _read_plane(args.pred), _read_plane(args.gt)
        if pred.shape != gt.shape:
            raise DomainError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
        if args.mode == "image":
            metrics = {"psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt)}
        else:
            mask = _band_mask(gt.shape, args.band) if args.band is not None else None
            metrics = depth_metrics(pred, gt, mask)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(metrics, fh, indent=2)
    if args.json:
        print(json.dumps(metrics))
    else:
        print(format_table(metrics))


# --- parser -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="geosplat360", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
        sp.add_argument("--threads", type=int, default=0,
                        help="worker threads for the kernels, 0 = all available (default 0)")

    s = sub.add_parser("synth", help="render ground-truth panoramas of a synthetic room")
    s.add_argument("config", help="room config (JSON) or a preset name such as roomA")
    s.add_argument("out", help="output directory")
    s.add_argument("--width", type=int, default=0, help="panorama width in pixels (default: from config)")
    s.add_argument("--height", type=int, default=0, help="panorama height in pixels (default: from config)")
    s.add_argument("--density", type=float, default=100.0,
                   help="surface samples per square meter for the gt cloud (default 100)")
    s.add_argument("--supersample", type=int, default=2,
                   help="rgb supersampling factor per axis (default 2)")
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sweep", help="plane-sweep depth prior from posed panoramas")
    s.add_argument("--views", nargs="+", required=True, help="panorama images, reference first")
    s.add_argument("--poses", required=True, help="pose file, one line per view")
    s.add_argument("--ref", type=int, default=0, help="index of the reference view (default 0)")
    s.add_argument("--near", type=float, default=0.3, help="nearest hypothesis in meters (default 0.3)")
    s.add_argument("--far", type=float, default=20.0, help="farthest hypothesis in meters (default 20)")
    s.add_argument("--K", type=int, default=64, help="number of depth hypotheses (default 64)")
    s.add_argument("--tau", type=float, default=1.0,
                   help="softmax temperature in squared 8-bit intensity units (default 1.0)")
    s.add_argument("--window", type=int, default=7,
                   help="cost aggregation window side in pixels, odd (default 7)")
    s.add_argument("--save-volume", action="store_true", help="also write cost_volume.bin")
    s.add_argument("--out", required=True, help="output directory")
    common(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("fit", help="fit Gaussians to posed target panoramas")
    s.add_argument("--init", required=True,
                   help="depth prior PFM (meters, first pose) or a Gaussian set file")
    s.add_argument("--confidence", help="confidence PFM in [0, 1] used as initial opacity")
    s.add_argument("--targets", nargs="+", required=True, help="target rgb panoramas")
    s.add_argument("--depths", nargs="+", help="target depth PFMs in meters, one per target")
    s.add_argument("--normals", nargs="+", help="target normal PFMs, one per target")
    s.add_argument("--poses", required=True, help="pose file, one line per target")
    s.add_argument("--lambda1", type=float, default=1.0, help="scale-flattening weight (default 1)")
    s.add_argument("--lambda2", type=float, default=0.1, help="depth weight (default 0.1)")
    s.add_argument("--lambda3", type=float, default=0.01, help="depth-normal weight (default 0.01)")
    s.add_argument("--iters", type=int, default=500, help="optimizer iterations (default 500)")
    s.add_argument("--views-per-step", type=int, default=0,
                   help="target views rendered per optimizer step, cycling in shuffled order; 0 = all "
                        "(default 0)")
    s.add_argument("--stride", type=int, default=3,
                   help="pixels per init block side when starting from a depth prior (default 3)")
    s.add_argument("--flatness", type=float, default=0.1,
                   help="initial thin-axis scale as a fraction of the tangential scale (default 0.1)")
    s.add_argument("--no-polar-merge", action="store_true",
                   help="keep one Gaussian per block even near the poles")
    s.add_argument("--perturb", type=float, default=0.0,
                   help="std of the center jitter applied to the init, in meters (default 0)")
    s.add_argument("--randomize-normals", action="store_true", help="draw random initial orientations")
    s.add_argument("--mode", choices=("tiled", "reference"), default="tiled", help="renderer mode")
    s.add_argument("--gt-cloud", help="ground-truth cloud; adds accuracy/completeness/chamfer in meters")
    s.add_argument("--ablate", action="store_true",
                   help="also fit with lambda3 = 0 and write both runs' metrics")
    s.add_argument("--out", required=True, help="output directory")
    common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render a Gaussian set from a pose")
    s.add_argument("gaussians", help="Gaussian set file")
    s.add_argument("--poses", required=True, help="pose file")
    s.add_argument("--index", type=int, default=0, help="pose line to render (default 0)")
    s.add_argument("--width", type=int, default=0, help="override width in pixels")
    s.add_argument("--height", type=int, default=0, help="override height in pixels")
    s.add_argument("--mode", choices=("tiled", "reference"), default="tiled", help="renderer mode")
    s.add_argument("--literal-depth", action="store_true",
                   help="report the z-coordinate of each hit instead of the ray distance (meters)")
    s.add_argument("--out", required=True, help="output directory")
    common(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="compare predictions with ground truth")
    s.add_argument("pred", help="prediction (PNG/PFM image, or cloud file)")
    s.add_argument("gt", help="ground truth of the same kind")
    s.add_argument("--mode", choices=("image", "depth", "cloud"), required=True, help="metric family")
    s.add_argument("--band", type=float, default=None,
                   help="depth mode: only rows within this latitude in degrees")
    s.add_argument("--json", action="store_true", help="print JSON instead of a table")
    s.add_argument("--out", help="also write the metrics JSON here")
    common(s)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        name = exc.filename or ""
        print(f"error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
