"""Batch command line: ``relightkit <command> ...``.

Failures exit with status 1 (2 for usage errors) after printing one JSON line
``{"error": <kind>, "message": ..., "field": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .envmap import ASSET_FORMAT_VERSION, cached_env_assets, check_envmap, default_levels
from .evaluation import evaluate_relight, leave_one_out_folds, write_reports_csv, write_reports_json
from .hdr_merge import ExposureFrame, merge_exposures
from .imaging import read_exr, read_mask, write_exr, write_mask
from .inverse import (
    DiffusionSchedule,
    GaussianPriorDenoiser,
    GuidanceConfig,
    ReferenceDecoder,
    dps_sample,
    optimize_gbuffer,
)
from .manifest import ManifestError, SceneManifest, load_manifest
from .renderer import GBuffer, directional_view, pinhole_view, read_gbuffer, render_forward, write_gbuffer
from .sync import (
    CaptureRecord,
    histogram_svg,
    sync_stats,
    write_histogram_csv,
    write_summary_csv,
    write_sync_csv,
)

log = logging.getLogger("relightkit")

CACHE_ENV = "RELIGHTKIT_CACHE_DIR"


class UsageError(Exception):
    pass


def cache_dir(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "relightkit"


def _map(fn, items, jobs: int):
    """Apply ``fn`` in order; with ``jobs > 1`` run concurrently but keep input order."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _view_from_args(args, shape) -> np.ndarray:
    if args.focal is not None:
        principal = tuple(args.principal) if args.principal else None
        return pinhole_view(shape, args.focal, principal)
    return directional_view(shape, tuple(args.view))


def _view_from_manifest(m: SceneManifest, shape) -> np.ndarray:
    if m.camera.kind == "pinhole":
        return pinhole_view(shape, m.camera.focal, m.camera.principal)
    return directional_view(shape, m.camera.view)


def _load_stack(capture) -> list[ExposureFrame]:
    frames = []
    for e in capture.exposures:
        z = read_exr(e.path)
        if z.max() > 1.0:
            raise ValueError(f"{e.path}: exposure frames must be normalized to [0, 1]")
        frames.append(ExposureFrame(z, e.exposure))
    return frames


# --------------------------------------------------------------------------
# commands


def cmd_merge(args) -> int:
    m = load_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stacks = [c for c in m.captures if c.exposures]
    if not stacks:
        raise UsageError("manifest has no captures with exposure stacks")

    def run(c):
        res = merge_exposures(_load_stack(c))
        write_exr(out / f"{c.lighting}.exr", res.radiance)
        write_mask(out / f"{c.lighting}_saturated.png", res.saturated)
        return c.lighting, int(res.saturated.sum())

    for lighting, nsat in _map(run, stacks, args.jobs):
        print(f"{lighting}\t{out / (lighting + '.exr')}\tsaturated_pixels={nsat}")
    return 0


def cmd_build_env(args) -> int:
    env = check_envmap(read_exr(args.envmap))
    levels = args.levels or default_levels(env.shape[0])
    assets = cached_env_assets(env, cache_dir(args.cache_dir), levels)
    info = {
        "source_hash": assets.source_hash,
        "format_version": ASSET_FORMAT_VERSION,
        "levels": levels,
        "cache_dir": str(cache_dir(args.cache_dir)),
    }
    print(json.dumps(info, sort_keys=True))
    return 0


def _assets(path, args):
    env = check_envmap(read_exr(path))
    return cached_env_assets(env, cache_dir(args.cache_dir), args.levels or default_levels(env.shape[0]))


def cmd_render(args) -> int:
    g = read_gbuffer(args.gbuffer)
    assets = _assets(args.envmap, args)
    image = render_forward(g, assets, _view_from_args(args, g.shape))
    write_exr(args.output, image)
    return 0


def _random_gbuffer(shape, view, rng) -> GBuffer:
    h, w = shape
    n = rng.normal(size=(h, w, 3)) * 0.3 + view
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return GBuffer(rng.uniform(size=(h, w, 3)), n, rng.uniform(0.1, 1.0, (h, w)), rng.uniform(size=(h, w)))


def cmd_invert(args) -> int:
    observed = read_exr(args.image)
    shape = observed.shape[:2]
    assets = _assets(args.envmap, args)
    view = _view_from_args(args, shape)
    mask = read_mask(args.mask) if args.mask else None
    out = Path(args.output)
    if args.mode == "descent":
        init = _random_gbuffer(shape, view, np.random.default_rng(args.seed))
        res = optimize_gbuffer(init, assets, view, observed, args.iters, args.step, mask, seed=args.seed)
        write_gbuffer(out, res.gbuffer)
        print(json.dumps({"mode": "descent", "initial_loss": res.initial_loss, "loss": res.loss}))
        return 0
    schedule = DiffusionSchedule(K=args.steps)
    cfg = GuidanceConfig(zeta=args.zeta, clip=args.clip, seed=args.seed)
    res = dps_sample(GaussianPriorDenoiser(schedule), ReferenceDecoder(), assets, view, observed, cfg, schedule, mask)
    write_gbuffer(out, res.gbuffer)
    res.write_csv(out / "trajectory.csv")
    print(json.dumps({"mode": "dps", "final_loss": res.final_loss, "schedule": res.schedule}))
    return 0


def cmd_eval(args) -> int:
    if args.manifest:
        if not args.pred_dir:
            raise UsageError("--manifest requires --pred-dir")
        m = load_manifest(args.manifest)
        pred_dir = Path(args.pred_dir)

        def run(c):
            if c.image is None:
                raise UsageError(f"capture {c.lighting!r} has no merged 'image' to use as ground truth")
            mask = read_mask(c.mask) if c.mask else None
            return evaluate_relight(
                read_exr(pred_dir / f"{c.lighting}.exr"), read_exr(c.image), mask, scene=m.scene, lighting=c.lighting
            )

        reports = _map(run, m.captures, args.jobs)
    else:
        if not (args.pred and args.gt):
            raise UsageError("eval needs --pred and --gt, or --manifest and --pred-dir")
        mask = read_mask(args.mask) if args.mask else None
        reports = [
            evaluate_relight(read_exr(args.pred), read_exr(args.gt), mask, scene=args.scene, lighting=args.lighting)
        ]
    if args.csv:
        write_reports_csv(reports, args.csv)
    if args.json:
        write_reports_json(reports, args.json)
    for r in sorted(reports, key=lambda r: (r.scene, r.lighting)):
        print(f"{r.scene}\t{r.lighting}\talpha={r.alpha:.6g}\tpsnr={r.psnr:.4f}\tssim={r.ssim:.6f}\tvalid={r.valid_pixels}")
    return 0


def cmd_folds(args) -> int:
    m = load_manifest(args.manifest)
    folds = leave_one_out_folds(m.lighting_ids)
    doc = {"scene": m.scene, "folds": [{"held_out": f.held_out, "support": list(f.support)} for f in folds]}
    text = json.dumps(doc, indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return 0


def cmd_validate_sync(args) -> int:
    records = []
    for path in args.manifests:
        m = load_manifest(path)
        records += [CaptureRecord(m.scene, c.lighting, c.scene_timestamp, c.envmap_timestamp) for c in m.captures]
    report = sync_stats(records, envmap_width=args.width, threshold_deg=args.threshold)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sync_csv(report, out / "sync_records.csv")
        write_summary_csv(report, out / "sync_summary.csv")
        write_histogram_csv(report, out / "sync_histogram.csv")
        (out / "sync_histogram.svg").write_text(histogram_svg(report))
    print(f"median_dt_s={report.median:.2f}")
    print(f"mean_dt_s={report.mean:.2f}")
    print(f"max_dt_s={report.max:.2f}")
    print(f"flagged={len(report.flagged)}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_view_args(p):
    p.add_argument("--view", type=float, nargs=3, default=(0.0, 0.0, 1.0), help="shared view direction")
    p.add_argument("--focal", type=float, help="pinhole focal length in pixels (per-pixel view rays)")
    p.add_argument("--principal", type=float, nargs=2, help="pinhole principal point (default: image centre)")


def _add_env_args(p):
    p.add_argument("--levels", type=int, help="prefiltered mip levels (default: from envmap height)")
    p.add_argument("--cache-dir", help=f"asset cache directory (default: ${CACHE_ENV} or ~/.cache/relightkit)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relightkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge exposure stacks into HDR EXRs")
    p.add_argument("manifest")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("build-env", help="build and cache lighting assets for an envmap")
    p.add_argument("envmap")
    _add_env_args(p)
    p.set_defaults(func=cmd_build_env)

    p = sub.add_parser("render", help="render a G-buffer under an envmap")
    p.add_argument("--gbuffer", required=True)
    p.add_argument("--envmap", required=True)
    p.add_argument("-o", "--output", required=True)
    _add_view_args(p)
    _add_env_args(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("invert", help="recover a G-buffer from an observed image")
    p.add_argument("--image", required=True)
    p.add_argument("--envmap", required=True)
    p.add_argument("-o", "--output", required=True, help="output G-buffer directory")
    p.add_argument("--mode", choices=("descent", "dps"), default="descent")
    p.add_argument("--mask")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--zeta", type=float, default=1.0)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50, help="DDIM inference steps")
    _add_view_args(p)
    _add_env_args(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", help="scale-aligned masked PSNR/SSIM")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--mask")
    p.add_argument("--scene", default="")
    p.add_argument("--lighting", default="")
    p.add_argument("--manifest")
    p.add_argument("--pred-dir")
    p.add_argument("--csv")
    p.add_argument("--json")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("folds", help="list leave-one-lighting-out folds")
    p.add_argument("manifest")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("validate-sync", help="capture timestamp statistics and solar drift")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--width", type=int, default=256, help="envmap width for pixel shift")
    p.add_argument("--threshold", type=float, default=0.5, help="flag records above this many degrees")
    p.add_argument("-o", "--out-dir")
    p.set_defaults(func=cmd_validate_sync)
    return parser


def _fail(kind: str, message: str, field: str | None = None, status: int = 1) -> int:
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line", status=2)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ManifestError as exc:
        return _fail("manifest", str(exc), exc.field)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))
    except UsageError as exc:
        return _fail("usage", str(exc), status=2)
    except (ValueError, FloatingPointError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
