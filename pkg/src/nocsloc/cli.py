"""``nocsloc`` command line: synth, fit, render, localize.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import store
from .fit import FitConfig, FitDivergedError, fit, new_models
from .fusion import FusionInput, scale_fuse
from .geometry import Box3D, CameraIntrinsics, pixel_to_normalized
from .losses import FOREGROUND
from .metrics import METRIC_FIELDS, MetricReport
from .pnp import Correspondences, PnPError, PnPSettings, jacobian_map, make_problem, solve
from .render import RenderConfig, render_object
from .synth import NoiseSpec, SceneError, SceneSpec, corrupt_nocs, generate, object_crop

logger = logging.getLogger("nocsloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _ordered_map(fn: Callable, items: Sequence, threads: int) -> List:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    raw = store.read_json(args.spec)
    if args.seed is not None and isinstance(raw, dict):
        raw["seed"] = args.seed
    spec = SceneSpec.from_dict(raw)
    if args.march_samples is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "march_samples": args.march_samples})
    per_object = _ordered_map(lambda i: generate(spec, only=[i]), list(range(len(spec.objects))), args.threads)
    objects = [g for chunk in per_object for g in chunk]
    store.write_dataset(args.out, spec, objects)
    logger.info("wrote %d objects to %s (seed %d)", len(objects), args.out, spec.seed)
    return EXIT_OK


# --------------------------------------------------------------------------
# fit


def _fit_config(args) -> FitConfig:
    raw = store.read_json(args.config) if args.config else {}
    overrides = {"iterations": args.iterations, "samples_per_ray": args.samples_per_ray,
                 "seed": args.seed, "threads": args.threads if args.threads > 1 else None}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return FitConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise store.StoreError(f"fit config: {e}") from None


def cmd_fit(args) -> int:
    dataset = store.read_dataset(args.dataset)
    cfg = _fit_config(args)
    report = Path(args.report) if args.report else Path(args.out).with_suffix(".csv")
    for target in (Path(args.out), report):
        target.parent.mkdir(parents=True, exist_ok=True)
    shape, color = new_models(cfg)
    result = fit([g.training for g in dataset.objects], (shape, color), cfg)
    meta = {"seed": cfg.seed, "fit_config": cfg.to_dict(), "objects": [g.index for g in dataset.objects]}
    store.save_checkpoint(args.out, result.shape, result.color, result.coefficients, meta)
    store.write_fit_report(report, result.report)
    logger.info("fit %d objects, %d iterations, final loss %.6g (seed %d, %.1fs)", len(dataset.objects),
                cfg.iterations, result.report.final_loss, cfg.seed, result.report.wall_clock)
    return EXIT_OK


# --------------------------------------------------------------------------
# render


def _render_crop(ckpt: store.Checkpoint, box: Box3D, camera: CameraIntrinsics, width: int, height: int,
                 samples: int, z_shape=None, z_color=None):
    (x0, y0, x1, y1), _ = object_crop(box, camera, width, height, margin=2)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise store.StoreError("box projects outside the image")
    rows, cols = np.mgrid[0:h, 0:w]
    pixels = np.stack([cols.ravel(), rows.ravel()], axis=1)
    zs = np.zeros(ckpt.shape.num_bases) if z_shape is None else z_shape
    zc = np.zeros(ckpt.color.num_bases) if z_color is None else z_color
    maps = render_object(ckpt.shape, ckpt.color, zs, zc, box, camera, pixels, w, h,
                         RenderConfig(samples_per_ray=samples), offset=(x0, y0))
    return maps, (x0, y0)


def cmd_render(args) -> int:
    ckpt = store.load_checkpoint(args.model)
    raw = store.read_json(args.scene)
    try:
        box = Box3D.from_dict(raw["box"])
        camera = CameraIntrinsics.from_dict(raw["camera"])
        width, height = int(raw["camera"]["width"]), int(raw["camera"]["height"])
        z_shape = np.asarray(raw["z_shape"], dtype=float) if "z_shape" in raw else None
        z_color = np.asarray(raw["z_color"], dtype=float) if "z_color" in raw else None
    except (KeyError, TypeError, ValueError) as e:
        raise store.StoreError(f"{args.scene}: malformed render request ({e})") from None
    maps, offset = _render_crop(ckpt, box, camera, width, height, args.samples_per_ray or 64, z_shape, z_color)
    out = store.ensure_dir(args.out)
    store.write_image(out / "occupancy", store.to_uint8(maps.occupancy))
    store.write_image(out / "color", store.to_uint8(maps.color))
    store.write_image(out / "nocs", store.nocs_image(maps.nocs))
    store.save_arrays(out / "maps.npz", {
        "occupancy": maps.occupancy, "color": maps.color, "nocs": maps.nocs, "valid": maps.valid,
        "hit": maps.hit, "offset": np.asarray(offset),
    })
    logger.info("rendered %dx%d crop at offset %s", maps.width, maps.height, offset)
    return EXIT_OK


# --------------------------------------------------------------------------
# localize


def rendered_correspondences(ckpt: store.Checkpoint, g, samples: int, coeff_index: Optional[int],
                             noise: Optional[NoiseSpec] = None, seed: int = 0) -> Correspondences:
    """Correspondences from the fitted model's NOCS map over the object's foreground pixels.

    Each weight is the rendered foreground probability. Rendered NOCS lie on
    the pixel rays of the given box, so ``noise`` (the dataset's NOCS noise
    model) is applied on top to stand in for an imperfect predictor.
    """
    t = g.training
    fg = np.argwhere(t.mask.labels == FOREGROUND)[:, ::-1]
    zs = zc = None
    if coeff_index is not None and coeff_index < len(ckpt.coefficients):
        zs = ckpt.coefficients[coeff_index].shape.mean
        zc = ckpt.coefficients[coeff_index].color.mean
    zs = np.zeros(ckpt.shape.num_bases) if zs is None else zs
    zc = np.zeros(ckpt.color.num_bases) if zc is None else zc
    maps = render_object(ckpt.shape, ckpt.color, zs, zc, t.box, t.camera, fg, t.width, t.height,
                         RenderConfig(samples_per_ray=samples), offset=t.crop_offset)
    cols, rows = fg[:, 0], fg[:, 1]
    ok = maps.valid[rows, cols]
    cols, rows = cols[ok], rows[ok]
    p = pixel_to_normalized(cols + t.crop_offset[0], rows + t.crop_offset[1], t.camera)[:, :2]
    m = maps.occupancy[rows, cols]
    o = np.clip(maps.nocs[rows, cols], -0.5, 0.5)
    if noise is not None:
        o, _ = corrupt_nocs(o, noise, np.random.default_rng([seed, g.index]))
    return Correspondences(p, o, np.stack([m, m], axis=1))


def _jacobian_stats(jac: np.ndarray) -> dict:
    names = ("drx_dtx", "drx_dtz", "dry_dty", "dry_dtz")
    return {n: {"mean": float(jac[:, k].mean()), "std": float(jac[:, k].std()),
                "min": float(jac[:, k].min()), "max": float(jac[:, k].max())} for k, n in enumerate(names)}


def cmd_localize(args) -> int:
    if args.source == "rendered-nocs" and not args.model:
        raise UsageError("--source rendered-nocs requires --model")
    if args.fusion_weight is not None and not 0.0 <= args.fusion_weight <= 1.0:
        raise UsageError("--fusion-weight must lie in [0, 1]")
    dataset = store.read_dataset(args.dataset)
    ckpt = store.load_checkpoint(args.model) if args.model else None
    order = ckpt.meta.get("objects", []) if ckpt else []
    settings = PnPSettings(huber_delta=args.huber_delta, yaw_hypotheses=args.yaw_hypotheses)
    seed = dataset.spec.seed if args.seed is None else args.seed

    def run(g):
        entry = {"index": g.index, "gt_box": g.box.to_dict(), "size_pred": g.size_pred.as_array().tolist(),
                 "d_pred": g.d_pred}
        try:
            if args.source == "gt-nocs":
                corr = g.noisy
            else:
                coeff_index = order.index(g.index) if g.index in order else None
                corr = rendered_correspondences(ckpt, g, args.samples_per_ray or 64, coeff_index,
                                                dataset.spec.noise, seed)
            problem = make_problem(corr, g.size_pred, settings)
            sol = solve(problem)
        except PnPError as e:
            entry.update(status="failed", error=f"{type(e).__name__}: {e}")
            return entry, None
        entry.update(status="ok", solution=sol.to_dict(), correspondences=len(corr),
                     jacobian=_jacobian_stats(jacobian_map(sol, problem)))
        pred = Box3D(sol.pose, g.size_pred)
        if args.fusion_weight is not None:
            fused = scale_fuse(FusionInput(sol, g.size_pred, g.d_pred, args.fusion_weight))
            entry["fused"] = fused.to_dict()
            pred = Box3D(fused.pose, fused.size)
        entry["pred_box"] = pred.to_dict()
        return entry, pred

    results = _ordered_map(run, dataset.objects, args.threads)
    report = MetricReport()
    entries = []
    for g, (entry, pred) in zip(dataset.objects, results):
        if pred is not None:
            entry["metrics"] = report.add(pred, g.box, index=g.index)
        entries.append(entry)

    out = store.ensure_dir(args.out)
    failed = sum(e["status"] != "ok" for e in entries)
    store.write_json(out / "poses.json", {
        "schema_version": 1, "seed": seed, "source": args.source,
        "fusion_weight": args.fusion_weight, "objects": entries,
    })
    store.write_csv(out / "metrics.csv", ("index",) + METRIC_FIELDS, report.rows)
    store.write_json(out / "metrics.json", {
        "schema_version": 1, "seed": seed, "objects": report.rows,
        "aggregates": report.aggregates() if report.rows else {}, "failed": failed,
    })
    for e in entries:
        if e["status"] != "ok":
            logger.warning("object %d: %s", e["index"], e["error"])
    logger.info("localized %d/%d objects", len(entries) - failed, len(entries))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nocsloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        # accepted after the subcommand as well; SUPPRESS keeps the global value
        p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
        p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="generate a synthetic dataset from a scene spec")
    p.add_argument("spec")
    p.add_argument("out")
    p.add_argument("--march-samples", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit shape and color models to a dataset")
    p.add_argument("dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--samples-per-ray", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render occupancy, color and NOCS maps of a checkpoint")
    p.add_argument("model")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-ray", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("localize", help="solve PnP per object and score against ground truth")
    p.add_argument("dataset")
    p.add_argument("--source", choices=("gt-nocs", "rendered-nocs"), default="gt-nocs")
    p.add_argument("--model", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion-weight", type=float, default=None)
    p.add_argument("--huber-delta", type=float, default=PnPSettings.huber_delta)
    p.add_argument("--yaw-hypotheses", type=int, default=PnPSettings.yaw_hypotheses)
    p.add_argument("--samples-per-ray", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_localize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        for flag, low in (("samples_per_ray", 2), ("iterations", 0), ("march_samples", 2)):
            value = getattr(args, flag, None)
            if value is not None and value < low:
                raise UsageError(f"--{flag.replace('_', '-')} must be at least {low}")
        if getattr(args, "yaw_hypotheses", 1) < 1 or getattr(args, "huber_delta", 1.0) <= 0:
            raise UsageError("--yaw-hypotheses and --huber-delta must be positive")
        return args.func(args)
    except UsageError as e:
        print(f"nocsloc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneError, store.StoreError) as e:
        print(f"nocsloc: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"nocsloc: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FitDivergedError as e:
        print(f"nocsloc: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"nocsloc: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
