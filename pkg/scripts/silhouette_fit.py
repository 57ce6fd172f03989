"""Fit a solid box from tri-masks around a turntable and score a held-out view.

    python3 scripts/silhouette_fit.py --views 8 --iterations 300 --blocks 4
"""

import argparse
import math
import time

import numpy as np

from nocsloc.fit import FitConfig, fit
from nocsloc.geometry import Box3D, CameraIntrinsics, ObjectSize, Pose4DoF
from nocsloc.grid import evaluate, interpolation_plan
from nocsloc.render import RenderConfig, all_pixels, render_object
from nocsloc.synth import ObjectSpec, SceneSpec, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--views", type=int, default=8, help="training views; one more is held out")
    ap.add_argument("--iterations", type=int, default=300, help="iterations per block")
    ap.add_argument("--blocks", type=int, default=1, help="report after each block")
    ap.add_argument("--samples-per-ray", type=int, default=32)
    ap.add_argument("--w-dense", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cam = CameraIntrinsics(300.0, 300.0, 80.0, 60.0)
    n = args.views + 1
    boxes = [Box3D(Pose4DoF(2 * math.pi * k / n + 0.3, (0.0, 1.0, 10.0)), ObjectSize(4.0, 1.5, 1.8))
             for k in range(n)]
    gen = generate(SceneSpec(cam, 160, 120, tuple(ObjectSpec(b) for b in boxes), march_samples=512))
    train, held = [g.training for g in gen[:-1]], gen[-1]
    probes = np.random.default_rng(5).uniform(-0.4, 0.4, (4000, 3))

    models = None
    start = time.perf_counter()
    print("iterations  occ_loss  heldout_iou  interior_density  seconds")
    for block in range(args.blocks):
        cfg = FitConfig(iterations=args.iterations, w_lidar=0.0, w_licomp=0.0, w_dense=args.w_dense,
                        samples_per_ray=args.samples_per_ray, objects_per_iteration=1, seed=args.seed + block)
        res = fit(train, models, cfg)
        models = (res.shape, res.color)
        t = held.training
        maps = render_object(res.shape, res.color, np.zeros(0), np.zeros(0), t.box, cam,
                             all_pixels(t.width, t.height), t.width, t.height, RenderConfig(64),
                             offset=t.crop_offset)
        pred = maps.occupancy >= 0.5
        iou = np.count_nonzero(pred & held.silhouette) / np.count_nonzero(pred | held.silhouette)
        sigma, _, _ = evaluate(res.shape, np.zeros(0), interpolation_plan(res.shape.layout, probes + 0.5))
        print(f"{(block + 1) * args.iterations:10d}  {res.report.rows[-1]['occ']:8.5f}  {iou:11.4f}  "
              f"{sigma.mean():16.2f}  {time.perf_counter() - start:7.1f}", flush=True)


if __name__ == "__main__":
    main()
