"""Depth error of scale fusion as the blend weight sweeps from pure PnP to pure d_pred.

    python3 scripts/fusion_sweep.py --objects 200 --depth-sigma 0.05 --size-sigma 0.05
"""

import argparse
import math

import numpy as np

from nocsloc.fusion import FusionInput, scale_fuse
from nocsloc.geometry import Box3D
from nocsloc.metrics import depth_mae, iou_3d
from nocsloc.pnp import make_problem, solve
from nocsloc.synth import box_surface_correspondences, default_camera, random_box


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--objects", type=int, default=200)
    ap.add_argument("--depth-sigma", type=float, default=0.05, help="log-normal noise of the depth estimate")
    ap.add_argument("--size-sigma", type=float, default=0.05, help="log-normal noise of the size given to PnP")
    ap.add_argument("--steps", type=int, default=11)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    cam = default_camera()
    cases = []
    for i in range(args.objects):
        rng = np.random.default_rng([i, args.seed])
        box = random_box(rng)
        corr, _ = box_surface_correspondences(box, cam, 200, rng)
        size = box.size.scaled(math.exp(args.size_sigma * rng.standard_normal()))
        d_pred = box.pose.t[2] * math.exp(args.depth_sigma * rng.standard_normal())
        cases.append((box, size, d_pred, solve(make_problem(corr, size))))

    print("weight  depth_mae_m  mean_iou3d")
    for w in np.linspace(0.0, 1.0, args.steps):
        fused = [scale_fuse(FusionInput(sol, size, d, float(w))) for _, size, d, sol in cases]
        mae = depth_mae([f.pose.t[2] for f in fused], [b.pose.t[2] for b, *_ in cases])
        iou = np.mean([iou_3d(Box3D(f.pose, f.size), b) for f, (b, *_) in zip(fused, cases)])
        print(f"{w:6.2f}  {mae:11.4f}  {iou:10.4f}")


if __name__ == "__main__":
    main()
