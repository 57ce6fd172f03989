"""Pose recovery rates of the robust PnP solver against NOCS noise and outliers.

    python3 scripts/pnp_benchmark.py --trials 100 --correspondences 1000
"""

import argparse
import math

import numpy as np

from nocsloc.geometry import wrap_angle
from nocsloc.pnp import Correspondences, PnPSettings, make_problem, solve
from nocsloc.synth import NoiseSpec, box_surface_correspondences, corrupt_nocs, default_camera, random_box


def run(trials, count, sigma, outliers, delta, seed):
    cam = default_camera()
    yaw_err, depth_err = [], []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        box = random_box(rng)
        corr, _ = box_surface_correspondences(box, cam, count, rng)
        o, _ = corrupt_nocs(corr.o, NoiseSpec(nocs_sigma=sigma, outlier_fraction=outliers), rng)
        sol = solve(make_problem(Correspondences(corr.p, o, corr.w), box.size, PnPSettings(huber_delta=delta)))
        yaw_err.append(abs(math.degrees(wrap_angle(sol.pose.yaw - box.pose.yaw))))
        depth_err.append(abs(sol.pose.t[2] - box.pose.t[2]) / box.pose.t[2])
    yaw_err, depth_err = np.array(yaw_err), np.array(depth_err)
    return np.mean((yaw_err < 2.0) & (depth_err < 0.03)), np.median(yaw_err), np.median(depth_err)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--correspondences", type=int, default=1000)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.01, 0.02, 0.05])
    ap.add_argument("--outliers", type=float, nargs="+", default=[0.0, 0.2, 0.4])
    ap.add_argument("--huber-delta", type=float, default=PnPSettings.huber_delta)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("sigma  outliers  success  median_yaw_deg  median_rel_depth")
    for sigma in args.sigmas:
        for frac in args.outliers:
            ok, yaw, depth = run(args.trials, args.correspondences, sigma, frac, args.huber_delta, args.seed)
            print(f"{sigma:5.3f}  {frac:8.2f}  {ok:7.2f}  {yaw:14.4f}  {depth:16.5f}", flush=True)


if __name__ == "__main__":
    main()
