"""Test 1 at Nx = 81, N = 35, delta = 0.05 over five seeds, then the 120% noise level.

Usage: python scripts/reproduce_test1.py [--out runs] [--maxiter 6000]
"""

import argparse

from traveltomo import cli

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="runs")
ap.add_argument("--maxiter", type=int, default=6000)
ap.add_argument("--seeds", default="0,1,2,3,4")
args = ap.parse_args()

cfg = cli.RunConfig(test=1, out=args.out, maxiter=args.maxiter)
setup = cli.prepare(cfg)
out, runs, summary = cli.noise_sweep(cfg, [1.2, 0.05], [int(s) for s in args.seeds.split(",")], setup=setup)
for r in runs:
    print(f"noise {r['noise']:<5g} seed {r['seed']}: left max {r['left_extreme']:.3f}, "
          f"right max {r['right_extreme']:.3f}, L2 error {r['l2_relative_error']:.3f}")
for r in summary:
    print(f"noise {r['noise']:g}: left error {r['left_relative_error_mean']:.3f}, "
          f"right error {r['right_relative_error_mean']:.3f}")
print(f"outputs in {out}")
