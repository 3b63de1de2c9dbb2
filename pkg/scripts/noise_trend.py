"""Mean L2 error over seeds for decreasing noise levels (Test 2 by default).

Usage: python scripts/noise_trend.py [--nx 41] [--deltas 1.2,0.3,0.05,0] [--seeds 0,1,2,3,4]
"""

import argparse

from traveltomo import cli

ap = argparse.ArgumentParser()
ap.add_argument("--test", type=int, default=2)
ap.add_argument("--nx", type=int, default=41)
ap.add_argument("--N", type=int, default=35)
ap.add_argument("--maxiter", type=int, default=6000)
ap.add_argument("--deltas", default="1.2,0.3,0.05,0")
ap.add_argument("--seeds", default="0,1,2,3,4")
ap.add_argument("--workers", type=int, default=1)
ap.add_argument("--out", default="runs")
args = ap.parse_args()

cfg = cli.RunConfig(test=args.test, nx=args.nx, N=args.N, maxiter=args.maxiter, workers=args.workers, out=args.out)
out, _, summary = cli.noise_sweep(cfg, [float(d) for d in args.deltas.split(",")],
                                  [int(s) for s in args.seeds.split(",")])
for r in summary:
    print(f"noise {r['noise']:<5g} mean L2 error {r['l2_relative_error_mean']:.4f} "
          f"std {r['l2_relative_error_std']:.4f}")
print((out / "sweep_trend.txt").read_text(), end="")
