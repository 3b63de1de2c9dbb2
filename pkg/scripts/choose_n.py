"""Truncation error of the boundary data for several N (Test 2 by default).

Usage: python scripts/choose_n.py [--test 2] [--nx 81] [--N-list 10,20,35] [--noise 0]
"""

import argparse

from traveltomo import cli

ap = argparse.ArgumentParser()
ap.add_argument("--test", type=int, default=2)
ap.add_argument("--nx", type=int, default=81)
ap.add_argument("--N-list", default="10,20,35")
ap.add_argument("--noise", type=float, default=0.0)
ap.add_argument("--out", default="runs")
args = ap.parse_args()

cfg = cli.RunConfig(test=args.test, nx=args.nx, noise=args.noise, out=args.out)
out, rows = cli.n_study(cfg, [int(n) for n in args.N_list.split(",")])
for r in rows:
    print(f"N = {r['N']:3d}  max e_N = {r['max']:.4e}  mean e_N = {r['mean']:.4e}")
print(f"slice data in {out / 'n_study_slice.csv'}")
