"""Run every scenario config in scripts/configs (or the ones given) through the CLI.

Usage: python scripts/run_scenarios.py [--out runs] [config.toml ...]
"""

import argparse
import sys
from pathlib import Path

from traveltomo import cli

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="runs")
ap.add_argument("configs", nargs="*")
args = ap.parse_args()

configs = args.configs or sorted(str(p) for p in (Path(__file__).parent / "configs").glob("*.toml"))
status = 0
for path in configs:
    print(f"== {path}")
    code = cli.main(["run", "--config", path, "--out", args.out])
    status = status or code
sys.exit(status)
