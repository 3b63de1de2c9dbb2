"""Full-size reconstructions of Test 1 without noise and Test 3 at 5% noise.

Each runs the whole pipeline at Nx = 81, N = 35 (several minutes per test).
"""

import pytest

from traveltomo import cli

pytestmark = pytest.mark.slow


def _inclusions(test_id, noise, seed=0):
    cfg = cli.RunConfig(test=test_id, nx=81, N=35, noise=noise, seed=seed, maxiter=6000)
    values = cli.reconstruct(cli.prepare(cfg), cfg).values
    print({k: v for k, v in values.items() if k.endswith(("_extreme", "_relative_error"))})
    return values


def test_noiseless_test1_right_inclusion():
    values = _inclusions(1, 0.0)
    assert values["right_relative_error"] <= 0.10


def test_test3_positive_part():
    values = _inclusions(3, 0.05)
    assert values["positive_relative_error"] <= 0.20
