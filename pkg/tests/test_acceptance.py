"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
The reconstruction criteria run the full pipeline at desk scale and take
several minutes each.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from traveltomo import cli
from traveltomo.assembly import assemble_coefficients
from traveltomo.basis import build_basis
from traveltomo.eikonal import Medium, SourceLine, compute_background, dz_u0_lower_bound
from traveltomo.forward import make_phantom
from traveltomo.grid import Grid2D, VectorField, discrete_norms
from traveltomo.qrm import SparseSystem, solve

SEEDS = [0, 1, 2, 3, 4]
# CG iteration cap for the Nx = 81, N = 35 reconstructions; the inclusion
# maxima stop changing well before it (see the notes in the README)
MAXITER_81 = 6000
# Test 2 noise sweep grid, the criterion leaves it open
SWEEP_NX = 41
MAXITER_41 = 4000


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_basis_orthonormality():
    t0 = time.perf_counter()
    basis = build_basis(3.0, 35)
    G = basis.gram()
    S = basis.S
    elapsed = time.perf_counter() - t0
    gram_dev = np.abs(G - np.eye(35)).max()
    diag_dev = np.abs(np.diag(S) - 1).max()
    lower = np.abs(np.tril(S, -1)).max()
    ok = gram_dev <= 1e-8 and diag_dev <= 1e-6 and lower <= 1e-6 and elapsed < 1.0
    verdict(1, ok, f"|G-I|max={gram_dev:.2e}, |diag S - 1|={diag_dev:.2e}, "
                   f"lower(S)={lower:.2e}, {elapsed:.2f}s")


def _segment_hausdorff(poly, a, b):
    a, b = np.asarray(a), np.asarray(b)
    d = b - a
    t = np.clip(((poly - a) @ d) / (d @ d), 0, 1)
    to_segment = np.linalg.norm(poly - (a + t[:, None] * d), axis=1).max()
    samples = a + np.linspace(0, 1, 400)[:, None] * d
    p0, p1 = poly[:-1], poly[1:]
    e = p1 - p0
    ee = np.maximum((e * e).sum(1), 1e-300)
    s = np.clip(((samples[:, None] - p0[None]) * e[None]).sum(-1) / ee[None], 0, 1)
    proj = p0[None] + s[..., None] * e[None]
    to_poly = np.linalg.norm(samples[:, None] - proj, axis=-1).min(axis=1).max()
    return max(to_segment, to_poly)


def test_criterion_2_straight_rays():
    t0 = time.perf_counter()
    g = Grid2D.square(161)
    src = SourceLine(3.0, 10)
    bg = compute_background(Medium.constant(g), src)
    X, Z = g.mesh()
    u0_err = max(np.abs(bg.u0[:, :, k] - np.hypot(X - src.point(k)[0], Z - src.point(k)[1])).max()
                 for k in range(src.n_alpha))
    rng = np.random.default_rng(0)
    haus = 0.0
    for k in range(src.n_alpha):
        for _ in range(5):
            p = (rng.uniform(-1, 1), rng.uniform(1, 3))
            haus = max(haus, _segment_hausdorff(bg.geodesic(k, p).points, src.point(k), p))
    elapsed = time.perf_counter() - t0
    h = g.hx
    ok = u0_err <= 2 * h and haus <= 2 * h and elapsed < 30
    verdict(2, ok, f"max|u0 - dist|={u0_err / h:.3f}h, Hausdorff={haus / h:.3f}h (bound 2h), {elapsed:.1f}s")


def test_criterion_3_monotonicity_bound():
    bound = dz_u0_lower_bound(1.0) - 0.05
    g = Grid2D.square(81)
    src = SourceLine(3.0, 209)
    mins = {}
    where = {}
    for test_id in (1, 2, 3, 4):
        bg = compute_background(make_phantom(test_id, g).medium, src)
        mins[test_id] = float(bg.u0_z.min())
        i, j, k = np.unravel_index(np.argmin(bg.u0_z), bg.u0_z.shape)
        where[test_id] = (g.x[i], g.z[j], src.alphas[k])
    worst = min(mins, key=mins.get)
    x, z, a = where[worst]
    ok = all(v >= bound for v in mins.values())
    verdict(3, ok, "min dz u0 per test " + ", ".join(f"{t}: {v:.4f}" for t, v in mins.items())
            + f" vs bound {bound:.4f}; worst at (x, z) = ({x:g}, {z:g}), alpha = {a:g}")


def _manufactured_error(nx, N=10, eps=1e-10, maxiter=20000):
    """Relative discrete L2 error of the QRM solution for an in-span manufactured solution.

    ``W*_n = sin(1.3 x + 0.7 n) exp(0.4 z) / (1 + n)`` on the Test 1 background;
    the source term is the continuous transport operator applied to ``W*`` and
    the boundary data are its exact traces.
    """
    g = Grid2D.square(nx)
    bg = compute_background(make_phantom(1, g).medium, SourceLine(3.0, 209))
    fs = assemble_coefficients(bg, build_basis(3.0, N))
    X, Z = g.mesh()
    n = np.arange(N)
    amp = 1.0 / (1 + n)
    W = amp * np.sin(1.3 * X[..., None] + 0.7 * n) * np.exp(0.4 * Z[..., None])
    Wx = amp * 1.3 * np.cos(1.3 * X[..., None] + 0.7 * n) * np.exp(0.4 * Z[..., None])
    Wz = 0.4 * W
    rows = (slice(0, -1), slice(0, -1))
    source = (Wz[rows] @ fs.S.T + np.einsum("ijmn,ijn->ijm", fs.A[rows], W[rows])
              + np.einsum("ijmn,ijn->ijm", fs.B[rows], Wx[rows]))
    ss = SparseSystem(fs.with_boundary(W * g.boundary_mask()[..., None]), eps=eps, source=source)
    sol = solve(ss, rtol=1e-10, maxiter=maxiter)
    return discrete_norms(VectorField(g, sol.W.values - W))[0] / discrete_norms(VectorField(g, W))[0]


def test_criterion_4_manufactured_convergence():
    e41 = _manufactured_error(41)
    t0 = time.perf_counter()
    e81 = _manufactured_error(81)
    elapsed = time.perf_counter() - t0
    ratio = e41 / e81
    ok = ratio >= 1.5 and elapsed < 300
    verdict(4, ok, f"error {e41:.4f} (Nx=41) -> {e81:.4f} (Nx=81), ratio {ratio:.2f} (need 1.5), "
                   f"Nx=81 stage {elapsed:.0f}s")


@pytest.fixture(scope="module")
def test1_setup():
    cfg = cli.RunConfig(test=1, nx=81, N=35, maxiter=MAXITER_81)
    return cfg, cli.prepare(cfg)


def _test1_runs(test1_setup, tmp_path, delta):
    cfg, setup = test1_setup
    cfg = replace(cfg, out=str(tmp_path))
    _, runs, _ = cli.noise_sweep(cfg, [delta], SEEDS, setup=setup)
    return runs


def test_criterion_5_test1_reproduction(test1_setup, tmp_path):
    t0 = time.perf_counter()
    runs = _test1_runs(test1_setup, tmp_path, 0.05)
    per_run = (time.perf_counter() - t0) / len(SEEDS)
    left = np.mean([r["left_extreme"] for r in runs])
    right = np.mean([r["right_extreme"] for r in runs])
    left_err, right_err = abs(left - 5) / 5, abs(right - 8) / 8
    ok = left_err <= 0.15 and right_err <= 0.15 and per_run < 900
    verdict(5, ok, f"mean left max {left:.3f} ({left_err:.1%} off 5), mean right max {right:.3f} "
                   f"({right_err:.1%} off 8), bound 15%, {per_run:.0f}s per run")


def test_criterion_6_high_noise(test1_setup, tmp_path):
    runs = _test1_runs(test1_setup, tmp_path, 1.2)
    left_err = np.mean([r["left_relative_error"] for r in runs])
    right_err = np.mean([r["right_relative_error"] for r in runs])
    ok = left_err <= 0.35 and right_err <= 0.35
    verdict(6, ok, f"mean relative error left {left_err:.1%}, right {right_err:.1%} at noise 1.2 (bound 35%)")


def test_criterion_7_noise_monotonicity(tmp_path):
    cfg = cli.RunConfig(test=2, nx=SWEEP_NX, N=35, maxiter=MAXITER_41, out=str(tmp_path))
    deltas = [1.2, 0.3, 0.05, 0.0]
    _, _, summary = cli.noise_sweep(cfg, deltas, SEEDS)
    means = [next(r for r in summary if r["noise"] == d)["l2_relative_error_mean"] for d in deltas]
    ok = all(a >= b for a, b in zip(means, means[1:]))
    verdict(7, ok, "mean L2 error " + ", ".join(f"{d:g}: {m:.4f}" for d, m in zip(deltas, means))
            + f" (Nx={SWEEP_NX})")


def test_criterion_8_n_study(tmp_path):
    cfg = cli.RunConfig(test=2, nx=81, out=str(tmp_path))
    _, rows = cli.n_study(cfg, [10, 20, 35])
    means = [r["mean"] for r in rows]
    ok = means[0] > means[1] > means[2]
    verdict(8, ok, "mean e_N " + ", ".join(f"N={r['N']}: {r['mean']:.3e}" for r in rows))


def test_criterion_9_gradient_check():
    t0 = time.perf_counter()
    g = Grid2D.square(6)
    src = SourceLine(3.0, 209)
    bg = compute_background(make_phantom(1, g).medium, src)
    fs = assemble_coefficients(bg, build_basis(3.0, 3))
    rng = np.random.default_rng(0)
    fs = fs.with_boundary(rng.normal(size=g.shape + (3,)) * g.boundary_mask()[..., None])
    ss = SparseSystem(fs, eps=1e-7)
    w = rng.normal(size=ss.size)
    grad = 2 * (ss.matvec(w) - ss.rhs())
    step = 1e-6 * max(1.0, np.abs(w).max())
    fd = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = step
        fd[k] = (ss.functional(w + e) - ss.functional(w - e)) / (2 * step)
    rel = np.linalg.norm(fd - grad) / np.linalg.norm(grad)
    elapsed = time.perf_counter() - t0
    ok = rel <= 1e-5 and elapsed < 5
    verdict(9, ok, f"relative gradient mismatch {rel:.2e} (bound 1e-5), {elapsed:.2f}s")


def test_criterion_10_determinism(tmp_path):
    args = ["run", "--test", "1", "--nx", "21", "--N", "10", "--maxiter", "400",
            "--noise", "0.3", "--seed", "11"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a = next((tmp_path / "a").iterdir()) / "metrics.csv"
    b = next((tmp_path / "b").iterdir()) / "metrics.csv"
    ok = a.read_bytes() == b.read_bytes()
    verdict(10, ok, f"metrics.csv byte-identical across two runs ({len(a.read_bytes())} bytes)")
