import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from traveltomo.assembly import FourierSystem
from traveltomo.basis import build_basis
from traveltomo.grid import Grid2D
from traveltomo.qrm import (
    LineupIndex,
    SparseSystem,
    assemble_explicit,
    build_operator_matrices,
    solve,
)


def _random_system(nx=6, N=3, seed=0, with_data=True):
    g = Grid2D.square(nx)
    rng = np.random.default_rng(seed)
    S = build_basis(3.0, N).S
    A = rng.normal(size=g.shape + (N, N))
    B = rng.normal(size=g.shape + (N, N))
    F = None
    if with_data:
        F = rng.normal(size=g.shape + (N,)) * g.boundary_mask()[..., None]
    return FourierSystem(g, S, A, B, F)


@given(nx=st.integers(3, 8), N=st.integers(1, 5), data=st.data())
@settings(max_examples=40, deadline=None)
def test_lineup_is_bijective(nx, N, data):
    lu = LineupIndex(nx, nx, N)
    i = data.draw(st.integers(0, nx - 1))
    j = data.draw(st.integers(0, nx - 1))
    n = data.draw(st.integers(0, N - 1))
    idx = lu.index(i, j, n)
    # 1-based form (i-1)*Nx*N + (j-1)*N + n of the same node
    assert idx + 1 == i * nx * N + j * N + (n + 1)
    assert tuple(int(v) for v in lu.triple(idx)) == (i, j, n)
    all_idx = lu.index(*np.meshgrid(np.arange(nx), np.arange(nx), np.arange(N), indexing="ij"))
    assert np.array_equal(np.sort(all_idx.ravel()), np.arange(lu.size))


def test_lineup_guards():
    lu = LineupIndex(4, 4, 2)
    with pytest.raises(IndexError):
        lu.index(4, 0, 0)
    with pytest.raises(IndexError):
        lu.triple(lu.size)
    W = np.arange(lu.size, dtype=float).reshape(4, 4, 2)
    np.testing.assert_array_equal(lu.unstack(lu.stack(W)), W)


def test_difference_rows_annihilate_constants():
    fs = _random_system()
    L, Dx, Dz, Lap, D, f = build_operator_matrices(fs)
    one = np.ones(L.shape[1])
    assert np.abs(Dx @ one).max() == 0
    assert np.abs(Dz @ one).max() == 0
    assert np.abs(Lap @ one).max() < 1e-9


def test_laplacian_of_harmonic_quadratic():
    fs = _random_system(nx=7, N=2)
    g = fs.grid
    _, _, _, Lap, _, _ = build_operator_matrices(fs)
    X, Z = g.mesh()
    W = np.stack([X**2 - Z**2, 3 * (X**2 - Z**2)], axis=-1)
    out = (Lap @ W.reshape(-1)).reshape(W.shape)
    assert np.abs(out).max() <= 1e-10 * np.abs(W).max() / g.hx**2
    # the stencil is the true Laplacian: x**2 + z**2 gives 4
    W2 = np.stack([X**2 + Z**2] * 2, axis=-1)
    out2 = (Lap @ W2.reshape(-1)).reshape(W2.shape)
    np.testing.assert_allclose(out2[1:-1, 1:-1], 4.0, rtol=1e-9)


def test_L_entries_on_one_row():
    fs = _random_system(nx=5, N=2)
    g = fs.grid
    L = build_operator_matrices(fs)[0].toarray()
    lu = LineupIndex(5, 5, 2)
    i, j, m = 1, 2, 1
    row = L[lu.index(i, j, m)]
    for n in range(2):
        own = fs.A[i, j, m, n] - fs.S[m, n] / g.hz - fs.B[i, j, m, n] / g.hx
        assert row[lu.index(i, j, n)] == pytest.approx(own)
        assert row[lu.index(i + 1, j, n)] == pytest.approx(fs.B[i, j, m, n] / g.hx)
        assert row[lu.index(i, j + 1, n)] == pytest.approx(fs.S[m, n] / g.hz)
    assert np.count_nonzero(row) <= 3 * 2
    # no rows on the last column or row of nodes
    assert np.all(L[lu.index(4, 2, 0)] == 0)


def test_matrix_free_matches_explicit():
    fs = _random_system()
    eps = 1e-3
    ss = SparseSystem(fs, eps=eps)
    M, rhs = assemble_explicit(fs, eps)
    rng = np.random.default_rng(1)
    for _ in range(3):
        w = rng.normal(size=ss.size)
        np.testing.assert_allclose(ss.matvec(w), M @ w, rtol=1e-11, atol=1e-11 * np.abs(M @ w).max())
    np.testing.assert_allclose(ss.rhs(), rhs)
    np.testing.assert_allclose(ss.diagonal(), M.diagonal(), rtol=1e-12)
    blocks = ss.block_diagonal()
    Md = M.toarray()
    lu = ss.lineup
    for (i, j) in ((0, 0), (2, 3), (5, 5)):
        idx = lu.index(i, j, np.arange(3))
        np.testing.assert_allclose(blocks[i, j], Md[np.ix_(idx, idx)], rtol=1e-12, atol=1e-12)


def test_apply_L_matches_residual():
    fs = _random_system()
    W = np.random.default_rng(2).normal(size=fs.grid.shape + (3,))
    np.testing.assert_allclose(SparseSystem(fs).apply_L(W), fs.residual(W), rtol=1e-12, atol=1e-12)


def test_normal_matrix_symmetric_positive_definite():
    fs = _random_system()
    M, _ = assemble_explicit(fs, 1e-7)
    assert abs(M - M.T).max() <= 1e-12 * abs(M).max()
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.normal(size=M.shape[0])
        assert v @ (M @ v) > 0


def test_gradient_matches_finite_differences():
    fs = _random_system(nx=6, N=3)
    ss = SparseSystem(fs, eps=1e-2, source=np.random.default_rng(5).normal(size=(5, 5, 3)))
    rng = np.random.default_rng(4)
    w = rng.normal(size=ss.size)
    grad = 2 * (ss.matvec(w) - ss.rhs())
    h = 1e-6
    fd = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        fd[k] = (ss.functional(w + e) - ss.functional(w - e)) / (2 * h)
    assert np.linalg.norm(fd - grad) <= 1e-5 * np.linalg.norm(grad)


def test_zero_data_gives_zero():
    fs = _random_system(with_data=False)
    sol = solve(SparseSystem(fs))
    assert sol.converged and sol.iterations == 0
    assert np.all(sol.vector == 0)


@pytest.mark.parametrize("kind", ["none", "jacobi", "block", "line"])
def test_cg_matches_dense_solve(kind):
    fs = _random_system(seed=7)
    eps = 1e-2
    ss = SparseSystem(fs, eps=eps)
    M, rhs = assemble_explicit(fs, eps)
    exact = np.linalg.solve(M.toarray(), rhs)
    sol = solve(ss, rtol=1e-11, preconditioner=kind)
    assert sol.converged and sol.residual <= 1e-10
    np.testing.assert_allclose(sol.vector, exact, rtol=1e-7, atol=1e-9 * np.abs(exact).max())
    assert sol.W.values.shape == (6, 6, 3)


def test_minimizer_is_stationary():
    fs = _random_system(seed=8)
    ss = SparseSystem(fs, eps=1e-2)
    sol = solve(ss, rtol=1e-12, preconditioner="block")
    J0 = ss.functional(sol.vector)
    grad = 2 * (ss.matvec(sol.vector) - ss.rhs())
    assert np.linalg.norm(grad) <= 1e-7 * np.linalg.norm(2 * ss.rhs())
    rng = np.random.default_rng(9)
    for _ in range(10):
        assert ss.functional(sol.vector + 1e-3 * rng.normal(size=ss.size)) > J0


def test_iteration_cap_flags_non_convergence():
    fs = _random_system(seed=10)
    sol = solve(SparseSystem(fs, eps=1e-7), maxiter=3, preconditioner="none")
    assert not sol.converged and sol.iterations == 3
    assert sol.residual == pytest.approx(min(sol.history), rel=1e-6)


def test_history_csv(tmp_path):
    fs = _random_system(seed=11)
    sol = solve(SparseSystem(fs, eps=1e-2), maxiter=5)
    sol.write_history(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,relative_residual" and len(lines) == 1 + len(sol.history)


def test_sinv_form_has_identity_dz_block():
    fs = _random_system(seed=12)
    ss = SparseSystem(fs, use_sinv=True)
    np.testing.assert_allclose(ss.system.S, np.eye(3))
    np.testing.assert_allclose(fs.S @ ss.system.A, fs.A, atol=1e-10)


def test_eps_must_be_positive():
    with pytest.raises(ValueError):
        SparseSystem(_random_system(), eps=0.0)


def test_exact_data_recovery_improves_as_eps_decreases():
    # in-span W* solving the discrete transport system with source g = L W*
    fs = _random_system(nx=8, N=3, seed=13, with_data=False)
    rng = np.random.default_rng(14)
    W_true = rng.normal(size=fs.grid.shape + (3,))
    fs = fs.with_boundary(W_true * fs.grid.boundary_mask()[..., None])
    g = SparseSystem(fs).apply_L(W_true)
    errs = []
    for eps in (1e-2, 1e-4, 1e-6):
        sol = solve(SparseSystem(fs, eps=eps, source=g), rtol=1e-12, preconditioner="block")
        errs.append(np.linalg.norm(sol.W.values - W_true) / np.linalg.norm(W_true))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 10 * np.sqrt(1e-6)
