"""Quasi-reversibility least squares for the truncated transport system.

The unknown is every Fourier coefficient at every node, stacked as
``idx = (i * Nz + j) * N + n`` (0-based), so a flat vector reshapes to
``(Nx, Nz, N)``. The minimized functional is

    |L w - g|^2 + |D w - f|^2 + eps * (|w|^2 + |Dx w|^2 + |Dz w|^2 + |Lap w|^2)

with ``L`` the forward-difference form of ``S dz W + A W + B dx W`` on nodes
``i <= Nx-2, j <= Nz-2``, ``D`` the restriction to boundary nodes and ``g`` an
optional interior source (zero for the inverse problem, nonzero for
manufactured solutions). Its normal operator ``M`` is applied matrix-free;
:func:`build_operator_matrices` assembles the same operators explicitly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded

from .assembly import FourierSystem
from .grid import Grid2D, VectorField

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-7
DEFAULT_RTOL = 1e-9


@dataclass(frozen=True)
class LineupIndex:
    Nx: int
    Nz: int
    N: int

    @property
    def size(self) -> int:
        return self.Nx * self.Nz * self.N

    def index(self, i, j, n):
        """0-based flat index of component ``n`` at node ``(i, j)``."""
        i, j, n = np.asarray(i), np.asarray(j), np.asarray(n)
        if np.any((i < 0) | (i >= self.Nx) | (j < 0) | (j >= self.Nz) | (n < 0) | (n >= self.N)):
            raise IndexError("lineup index out of range")
        return (i * self.Nz + j) * self.N + n

    def triple(self, idx):
        idx = np.asarray(idx)
        if np.any((idx < 0) | (idx >= self.size)):
            raise IndexError("lineup index out of range")
        node, n = np.divmod(idx, self.N)
        i, j = np.divmod(node, self.Nz)
        return i, j, n

    def stack(self, W: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(W, dtype=float).reshape(-1)

    def unstack(self, w: np.ndarray) -> np.ndarray:
        return np.asarray(w).reshape(self.Nx, self.Nz, self.N)


def _jeps_form(system: FourierSystem) -> FourierSystem:
    """Left-multiply by ``S^-1`` so the ``dz`` block becomes the identity."""
    Sinv = np.linalg.inv(system.S)
    return FourierSystem(system.grid, np.eye(system.N), Sinv @ system.A, Sinv @ system.B, system.F)


@dataclass(eq=False)
class SparseSystem:
    """Regularized normal system ``M w = rhs`` for one :class:`FourierSystem`.

    ``M`` is never formed; :meth:`matvec` applies it from the per-node blocks.
    ``source`` is the interior right-hand side ``g`` of shape
    ``(Nx-1, Nz-1, N)``; ``None`` means zero.
    """

    system: FourierSystem
    eps: float = DEFAULT_EPS
    source: np.ndarray | None = None
    use_sinv: bool = False
    lineup: LineupIndex = field(init=False)
    boundary: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.use_sinv:
            self.system = _jeps_form(self.system)
        g = self.system.grid
        self.lineup = LineupIndex(g.Nx, g.Nz, self.system.N)
        self.boundary = g.boundary_mask()
        sysm = self.system
        gx, gz = 1.0 / g.hx, 1.0 / g.hz
        # block of L acting on W[i, j] itself, shape (Nx-1, Nz-1, N, N)
        self._diag = sysm.A[:-1, :-1] - gz * sysm.S - gx * sysm.B[:-1, :-1]
        self._Bh = gx * sysm.B[:-1, :-1]
        self._Sh = gz * sysm.S

    @property
    def grid(self) -> Grid2D:
        return self.system.grid

    @property
    def size(self) -> int:
        return self.lineup.size

    # -- operator pieces on (Nx, Nz, N) arrays ---------------------------------
    def apply_L(self, W: np.ndarray) -> np.ndarray:
        out = np.einsum("ijmn,ijn->ijm", self._diag, W[:-1, :-1])
        out += np.einsum("ijmn,ijn->ijm", self._Bh, W[1:, :-1])
        out += W[:-1, 1:] @ self._Sh.T
        return out

    def apply_Lt(self, R: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.shape + (self.system.N,))
        out[:-1, :-1] += np.einsum("ijmn,ijm->ijn", self._diag, R)
        out[1:, :-1] += np.einsum("ijmn,ijm->ijn", self._Bh, R)
        out[:-1, 1:] += R @ self._Sh
        return out

    def _dx(self, W):
        return (W[1:, :-1] - W[:-1, :-1]) / self.grid.hx

    def _dz(self, W):
        return (W[:-1, 1:] - W[:-1, :-1]) / self.grid.hz

    def _dxt(self, R):
        out = np.zeros(self.grid.shape + (R.shape[-1],))
        out[1:, :-1] += R / self.grid.hx
        out[:-1, :-1] -= R / self.grid.hx
        return out

    def _dzt(self, R):
        out = np.zeros(self.grid.shape + (R.shape[-1],))
        out[:-1, 1:] += R / self.grid.hz
        out[:-1, :-1] -= R / self.grid.hz
        return out

    def _lap(self, W):
        g = self.grid
        c = W[1:-1, 1:-1]
        return ((W[2:, 1:-1] - 2 * c + W[:-2, 1:-1]) / g.hx**2
                + (W[1:-1, 2:] - 2 * c + W[1:-1, :-2]) / g.hz**2)

    def _lapt(self, R):
        g = self.grid
        out = np.zeros(g.shape + (R.shape[-1],))
        out[2:, 1:-1] += R / g.hx**2
        out[:-2, 1:-1] += R / g.hx**2
        out[1:-1, 2:] += R / g.hz**2
        out[1:-1, :-2] += R / g.hz**2
        out[1:-1, 1:-1] -= 2 * R * (1 / g.hx**2 + 1 / g.hz**2)
        return out

    def regularizer_normal(self, W):
        return W + self._dxt(self._dx(W)) + self._dzt(self._dz(W)) + self._lapt(self._lap(W))

    def matvec(self, w: np.ndarray) -> np.ndarray:
        W = self.lineup.unstack(w)
        out = self.apply_Lt(self.apply_L(W))
        out[self.boundary] += W[self.boundary]
        out += self.eps * self.regularizer_normal(W)
        return out.reshape(-1)

    def rhs(self) -> np.ndarray:
        out = np.zeros(self.grid.shape + (self.system.N,))
        F = self.system.F
        if F is not None:
            out[self.boundary] = F[self.boundary]
        if self.source is not None:
            out += self.apply_Lt(self.source)
        return out.reshape(-1)

    def functional(self, w: np.ndarray) -> float:
        """Discrete QRM functional; its gradient is ``2 (M w - rhs)``."""
        W = self.lineup.unstack(w)
        r = self.apply_L(W)
        if self.source is not None:
            r = r - self.source
        F = self.system.F if self.system.F is not None else np.zeros_like(W)
        val = np.sum(r**2) + np.sum((W[self.boundary] - F[self.boundary]) ** 2)
        reg = np.sum(W**2) + np.sum(self._dx(W) ** 2) + np.sum(self._dz(W) ** 2) + np.sum(self._lap(W) ** 2)
        return float(val + self.eps * reg)

    # -- preconditioners -------------------------------------------------------
    def _reg_diag(self) -> np.ndarray:
        """Diagonal of the regularizer normal operator per node, shape ``(Nx, Nz)``."""
        g = self.grid
        dx = np.zeros(g.shape)
        dx[1:, :-1] += 1 / g.hx**2
        dx[:-1, :-1] += 1 / g.hx**2
        dz = np.zeros(g.shape)
        dz[:-1, 1:] += 1 / g.hz**2
        dz[:-1, :-1] += 1 / g.hz**2
        lap = np.zeros(g.shape)
        cx, cz = 1 / g.hx**2, 1 / g.hz**2
        lap[2:, 1:-1] += cx**2
        lap[:-2, 1:-1] += cx**2
        lap[1:-1, 2:] += cz**2
        lap[1:-1, :-2] += cz**2
        lap[1:-1, 1:-1] += (2 * cx + 2 * cz) ** 2
        return 1.0 + dx + dz + lap

    def block_diagonal(self) -> np.ndarray:
        """Diagonal ``N x N`` blocks of ``M`` per node, shape ``(Nx, Nz, N, N)``."""
        g = self.grid
        N = self.system.N
        blocks = np.zeros(g.shape + (N, N))
        blocks[:-1, :-1] += np.einsum("ijmk,ijmn->ijkn", self._diag, self._diag)
        blocks[1:, :-1] += np.einsum("ijmk,ijmn->ijkn", self._Bh, self._Bh)
        blocks[:-1, 1:] += self._Sh.T @ self._Sh
        eye = np.eye(N)
        blocks[self.boundary] += eye
        blocks += self.eps * self._reg_diag()[:, :, None, None] * eye
        return blocks

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.block_diagonal(), axis1=2, axis2=3).reshape(-1)

    def preconditioner(self, kind: str = "line"):
        """Callable applying an approximate inverse of ``M``."""
        if kind == "none":
            return lambda r: r
        if kind == "jacobi":
            inv = 1.0 / self.diagonal()
            return lambda r: inv * r
        if kind == "block":
            inv = np.linalg.inv(self.block_diagonal())
            shape = self.grid.shape + (self.system.N,)
            return lambda r: np.einsum("ijmn,ijn->ijm", inv, r.reshape(shape)).reshape(-1)
        if kind == "line":
            return self._line_preconditioner()
        raise ValueError(f"unknown preconditioner {kind!r}")

    def _line_preconditioner(self):
        """Exact solve with the ``z``-line part of ``M`` for each ``x`` index.

        Keeps every coupling between nodes of one vertical grid line except
        those of the Laplacian penalty, whose diagonal alone is kept.
        """
        g = self.grid
        N = self.system.N
        nz = g.Nz
        diag = self.block_diagonal()
        # coupling of W[i, j] (rows) with W[i, j+1] (columns)
        upper = np.zeros((g.Nx, nz - 1, N, N))
        upper[:-1] = np.einsum("ijmk,mn->ijkn", self._diag, self._Sh)
        upper[:-1] -= self.eps / g.hz**2 * np.eye(N)
        u = 2 * N - 1
        size = nz * N
        m, n = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        keep = m <= n
        jd = np.arange(nz)[:, None]
        rd = (jd * N + m[keep]).ravel()
        cd = (jd * N + n[keep]).ravel()
        jo = np.arange(nz - 1)[:, None]
        ro = (jo * N + m.ravel()).ravel()
        co = ((jo + 1) * N + n.ravel()).ravel()
        factors = []
        for i in range(g.Nx):
            ab = np.zeros((u + 1, size))
            ab[u + rd - cd, cd] = diag[i][:, keep].ravel()
            ab[u + ro - co, co] = upper[i].reshape(nz - 1, -1).ravel()
            factors.append(cholesky_banded(ab, lower=False))
        shape = (g.Nx, size)

        def apply(r):
            R = r.reshape(shape)
            out = np.empty_like(R)
            for i, c in enumerate(factors):
                out[i] = cho_solve_banded((c, False), R[i], check_finite=False)
            return out.reshape(-1)

        return apply


def build_operator_matrices(system: FourierSystem, lineup: LineupIndex | None = None):
    """Explicit sparse ``(L, Dx, Dz, Lap, D, f)`` for the lineup ordering.

    Rows of ``L``, ``Dx`` and ``Dz`` are indexed like the columns at nodes
    ``i <= Nx-2, j <= Nz-2`` and are empty elsewhere; ``Lap`` rows live on
    interior nodes; ``D`` is the identity on boundary-node columns.
    Intended for small grids and for checking the matrix-free operator.
    """
    g = system.grid
    N = system.N
    lineup = lineup or LineupIndex(g.Nx, g.Nz, N)
    if (lineup.Nx, lineup.Nz, lineup.N) != (g.Nx, g.Nz, N):
        raise ValueError("lineup does not match the system")
    size = lineup.size
    I, J = np.meshgrid(np.arange(g.Nx - 1), np.arange(g.Nz - 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    m, n = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    m, n = m.ravel(), n.ravel()

    def blocks(ri, rj, ci, cj, vals):
        rows = lineup.index(ri[:, None], rj[:, None], m[None])
        cols = lineup.index(ci[:, None], cj[:, None], n[None])
        return rows.ravel(), cols.ravel(), vals.reshape(len(ri), -1).ravel()

    diag = system.A[I, J] - system.S / g.hz - system.B[I, J] / g.hx
    parts = [blocks(I, J, I, J, diag),
             blocks(I, J, I + 1, J, system.B[I, J] / g.hx),
             blocks(I, J, I, J + 1, np.broadcast_to(system.S / g.hz, (len(I), N, N)))]
    r, c, v = (np.concatenate(x) for x in zip(*parts))
    L = sp.csr_matrix((v, (r, c)), shape=(size, size))

    comp = np.arange(N)

    def diff(di, dj, h):
        own = lineup.index(I[:, None], J[:, None], comp[None]).ravel()
        nb = lineup.index((I + di)[:, None], (J + dj)[:, None], comp[None]).ravel()
        rows = np.concatenate([own, own])
        cols = np.concatenate([nb, own])
        vals = np.concatenate([np.full(own.size, 1 / h), np.full(own.size, -1 / h)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(size, size))

    Dx = diff(1, 0, g.hx)
    Dz = diff(0, 1, g.hz)

    Ii, Ji = np.meshgrid(np.arange(1, g.Nx - 1), np.arange(1, g.Nz - 1), indexing="ij")
    Ii, Ji = Ii.ravel(), Ji.ravel()
    own = lineup.index(Ii[:, None], Ji[:, None], comp[None]).ravel()
    rows, cols, vals = [own], [own], [np.full(own.size, -2 / g.hx**2 - 2 / g.hz**2)]
    for di, dj, h in ((1, 0, g.hx), (-1, 0, g.hx), (0, 1, g.hz), (0, -1, g.hz)):
        rows.append(own)
        cols.append(lineup.index((Ii + di)[:, None], (Ji + dj)[:, None], comp[None]).ravel())
        vals.append(np.full(own.size, 1 / h**2))
    Lap = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(size, size))

    bi, bj = np.nonzero(g.boundary_mask())
    bidx = lineup.index(bi[:, None], bj[:, None], comp[None]).ravel()
    D = sp.csr_matrix((np.ones(bidx.size), (bidx, bidx)), shape=(size, size))
    f = np.zeros(size)
    if system.F is not None:
        f[bidx] = system.F[bi, bj].ravel()
    return L, Dx, Dz, Lap, D, f


def assemble_explicit(system: FourierSystem, eps: float = DEFAULT_EPS) -> tuple[sp.csr_matrix, np.ndarray]:
    """Explicit ``M`` and ``rhs`` for zero interior source (small problems only)."""
    L, Dx, Dz, Lap, D, f = build_operator_matrices(system)
    Id = sp.identity(L.shape[0], format="csr")
    M = L.T @ L + D.T @ D + eps * (Id + Dx.T @ Dx + Dz.T @ Dz + Lap.T @ Lap)
    return M.tocsr(), D.T @ f


@dataclass(frozen=True, eq=False)
class QrmSolution:
    vector: np.ndarray
    W: VectorField
    iterations: int
    residual: float
    converged: bool
    history: np.ndarray  # relative residual per iteration, starting at iteration 0

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "relative_residual"])
            for k, r in enumerate(self.history):
                w.writerow([k, repr(float(r))])


def solve(system: SparseSystem, *, rtol: float = DEFAULT_RTOL, maxiter: int | None = None,
          preconditioner: str = "line", x0: np.ndarray | None = None,
          callback=None) -> QrmSolution:
    """Preconditioned conjugate gradients on ``M w = rhs``.

    Stops at ``|M w - rhs| <= rtol |rhs|`` or after ``maxiter`` iterations
    (default ``50 * size``). On the cap the iterate with the smallest
    residual is returned with ``converged=False``. ``callback(k, x)`` is
    called after every iteration.
    """
    b = system.rhs()
    n = b.size
    maxiter = 50 * n if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    grid = system.grid
    if bnorm == 0.0:
        zero = np.zeros(n)
        return QrmSolution(zero, VectorField(grid, system.lineup.unstack(zero).copy()), 0, 0.0, True,
                           np.zeros(1))
    apply_P = system.preconditioner(preconditioner)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - system.matvec(x) if x0 is not None else b.copy()
    z = apply_P(r)
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    best_x, best_res = x.copy(), history[0]
    it = 0
    while history[-1] > rtol and it < maxiter:
        Ap = system.matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            log.warning("CG breakdown: non-positive curvature %.3e at iteration %d", pAp, it)
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        it += 1
        history.append(np.linalg.norm(r) / bnorm)
        if history[-1] < best_res:
            best_res = history[-1]
            best_x = x.copy()
        if callback is not None:
            callback(it, x)
        z = apply_P(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    converged = history[-1] <= rtol
    if not converged:
        log.warning("CG stopped after %d iterations at relative residual %.3e", it, best_res)
        x = best_x
    final = float(np.linalg.norm(b - system.matvec(x)) / bnorm)
    W = VectorField(grid, system.lineup.unstack(x).copy())
    return QrmSolution(x, W, it, final, converged, np.asarray(history))
