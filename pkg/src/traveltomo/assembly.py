"""Truncated-Fourier transport system ``S dz W + A W + B dx W = 0`` and its boundary data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import Basis
from .eikonal import BackgroundField
from .forward import BoundaryData, multiplicative_noise
from .grid import Grid2D


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FourierSystem:
    grid: Grid2D
    S: np.ndarray  # (N, N)
    A: np.ndarray  # (Nx, Nz, N, N)
    B: np.ndarray  # (Nx, Nz, N, N)
    F: np.ndarray | None = None  # (Nx, Nz, N), zero off the boundary

    @property
    def N(self) -> int:
        return self.S.shape[0]

    def with_boundary(self, F: np.ndarray) -> "FourierSystem":
        return FourierSystem(self.grid, self.S, self.A, self.B, F)

    def residual(self, W: np.ndarray) -> np.ndarray:
        """Forward-difference residual of the system on nodes ``i <= Nx-2, j <= Nz-2``."""
        g = self.grid
        Wz = (W[:-1, 1:] - W[:-1, :-1]) / g.hz
        Wx = (W[1:, :-1] - W[:-1, :-1]) / g.hx
        At = self.A[:-1, :-1]
        Bt = self.B[:-1, :-1]
        return (Wz @ self.S.T + np.einsum("ijmn,ijn->ijm", At, W[:-1, :-1])
                + np.einsum("ijmn,ijn->ijm", Bt, Wx))

    def write_probe_csv(self, path: str | Path, i: int, j: int) -> None:
        """``A`` and ``B`` at node ``(i, j)`` as rows ``matrix,m,n,value`` (1-based)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["matrix", "m", "n", "value"])
            for name, M in (("A", self.A[i, j]), ("B", self.B[i, j])):
                for m in range(self.N):
                    for n in range(self.N):
                        w.writerow([name, m + 1, n + 1, repr(float(M[m, n]))])


def integrands(ratio_zz, ratio_x, ratio_zx, d_zz, d_x, d_zx, psi_n, dpsi_n):
    """Per-``alpha`` integrands of ``a_mn`` and ``b_mn`` before weighting by ``Psi_m``.

    The ``Psi_n'`` term carries the ratios themselves and the ``Psi_n`` term
    their ``alpha`` derivatives, as produced by differentiating the transport
    equation in ``alpha`` after the substitution ``w = u * dz u0``.
    """
    a = -(ratio_zz + ratio_zx) * dpsi_n - (d_zz + d_zx) * psi_n
    b = ratio_x * dpsi_n + d_x * psi_n
    return a, b


def _check_alignment(background: BackgroundField, basis: Basis) -> None:
    if background.K != basis.n_alpha or not np.allclose(background.sources.alphas, basis.nodes, atol=1e-12):
        raise AssemblyError("basis nodes do not coincide with the source positions")


def assemble_coefficients(background: BackgroundField, basis: Basis, chunk: int = 512) -> FourierSystem:
    """Trapezoid quadrature over the sources of ``a_mn(x)`` and ``b_mn(x)`` at every node."""
    _check_alignment(background, basis)
    g = background.omega
    N = basis.N
    r13 = (background.ratio_zz + background.ratio_zx).reshape(-1, background.K)
    d13 = (background.d_alpha_zz + background.d_alpha_zx).reshape(-1, background.K)
    r2 = background.ratio_x.reshape(-1, background.K)
    d2 = background.d_alpha_x.reshape(-1, background.K)
    for name, arr in (("ratio", r13), ("d_alpha ratio", d13), ("ratio_x", r2), ("d_alpha ratio_x", d2)):
        if not np.all(np.isfinite(arr)):
            node, k = np.unravel_index(np.flatnonzero(~np.isfinite(arr))[0], arr.shape)
            i, j = np.unravel_index(node, g.shape)
            raise AssemblyError(f"non-finite {name} at node ({i}, {j}), source {k}")
    pw = basis.psi * basis.weights  # (N, K): Psi_m times quadrature weight
    A = np.empty((r13.shape[0], N, N))
    B = np.empty_like(A)
    for s in range(0, r13.shape[0], chunk):
        sl = slice(s, s + chunk)
        A[sl] = -((pw[None] * r13[sl, None, :]) @ basis.dpsi.T + (pw[None] * d13[sl, None, :]) @ basis.psi.T)
        B[sl] = (pw[None] * r2[sl, None, :]) @ basis.dpsi.T + (pw[None] * d2[sl, None, :]) @ basis.psi.T
    shape = g.shape + (N, N)
    return FourierSystem(grid=g, S=np.array(basis.S), A=A.reshape(shape), B=B.reshape(shape))


def assemble_boundary(data: BoundaryData, background: BackgroundField, basis: Basis) -> np.ndarray:
    """``f_n(x) = int f dz u0 Psi_n dalpha`` at each boundary node, shape ``(M, N)``."""
    _check_alignment(background, basis)
    if data.values.shape != (len(data.nodes), basis.n_alpha):
        raise AssemblyError(f"data has shape {data.values.shape}, expected ({len(data.nodes)}, {basis.n_alpha})")
    if not np.all(np.isfinite(data.values)):
        raise AssemblyError("boundary data contain missing (non-finite) samples")
    uz = background.u0_z[data.nodes[:, 0], data.nodes[:, 1], :]
    return basis.project(data.values * uz)


def boundary_vector_field(grid: Grid2D, nodes: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Scatter per-node boundary vectors into an ``(Nx, Nz, N)`` array, zero inside."""
    out = np.zeros(grid.shape + (F.shape[1],))
    out[nodes[:, 0], nodes[:, 1]] = F
    return out


def noisy_boundary(F: np.ndarray, delta: float, seed: int) -> np.ndarray:
    """``F * (1 + delta * rand)`` entrywise with ``rand ~ U[-1, 1]``."""
    return multiplicative_noise(F, delta, seed)
