"""Orthonormal basis of L2(-alpha_bar, alpha_bar) built from ``alpha**(n-1) * exp(alpha)``.

Each basis function is stored exactly as ``q_n(alpha) * exp(alpha)`` with
``q_n`` a degree ``n-1`` polynomial, kept as Legendre coefficients in
``t = alpha / alpha_bar``. That representation spans the same nested spaces
as the monomials but stays well conditioned up to ``N ~ 60``, and it gives the
derivative ``(q_n + q_n') * exp(alpha)`` in closed form.

The inner product is the composite trapezoid rule on the uniform source
nodes, i.e. the same rule every other stage uses to integrate over ``alpha``.
Gram-Schmidt in that inner product keeps the basis orthonormal to rounding
and keeps ``S`` exactly unit upper triangular, because ``Psi_n'`` lies in
``span{Psi_1..Psi_n}`` with unit coefficient on ``Psi_n``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre

ORTHO_TOL = 1e-8


class OrthogonalityError(ArithmeticError):
    """Gram-Schmidt lost orthogonality beyond working precision."""


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True, eq=False)
class Basis:
    alpha_bar: float
    N: int
    nodes: np.ndarray  # (n_alpha,)
    weights: np.ndarray  # (n_alpha,) trapezoid weights
    coeffs: np.ndarray  # (N, N): row n holds Legendre coefficients of q_n
    psi: np.ndarray  # (N, n_alpha)
    dpsi: np.ndarray  # (N, n_alpha)
    S: np.ndarray  # (N, N), S[m, n] = int Psi_n' Psi_m

    @property
    def n_alpha(self) -> int:
        return self.nodes.size

    @property
    def spacing(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Quadrature of ``f * g`` over the last axis."""
        return np.sum(f * g * self.weights, axis=-1)

    def gram(self) -> np.ndarray:
        return (self.psi * self.weights) @ self.psi.T

    def evaluate(self, alpha: np.ndarray, derivative: bool = False) -> np.ndarray:
        """Evaluate ``Psi_n`` (or ``Psi_n'``) at arbitrary points; shape ``(N, len(alpha))``."""
        return _evaluate(self.coeffs, self.alpha_bar, np.asarray(alpha, dtype=float), derivative)

    def project(self, samples: np.ndarray) -> np.ndarray:
        """Fourier coefficients over the last axis: ``(..., n_alpha) -> (..., N)``."""
        samples = np.asarray(samples, dtype=float)
        if samples.shape[-1] != self.n_alpha:
            raise ValueError(f"expected {self.n_alpha} samples on the last axis, got {samples.shape[-1]}")
        return (samples * self.weights) @ self.psi.T

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`project` on the span: ``(..., N) -> (..., n_alpha)``."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1] != self.N:
            raise ValueError(f"expected {self.N} coefficients on the last axis, got {coeffs.shape[-1]}")
        return coeffs @ self.psi

    def write_csv(self, path: str | Path) -> None:
        """Rows ``n, alpha, psi, dpsi`` (``n`` 1-based)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "alpha", "psi", "dpsi"])
            for n in range(self.N):
                for k, a in enumerate(self.nodes):
                    w.writerow([n + 1, repr(float(a)), repr(float(self.psi[n, k])), repr(float(self.dpsi[n, k]))])

    def write_s_csv(self, path: str | Path) -> None:
        np.savetxt(path, self.S, delimiter=",", fmt="%.17g")


def _evaluate(coeffs: np.ndarray, alpha_bar: float, alpha: np.ndarray, derivative: bool) -> np.ndarray:
    t = alpha / alpha_bar
    q = legendre.legval(t, coeffs.T)
    if derivative:
        dq = legendre.legder(coeffs.T, axis=0) / alpha_bar
        q = q + legendre.legval(t, dq)
    return q * np.exp(alpha)


def source_nodes(alpha_bar: float, n_alpha: int) -> np.ndarray:
    """Uniform nodes covering ``[-alpha_bar, alpha_bar]`` including both ends."""
    return np.linspace(-alpha_bar, alpha_bar, n_alpha)


def build_basis(alpha_bar: float, N: int, n_alpha: int = 209) -> Basis:
    """Gram-Schmidt the functions ``alpha**(n-1) exp(alpha)``, ``n = 1..N``.

    Modified Gram-Schmidt with one re-orthogonalization pass, carried out in
    polynomial-coefficient space so the samples and derivatives are exact
    evaluations of the resulting ``q_n(alpha) exp(alpha)``.
    """
    if alpha_bar <= 0:
        raise ValueError(f"alpha_bar must be positive, got {alpha_bar}")
    if not 1 <= N <= 60:
        raise ValueError(f"N must be in [1, 60], got {N}")
    if n_alpha < 4 * N:
        raise ValueError(f"need n_alpha >= 4N = {4 * N}, got {n_alpha}")

    nodes = source_nodes(alpha_bar, n_alpha)
    weights = trapezoid_weights(n_alpha, nodes[1] - nodes[0])
    # P_k(t) exp(alpha) spans the same nested spaces as alpha**k exp(alpha),
    # and has a positive leading coefficient, so Gram-Schmidt yields the same Psi_n.
    coeffs = np.eye(N)
    vecs = _evaluate(coeffs, alpha_bar, nodes, derivative=False)
    for n in range(N):
        for _ in range(2):
            for m in range(n):
                r = np.sum(vecs[m] * vecs[n] * weights)
                vecs[n] -= r * vecs[m]
                coeffs[n] -= r * coeffs[m]
        norm = np.sqrt(np.sum(vecs[n] ** 2 * weights))
        if not np.isfinite(norm) or norm == 0.0:
            raise OrthogonalityError(f"Psi_{n + 1} collapsed to zero during orthogonalization")
        vecs[n] /= norm
        coeffs[n] /= norm

    psi = _evaluate(coeffs, alpha_bar, nodes, derivative=False)
    dpsi = _evaluate(coeffs, alpha_bar, nodes, derivative=True)
    G = (psi * weights) @ psi.T
    _check_orthonormal(G)
    S = (psi * weights) @ dpsi.T  # S[m, n] = <Psi_m, Psi_n'>
    for arr in (nodes, weights, coeffs, psi, dpsi, S):
        arr.setflags(write=False)
    return Basis(alpha_bar=float(alpha_bar), N=N, nodes=nodes, weights=weights,
                 coeffs=coeffs, psi=psi, dpsi=dpsi, S=S)


def _check_orthonormal(G: np.ndarray) -> None:
    dev = np.abs(G - np.eye(G.shape[0]))
    bad = np.argwhere(dev > ORTHO_TOL)
    if bad.size:
        # first failing pair in build order, reported 1-based
        hi, lo = min((max(p), min(p)) for p in map(tuple, bad))
        raise OrthogonalityError(
            f"<Psi_{lo + 1}, Psi_{hi + 1}> deviates from delta by {dev[lo, hi]:.3e} (> {ORTHO_TOL:g}); "
            "N is too large for double precision on this node set"
        )
