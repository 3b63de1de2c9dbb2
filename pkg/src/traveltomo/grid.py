"""Rectangular tensor grid over the measurement domain and discrete field tools.

Nodes are stored with shape ``(Nx, Nz)``: the first axis runs over ``x`` and the
second over ``z``, so a C-ordered ``(Nx, Nz, N)`` array flattens into the
line-up order used by the least-squares solver.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BINARY_MAGIC = b"TTF1"


class GridMismatchError(ValueError):
    """Raised when a field is combined with a grid it was not built on."""


@dataclass(frozen=True)
class Grid2D:
    """Uniform grid on ``[-R, R] x [a, b]``.

    Node ``(i, j)`` (0-based) sits at ``x_i = -R + i*hx`` and ``z_j = a + j*hz``.
    """

    R: float
    a: float
    b: float
    Nx: int
    Nz: int

    def __post_init__(self):
        if self.R <= 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if not 0 < self.a < self.b:
            raise ValueError(f"need 0 < a < b, got a={self.a}, b={self.b}")
        if self.Nx < 3 or self.Nz < 3:
            raise ValueError(f"need at least 3 nodes per axis, got {self.Nx}x{self.Nz}")

    @classmethod
    def square(cls, n: int, R: float = 1.0, a: float = 1.0, b: float = 3.0) -> "Grid2D":
        return cls(R=R, a=a, b=b, Nx=n, Nz=n)

    @property
    def hx(self) -> float:
        return 2.0 * self.R / (self.Nx - 1)

    @property
    def hz(self) -> float:
        return (self.b - self.a) / (self.Nz - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.Nx, self.Nz)

    @property
    def x(self) -> np.ndarray:
        return -self.R + self.hx * np.arange(self.Nx)

    @property
    def z(self) -> np.ndarray:
        return self.a + self.hz * np.arange(self.Nz)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays ``X, Z`` of shape ``(Nx, Nz)``."""
        return np.meshgrid(self.x, self.z, indexing="ij")

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[1:-1, 1:-1] = True
        return mask

    def boundary_mask(self) -> np.ndarray:
        return ~self.interior_mask()

    def boundary_nodes(self) -> np.ndarray:
        """Boundary node indices ``(i, j)``, counter-clockwise from ``(0, 0)``.

        Bottom edge left to right, right edge upwards, top edge right to left,
        left edge downwards. Every boundary node appears exactly once.
        """
        nx, nz = self.Nx, self.Nz
        bottom = [(i, 0) for i in range(nx)]
        right = [(nx - 1, j) for j in range(1, nz)]
        top = [(i, nz - 1) for i in range(nx - 2, -1, -1)]
        left = [(0, j) for j in range(nz - 2, 0, -1)]
        return np.array(bottom + right + top + left, dtype=np.int64)

    def outward_normals(self) -> np.ndarray:
        """Unit outward normals at :meth:`boundary_nodes`; corners get the diagonal."""
        nodes = self.boundary_nodes()
        n = np.zeros((len(nodes), 2))
        n[nodes[:, 0] == 0, 0] -= 1.0
        n[nodes[:, 0] == self.Nx - 1, 0] += 1.0
        n[nodes[:, 1] == 0, 1] -= 1.0
        n[nodes[:, 1] == self.Nz - 1, 1] += 1.0
        return n / np.linalg.norm(n, axis=1, keepdims=True)


@dataclass(frozen=True)
class ScalarField:
    """One real value per grid node; ``values`` has shape ``(Nx, Nz)``."""

    grid: Grid2D
    values: np.ndarray
    extrapolated: str | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise GridMismatchError(f"values shape {values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class VectorField:
    """``N`` real values per node; ``values`` has shape ``(Nx, Nz, N)``."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 3 or values.shape[:2] != self.grid.shape:
            raise GridMismatchError(f"values shape {values.shape} incompatible with grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def N(self) -> int:
        return self.values.shape[2]

    def component(self, n: int) -> ScalarField:
        return ScalarField(self.grid, self.values[:, :, n])


def _forward_diff(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    d = np.diff(v, axis=axis) / h
    # last index repeats the backward difference so the result covers the grid
    last = np.take(d, [-1], axis=axis)
    return np.concatenate([d, last], axis=axis)


def dx_forward(f: ScalarField) -> ScalarField:
    """Forward difference in ``x``; the column ``i = Nx-1`` is extrapolated."""
    return ScalarField(f.grid, _forward_diff(f.values, f.grid.hx, 0), extrapolated="x")


def dz_forward(f: ScalarField) -> ScalarField:
    """Forward difference in ``z``; the row ``j = Nz-1`` is extrapolated."""
    return ScalarField(f.grid, _forward_diff(f.values, f.grid.hz, 1), extrapolated="z")


def discrete_norms(f: ScalarField | VectorField) -> tuple[float, float]:
    """Return ``(||f||_{L2,h}, ||f||_{H1,h})``.

    Every node carries the weight ``hx*hz``. The gradient part sums forward
    differences over ``i <= Nx-2, j <= Nz-2`` (0-based), where both are defined.
    Vector fields are summed over components.
    """
    g = f.grid
    v = f.values if f.values.ndim == 3 else f.values[:, :, None]
    w = g.hx * g.hz
    l2sq = w * np.sum(v**2)
    ddx = np.diff(v, axis=0)[:, :-1] / g.hx
    ddz = np.diff(v, axis=1)[:-1, :] / g.hz
    h1sq = l2sq + w * (np.sum(ddx**2) + np.sum(ddz**2))
    return float(np.sqrt(l2sq)), float(np.sqrt(h1sq))


# --- serialization -----------------------------------------------------------


def write_field_csv(f: ScalarField | VectorField, path: str | Path) -> None:
    """CSV with header ``x,z,value`` (or ``x,z,value_1..value_N``), z outer."""
    g = f.grid
    v = f.values if f.values.ndim == 3 else f.values[:, :, None]
    ncomp = v.shape[2]
    header = ["x", "z"] + (["value"] if ncomp == 1 else [f"value_{n + 1}" for n in range(ncomp)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, zj in enumerate(g.z):
            for i, xi in enumerate(g.x):
                w.writerow([repr(float(xi)), repr(float(zj))] + [repr(float(c)) for c in v[i, j]])


def read_field_csv(path: str | Path, grid: Grid2D) -> ScalarField | VectorField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != grid.Nx * grid.Nz:
        raise GridMismatchError(f"{path}: {data.shape[0]} rows for a {grid.Nx}x{grid.Nz} grid")
    vals = data[:, 2:].reshape(grid.Nz, grid.Nx, -1).transpose(1, 0, 2)
    if vals.shape[2] == 1:
        return ScalarField(grid, vals[:, :, 0])
    return VectorField(grid, vals)


# Binary layout (little-endian): magic "TTF1", uint32 Nx, Nz, ncomp, float64 R, a, b,
# then Nx*Nz*ncomp float64 values in z-outer, x, component-inner order.
_HEADER = struct.Struct("<4sIII3d")


def write_field_binary(f: ScalarField | VectorField, path: str | Path) -> None:
    g = f.grid
    v = f.values if f.values.ndim == 3 else f.values[:, :, None]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, g.Nx, g.Nz, v.shape[2], g.R, g.a, g.b))
        fh.write(np.ascontiguousarray(v.transpose(1, 0, 2), dtype="<f8").tobytes())


def read_field_binary(path: str | Path) -> ScalarField | VectorField:
    raw = Path(path).read_bytes()
    magic, nx, nz, ncomp, R, a, b = _HEADER.unpack_from(raw)
    if magic != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    grid = Grid2D(R=R, a=a, b=b, Nx=nx, Nz=nz)
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if vals.size != nx * nz * ncomp:
        raise ValueError(f"{path}: truncated payload")
    vals = vals.reshape(nz, nx, ncomp).transpose(1, 0, 2)
    if ncomp == 1:
        return ScalarField(grid, vals[:, :, 0])
    return VectorField(grid, vals)
