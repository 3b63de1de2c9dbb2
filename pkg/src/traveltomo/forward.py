"""Phantoms, simulated boundary travel-time data and noise."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import _fmm
from .eikonal import BackgroundField, Medium, TracerError
from .grid import Grid2D, ScalarField

Fn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Inclusion:
    """A support component used for reporting: its mask, value and extreme to track."""

    name: str
    mask: Fn
    value: float
    extreme: str = "max"  # "max" for positive parts, "min" for negative ones


@dataclass(frozen=True, eq=False)
class Phantom:
    name: str
    p: Fn
    medium: Medium
    inclusions: tuple[Inclusion, ...]
    cut_z: float
    p_field: ScalarField = field(repr=False)

    @property
    def grid(self) -> Grid2D:
        return self.p_field.grid

    def scale(self) -> float:
        return max(abs(inc.value) for inc in self.inclusions)


def _disc(cx, cz, r):
    return lambda x, z: (x - cx) ** 2 + (z - cz) ** 2 < r * r


def _test1():
    right = _disc(0.5, 2.0, 0.22)
    left = _disc(-0.5, 2.0, 0.2)

    def p(x, z):
        return np.where(right(x, z), 8.0, np.where(left(x, z), 5.0, 0.0))

    def c0(x, z):
        s = z**2 - 2.0
        return np.where(s > 0, 1.0 + 0.3 * (1.0 - x**2) * s, 1.0)

    incs = (Inclusion("left", left, 5.0), Inclusion("right", right, 8.0))
    return p, c0, incs, 2.0


def _test2():
    def ring(x, z):
        r2 = x**2 + (z - 2.0) ** 2
        return (r2 > 0.55**2) & (r2 < 0.75**2)

    def p(x, z):
        return np.where(ring(x, z), 2.0, 0.0)

    def c0(x, z):
        return np.where(z > 1, 1.0 + 0.25 * (x - 0.5) ** 2 * np.log(np.maximum(z, 1.0)), 1.0)

    return p, c0, (Inclusion("ring", ring, 2.0),), 2.0


def _test3():
    def pieces(x, z):
        box07 = np.maximum(np.abs(x), np.abs(z - 2)) < 0.7
        box08 = np.maximum(np.abs(x), np.abs(z - 2)) < 0.8
        return (
            (np.abs(x - (z - 2)) < 0.35) & box07 & (z < 2) & (x < 0),
            (np.abs(x + (z - 2)) < 0.2) & box07 & (z < 2) & (x > 0),
            (np.abs(x) < 0.2) & box08 & (z > 2) & (x < 0),
            (np.abs(x) < 0.2) & box08 & (z > 2) & (x > 0),
        )

    def p(x, z):
        c1, c2, c3, c4 = pieces(x, z)
        return np.select([c1, c2, c3, c4], [2.5, -2.5, 2.5, -2.5], 0.0)

    def positive(x, z):
        return p(x, z) > 0

    def negative(x, z):
        return p(x, z) < 0

    def c0(x, z):
        return np.where(z > 1, 1.0 + 0.5 * (x + 0.5) ** 2 * np.log(np.maximum(z, 1.0)), 1.0)

    incs = (Inclusion("positive", positive, 2.5), Inclusion("negative", negative, -2.5, "min"))
    return p, c0, incs, 1.5


def _test4():
    def lam(x, z):
        box = np.maximum(np.abs(x), np.abs(z - 2)) < 0.7
        return ((np.abs(x - (z - 2)) < 0.325) & box & (x < -0.03)) | ((np.abs(x + (z - 2)) < 0.2) & box)

    def p(x, z):
        return np.where(lam(x, z), 2.0, 0.0)

    def c0(x, z):
        return np.where(z > 1, 1.0 + x**2 * np.log(np.maximum(z, 1.0)), 1.0)

    return p, c0, (Inclusion("lambda", lam, 2.0),), 1.7


_TESTS = {1: _test1, 2: _test2, 3: _test3, 4: _test4}


def make_phantom(test_id: int, grid: Grid2D) -> Phantom:
    """Phantom and background medium of one of the four benchmark tests.

    The formulas assume the domain ``(-1, 1) x (1, 3)``.
    """
    if test_id not in _TESTS:
        raise ValueError(f"test_id must be one of {sorted(_TESTS)}, got {test_id}")
    if (grid.R, grid.a, grid.b) != (1.0, 1.0, 3.0):
        raise ValueError("benchmark phantoms are defined on (-1, 1) x (1, 3)")
    p, c0, incs, cut = _TESTS[test_id]()
    medium = Medium(grid, c0, name=f"test{test_id}", monotone_z=True)
    return custom_phantom(f"test{test_id}", p, medium, incs, cut)


def custom_phantom(name: str, p: Fn, medium: Medium, inclusions=(), cut_z: float | None = None) -> Phantom:
    grid = medium.omega
    X, Z = grid.mesh()
    values = np.asarray(p(X, Z), dtype=float) * np.ones(grid.shape)
    if cut_z is None:
        cut_z = 0.5 * (grid.a + grid.b)
    return Phantom(name=name, p=p, medium=medium, inclusions=tuple(inclusions), cut_z=cut_z,
                   p_field=ScalarField(grid, values))


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Travel-time perturbations ``u(x, x_alpha)`` on the boundary nodes.

    ``values`` and ``plus`` have shape ``(M, K)`` for ``M`` boundary nodes (in
    :meth:`Grid2D.boundary_nodes` order) and ``K`` sources. ``plus`` marks
    ``grad u0 . n > 0``; values on the complement are zero.
    """

    grid: Grid2D
    nodes: np.ndarray  # (M, 2) grid indices
    values: np.ndarray
    plus: np.ndarray
    delta: float = 0.0
    seed: int | None = None

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.grid.x[self.nodes[:, 0]], self.grid.z[self.nodes[:, 1]]])

    def write(self, path: str | Path) -> None:
        """CSV ``alpha_index,boundary_node_index,x,z,value,side`` plus a ``.json`` sidecar."""
        path = Path(path)
        pts = self.points
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha_index", "boundary_node_index", "x", "z", "value", "side"])
            for k in range(self.values.shape[1]):
                for r in range(len(self.nodes)):
                    w.writerow([k, r, repr(float(pts[r, 0])), repr(float(pts[r, 1])),
                                repr(float(self.values[r, k])), "+" if self.plus[r, k] else "-"])
        meta = {"delta": self.delta, "seed": self.seed, "n_nodes": int(len(self.nodes)),
                "n_sources": int(self.values.shape[1]), "Nx": self.grid.Nx, "Nz": self.grid.Nz}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path, grid: Grid2D) -> "BoundaryData":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        M, K = meta["n_nodes"], meta["n_sources"]
        values = np.zeros((M, K))
        plus = np.zeros((M, K), dtype=bool)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                k, r = int(row["alpha_index"]), int(row["boundary_node_index"])
                values[r, k] = float(row["value"])
                plus[r, k] = row["side"] == "+"
        return cls(grid=grid, nodes=grid.boundary_nodes(), values=values, plus=plus,
                   delta=meta["delta"], seed=meta["seed"])


def outgoing_mask(background: BackgroundField) -> np.ndarray:
    """``grad u0 . n > 0`` at each boundary node and source, shape ``(M, K)``."""
    g = background.omega
    nodes = g.boundary_nodes()
    normals = g.outward_normals()
    ux = background.u0_x[nodes[:, 0], nodes[:, 1], :]
    uz = background.u0_z[nodes[:, 0], nodes[:, 1], :]
    return ux * normals[:, :1] + uz * normals[:, 1:] > 0


def line_integrals(p_field: ScalarField, background: BackgroundField, points: np.ndarray,
                   active: np.ndarray | None = None, *, step: float | None = None,
                   max_steps: int = 100_000, per_slowness: bool = True) -> np.ndarray:
    """``int_Gamma p / n0 dsigma`` from each point back to every source, shape ``(len(points), K)``.

    Dividing by the background slowness ``n0 = sqrt(c0)`` makes the result
    solve ``grad u0 . grad u = p`` exactly, since ``|grad u0| = n0`` along the
    ray; ``per_slowness=False`` integrates ``p`` itself. The integrand is
    interpolated bilinearly from the grid and taken as zero outside the
    closed domain.
    """
    g = background.omega
    integrand = p_field.values
    if per_slowness:
        X, Z = g.mesh()
        integrand = integrand / np.sqrt(background.medium.c0(X, Z))
    box = background.box
    if step is None:
        step = 0.25 * min(box.hx, box.hz)
    pts = np.ascontiguousarray(points, dtype=float)
    K = background.K
    if active is None:
        active = np.ones((len(pts), K), dtype=bool)
    out = np.zeros((len(pts), K))
    col = np.empty(len(pts))
    pv = np.ascontiguousarray(integrand)
    for k in range(K):
        gx, gz = background.box_gradient(k)
        sx, sz = background.travel_times[k].source
        _fmm.integrate_many(gx, gz, box.x0, box.z0, box.hx, box.hz, pts, np.ascontiguousarray(active[:, k]),
                            sx, sz, step, max_steps, pv, -g.R, g.a, g.hx, g.hz, g.R, g.a, g.b, col)
        if np.any(np.isnan(col)):
            r = int(np.flatnonzero(np.isnan(col))[0])
            raise TracerError(f"geodesic tracing failed for point {tuple(pts[r])} and source {k}")
        out[:, k] = col
    return out


def simulate_data(phantom: Phantom, background: BackgroundField, *, per_slowness: bool = True) -> BoundaryData:
    """Noiseless boundary data: line integrals on outgoing nodes, zero elsewhere."""
    g = background.omega
    if phantom.grid != g:
        raise ValueError("phantom and background live on different grids")
    nodes = g.boundary_nodes()
    plus = outgoing_mask(background)
    pts = np.column_stack([g.x[nodes[:, 0]], g.z[nodes[:, 1]]])
    values = line_integrals(phantom.p_field, background, pts, active=plus, per_slowness=per_slowness)
    values[~plus] = 0.0
    return BoundaryData(grid=g, nodes=nodes, values=values, plus=plus)


def multiplicative_noise(values: np.ndarray, delta: float, seed: int) -> np.ndarray:
    """``values * (1 + delta * r)`` with ``r ~ U[-1, 1]`` drawn per entry."""
    if delta < 0:
        raise ValueError(f"noise level must be >= 0, got {delta}")
    if delta == 0:
        return np.array(values, dtype=float)
    rng = np.random.default_rng(seed)
    return values * (1.0 + delta * rng.uniform(-1.0, 1.0, size=np.shape(values)))


def add_noise(data: BoundaryData, delta: float, seed: int) -> BoundaryData:
    """Perturb every boundary travel-time value by a relative factor in ``[1-delta, 1+delta]``."""
    return replace(data, values=multiplicative_noise(data.values, delta, seed), delta=delta, seed=seed)
