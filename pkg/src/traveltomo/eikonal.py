"""Background travel times by fast marching, geodesic tracing and derivative fields.

Travel times are computed on a :class:`Box` that contains the domain with a
margin and is aligned with the domain grid (``refine`` box cells per domain
cell), so domain nodes are box nodes and no interpolation is needed.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import _fmm
from .basis import source_nodes
from .grid import Grid2D, ScalarField

log = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 100_000


class EikonalError(RuntimeError):
    pass


class MonotonicityError(EikonalError):
    """The background travel time is not strictly increasing in ``z``."""


class TracerError(EikonalError):
    pass


@dataclass(frozen=True)
class SourceLine:
    alpha_bar: float
    n_alpha: int

    @property
    def alphas(self) -> np.ndarray:
        return source_nodes(self.alpha_bar, self.n_alpha)

    @property
    def spacing(self) -> float:
        return 2.0 * self.alpha_bar / (self.n_alpha - 1)

    def point(self, k: int) -> tuple[float, float]:
        return float(self.alphas[k]), 0.0


@dataclass(frozen=True)
class Medium:
    """Background ``c0 = n0**2``; ``c0_inside`` is used on the closed domain, 1 elsewhere."""

    omega: Grid2D
    c0_inside: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "custom"
    monotone_z: bool = False

    def c0(self, x, z) -> np.ndarray:
        x, z = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
        g = self.omega
        inside = (np.abs(x) <= g.R) & (z >= g.a) & (z <= g.b)
        out = np.ones(x.shape)
        if np.any(inside):
            out[inside] = np.broadcast_to(self.c0_inside(x[inside], z[inside]), x[inside].shape)
        return out

    def check(self) -> None:
        X, Z = self.omega.mesh()
        c = self.c0(X, Z)
        if not np.all(np.isfinite(c)):
            raise EikonalError(f"c0 of medium {self.name!r} has non-finite values on the domain")
        if c.min() <= 0:
            raise EikonalError(f"c0 of medium {self.name!r} must be positive, min is {c.min():.3g}")
        if self.monotone_z:
            dz = np.diff(c, axis=1)
            if dz.min() < -1e-12:
                i, j = np.unravel_index(np.argmin(dz), dz.shape)
                raise EikonalError(f"medium {self.name!r} flagged dz c0 >= 0 but it decreases at node ({i}, {j})")

    @classmethod
    def constant(cls, omega: Grid2D) -> "Medium":
        return cls(omega, lambda x, z: np.ones_like(x), name="constant", monotone_z=True)


@dataclass(frozen=True)
class Box:
    """Uniform computational box; node ``(i, j)`` at ``(x0 + i*hx, z0 + j*hz)``."""

    x0: float
    z0: float
    hx: float
    hz: float
    nx: int
    nz: int
    # box index of domain node (0, 0) and stride between domain nodes
    i0: int
    j0: int
    refine: int

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.hx * np.arange(self.nx)

    @property
    def z(self) -> np.ndarray:
        return self.z0 + self.hz * np.arange(self.nz)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nz)

    def mesh(self):
        return np.meshgrid(self.x, self.z, indexing="ij")

    def omega_slice(self, omega: Grid2D) -> tuple[slice, slice]:
        r = self.refine
        return (slice(self.i0, self.i0 + (omega.Nx - 1) * r + 1, r),
                slice(self.j0, self.j0 + (omega.Nz - 1) * r + 1, r))

    @classmethod
    def around(cls, omega: Grid2D, sources: SourceLine, margin: float = 0.5,
               refine: int = 1, z_bottom: float | None = None,
               top_margin: float | None = None) -> "Box":
        """Box containing the domain, the source line and ``margin`` on every side.

        ``z_bottom`` overrides the lower edge (rounded down to the grid) and
        ``top_margin`` the margin above the domain.
        """
        hx = omega.hx / refine
        hz = omega.hz / refine
        left = min(-omega.R, -sources.alpha_bar) - margin
        right = max(omega.R, sources.alpha_bar) + margin
        bottom = (min(0.0, omega.a) - margin) if z_bottom is None else z_bottom
        top = omega.b + (margin if top_margin is None else top_margin)
        i0 = int(np.ceil((-omega.R - left) / hx - 1e-9))
        j0 = int(np.ceil((omega.a - bottom) / hz - 1e-9))
        i_right = int(np.ceil((right - omega.R) / hx - 1e-9))
        j_top = int(np.ceil((top - omega.b) / hz - 1e-9))
        nx = i0 + (omega.Nx - 1) * refine + 1 + i_right
        nz = j0 + (omega.Nz - 1) * refine + 1 + j_top
        return cls(x0=-omega.R - i0 * hx, z0=omega.a - j0 * hz, hx=hx, hz=hz,
                   nx=nx, nz=nz, i0=i0, j0=j0, refine=refine)


@dataclass(frozen=True)
class TravelTime:
    box: Box
    values: np.ndarray  # (nx, nz)
    source: tuple[float, float]
    exact_exterior: bool


def _exact_exterior_ok(medium: Medium, box: Box, source: tuple[float, float]) -> bool:
    # straight rays are optimal outside the domain only if n0 >= 1 everywhere
    X, Z = box.mesh()
    g = medium.omega
    return bool(medium.c0(X, Z).min() >= 1.0 - 1e-12 and not (abs(source[0]) < g.R and g.a < source[1] < g.b))


def fast_march(medium: Medium, source: tuple[float, float], box: Box, *,
               init: str = "exterior", second_order: bool = True) -> TravelTime:
    """Solve ``|grad u0|**2 = c0`` with ``u0(source) = 0`` on ``box``.

    ``init="point"`` freezes the exact distance on nodes within two cells of
    the source (where ``c0 = 1``) and marches over the whole box.
    ``init="exterior"`` additionally freezes every node whose straight segment
    to the source avoids the open domain: with ``c0 = 1`` outside the domain
    and ``c0 >= 1`` everywhere that segment is the geodesic, so only the
    domain and its shadow are marched. Falls back to ``"point"`` when
    ``c0 < 1`` somewhere.
    """
    if init not in ("point", "exterior"):
        raise ValueError(f"unknown init {init!r}")
    X, Z = box.mesh()
    c0 = medium.c0(X, Z)
    if not np.all(np.isfinite(c0)):
        raise EikonalError("c0 has NaN/inf on the computational box")
    if c0.min() <= 0:
        raise EikonalError(f"c0 must be positive on the box, min {c0.min():.3g}")
    slow = np.sqrt(c0)
    sx, sz = source
    dist = np.hypot(X - sx, Z - sz)
    T = np.full(box.shape, np.inf)
    state = np.zeros(box.shape, dtype=np.int8)

    exterior = init == "exterior" and _exact_exterior_ok(medium, box, source)
    if exterior:
        g = medium.omega
        clear = _clear_mask(X, Z, sx, sz, g)
        T[clear] = dist[clear]
        state[clear] = _fmm.KNOWN
    else:
        if not (box.x[0] <= sx <= box.x[-1] and box.z[0] <= sz <= box.z[-1]):
            raise EikonalError(f"source {source} lies outside the computational box")
        near = dist <= 2.0 * max(box.hx, box.hz) + 1e-12
        if np.any(np.abs(c0[near] - 1.0) > 1e-12):
            T[near] = dist[near] * slow[near]
        else:
            T[near] = dist[near]
        state[near] = _fmm.KNOWN
    accepted = _fmm.march(T, state, slow, box.hx, box.hz, second_order)
    if accepted < 0:
        raise EikonalError("fast-marching heap exhausted")
    if not np.all(np.isfinite(T)):
        raise EikonalError(f"{np.count_nonzero(~np.isfinite(T))} box nodes unreachable from source {source}")
    return TravelTime(box=box, values=T, source=(float(sx), float(sz)), exact_exterior=exterior)


def _clear_mask(X, Z, sx, sz, g: Grid2D) -> np.ndarray:
    """Vectorised segment-vs-open-rectangle test (Liang-Barsky)."""
    dx = X - sx
    dz = Z - sz
    t0 = np.zeros(X.shape)
    t1 = np.ones(X.shape)
    clear = np.zeros(X.shape, dtype=bool)
    for p, q in ((-dx, sx + g.R), (dx, g.R - sx), (-dz, sz - g.a), (dz, g.b - sz)):
        q = np.broadcast_to(q, X.shape)
        zero = p == 0
        clear |= zero & (q <= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(zero, 0.0, q / np.where(zero, 1.0, p))
        t0 = np.where(~zero & (p < 0), np.maximum(t0, r), t0)
        t1 = np.where(~zero & (p > 0), np.minimum(t1, r), t1)
    clear |= t1 - t0 <= 1e-12
    tm = 0.5 * (t0 + t1)
    xm = sx + tm * dx
    zm = sz + tm * dz
    clear |= ~((np.abs(xm) < g.R) & (zm > g.a) & (zm < g.b))
    return clear


def _gradient(T: np.ndarray, box: Box) -> tuple[np.ndarray, np.ndarray]:
    gx, gz = np.gradient(T, box.hx, box.hz, edge_order=2)
    return gx, gz


@dataclass(frozen=True)
class Geodesic:
    points: np.ndarray  # (n, 2), from the source to the receiver
    arclength: np.ndarray  # (n,)

    def integrate(self, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
        """Trapezoid rule of ``f`` along the polyline."""
        vals = f(self.points[:, 0], self.points[:, 1])
        return float(np.trapezoid(vals, self.arclength))


def trace_geodesic(tt: TravelTime, point: tuple[float, float], omega: Grid2D | None = None, *,
                   step: float | None = None, max_steps: int = DEFAULT_MAX_STEPS,
                   gradient: tuple[np.ndarray, np.ndarray] | None = None) -> Geodesic:
    """Back-trace the geodesic from ``point`` to the source of ``tt``.

    Steps of ``0.25*min(hx, hz)`` follow ``-grad u0`` (bilinear gradient,
    midpoint rule). When ``tt`` was built with an exact exterior the final
    straight segment is appended as soon as it avoids the domain.
    """
    box = tt.box
    if step is None:
        step = 0.25 * min(box.hx, box.hz)
    gx, gz = gradient if gradient is not None else _gradient(tt.values, box)
    straight = tt.exact_exterior and omega is not None
    R, a, b = (omega.R, omega.a, omega.b) if omega is not None else (0.0, 0.0, 0.0)
    out = np.empty((max_steps + 2, 2))
    n = _fmm.trace(gx, gz, box.x0, box.z0, box.hx, box.hz, float(point[0]), float(point[1]),
                   tt.source[0], tt.source[1], step, max_steps, straight, R, a, b, out)
    if n < 0:
        raise TracerError(f"geodesic from {point} to source {tt.source} did not converge in {max_steps} steps")
    pts = out[:n][::-1].copy()
    seg = np.hypot(*np.diff(pts, axis=0).T)
    return Geodesic(points=pts, arclength=np.concatenate([[0.0], np.cumsum(seg)]))


def write_geodesics_csv(geodesics: list[tuple[int, int, Geodesic]], path: str | Path) -> None:
    """Rows ``source_index, receiver_index, vertex, x, z``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_index", "receiver_index", "vertex", "x", "z"])
        for k, r, geo in geodesics:
            for v, (x, z) in enumerate(geo.points):
                w.writerow([k, r, v, repr(float(x)), repr(float(z))])


@dataclass(eq=False)
class BackgroundField:
    """``u0`` and derivative fields on the domain grid for every source.

    Arrays have shape ``(Nx, Nz, K)`` with ``K`` the number of sources. The
    ratio fields are ``zz = u0_zz/u0_z``, ``x = u0_x/u0_z`` and
    ``zx = u0_zx*u0_x/u0_z**2``; ``d_alpha_*`` are their source derivatives.
    """

    omega: Grid2D
    sources: SourceLine
    medium: Medium
    box: Box
    u0: np.ndarray
    u0_x: np.ndarray
    u0_z: np.ndarray
    u0_zz: np.ndarray
    u0_zx: np.ndarray
    ratio_zz: np.ndarray
    ratio_x: np.ndarray
    ratio_zx: np.ndarray
    d_alpha_zz: np.ndarray
    d_alpha_x: np.ndarray
    d_alpha_zx: np.ndarray
    travel_times: list[TravelTime]

    @property
    def K(self) -> int:
        return self.sources.n_alpha

    def source_field(self, name: str, k: int) -> ScalarField:
        return ScalarField(self.omega, getattr(self, name)[:, :, k])

    def box_gradient(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return _gradient(self.travel_times[k].values, self.box)

    def geodesic(self, k: int, point: tuple[float, float], **kw) -> Geodesic:
        return trace_geodesic(self.travel_times[k], point, self.omega, **kw)


def compute_travel_times(medium: Medium, sources: SourceLine, box: Box, *, init: str = "exterior",
                         second_order: bool = True, workers: int = 1) -> list[TravelTime]:
    """Independent fast marches for every source; threads share no mutable state."""
    medium.check()
    pts = [sources.point(k) for k in range(sources.n_alpha)]

    def one(p):
        return fast_march(medium, p, box, init=init, second_order=second_order)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, pts))
    return [one(p) for p in pts]


def _box_derivatives(T: np.ndarray, box: Box, sl: tuple[slice, slice]):
    """First derivatives (central) and ``u_zz``, ``u_zx`` on the domain nodes."""
    gx, gz = np.gradient(T, box.hx, box.hz, edge_order=2)
    # second derivatives with compact 3-point stencils on the refined box
    dzz = np.empty_like(T)
    dzz[:, 1:-1] = (T[:, 2:] - 2 * T[:, 1:-1] + T[:, :-2]) / box.hz**2
    dzz[:, 0] = dzz[:, 1]
    dzz[:, -1] = dzz[:, -2]
    dzx = np.gradient(gz, box.hx, axis=0, edge_order=2)
    return T[sl], gx[sl], gz[sl], dzz[sl], dzx[sl]


def background_derivatives(travel_times: list[TravelTime], medium: Medium, sources: SourceLine,
                           check_monotone: bool = True) -> BackgroundField:
    """Derivative and ratio fields of ``u0`` on the domain grid.

    Spatial derivatives use central differences on the box (the box extends
    past the domain, so domain edges get central stencils too); source
    derivatives use central differences across neighbouring sources
    (one-sided second order at the two ends).
    """
    omega = medium.omega
    box = travel_times[0].box
    sl = box.omega_slice(omega)
    K = len(travel_times)
    shape = omega.shape + (K,)
    fields = {name: np.empty(shape) for name in ("u0", "u0_x", "u0_z", "u0_zz", "u0_zx")}
    for k, tt in enumerate(travel_times):
        for name, arr in zip(fields, _box_derivatives(tt.values, box, sl)):
            fields[name][:, :, k] = arr
    uz = fields["u0_z"]
    if check_monotone:
        audit_monotone(uz, omega, sources)
    ratio_zz = fields["u0_zz"] / uz
    ratio_x = fields["u0_x"] / uz
    ratio_zx = fields["u0_zx"] * fields["u0_x"] / uz**2
    da = sources.spacing
    d = {name: np.gradient(r, da, axis=2, edge_order=2)
         for name, r in (("zz", ratio_zz), ("x", ratio_x), ("zx", ratio_zx))}
    return BackgroundField(omega=omega, sources=sources, medium=medium, box=box, **fields,
                           ratio_zz=ratio_zz, ratio_x=ratio_x, ratio_zx=ratio_zx,
                           d_alpha_zz=d["zz"], d_alpha_x=d["x"], d_alpha_zx=d["zx"],
                           travel_times=travel_times)


def audit_monotone(u0_z: np.ndarray, omega: Grid2D, sources: SourceLine) -> float:
    """Raise :class:`MonotonicityError` unless ``u0_z > 0`` everywhere; return the minimum."""
    m = float(u0_z.min())
    if not m > 0:
        i, j, k = np.unravel_index(np.argmin(u0_z), u0_z.shape)
        raise MonotonicityError(
            f"dz u0 = {m:.4g} <= 0 at node ({i}, {j}) = ({omega.x[i]:.4g}, {omega.z[j]:.4g}) "
            f"for source {k} (alpha = {sources.alphas[k]:.4g})"
        )
    return m


def compute_background(medium: Medium, sources: SourceLine, *, refine: int = 1, margin: float = 0.5,
                       top_margin: float | None = 0.0, init: str = "exterior", second_order: bool = True,
                       workers: int = 1, check_monotone: bool = True) -> BackgroundField:
    box = Box.around(medium.omega, sources, margin=margin, refine=refine, top_margin=top_margin)
    log.info("fast marching %d sources on a %dx%d box", sources.n_alpha, box.nx, box.nz)
    tts = compute_travel_times(medium, sources, box, init=init, second_order=second_order, workers=workers)
    return background_derivatives(tts, medium, sources, check_monotone=check_monotone)


def dz_u0_lower_bound(a: float) -> float:
    """Lower bound ``a / sqrt(a**2 + 2)`` on ``dz u0`` under ``dz c0 >= 0``."""
    return a / np.sqrt(a * a + 2.0)
