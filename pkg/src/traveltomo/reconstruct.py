"""From QRM coefficients back to travel-time perturbations and the slowness term ``p``."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .basis import Basis
from .eikonal import BackgroundField
from .forward import Phantom
from .grid import Grid2D, ScalarField, VectorField, discrete_norms

SMOOTH_WINDOW = 5


def window_average(values: np.ndarray, size: int = SMOOTH_WINDOW) -> np.ndarray:
    """Mean over the ``size x size`` node window in the first two axes.

    Near the edges the window is truncated and the mean is taken over the
    nodes that exist.
    """
    if size <= 1:
        return np.array(values, dtype=float)
    sizes = (size, size) + (1,) * (values.ndim - 2)
    total = uniform_filter(np.asarray(values, dtype=float), size=sizes, mode="constant", cval=0.0)
    count = uniform_filter(np.ones(values.shape[:2]), size=size, mode="constant", cval=0.0)
    return total / count.reshape(count.shape + (1,) * (values.ndim - 2))


def recover_u(W: VectorField, basis: Basis, background: BackgroundField) -> np.ndarray:
    """``u(x, alpha_k) = sum_n W_n(x) Psi_n(alpha_k) / dz u0``, shape ``(Nx, Nz, K)``."""
    if W.grid != background.omega:
        raise ValueError("solution and background live on different grids")
    return basis.synthesize(W.values) / background.u0_z


def recover_p(u: np.ndarray, background: BackgroundField, basis: Basis, *,
              smooth: int = SMOOTH_WINDOW) -> ScalarField:
    """Source average of ``grad u0 . grad u`` with window smoothing before and after."""
    g = background.omega
    us = window_average(u, smooth)
    ux, uz = np.gradient(us, g.hx, g.hz, axis=(0, 1))
    integrand = background.u0_z * uz + background.u0_x * ux
    p = np.sum(integrand * basis.weights, axis=-1) / (2.0 * basis.alpha_bar)
    return ScalarField(g, window_average(p, smooth))


@dataclass(frozen=True)
class InclusionReport:
    name: str
    true_value: float
    extreme: float
    relative_error: float


@dataclass(frozen=True)
class Metrics:
    inclusions: tuple[InclusionReport, ...]
    l2_relative_error: float
    max_abs: float

    def as_dict(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for inc in self.inclusions:
            out[f"{inc.name}_extreme"] = inc.extreme
            out[f"{inc.name}_relative_error"] = inc.relative_error
        out["l2_relative_error"] = self.l2_relative_error
        out["max_abs"] = self.max_abs
        return out


def metrics(p_comp: ScalarField, phantom: Phantom) -> Metrics:
    """Per-inclusion extremes, their relative errors and the relative discrete L2 error."""
    g = p_comp.grid
    if g != phantom.grid:
        raise ValueError("reconstruction and phantom live on different grids")
    X, Z = g.mesh()
    reports = []
    for inc in phantom.inclusions:
        mask = np.asarray(inc.mask(X, Z), dtype=bool)
        if not mask.any():
            raise ValueError(f"inclusion {inc.name!r} covers no grid node")
        vals = p_comp.values[mask]
        ext = float(vals.max() if inc.extreme == "max" else vals.min())
        reports.append(InclusionReport(inc.name, inc.value, ext, abs(ext - inc.value) / abs(inc.value)))
    diff = ScalarField(g, p_comp.values - phantom.p_field.values)
    true_norm = discrete_norms(phantom.p_field)[0]
    l2 = discrete_norms(diff)[0] / true_norm if true_norm > 0 else discrete_norms(diff)[0]
    return Metrics(tuple(reports), float(l2), float(np.abs(p_comp.values).max()))


def line_cut(field: ScalarField, z: float) -> np.ndarray:
    """Values along ``z = const``, linear in ``z`` between grid rows."""
    g = field.grid
    if not g.a <= z <= g.b:
        raise ValueError(f"cut z={z} outside [{g.a}, {g.b}]")
    t = (z - g.a) / g.hz
    j = min(int(np.floor(t + 1e-9)), g.Nz - 2)
    w = t - j
    return (1 - w) * field.values[:, j] + w * field.values[:, j + 1]


def write_line_cut(p_comp: ScalarField, phantom: Phantom, path: str | Path) -> None:
    cut_c = line_cut(p_comp, phantom.cut_z)
    cut_t = line_cut(phantom.p_field, phantom.cut_z)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "p_true", "p_comp"])
        for x, t, c in zip(p_comp.grid.x, cut_t, cut_c):
            w.writerow([repr(float(x)), repr(float(t)), repr(float(c))])


def write_pgm(field: ScalarField, path: str | Path, vmin: float | None = None, vmax: float | None = None) -> None:
    """8-bit binary graymap, top row at ``z = b``; ``vmin``/``vmax`` default to the data range."""
    v = field.values
    lo = v.min() if vmin is None else vmin
    hi = v.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.rint((v - lo) * scale), 0, 255).astype(np.uint8).T[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def format_value(v) -> str:
    """Shortest round-trip text for floats; stable across runs."""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report(values: dict, path: str | Path) -> None:
    """Flat ``key = value`` text, keys in insertion order."""
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {format_value(v)}\n")


def write_metrics_csv(values: dict, path: str | Path) -> None:
    """Header row plus one data row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(values))
        w.writerow([format_value(v) for v in values.values()])


def zero_like(grid: Grid2D) -> ScalarField:
    return ScalarField(grid, np.zeros(grid.shape))
