"""Command-line driver: single reconstructions, the truncation study and noise sweeps.

Configs are flat TOML files; command-line flags override file values. Every
run writes its artifacts under a fresh timestamped directory together with
the resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .assembly import FourierSystem, assemble_boundary, assemble_coefficients, boundary_vector_field
from .basis import Basis, build_basis
from .eikonal import BackgroundField, Medium, SourceLine, compute_background, write_geodesics_csv
from .forward import BoundaryData, Inclusion, Phantom, add_noise, custom_phantom, make_phantom, simulate_data
from .grid import Grid2D, ScalarField, VectorField, write_field_binary, write_field_csv
from .qrm import QrmSolution, SparseSystem, solve
from .reconstruct import (
    format_value,
    metrics,
    recover_p,
    recover_u,
    write_line_cut,
    write_metrics_csv,
    write_pgm,
    write_report,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

PRECONDITIONERS = ("none", "jacobi", "block", "line")


class ConfigError(ValueError):
    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.field = name


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class SolverError(ArithmeticError):
    pass


@dataclass(frozen=True)
class RunConfig:
    test: int | str = 1  # 1..4 or "custom"
    nx: int = 81
    N: int = 35
    n_alpha: int = 209
    alpha_bar: float = 3.0
    noise: float = 0.0
    seed: int = 0
    eps: float = 1e-7
    rtol: float = 1e-9
    maxiter: int = 6000
    preconditioner: str = "line"
    smooth: int = 5
    workers: int = 1
    emit_geodesics: bool = False
    geodesic_sources: int = 5
    geodesic_stride: int = 8
    medium: int | str = "constant"  # background of a custom phantom: 1..4 or "constant"
    discs: tuple = ()  # custom phantom: tables with x, z, radius, value
    out: str = "runs"

    def validate(self) -> "RunConfig":
        if self.test not in (1, 2, 3, 4, "custom"):
            raise ConfigError("test", f"must be 1, 2, 3, 4 or 'custom', got {self.test!r}")
        for name in ("nx", "N", "n_alpha", "maxiter", "workers", "geodesic_sources", "geodesic_stride", "smooth"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(name, f"must be an integer, got {v!r}")
        for name in ("alpha_bar", "noise", "eps", "rtol"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                raise ConfigError(name, f"must be a finite number, got {v!r}")
        if self.nx < 5:
            raise ConfigError("nx", f"needs at least 5 nodes, got {self.nx}")
        if self.N < 1:
            raise ConfigError("N", f"must be >= 1, got {self.N}")
        if self.n_alpha < 4 * self.N:
            raise ConfigError("n_alpha", f"must be >= 4 N = {4 * self.N}, got {self.n_alpha}")
        if self.alpha_bar <= 0:
            raise ConfigError("alpha_bar", f"must be > 0, got {self.alpha_bar}")
        if self.noise < 0:
            raise ConfigError("noise", f"must be >= 0, got {self.noise}")
        if self.eps <= 0:
            raise ConfigError("eps", f"must be > 0, got {self.eps}")
        if not 0 < self.rtol < 1:
            raise ConfigError("rtol", f"must lie in (0, 1), got {self.rtol}")
        if self.maxiter < 1 or self.workers < 1 or self.smooth < 1:
            bad = next(n for n in ("maxiter", "workers", "smooth") if getattr(self, n) < 1)
            raise ConfigError(bad, f"must be >= 1, got {getattr(self, bad)}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ConfigError("preconditioner", f"must be one of {PRECONDITIONERS}, got {self.preconditioner!r}")
        if self.test == "custom":
            if self.medium not in (1, 2, 3, 4, "constant"):
                raise ConfigError("medium", f"must be 1..4 or 'constant', got {self.medium!r}")
            if not self.discs:
                raise ConfigError("discs", "a custom phantom needs at least one disc")
            for k, d in enumerate(self.discs):
                if not isinstance(d, dict) or set(d) != {"x", "z", "radius", "value"}:
                    raise ConfigError("discs", f"entry {k} needs exactly the keys x, z, radius, value")
        return self


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    """Read a flat TOML file, apply non-``None`` overrides and validate."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    for key in values:
        if key not in FIELD_NAMES:
            raise ConfigError(key, "unknown setting")
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "discs" in values:
        values["discs"] = tuple(values["discs"])
    return RunConfig(**values).validate()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + " }"
    return format_value(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in asdict(cfg).items())


@contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("%s done in %.1f s", name, time.perf_counter() - t0)


def build_phantom(cfg: RunConfig, grid: Grid2D) -> Phantom:
    if cfg.test != "custom":
        return make_phantom(cfg.test, grid)
    medium = Medium.constant(grid) if cfg.medium == "constant" else make_phantom(cfg.medium, grid).medium
    discs = [(float(d["x"]), float(d["z"]), float(d["radius"]), float(d["value"])) for d in cfg.discs]

    def mask(cx, cz, r):
        return lambda x, z: (x - cx) ** 2 + (z - cz) ** 2 < r * r

    def p(x, z):
        out = np.zeros(np.broadcast(x, z).shape)
        for cx, cz, r, v in discs:
            out = np.where(mask(cx, cz, r)(x, z), v, out)
        return out

    incs = [Inclusion(f"disc{k}", mask(cx, cz, r), v, "max" if v > 0 else "min")
            for k, (cx, cz, r, v) in enumerate(discs)]
    return custom_phantom("custom", p, medium, incs)


@dataclass
class Setup:
    """Everything that does not depend on the noise realisation."""

    cfg: RunConfig
    grid: Grid2D
    sources: SourceLine
    phantom: Phantom
    background: BackgroundField
    basis: Basis
    system: FourierSystem
    clean: BoundaryData

    def compatible(self, cfg: RunConfig) -> bool:
        keep = ("noise", "seed", "out", "emit_geodesics", "geodesic_sources", "geodesic_stride", "workers")
        return replace(self.cfg, **{k: getattr(cfg, k) for k in keep}) == cfg


@dataclass
class RunResult:
    data: BoundaryData
    solution: QrmSolution
    u: np.ndarray
    p: ScalarField
    values: dict = field(default_factory=dict)


def prepare(cfg: RunConfig) -> Setup:
    """Background medium, basis, coefficient assembly and the noiseless data."""
    grid = Grid2D.square(cfg.nx)
    sources = SourceLine(cfg.alpha_bar, cfg.n_alpha)
    with stage("phantom"):
        phantom = build_phantom(cfg, grid)
        phantom.medium.check()
    with stage("background"):
        background = compute_background(phantom.medium, sources, workers=cfg.workers)
    with stage("basis"):
        basis = build_basis(cfg.alpha_bar, cfg.N, cfg.n_alpha)
    with stage("data"):
        clean = simulate_data(phantom, background)
    with stage("assembly"):
        system = assemble_coefficients(background, basis)
    return Setup(cfg, grid, sources, phantom, background, basis, system, clean)


def reconstruct(setup: Setup, cfg: RunConfig, x0: np.ndarray | None = None) -> RunResult:
    """Noise, boundary projection, QRM solve and recovery of ``p`` for one realisation."""
    data = add_noise(setup.clean, cfg.noise, cfg.seed) if cfg.noise > 0 else setup.clean
    with stage("assembly"):
        F = assemble_boundary(data, setup.background, setup.basis)
        fs = setup.system.with_boundary(boundary_vector_field(setup.grid, data.nodes, F))
    with stage("solver"):
        sol = solve(SparseSystem(fs, eps=cfg.eps), rtol=cfg.rtol, maxiter=cfg.maxiter,
                    preconditioner=cfg.preconditioner, x0=x0)
        if not np.all(np.isfinite(sol.vector)):
            raise SolverError("conjugate gradients produced non-finite values")
        if not sol.converged:
            log.warning("CG stopped at the iteration cap %d with relative residual %.3e",
                        cfg.maxiter, sol.residual)
    with stage("reconstruct"):
        u = recover_u(sol.W, setup.basis, setup.background)
        p = recover_p(u, setup.background, setup.basis, smooth=cfg.smooth)
        m = metrics(p, setup.phantom)
    values = {
        "test": cfg.test, "nx": cfg.nx, "N": cfg.N, "n_alpha": cfg.n_alpha, "alpha_bar": cfg.alpha_bar,
        "noise": cfg.noise, "seed": cfg.seed, "eps": cfg.eps, "maxiter": cfg.maxiter,
        "iterations": sol.iterations, "residual": sol.residual, "converged": int(sol.converged),
    }
    values.update(m.as_dict())
    return RunResult(data, sol, u, p, values)


def _fresh_dir(root: Path, stem: str) -> Path:
    base = root / f"{datetime.now().strftime('%Y%m%d-%H%M%S')}-{stem}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _stem(cfg: RunConfig) -> str:
    return f"test{cfg.test}-nx{cfg.nx}-N{cfg.N}-noise{cfg.noise:g}-seed{cfg.seed}"


def emit_geodesics(setup: Setup, cfg: RunConfig, out: Path) -> list[Path]:
    """One polyline CSV per traced source, receivers on the outgoing boundary nodes."""
    data = setup.clean
    ks = np.unique(np.linspace(0, cfg.n_alpha - 1, cfg.geodesic_sources).round().astype(int))
    paths = []
    for k in ks:
        recv = np.flatnonzero(data.plus[:, k])[:: cfg.geodesic_stride]
        geos = [(int(k), int(r), setup.background.geodesic(int(k), tuple(data.points[r]))) for r in recv]
        path = out / f"geodesics_source{k:03d}.csv"
        write_geodesics_csv(geos, path)
        paths.append(path)
    return paths


def write_outputs(setup: Setup, cfg: RunConfig, res: RunResult, out: Path, full: bool = True) -> None:
    write_metrics_csv(res.values, out / "metrics.csv")
    write_report(res.values, out / "metrics.txt")
    write_field_csv(res.p, out / "p_comp.csv")
    write_pgm(res.p, out / "p_comp.pgm")
    write_line_cut(res.p, setup.phantom, out / "line_cut.csv")
    if not full:
        return
    setup.basis.write_csv(out / "basis.csv")
    setup.basis.write_s_csv(out / "basis_S.csv")
    bg = setup.background
    write_field_binary(VectorField(setup.grid, bg.u0), out / "u0.bin")
    write_field_binary(VectorField(setup.grid, bg.u0_x), out / "u0_x.bin")
    write_field_binary(VectorField(setup.grid, bg.u0_z), out / "u0_z.bin")
    res.data.write(out / "boundary_data.csv")
    write_field_binary(res.solution.W, out / "W.bin")
    res.solution.write_history(out / "cg_history.csv")
    write_field_csv(setup.phantom.p_field, out / "p_true.csv")
    write_pgm(setup.phantom.p_field, out / "p_true.pgm")


def run_scenario(cfg: RunConfig, setup: Setup | None = None) -> Path:
    """Full reconstruction for one configuration; returns the run directory."""
    if setup is None or not setup.compatible(cfg):
        setup = prepare(cfg)
    out = _fresh_dir(Path(cfg.out), _stem(cfg))
    (out / "config.toml").write_text(dump_config(cfg))
    res = reconstruct(setup, cfg)
    with stage("output"):
        write_outputs(setup, cfg, res, out)
        if cfg.emit_geodesics:
            emit_geodesics(setup, cfg, out)
    return out


def n_study(cfg: RunConfig, N_list: list[int], setup: Setup | None = None) -> tuple[Path, list[dict]]:
    """Truncation error ``|w - sum_n f_n Psi_n|`` of the noisy data on the top edge for each ``N``."""
    if not N_list or any(n < 1 or 4 * n > cfg.n_alpha for n in N_list):
        raise ConfigError("N_list", f"entries must lie in 1..{cfg.n_alpha // 4}, got {N_list}")
    if setup is None:
        grid = Grid2D.square(cfg.nx)
        sources = SourceLine(cfg.alpha_bar, cfg.n_alpha)
        with stage("phantom"):
            phantom = build_phantom(cfg, grid)
        with stage("background"):
            background = compute_background(phantom.medium, sources, workers=cfg.workers)
        with stage("data"):
            clean = simulate_data(phantom, background)
    else:
        grid, background, clean = setup.grid, setup.background, setup.clean
    data = add_noise(clean, cfg.noise, cfg.seed) if cfg.noise > 0 else clean
    top = np.flatnonzero(data.nodes[:, 1] == grid.Nz - 1)
    top = top[np.argsort(data.nodes[top, 0])]
    uz = background.u0_z[data.nodes[top, 0], data.nodes[top, 1]]
    w = data.values[top] * uz
    out = _fresh_dir(Path(cfg.out), f"nstudy-test{cfg.test}-nx{cfg.nx}-noise{cfg.noise:g}")
    (out / "config.toml").write_text(dump_config(cfg) + f"N_list = {_toml_value(list(N_list))}\n")
    rows = []
    alphas = SourceLine(cfg.alpha_bar, cfg.n_alpha).alphas
    with stage("n-study"), open(out / "n_study_slice.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["N", "x", "alpha", "w", "w_truncated", "e_N"])
        for N in N_list:
            basis = build_basis(cfg.alpha_bar, N, cfg.n_alpha)
            F = assemble_boundary(data, background, basis)[top]
            approx = basis.synthesize(F)
            e = np.abs(w - approx)
            rows.append({"N": N, "max": float(e.max()), "mean": float(e.mean())})
            xs = grid.x[data.nodes[top, 0]]
            for i, x in enumerate(xs):
                for k, a in enumerate(alphas):
                    wr.writerow([N, format_value(x), format_value(a), format_value(w[i, k]),
                                 format_value(approx[i, k]), format_value(e[i, k])])
    with open(out / "n_study.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["N", "max", "mean"])
        for r in rows:
            wr.writerow([r["N"], format_value(r["max"]), format_value(r["mean"])])
    return out, rows


def noise_sweep(cfg: RunConfig, deltas: list[float], seeds: list[int], *,
                setup: Setup | None = None) -> tuple[Path, list[dict], list[dict]]:
    """Reconstruct for every ``(delta, seed)`` and aggregate the metrics per noise level.

    The background, basis and coefficient assembly are shared. Runs at zero
    noise ignore the seed and are solved once.
    """
    if not deltas or any(d < 0 for d in deltas):
        raise ConfigError("noise", f"sweep levels must be >= 0, got {deltas}")
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    if setup is None or not setup.compatible(cfg):
        setup = prepare(cfg)
    out = _fresh_dir(Path(cfg.out), f"sweep-test{cfg.test}-nx{cfg.nx}-N{cfg.N}")
    (out / "config.toml").write_text(dump_config(cfg) + f"deltas = {_toml_value(list(deltas))}\n"
                                     + f"seeds = {_toml_value(list(seeds))}\n")
    clean = reconstruct(setup, replace(cfg, noise=0.0)) if 0 in deltas else None

    def job(delta, seed):
        c = replace(cfg, noise=float(delta), seed=int(seed))
        if delta == 0:
            res = RunResult(clean.data, clean.solution, clean.u, clean.p, dict(clean.values, seed=int(seed)))
        else:
            res = reconstruct(setup, c)
        run_dir = out / f"noise{delta:g}-seed{seed}"
        run_dir.mkdir()
        write_outputs(setup, c, res, run_dir, full=False)
        return res.values

    jobs = [(d, s) for d in deltas for s in seeds]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        runs = list(pool.map(lambda a: job(*a), jobs))
    keys = list(runs[0])
    with open(out / "sweep_runs.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(keys)
        for r in runs:
            wr.writerow([format_value(r[k]) for k in keys])
    stat_keys = [k for k in keys if k.endswith("_relative_error")]
    summary = []
    for d in deltas:
        group = [r for r in runs if r["noise"] == d]
        row: dict = {"noise": float(d), "runs": len(group)}
        for k in stat_keys:
            vals = np.array([r[k] for r in group], dtype=float)
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = 0.0 if np.all(vals == vals[0]) else float(vals.std())
        summary.append(row)
    order = sorted(summary, key=lambda r: -r["noise"])
    monotone = all(a["l2_relative_error_mean"] >= b["l2_relative_error_mean"] for a, b in zip(order, order[1:]))
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(summary[0]))
        for r in summary:
            wr.writerow([format_value(v) for v in r.values()])
    (out / "sweep_trend.txt").write_text(f"l2_error_nonincreasing_as_noise_decreases = {str(monotone).lower()}\n")
    return out, runs, summary


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML file with run settings")
    common.add_argument("--test", help="phantom: 1, 2, 3, 4 or custom")
    common.add_argument("--nx", type=int, help="nodes per side of the square grid")
    common.add_argument("--N", type=int, dest="N", help="number of basis functions")
    common.add_argument("--n-alpha", type=int, dest="n_alpha", help="number of sources")
    common.add_argument("--alpha-bar", type=float, dest="alpha_bar", help="half-length of the source line")
    common.add_argument("--noise", type=float, help="relative noise level delta")
    common.add_argument("--seed", type=int)
    common.add_argument("--eps", type=float, help="regularization parameter")
    common.add_argument("--rtol", type=float, help="CG relative residual target")
    common.add_argument("--maxiter", type=int, help="CG iteration cap")
    common.add_argument("--preconditioner", choices=PRECONDITIONERS)
    common.add_argument("--smooth", type=int, help="smoothing window width in nodes")
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="root directory for run outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="traveltomo", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="one end-to-end reconstruction")
    run.add_argument("--emit-geodesics", action="store_const", const=True, dest="emit_geodesics")
    ns = sub.add_parser("n-study", parents=[common], help="truncation error of the data versus N")
    ns.add_argument("--N-list", dest="N_list", default="10,20,35", type=_int_list)
    sw = sub.add_parser("noise-sweep", parents=[common], help="reconstructions over noise levels and seeds")
    sw.add_argument("--deltas", default="1.2,0.3,0.05,0", type=_float_list)
    sw.add_argument("--seeds", default="0,1,2,3,4", type=_int_list)
    return ap


def _coerce_test(text):
    if text is None or text == "custom":
        return text
    try:
        return int(text)
    except ValueError:
        raise ConfigError("test", f"must be 1, 2, 3, 4 or 'custom', got {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k, None) for k in FIELD_NAMES if k not in ("test", "discs", "medium")}
    try:
        overrides["test"] = _coerce_test(args.test)
        cfg = load_config(args.config, **overrides)
        print(dump_config(cfg), end="")
        if args.command == "run":
            out = run_scenario(cfg)
            print(f"run directory: {out}")
            print((out / "metrics.txt").read_text(), end="")
        elif args.command == "n-study":
            out, rows = n_study(cfg, args.N_list)
            print(f"run directory: {out}")
            for r in rows:
                print(f"N = {r['N']}: max e_N = {r['max']:.6g}, mean e_N = {r['mean']:.6g}")
        else:
            out, _, summary = noise_sweep(cfg, args.deltas, args.seeds)
            print(f"run directory: {out}")
            for r in summary:
                print(f"noise = {r['noise']:g}: mean L2 error {r['l2_relative_error_mean']:.4f} "
                      f"(std {r['l2_relative_error_std']:.4f})")
            print((out / "sweep_trend.txt").read_text(), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, OSError) else EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
