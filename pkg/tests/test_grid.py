import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from traveltomo.grid import (
    Grid2D,
    GridMismatchError,
    ScalarField,
    VectorField,
    discrete_norms,
    dx_forward,
    dz_forward,
    read_field_binary,
    read_field_csv,
    write_field_binary,
    write_field_csv,
)


@pytest.fixture
def omega():
    return Grid2D.square(21)


def test_steps_and_coordinates(omega):
    assert omega.hx == pytest.approx(0.1)
    assert omega.hz == pytest.approx(0.1)
    assert omega.x[0] == -1.0 and omega.x[-1] == pytest.approx(1.0)
    assert omega.z[0] == 1.0 and omega.z[-1] == pytest.approx(3.0)


def test_rejects_bad_geometry():
    with pytest.raises(ValueError):
        Grid2D(R=1.0, a=2.0, b=1.0, Nx=5, Nz=5)
    with pytest.raises(ValueError):
        Grid2D(R=1.0, a=1.0, b=3.0, Nx=2, Nz=5)


def test_interior_boundary_partition(omega):
    inner = omega.interior_mask()
    assert inner.sum() == 19 * 19
    assert not (inner & omega.boundary_mask()).any()
    nodes = omega.boundary_nodes()
    assert len(nodes) == 4 * 20
    assert len({tuple(p) for p in nodes}) == len(nodes)
    assert omega.boundary_mask()[nodes[:, 0], nodes[:, 1]].all()


def test_outward_normals_unit(omega):
    n = omega.outward_normals()
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)
    nodes = omega.boundary_nodes()
    bottom = (nodes[:, 1] == 0) & (nodes[:, 0] > 0) & (nodes[:, 0] < 20)
    np.testing.assert_allclose(n[bottom], [[0.0, -1.0]] * bottom.sum())


def test_forward_difference_of_constant_is_zero(omega):
    f = ScalarField(omega, np.full(omega.shape, 3.7))
    assert np.all(dx_forward(f).values == 0)
    assert np.all(dz_forward(f).values == 0)


def test_forward_difference_exact_for_affine():
    g = Grid2D(R=1.0, a=1.0, b=3.0, Nx=5, Nz=9)  # hx = 0.5
    X, Z = g.mesh()
    np.testing.assert_allclose(dx_forward(ScalarField(g, X)).values, 1.0, atol=1e-14)
    np.testing.assert_allclose(dz_forward(ScalarField(g, 2 * Z - X)).values, 2.0, atol=1e-13)


def test_forward_difference_of_square(omega):
    X, _ = omega.mesh()
    d = dx_forward(ScalarField(omega, X**2)).values
    i0 = int(np.argmin(np.abs(omega.x)))
    # ((x+h)^2 - x^2)/h = 2x + h at x = 0, h = 0.1
    assert d[i0, 5] == pytest.approx(0.1, abs=1e-12)


def test_last_row_is_flagged_extrapolation(omega):
    X, _ = omega.mesh()
    d = dx_forward(ScalarField(omega, X**2))
    assert d.extrapolated == "x"
    np.testing.assert_allclose(d.values[-1], d.values[-2])


def test_forward_difference_first_order():
    errs = []
    for n in (21, 41, 81):
        g = Grid2D.square(n)
        X, Z = g.mesh()
        d = dx_forward(ScalarField(g, np.sin(2 * X) * Z)).values[:-1]
        errs.append(np.abs(d - 2 * np.cos(2 * X[:-1]) * Z[:-1]).max())
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 2.0) <= 0.5)


def test_norms_of_zero_and_one(omega):
    assert discrete_norms(ScalarField(omega, np.zeros(omega.shape))) == (0.0, 0.0)
    l2, h1 = discrete_norms(ScalarField(omega, np.ones(omega.shape)))
    # uniform node weight hx*hz: 21*21 * 0.01 = 4.41
    assert l2 == pytest.approx(np.sqrt(4.41))
    assert h1 == pytest.approx(l2)


@given(sx=st.floats(-3, 3), sz=st.floats(-3, 3), c=st.floats(-2, 2))
@settings(max_examples=30, deadline=None)
def test_norms_of_affine_fields(sx, sz, c):
    g = Grid2D(R=1.0, a=1.0, b=3.0, Nx=7, Nz=9)
    X, Z = g.mesh()
    v = sx * X + sz * Z + c
    l2, h1 = discrete_norms(ScalarField(g, v))
    w = g.hx * g.hz
    assert l2**2 == pytest.approx(w * np.sum(v**2), rel=1e-12, abs=1e-12)
    slopes = (g.Nx - 1) * (g.Nz - 1) * (sx**2 + sz**2)
    assert h1**2 == pytest.approx(l2**2 + w * slopes, rel=1e-9, abs=1e-9)


def test_field_validation(omega):
    with pytest.raises(GridMismatchError):
        ScalarField(omega, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ScalarField(omega, np.full(omega.shape, np.nan))
    with pytest.raises(GridMismatchError):
        VectorField(omega, np.zeros(omega.shape))


def test_fields_are_read_only(omega):
    f = ScalarField(omega, np.zeros(omega.shape))
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


@pytest.mark.parametrize("ncomp", [1, 3])
def test_csv_and_binary_round_trip(tmp_path, ncomp):
    g = Grid2D(R=1.0, a=1.0, b=3.0, Nx=4, Nz=5)
    rng = np.random.default_rng(0)
    f = ScalarField(g, rng.normal(size=g.shape)) if ncomp == 1 else VectorField(g, rng.normal(size=g.shape + (ncomp,)))
    write_field_csv(f, tmp_path / "f.csv")
    np.testing.assert_array_equal(read_field_csv(tmp_path / "f.csv", g).values, f.values)
    write_field_binary(f, tmp_path / "f.bin")
    back = read_field_binary(tmp_path / "f.bin")
    assert back.grid == g
    np.testing.assert_array_equal(back.values, f.values)
    assert (tmp_path / "f.bin").read_bytes()[:4] == b"TTF1"


def test_csv_layout_z_outer(tmp_path):
    g = Grid2D(R=1.0, a=1.0, b=3.0, Nx=3, Nz=3)
    X, Z = g.mesh()
    write_field_csv(ScalarField(g, X), tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "x,z,value"
    assert lines[1].split(",")[:2] == ["-1.0", "1.0"]
    assert lines[2].split(",")[:2] == ["0.0", "1.0"]
