import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluidctl import grid as G
from fluidctl.grid import (BoundarySpec, EmitterLayout, GridSpec, ScalarField,
                           StaggeredVectorField)

from oracles import divergence_loop, gradient_loop, laplacian_matrix


def rand_vec(grid, rng):
    return StaggeredVectorField(grid, tuple(rng.normal(size=grid.face_shape(a)) for a in range(grid.ndim)))


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


dims_strategy = st.lists(st.integers(4, 8), min_size=2, max_size=3).map(tuple)


# --------------------------------------------------------------------------
# geometry


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec((3, 8), 1.0)
    with pytest.raises(ValueError):
        GridSpec((8, 8), 0.0)
    with pytest.raises(ValueError):
        GridSpec((8,), 1.0)


@given(dims_strategy, st.floats(0.1, 10.0))
def test_domain_extent_exact(dims, h):
    g = GridSpec(dims, h)
    assert g.domain_extent == tuple(n * h for n in dims)
    assert g.n_cells == int(np.prod(dims))


def test_field_shapes_enforced():
    g = GridSpec((4, 5), 1.0)
    with pytest.raises(ValueError):
        ScalarField(g, np.zeros((5, 4)))
    with pytest.raises(ValueError):
        StaggeredVectorField(g, (np.zeros((4, 5)), np.zeros((4, 6))))
    v = StaggeredVectorField.zeros(g)
    assert v[0].shape == (5, 5) and v[1].shape == (4, 6)


def test_default_boundary_bottom_is_inflow_rest_open():
    g = GridSpec((8, 8, 8), 1.0)
    bc = BoundarySpec.default(g)
    assert bc.kinds[2] == (G.INFLOW, G.OPEN)
    assert bc.kinds[0] == (G.OPEN, G.OPEN) and bc.kinds[1] == (G.OPEN, G.OPEN)


# --------------------------------------------------------------------------
# divergence


def test_divergence_of_uniform_field_is_zero():
    g = GridSpec((6, 6, 6), 2.0)
    v = StaggeredVectorField.uniform(g, (1.5, 1.5, 1.5))
    assert np.all(G.divergence(v).values == 0.0)


def test_divergence_of_linear_x_is_one():
    g = GridSpec((6, 5, 4), 0.5)
    v = StaggeredVectorField.from_function(g, lambda axis, x, y, z: x if axis == 0 else 0 * x)
    np.testing.assert_allclose(G.divergence(v).values, 1.0, rtol=1e-12)


@given(dims_strategy, st.integers(0, 2**32 - 1))
def test_divergence_matches_flux_oracle(dims, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(dims, rng.uniform(0.5, 3.0))
    v = rand_vec(g, rng)
    assert rel(G.divergence(v).values, divergence_loop(v.components, dims, g.cell_size)) <= 1e-12


# --------------------------------------------------------------------------
# gradient


def test_gradient_of_constant_is_zero_inside():
    g = GridSpec((6, 6), 1.0)
    gp = G.gradient(ScalarField(g, np.full(g.dims, 3.0)))
    assert np.all(gp[0][1:-1] == 0.0) and np.all(gp[1][:, 1:-1] == 0.0)


def test_gradient_of_linear_x_is_one_on_interior_faces():
    g = GridSpec((7, 5, 4), 0.25)
    p = ScalarField.from_function(g, lambda *x: x[0])
    np.testing.assert_allclose(G.gradient(p)[0][1:-1], 1.0, rtol=1e-12)


@given(dims_strategy, st.integers(0, 2**32 - 1))
def test_gradient_matches_difference_oracle(dims, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(dims, rng.uniform(0.5, 3.0))
    bc = BoundarySpec.default(g)
    p = rng.normal(size=dims)
    got = G.gradient(ScalarField(g, p), bc)
    want = gradient_loop(p, dims, g.cell_size, bc.kinds)
    for a in range(g.ndim):
        assert rel(got[a], want[a]) <= 1e-12


@given(dims_strategy, st.integers(0, 2**32 - 1))
def test_div_grad_is_the_standard_laplacian(dims, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(dims, rng.uniform(0.5, 3.0))
    bc = BoundarySpec.default(g)
    p = rng.normal(size=dims)
    lap = G.divergence(G.gradient(ScalarField(g, p), bc)).values
    want = (laplacian_matrix(dims, g.cell_size, bc.kinds) @ p.ravel()).reshape(dims)
    assert rel(lap, want) <= 1e-12
    assert rel(G.laplacian_arrays(p, g, bc), want) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_operators_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    g = GridSpec((5, 6, 4), 1.3)
    f1, f2 = rand_vec(g, rng), rand_vec(g, rng)
    lhs = G.divergence(f1 * a + f2 * b).values
    rhs = a * G.divergence(f1).values + b * G.divergence(f2).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))
    p1, p2 = ScalarField(g, rng.normal(size=g.dims)), ScalarField(g, rng.normal(size=g.dims))
    lhs = G.gradient(p1 * a + p2 * b)
    rhs = G.gradient(p1) * a + G.gradient(p2) * b
    for i in range(3):
        assert np.max(np.abs(lhs[i] - rhs[i])) <= 1e-12 * max(1.0, np.max(np.abs(rhs[i])))


def test_gradient_is_negative_adjoint_of_divergence():
    rng = np.random.default_rng(3)
    g = GridSpec((5, 7, 6), 0.7)
    bc = BoundarySpec(((G.WALL, G.WALL), (G.WALL, G.WALL), (G.WALL, G.WALL)))
    p = ScalarField(g, rng.normal(size=g.dims))
    v = rand_vec(g, rng)
    # with every face closed the interior boundary flux vanishes
    v = StaggeredVectorField(g, tuple(G._zero_closed_faces(v.components, bc)))
    lhs = G.gradient(p, bc).vdot(v)
    rhs = -p.vdot(G.divergence(v))
    assert abs(lhs - rhs) <= 1e-12 * abs(rhs)


# --------------------------------------------------------------------------
# sampling


def test_sample_at_cell_center_returns_value():
    rng = np.random.default_rng(0)
    g = GridSpec((6, 5, 4), 2.0)
    f = ScalarField(g, rng.normal(size=g.dims))
    pts = g.cell_centers().reshape(-1, 3)
    np.testing.assert_array_equal(G.sample(f, pts), f.values.ravel())


def test_sample_midpoint_is_average():
    g = GridSpec((4, 4), 1.0)
    vals = np.zeros((4, 4))
    vals[1, 2], vals[2, 2] = 2.0, 4.0
    assert G.sample(ScalarField(g, vals), np.array([[2.0, 2.5]]))[0] == pytest.approx(3.0, abs=1e-15)


def test_sample_linear_field_exact():
    rng = np.random.default_rng(1)
    g = GridSpec((8, 7, 6), 1.5)
    f = ScalarField.from_function(g, lambda x, y, z: x + 2 * y + 3 * z)
    # interior of the cell-centre lattice, where no clamping happens
    lo = np.full(3, 0.5 * g.cell_size)
    hi = np.array(g.domain_extent) - 0.5 * g.cell_size
    pts = rng.uniform(lo, hi, size=(100, 3))
    want = pts[:, 0] + 2 * pts[:, 1] + 3 * pts[:, 2]
    assert np.max(np.abs(G.sample(f, pts) - want)) <= 1e-12 * np.max(np.abs(want))


def test_sample_staggered_linear_exact_on_each_face_lattice():
    rng = np.random.default_rng(2)
    g = GridSpec((8, 6), 1.0)
    coef = np.array([[1.0, -2.0], [0.5, 3.0]])
    v = StaggeredVectorField.from_function(g, lambda a, x, y: coef[a, 0] * x + coef[a, 1] * y)
    pts = rng.uniform([0.5, 0.5], [7.5, 5.5], size=(50, 2))
    np.testing.assert_allclose(G.sample(v, pts), pts @ coef.T, rtol=1e-12, atol=1e-12)


def test_sample_clamps_outside_points():
    g = GridSpec((4, 4), 1.0)
    f = ScalarField.from_function(g, lambda *x: x[0])
    assert G.sample(f, np.array([[-10.0, 2.0]]))[0] == pytest.approx(0.5)
    assert G.sample(f, np.array([[99.0, 2.0]]))[0] == pytest.approx(3.5)


# --------------------------------------------------------------------------
# boundary conditions and emitters


def _paper_like_grid():
    # 32 cells: the patch (2 cells) sits exactly on face boundaries
    return GridSpec((32, 32), 100.0 / 32)


def test_zero_controls_close_the_bottom():
    rng = np.random.default_rng(4)
    g = _paper_like_grid()
    lay = EmitterLayout.regular(g)
    v = G.apply_boundary(rand_vec(g, rng), BoundarySpec.default(g), np.zeros(8), lay)
    assert np.all(v[1][:, 0] == 0.0)


def test_single_emitter_is_local():
    g = _paper_like_grid()
    lay = EmitterLayout.regular(g)
    u = np.zeros(8)
    u[3] = 1.0
    v = G.apply_boundary(StaggeredVectorField.zeros(g), BoundarySpec.default(g), u, lay)
    bottom = v[1][:, 0]
    lo = g.cell_size * np.arange(32)
    inside = (lo >= lay.centers[3, 0] - g.cell_size) & (lo + g.cell_size <= lay.centers[3, 0] + g.cell_size)
    assert inside.sum() == 2
    np.testing.assert_array_equal(bottom[inside], lay.u_max)
    np.testing.assert_array_equal(bottom[~inside], 0.0)


def test_inflow_flux_summation_3d():
    g = GridSpec((16, 16, 16), 100.0 / 16)
    lay = EmitterLayout.regular(g)
    assert lay.count == 64
    c = 0.37
    v = G.apply_boundary(StaggeredVectorField.zeros(g), BoundarySpec.default(g), np.full(64, c), lay)
    flux = 0.0
    for i in range(16):
        for j in range(16):
            flux += v[2][i, j, 0] * g.cell_size**2
    assert flux == pytest.approx(c * lay.u_max * lay.patch_area * 64, rel=1e-12)


def test_open_faces_copy_interior_and_idempotent():
    rng = np.random.default_rng(5)
    g = GridSpec((6, 5, 7), 1.0)
    bc = BoundarySpec.default(g)
    lay = EmitterLayout.regular(g)
    u = rng.uniform(size=lay.count)
    v1 = G.apply_boundary(rand_vec(g, rng), bc, u, lay)
    np.testing.assert_array_equal(v1[0][0], v1[0][1])
    np.testing.assert_array_equal(v1[0][-1], v1[0][-2])
    np.testing.assert_array_equal(v1[2][:, :, -1], v1[2][:, :, -2])
    v2 = G.apply_boundary(v1, bc, u, lay)
    for a in range(3):
        np.testing.assert_array_equal(v1[a], v2[a])


def test_wrong_control_count_rejected():
    g = GridSpec((16, 16), 1.0)
    lay = EmitterLayout.regular(g)
    with pytest.raises(ValueError):
        G.apply_boundary(StaggeredVectorField.zeros(g), BoundarySpec.default(g), np.zeros(7), lay)


def test_fields_are_immutable():
    g = GridSpec((4, 4), 1.0)
    f = ScalarField.zeros(g)
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0
