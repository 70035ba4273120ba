import numpy as np
import pytest

from mmfsim.errors import ConfigurationError
from mmfsim.grid import (build_box_mesh, build_lgl_rule, dss_sum,
                         scatter_to_elements)


@pytest.mark.parametrize("N", range(1, 9))
def test_lgl_weights_sum_to_two(N):
    rule = build_lgl_rule(N)
    assert abs(rule.weights.sum() - 2.0) < 1e-14
    assert rule.points[0] == -1.0 and rule.points[-1] == 1.0
    assert np.all(np.diff(rule.points) > 0)


@pytest.mark.parametrize("N", range(1, 9))
def test_lgl_integrates_degree_2n_minus_1(N):
    rule = build_lgl_rule(N)
    rng = np.random.default_rng(10 + N)
    coeffs = rng.standard_normal(2 * N)
    # exact integral over [-1, 1]: odd powers drop out
    exact = sum(c * 2.0 / (k + 1) for k, c in enumerate(coeffs) if k % 2 == 0)
    vals = sum(c * rule.points ** k for k, c in enumerate(coeffs))
    quad = float(rule.weights @ vals)
    assert abs(quad - exact) <= 1e-12 * max(1.0, abs(exact))


@pytest.mark.parametrize("N", range(1, 9))
def test_diff_matrix_exact_on_polynomials(N):
    rule = build_lgl_rule(N)
    for k in range(N + 1):
        deriv = rule.diff_matrix @ rule.points ** k
        expect = k * rule.points ** (k - 1) if k else np.zeros_like(rule.points)
        assert np.max(np.abs(deriv - expect)) < 1e-11


def test_lgl_rejects_bad_order():
    with pytest.raises(ConfigurationError):
        build_lgl_rule(0)
    with pytest.raises(ConfigurationError):
        build_lgl_rule(17)


def test_mesh_counts_2d():
    mesh = build_box_mesh((2.0, 1.0), (4, 3), (3, 2))
    # non-periodic: 4*3+1 and 3*2+1 points per direction
    assert mesh.npts_1d == (13, 7)
    assert mesh.npts == 13 * 7
    assert mesh.nelem == 12
    assert mesh.l2g.shape == (12, 4 * 3)


def test_mesh_counts_periodic_x():
    mesh = build_box_mesh((2.0, 1.0), (4, 3), (3, 2), periodicity=(True,))
    assert mesh.npts_1d == (12, 7)
    # right edge of the last element wraps to global index 0
    assert mesh.coords[:, 0].max() < 2.0


def test_mesh_ordering_x_fastest():
    mesh = build_box_mesh((1.0, 1.0), (2, 2), (2, 2))
    g = mesh.grid_view(mesh.coords[:, 0])
    # every row of the (nz, nx) view is the same ascending x line
    assert np.all(np.diff(g[0]) > 0)
    assert np.allclose(g, g[0][None, :])
    gz = mesh.grid_view(mesh.coords[:, 1])
    assert np.allclose(gz, gz[:, 0][:, None])


def test_mesh_3d_vertical_last():
    mesh = build_box_mesh((1.0, 2.0, 3.0), (2, 2, 2), (2, 2, 2))
    assert mesh.dim == 3
    assert mesh.extents[-1] == 3.0
    assert mesh.coords[:, 2].max() == 3.0
    assert mesh.coords[mesh.bottom_nodes, 2].max() == 0.0
    assert mesh.coords[mesh.top_nodes, 2].min() == 3.0


def test_dss_scatter_adjoint(unit_mesh_2d):
    """<dss(e), g> == <e, scatter(g)> for random inputs, to rounding."""
    mesh = unit_mesh_2d
    rng = np.random.default_rng(3)
    e = rng.standard_normal(mesh.l2g.shape)
    g = rng.standard_normal(mesh.npts)
    lhs = float(dss_sum(mesh, e) @ g)
    rhs = float(np.sum(e * scatter_to_elements(mesh, g)))
    assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_dss_multiplicity(unit_mesh_2d):
    mesh = unit_mesh_2d
    ones = np.ones(mesh.l2g.shape)
    assert np.array_equal(dss_sum(mesh, ones), mesh.multiplicity)


def test_column_view_is_a_copy(small_mesh):
    f = np.arange(small_mesh.npts, dtype=float)
    cols = small_mesh.column_view(f)
    assert cols.shape == (small_mesh.ncols, small_mesh.npts_1d[-1])
    cols[:] = -1.0
    assert f[0] == 0.0  # mutating the column view must not touch the input


def test_column_view_orders_bottom_to_top(small_mesh):
    z = small_mesh.column_view(small_mesh.coords[:, -1])
    assert np.all(np.diff(z, axis=1) > 0)
    x = small_mesh.column_view(small_mesh.coords[:, 0])
    assert np.allclose(x, x[:, :1])  # constant x within a column


def test_mesh_rejects_mismatched_inputs():
    with pytest.raises(ConfigurationError):
        build_box_mesh((1.0, 1.0), (2,), (2, 2))
    with pytest.raises(ConfigurationError):
        build_box_mesh((1.0, -1.0), (2, 2), (2, 2))
