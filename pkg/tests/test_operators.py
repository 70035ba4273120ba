import numpy as np
import pytest

from mmfsim.grid import build_box_mesh
from mmfsim.operators import (PrognosticState, build_mass, get_ops, integrate,
                              laplacian_diffusion, weak_divergence,
                              weak_gradient)


def test_mass_totals_domain_measure(unit_mesh_2d, unit_mesh_3d):
    m2 = build_mass(unit_mesh_2d)
    assert abs(m2.entries.sum() - 1.0) < 1e-12
    m3 = build_mass(unit_mesh_3d)
    assert abs(m3.entries.sum() - 1.0) < 1e-12


def test_mass_entries_positive(small_mesh):
    assert np.all(build_mass(small_mesh).entries > 0.0)


def test_integrate_matches_quadrature_degree():
    # orders (4, 3): x exact through degree 7, z through degree 5
    mesh = build_box_mesh((2.0, 1.0), (3, 2), (4, 3))
    x, z = mesh.coords[:, 0], mesh.coords[:, 1]
    got = integrate(mesh, x ** 7 * z ** 5)
    assert abs(got - (2.0 ** 8 / 8.0) * (1.0 / 6.0)) < 1e-12 * 32.0


def test_weak_gradient_exact_on_polynomials(unit_mesh_2d):
    """Nodal derivatives of a global polynomial within the local degree."""
    mesh = unit_mesh_2d
    x, z = mesh.coords[:, 0], mesh.coords[:, 1]
    f = x ** 3 * z ** 2 + 2.0 * z - x
    g = weak_gradient(mesh, f)
    assert np.max(np.abs(g[0] - (3.0 * x ** 2 * z ** 2 - 1.0))) < 1e-11
    assert np.max(np.abs(g[1] - (2.0 * x ** 3 * z + 2.0))) < 1e-11


def test_weak_gradient_3d(unit_mesh_3d):
    mesh = unit_mesh_3d
    x, y, z = mesh.coords.T
    f = x * y + y * z ** 2 + x ** 2
    g = weak_gradient(mesh, f)
    assert np.max(np.abs(g[0] - (y + 2.0 * x))) < 1e-11
    assert np.max(np.abs(g[1] - (x + z ** 2))) < 1e-11
    assert np.max(np.abs(g[2] - 2.0 * y * z)) < 1e-11


def test_weak_divergence_of_linear_field(unit_mesh_2d):
    mesh = unit_mesh_2d
    x, z = mesh.coords[:, 0], mesh.coords[:, 1]
    vec = np.stack([3.0 * x + z, -2.0 * z])
    d = weak_divergence(mesh, vec)
    assert np.max(np.abs(d - 1.0)) < 1e-12


def test_gradient_of_constant_vanishes(small_mesh):
    g = weak_gradient(small_mesh, np.full(small_mesh.npts, 7.25))
    assert np.max(np.abs(g)) < 1e-12


def test_laplacian_symmetric_negative(unit_mesh_2d):
    """The weak Laplacian is self-adjoint in the lumped inner product
    and dissipative: <f, L g> = <g, L f> and <f, L f> <= 0."""
    mesh = unit_mesh_2d
    mass = build_mass(mesh).entries
    rng = np.random.default_rng(11)
    f = rng.standard_normal(mesh.npts)
    g = rng.standard_normal(mesh.npts)
    lap = get_ops(mesh).laplacian
    lhs = float((mass * lap(f)) @ g)
    rhs = float((mass * lap(g)) @ f)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))
    quad = float((mass * lap(f)) @ f)
    assert quad <= 1e-10


def test_laplacian_kills_constants(small_mesh):
    lap = get_ops(small_mesh).laplacian(np.ones(small_mesh.npts))
    assert np.max(np.abs(lap)) < 1e-10


def test_diffusion_zero_viscosity_is_exact(small_mesh):
    f = np.sin(small_mesh.coords[:, 0])
    out = laplacian_diffusion(small_mesh, f, 0.0)
    assert np.all(out == 0.0)


def test_diffusion_scales_linearly(small_mesh):
    f = np.sin(2.0 * np.pi * small_mesh.coords[:, 0] / 50e3)
    one = laplacian_diffusion(small_mesh, f, 1.0)
    assert np.allclose(laplacian_diffusion(small_mesh, f, 200.0), 200.0 * one)


def test_batched_gradient_matches_single(unit_mesh_2d):
    mesh = unit_mesh_2d
    rng = np.random.default_rng(4)
    fields = rng.standard_normal((3, mesh.npts))
    batched = get_ops(mesh).grad(fields)
    for i in range(3):
        single = weak_gradient(mesh, fields[i])
        assert np.max(np.abs(batched[i] - single)) < 1e-13


def test_state_vector_round_trip():
    n = 17
    rng = np.random.default_rng(0)
    st = PrognosticState(rng.standard_normal(n), rng.standard_normal((2, n)),
                         rng.standard_normal(n), rng.standard_normal(n),
                         rng.standard_normal(n), rng.standard_normal(n))
    back = PrognosticState.from_vector(st.as_vector(), dim=2)
    for name in ("rho_p", "theta_vp", "q_vp", "q_c", "q_r"):
        assert np.array_equal(getattr(st, name), getattr(back, name))
    assert np.array_equal(st.u, back.u)


def test_state_field_names_track_dim():
    st2 = PrognosticState.zeros(build_box_mesh((1.0, 1.0), (1, 1), (2, 2)))
    assert st2.field_names() == ("rho_p", "u", "w", "theta_vp", "q_vp", "q_c", "q_r")
    st3 = PrognosticState.zeros(build_box_mesh((1.0, 1.0, 1.0), (1, 1, 1), (2, 2, 2)))
    assert "v" in st3.field_names() and st3.nfields == 8
