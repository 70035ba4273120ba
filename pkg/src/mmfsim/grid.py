"""Spectral-element grids: LGL rules, structured box meshes, DSS assembly.

The discretization lives on structured tensor-product meshes of affine
quadrilateral (2D) or hexahedral (3D) elements. Each element carries
(N+1)^dim Legendre-Gauss-Lobatto (LGL) nodes; interpolation and
quadrature are collocated there (inexact integration), which lumps the
mass matrix. Fields are flat global nodal vectors ordered
lexicographically (x fastest, then y, then z); `dss_sum` and
`scatter_to_elements` move data between the element-local and global
views. All reductions run in a fixed order so results are independent of
any worker count.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "LglRule",
    "Mesh",
    "build_lgl_rule",
    "build_box_mesh",
    "dss_sum",
    "scatter_to_elements",
]


@dataclass(frozen=True)
class LglRule:
    """Nodes, weights and differentiation matrix of one 1D LGL rule."""

    order: int
    points: np.ndarray       # (N+1,) ascending in [-1, 1]
    weights: np.ndarray      # (N+1,), sum is 2
    diff_matrix: np.ndarray  # (N+1, N+1), D[i, j] = dh_j/dxi at point i


def _legendre_table(x, n):
    """Legendre polynomials P_0..P_n evaluated at x, shape (len(x), n+1)."""
    P = np.zeros((x.size, n + 1))
    P[:, 0] = 1.0
    if n >= 1:
        P[:, 1] = x
    for k in range(2, n + 1):
        P[:, k] = ((2 * k - 1) * x * P[:, k - 1] - (k - 1) * P[:, k - 2]) / k
    return P


def build_lgl_rule(N: int) -> LglRule:
    """Construct the order-N LGL rule.

    Nodes are the roots of (1 - x^2) P_N'(x), found by Newton iteration
    started from Chebyshev-Lobatto points; weights are
    2 / (N (N+1) P_N(x_i)^2). The differentiation matrix uses the
    barycentric form with the negative-sum trick on the diagonal so that
    constants differentiate to zero at machine precision.
    """
    if not isinstance(N, (int, np.integer)) or not 1 <= N <= 16:
        raise ConfigurationError(f"basis order must be an integer in [1, 16], got {N!r}")
    x = -np.cos(np.pi * np.arange(N + 1) / N)
    xold = 2.0 * np.ones_like(x)
    # Newton on x P_N - P_{N-1}, whose interior roots match (1-x^2) P_N'
    while np.max(np.abs(x - xold)) > 1e-14:
        xold = x.copy()
        P = _legendre_table(x, N)
        x = xold - (x * P[:, N] - P[:, N - 1]) / ((N + 1) * P[:, N])
    x[0], x[-1] = -1.0, 1.0
    P = _legendre_table(x, N)
    w = 2.0 / (N * (N + 1) * P[:, N] ** 2)

    # barycentric weights for the Lagrange cardinal functions
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    bw = 1.0 / np.prod(diff, axis=1)
    D = np.zeros((N + 1, N + 1))
    for i in range(N + 1):
        for j in range(N + 1):
            if i != j:
                D[i, j] = (bw[j] / bw[i]) / (x[i] - x[j])
        D[i, i] = -np.sum(D[i, :])
    return LglRule(order=N, points=x, weights=w, diff_matrix=D)


@dataclass(frozen=True)
class Mesh:
    """Structured affine tensor-product spectral-element mesh.

    Directions are ordered (x, z) in 2D and (x, y, z) in 3D; the vertical
    is always last and never periodic. `l2g` maps (element, local node)
    to global node; local nodes are lexicographic with x fastest.
    """

    dim: int
    extents: tuple            # m, per direction
    elem_counts: tuple        # elements per direction
    orders: tuple             # basis order per direction
    periodic: tuple           # lateral periodicity flags, length dim-1
    rules: tuple              # LglRule per direction
    coords: np.ndarray        # (npts, dim) node coordinates, m
    l2g: np.ndarray           # (nelem, nloc) int64
    jac: float                # constant affine Jacobian determinant, m^dim
    metric: tuple             # d(xi)/dx = 2/h per direction, 1/m
    npts: int
    nelem: int
    npts_1d: tuple            # global points per direction
    lumped_1d: tuple = field(repr=False, default=None)  # 1D lumped masses, m
    multiplicity: np.ndarray = field(repr=False, default=None)
    bottom_nodes: np.ndarray = field(repr=False, default=None)
    top_nodes: np.ndarray = field(repr=False, default=None)

    def grid_view(self, f: np.ndarray) -> np.ndarray:
        """Reshape a global field to (nz, nx) or (nz, ny, nx)."""
        return f.reshape(self.npts_1d[::-1])

    def column_view(self, f: np.ndarray) -> np.ndarray:
        """Copy a global field to (ncols, nz), one row per vertical column."""
        g = self.grid_view(f)
        # move z to the last axis and flatten the horizontal axes; always a
        # copy so callers can mutate columns without aliasing the input
        return np.moveaxis(g, 0, -1).copy().reshape(-1, self.npts_1d[-1])

    @property
    def ncols(self) -> int:
        n = 1
        for k in self.npts_1d[:-1]:
            n *= k
        return n


def _index_1d(ne, N, is_periodic):
    """Per-direction map from (element, local node) to global 1D index."""
    n = ne * N if is_periodic else ne * N + 1
    e = np.arange(ne)[:, None]
    i = np.arange(N + 1)[None, :]
    g = e * N + i
    if is_periodic:
        g = g % n
    return g, n


def _coords_1d(ext, ne, N, xi, is_periodic):
    h = ext / ne
    n = ne * N if is_periodic else ne * N + 1
    c = np.empty(n)
    for e in range(ne):
        loc = h * (e + 0.5 * (xi + 1.0))
        if is_periodic and e == ne - 1:
            c[e * N:e * N + N] = loc[:N]
        else:
            c[e * N:e * N + N + 1] = loc
    return c


def build_box_mesh(extents, elem_counts, orders, periodicity=None) -> Mesh:
    """Build a 2D (x, z) or 3D (x, y, z) box mesh of equal affine elements.

    extents/elem_counts are per direction; `orders` is an int or a tuple
    per direction; `periodicity` flags the lateral directions only (the
    vertical direction has boundaries).
    """
    extents = tuple(float(v) for v in np.atleast_1d(extents))
    elem_counts = tuple(int(v) for v in np.atleast_1d(elem_counts))
    dim = len(extents)
    if dim not in (2, 3) or len(elem_counts) != dim:
        raise ConfigurationError(f"need 2 or 3 matching extents/counts, got {extents}, {elem_counts}")
    if any(v <= 0 for v in extents):
        raise ConfigurationError(f"extents must be positive, got {extents}")
    if any(c < 1 for c in elem_counts):
        raise ConfigurationError(f"element counts must be >= 1, got {elem_counts}")
    if np.isscalar(orders):
        orders = (int(orders),) * dim
    else:
        orders = tuple(int(v) for v in orders)
    if periodicity is None:
        periodicity = (False,) * (dim - 1)
    periodic = tuple(bool(v) for v in np.atleast_1d(periodicity))
    if len(periodic) != dim - 1:
        raise ConfigurationError("periodicity flags cover the lateral directions only")

    rules = tuple(build_lgl_rule(N) for N in orders)
    per_all = periodic + (False,)

    gmaps, n1d, c1d = [], [], []
    for d in range(dim):
        g, n = _index_1d(elem_counts[d], orders[d], per_all[d])
        gmaps.append(g)
        n1d.append(n)
        c1d.append(_coords_1d(extents[d], elem_counts[d], orders[d], rules[d].points, per_all[d]))

    h = [extents[d] / elem_counts[d] for d in range(dim)]
    jac = float(np.prod([hv / 2.0 for hv in h]))
    metric = tuple(2.0 / hv for hv in h)

    # direction-major composition; global index I = ix + nx*(iy + ny*iz)
    nelem = int(np.prod(elem_counts))
    if dim == 2:
        # element id e = ex + nex*ez
        l2g = np.empty((nelem, (orders[0] + 1) * (orders[1] + 1)), dtype=np.int64)
        for ez in range(elem_counts[1]):
            gz = gmaps[1][ez]                      # (Nz+1,)
            for ex in range(elem_counts[0]):
                gx = gmaps[0][ex]                  # (Nx+1,)
                gg = gx[None, :] + n1d[0] * gz[:, None]
                l2g[ex + elem_counts[0] * ez] = gg.ravel()
        coords = np.column_stack([np.tile(c1d[0], n1d[1]), np.repeat(c1d[1], n1d[0])])
    else:
        nloc = (orders[0] + 1) * (orders[1] + 1) * (orders[2] + 1)
        l2g = np.empty((nelem, nloc), dtype=np.int64)
        for ez in range(elem_counts[2]):
            gz = gmaps[2][ez]
            for ey in range(elem_counts[1]):
                gy = gmaps[1][ey]
                for ex in range(elem_counts[0]):
                    gx = gmaps[0][ex]
                    gg = (gx[None, None, :]
                          + n1d[0] * (gy[None, :, None] + n1d[1] * gz[:, None, None]))
                    e = ex + elem_counts[0] * (ey + elem_counts[1] * ez)
                    l2g[e] = gg.ravel()
        xx = np.tile(c1d[0], n1d[1] * n1d[2])
        yy = np.tile(np.repeat(c1d[1], n1d[0]), n1d[2])
        zz = np.repeat(c1d[2], n1d[0] * n1d[1])
        coords = np.column_stack([xx, yy, zz])

    npts = int(np.prod(n1d))

    # 1D lumped masses (h/2 * w assembled along each direction)
    lumped = []
    for d in range(dim):
        m = np.zeros(n1d[d])
        contrib = (h[d] / 2.0) * rules[d].weights
        for e in range(elem_counts[d]):
            np.add.at(m, gmaps[d][e], contrib)
        lumped.append(m)

    horiz = int(np.prod(n1d[:-1]))
    bottom = np.arange(horiz, dtype=np.int64)
    top = np.arange(horiz, dtype=np.int64) + horiz * (n1d[-1] - 1)

    mesh = Mesh(
        dim=dim,
        extents=extents,
        elem_counts=elem_counts,
        orders=orders,
        periodic=periodic,
        rules=rules,
        coords=coords,
        l2g=l2g,
        jac=jac,
        metric=metric,
        npts=npts,
        nelem=nelem,
        npts_1d=tuple(n1d),
        lumped_1d=tuple(lumped),
        multiplicity=None,
        bottom_nodes=bottom,
        top_nodes=top,
    )
    mult = dss_sum(mesh, np.ones((nelem, l2g.shape[1])))
    object.__setattr__(mesh, "multiplicity", mult)
    return mesh


def dss_sum(mesh: Mesh, element_local_values: np.ndarray) -> np.ndarray:
    """Direct stiffness summation: sum element-local values into global nodes.

    Accepts (nelem, nloc) or a stacked (nfields, nelem, nloc) array.
    Accumulation order is fixed (flat bincount), so the result is
    bit-reproducible regardless of threading.
    """
    idx = mesh.l2g.ravel()
    if element_local_values.ndim == 2:
        return np.bincount(idx, weights=element_local_values.ravel(), minlength=mesh.npts)
    nf = element_local_values.shape[0]
    out = np.empty((nf, mesh.npts))
    flat = element_local_values.reshape(nf, -1)
    for k in range(nf):
        out[k] = np.bincount(idx, weights=flat[k], minlength=mesh.npts)
    return out


def scatter_to_elements(mesh: Mesh, global_vector: np.ndarray) -> np.ndarray:
    """Gather global nodal values into the element-local layout.

    The adjoint of dss_sum: <dss_sum(v), u> == <v, scatter(u)>.
    """
    return global_vector[..., mesh.l2g]
