"""Moist compressible dynamics over a hydrostatic reference state.

The prognostics are perturbations (rho', theta_v', q_v') around
height-dependent reference profiles in discrete hydrostatic balance,
plus full velocity and the condensate mixing ratios q_c, q_r. This
module evaluates the full nonlinear tendency S(q) (advection, pressure
gradient, buoyancy with water loading, viscosity, Rayleigh damping of
vertical velocity near the model top), builds the reference state from
a sounding, and applies the Boyd-Vandeven modal filter.

Microphysical sources are deliberately absent from S(q); they are
applied as an operator-split update by the microphysics module.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import erfc

from .errors import ConfigurationError, StateError
from .grid import Mesh, build_lgl_rule
from .operators import PrognosticState, get_ops

__all__ = [
    "PhysConstants",
    "DEFAULT_CONSTANTS",
    "Sounding",
    "read_sounding",
    "write_sounding",
    "ReferenceState",
    "SpongeConfig",
    "equation_of_state",
    "exner_function",
    "build_reference",
    "evaluate_rhs",
    "sponge_profile",
    "apply_filter",
    "filter_field",
    "boyd_vandeven_transfer",
    "density_perturbation_for_theta",
]


@dataclass(frozen=True)
class PhysConstants:
    g: float = 9.81          # m/s2
    R_d: float = 287.0       # J/(kg K)
    R_v: float = 461.5       # J/(kg K)
    c_p: float = 1004.0      # J/(kg K)
    p00: float = 1.0e5       # Pa, Exner reference pressure
    L_v: float = 2.5e6       # J/kg, latent heat of vaporization
    nu: float = 0.0          # m2/s, artificial viscosity

    @property
    def eps(self) -> float:
        """R_v/R_d - 1, about 0.608 for standard air/vapor constants."""
        return self.R_v / self.R_d - 1.0

    @property
    def c_v(self) -> float:
        return self.c_p - self.R_d

    def with_nu(self, nu: float) -> "PhysConstants":
        return replace(self, nu=float(nu))


DEFAULT_CONSTANTS = PhysConstants()


# ---------------------------------------------------------------------------
# soundings

@dataclass
class Sounding:
    """Vertical profile table: z (m), theta (K), qv (kg/kg), u, v (m/s)."""

    z: np.ndarray
    theta: np.ndarray
    qv: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p_surf: float  # Pa

    def __post_init__(self):
        if self.z.ndim != 1 or np.any(np.diff(self.z) <= 0):
            raise ConfigurationError("sounding heights must be strictly increasing")


def read_sounding(path) -> Sounding:
    """Read the plain-text sounding format.

    One header line, then rows `z_m theta_K qv_kgkg u_ms v_ms`; the
    first data row carries the surface pressure in Pa as a sixth column.
    """
    rows = []
    p_surf = None
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 3:
        raise ConfigurationError(f"sounding file {path} is too short")
    for k, ln in enumerate(lines[1:]):
        parts = ln.split()
        if k == 0:
            if len(parts) != 6:
                raise ConfigurationError("first sounding row must carry p_surf_Pa as a 6th column")
            p_surf = float(parts[5])
            parts = parts[:5]
        if len(parts) != 5:
            raise ConfigurationError(f"bad sounding row: {ln!r}")
        rows.append([float(v) for v in parts])
    arr = np.array(rows)
    return Sounding(z=arr[:, 0], theta=arr[:, 1], qv=arr[:, 2],
                    u=arr[:, 3], v=arr[:, 4], p_surf=p_surf)


def write_sounding(snd: Sounding, path) -> None:
    with open(path, "w") as fh:
        fh.write("z_m theta_K qv_kgkg u_ms v_ms [p_surf_Pa on first line]\n")
        for k in range(snd.z.size):
            row = f"{snd.z[k]:.6f} {snd.theta[k]:.10g} {snd.qv[k]:.10g} {snd.u[k]:.10g} {snd.v[k]:.10g}"
            if k == 0:
                row += f" {snd.p_surf:.10g}"
            fh.write(row + "\n")


# ---------------------------------------------------------------------------
# equation of state

def equation_of_state(rho, theta_v=None, T=None, q_v=None,
                      constants: PhysConstants = DEFAULT_CONSTANTS):
    """Pressure of moist air from density plus either theta_v or T.

    With T: p = rho R_d T (1 + eps q_v)  (virtual temperature form).
    With theta_v: the Exner inversion p = p00 (rho R_d theta_v / p00)^(c_p/c_v).
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0.0):
        raise StateError("non-positive density in equation of state")
    if (theta_v is None) == (T is None):
        raise ConfigurationError("give exactly one of theta_v or T")
    if T is not None:
        qv = 0.0 if q_v is None else q_v
        Tv = np.asarray(T) * (1.0 + constants.eps * np.asarray(qv))
        return rho * constants.R_d * Tv
    return constants.p00 * (rho * constants.R_d * np.asarray(theta_v)
                            / constants.p00) ** (constants.c_p / constants.c_v)


def exner_function(p, constants: PhysConstants = DEFAULT_CONSTANTS):
    """Pi = (p/p00)^(R_d/c_p)."""
    return (np.asarray(p) / constants.p00) ** (constants.R_d / constants.c_p)


# ---------------------------------------------------------------------------
# reference state

@dataclass
class ReferenceState:
    """Hydrostatically balanced profiles sampled at every grid node.

    rho0 satisfies the theta_v-form equation of state against p0 exactly
    at the nodes, so a zero-perturbation state has p' identically zero.
    """

    rho0: np.ndarray       # kg/m3
    theta_v0: np.ndarray   # K
    q_v0: np.ndarray       # kg/kg
    p0: np.ndarray         # Pa
    exner0: np.ndarray
    dtheta_v0_dz: np.ndarray
    dq_v0_dz: np.ndarray
    z1d: np.ndarray        # vertical node coordinates, m
    u0_1d: np.ndarray      # sounding wind at the vertical nodes, m/s
    v0_1d: np.ndarray
    rho0_1d: np.ndarray
    p0_1d: np.ndarray
    theta_v0_1d: np.ndarray
    q_v0_1d: np.ndarray
    p_surf: float
    rho0_surf: float


def _weak_ddz_1d(vals, ne, N, h, rule):
    """Weak (mass-averaged) vertical derivative on a 1D LGL element line."""
    num = np.zeros(vals.size)
    den = np.zeros(vals.size)
    scale = 2.0 / h
    for e in range(ne):
        idx = slice(e * N, e * N + N + 1)
        num[idx] += rule.weights * (scale * (rule.diff_matrix @ vals[idx]))
        den[idx] += rule.weights
    return num / den


def _cumulative_integral_1d(vals, ne, N, h, rule):
    """Antiderivative (zero at z=0) of a nodal profile, element by element.

    Each element's nodal values define a degree-N Legendre fit that is
    integrated exactly; continuity fixes the constant per element.
    """
    from numpy.polynomial import legendre as L

    out = np.empty(vals.size)
    start = 0.0
    xi = rule.points
    for e in range(ne):
        idx = slice(e * N, e * N + N + 1)
        coef = L.legfit(xi, vals[idx], N)
        anti = L.legint(coef)
        base = L.legval(-1.0, anti)
        out[idx] = start + 0.5 * h * (L.legval(xi, anti) - base)
        start = out[idx][-1]
    return out


def build_reference(sounding: Sounding, mesh: Mesh,
                    constants: PhysConstants = DEFAULT_CONSTANTS) -> ReferenceState:
    """Interpolate the sounding and integrate hydrostatic balance.

    theta_v0 and q_v0 come from monotone piecewise-cubic interpolation;
    the Exner pressure solves d(pi)/dz = -g/(c_p theta_v0) by exact
    per-element polynomial integration, and rho0 follows from the
    equation of state so the discrete balance is consistent to rounding.
    """
    Lz = mesh.extents[-1]
    if sounding.z[0] > 0.0 or sounding.z[-1] < Lz:
        raise ConfigurationError(
            f"sounding covers [{sounding.z[0]}, {sounding.z[-1]}] m but the domain "
            f"needs [0, {Lz}] m (extrapolation is not allowed)")

    ne = mesh.elem_counts[-1]
    N = mesh.orders[-1]
    rule = mesh.rules[-1]
    h = Lz / ne
    nz = mesh.npts_1d[-1]
    z1d = np.empty(nz)
    for e in range(ne):
        z1d[e * N:e * N + N + 1] = h * (e + 0.5 * (rule.points + 1.0))

    th = PchipInterpolator(sounding.z, sounding.theta)(z1d)
    qv = PchipInterpolator(sounding.z, sounding.qv)(z1d)
    u0 = PchipInterpolator(sounding.z, sounding.u)(z1d)
    v0 = PchipInterpolator(sounding.z, sounding.v)(z1d)
    theta_v = th * (1.0 + constants.eps * qv)

    integrand = -constants.g / (constants.c_p * theta_v)
    pi_surf = (sounding.p_surf / constants.p00) ** (constants.R_d / constants.c_p)
    pi = pi_surf + _cumulative_integral_1d(integrand, ne, N, h, rule)
    if np.any(pi <= 0.0):
        raise ConfigurationError("hydrostatic Exner pressure fell to zero inside the domain")
    p0 = constants.p00 * pi ** (constants.c_p / constants.R_d)
    rho0 = constants.p00 * pi ** (constants.c_v / constants.R_d) / (constants.R_d * theta_v)

    dth = _weak_ddz_1d(theta_v, ne, N, h, rule)
    dqv = _weak_ddz_1d(qv, ne, N, h, rule)

    ncols = int(np.prod(mesh.npts_1d[:-1]))

    def to_nodes(profile):
        # x runs fastest in the global ordering, z slowest
        return np.repeat(profile, ncols)

    return ReferenceState(
        rho0=to_nodes(rho0),
        theta_v0=to_nodes(theta_v),
        q_v0=to_nodes(qv),
        p0=to_nodes(p0),
        exner0=to_nodes(pi),
        dtheta_v0_dz=to_nodes(dth),
        dq_v0_dz=to_nodes(dqv),
        z1d=z1d,
        u0_1d=u0,
        v0_1d=v0,
        rho0_1d=rho0,
        p0_1d=p0,
        theta_v0_1d=theta_v,
        q_v0_1d=qv,
        p_surf=float(sounding.p_surf),
        rho0_surf=float(rho0[0]),
    )


def density_perturbation_for_theta(reference: ReferenceState, theta_p: np.ndarray) -> np.ndarray:
    """rho' of a pressure-balanced thermal: gas law at unchanged p0.

    Warm anomalies (theta_p > 0) give rho' < 0 and hence upward buoyancy.
    """
    return -reference.rho0 * theta_p / (reference.theta_v0 + theta_p)


# ---------------------------------------------------------------------------
# sponge layer

@dataclass(frozen=True)
class SpongeConfig:
    z_b: float    # m, bottom of the damping layer
    z_t: float    # m, model top
    R_max: float  # 1/s

    def __post_init__(self):
        if not (0.0 <= self.z_b < self.z_t) or self.R_max < 0.0:
            raise ConfigurationError(f"bad sponge config {self}")


def sponge_profile(z, cfg: SpongeConfig):
    """R_w(z) = R_max sin^2((pi/2)(z - z_b)/(z_t - z_b)), zero below z_b."""
    z = np.asarray(z, dtype=float)
    s = np.sin(0.5 * np.pi * (z - cfg.z_b) / (cfg.z_t - cfg.z_b)) ** 2
    return np.where(z <= cfg.z_b, 0.0, cfg.R_max * s)


# ---------------------------------------------------------------------------
# nonlinear tendency

def evaluate_rhs(state: PrognosticState, reference: ReferenceState, mesh: Mesh,
                 constants: PhysConstants = DEFAULT_CONSTANTS,
                 sponge_rw=None) -> PrognosticState:
    """Full nonlinear tendency S(q); no microphysical sources.

    sponge_rw is the nodal damping profile R_w(z) (or None). Vertical
    velocity tendencies at the impermeable bottom/top boundaries are
    zeroed (strong no-normal-flow).
    """
    ops = get_ops(mesh)
    dim = mesh.dim
    rho = reference.rho0 + state.rho_p
    if np.min(rho) <= 0.0:
        raise StateError("vacuum: rho0 + rho' <= 0 somewhere")

    theta_v = reference.theta_v0 + state.theta_vp
    p = equation_of_state(rho, theta_v=theta_v, constants=constants)
    p_prime = p - reference.p0

    # one batched weak-gradient call: velocity, scalars, pressure
    stack = np.vstack([state.u, state.theta_vp, state.q_vp, state.q_c, state.q_r,
                       p_prime[None, :]])
    grads = ops.grad(stack)                       # (dim+5, dim, npts)
    gu = grads[:dim]
    g_thp, g_qvp, g_qc, g_qr, g_pp = grads[dim], grads[dim + 1], grads[dim + 2], grads[dim + 3], grads[dim + 4]

    def advect(g):
        acc = state.u[0] * g[0]
        for d in range(1, dim):
            acc = acc + state.u[d] * g[d]
        return acc

    w = state.u[-1]
    d_rho = -ops.div(rho * state.u)

    du = np.empty_like(state.u)
    for d in range(dim):
        du[d] = -advect(gu[d]) - g_pp[d] / rho
    buoy = state.rho_p / rho - constants.eps * state.q_vp + state.q_c + state.q_r
    du[-1] -= constants.g * buoy
    if sponge_rw is not None:
        du[-1] -= sponge_rw * w

    d_th = -advect(g_thp) - w * reference.dtheta_v0_dz
    d_qv = -advect(g_qvp) - w * reference.dq_v0_dz
    d_qc = -advect(g_qc)
    d_qr = -advect(g_qr)

    if constants.nu != 0.0:
        lap = ops.laplacian(np.vstack([state.u, state.theta_vp, state.q_vp,
                                       state.q_c, state.q_r]))
        du += constants.nu * lap[:dim]
        d_th += constants.nu * lap[dim]
        d_qv += constants.nu * lap[dim + 1]
        d_qc += constants.nu * lap[dim + 2]
        d_qr += constants.nu * lap[dim + 3]

    du[-1][mesh.bottom_nodes] = 0.0
    du[-1][mesh.top_nodes] = 0.0
    return PrognosticState(rho_p=d_rho, u=du, theta_vp=d_th, q_vp=d_qv,
                           q_c=d_qc, q_r=d_qr)


# ---------------------------------------------------------------------------
# Boyd-Vandeven filter

_FILTER_ORDER = 12


def boyd_vandeven_transfer(eta):
    """Erf-log low-pass transfer of order 12 on [0, 1]; 1 at 0, 0 at 1."""
    eta = np.asarray(eta, dtype=float)
    xbar = np.abs(eta) - 0.5
    sq = 4.0 * xbar * xbar
    inner = np.where((sq > 0.0) & (sq < 1.0), sq, 0.5)
    chi = np.sqrt(-np.log1p(-inner) / inner)
    chi = np.where(np.abs(xbar) < 1e-300, 1.0, chi)
    sigma = 0.5 * erfc(2.0 * np.sqrt(_FILTER_ORDER) * xbar * chi)
    sigma = np.where(np.abs(eta) >= 1.0, 0.0, sigma)
    sigma = np.where(eta == 0.0, 1.0, sigma)
    return sigma


_FILTER_CACHE: dict = {}


def _filter_matrices(mesh: Mesh, strength: float):
    key = (id(mesh), float(strength))
    mats = _FILTER_CACHE.get(key)
    if mats is not None:
        return mats
    out = []
    for rule in mesh.rules:
        N = rule.order
        # Vandermonde of Legendre modes at the LGL nodes
        V = np.polynomial.legendre.legvander(rule.points, N)
        sig = boyd_vandeven_transfer(np.arange(N + 1) / N)
        t = (1.0 - strength) + strength * sig
        out.append(V @ np.diag(t) @ np.linalg.inv(V))
    mats = tuple(out)
    _FILTER_CACHE[key] = mats
    return mats


def filter_field(mesh: Mesh, field: np.ndarray, strength: float) -> np.ndarray:
    """Per-element modal Boyd-Vandeven filter blended by `strength`.

    Transforms each element to Legendre modal space per direction,
    scales mode k by (1-mu) + mu sigma(k/N), transforms back, and
    restores continuity with a mass-weighted DSS. Mode 0 is untouched,
    so constants and element integrals are preserved exactly.
    """
    if strength == 0.0:
        return field.copy() if field.ndim == 1 else field.copy()
    if not 0.0 <= strength <= 1.0:
        raise ConfigurationError(f"filter strength must lie in [0, 1], got {strength}")
    ops = get_ops(mesh)
    F = _filter_matrices(mesh, strength)
    fe = ops._gather(field)
    if mesh.dim == 2:
        fe = np.einsum("ij,...kj->...ki", F[0], fe)
        fe = np.einsum("km,...mi->...ki", F[1], fe)
    else:
        fe = np.einsum("ij,...kmj->...kmi", F[0], fe)
        fe = np.einsum("mn,...kni->...kmi", F[1], fe)
        fe = np.einsum("kl,...lmi->...kmi", F[2], fe)
    return ops._project(fe)


def apply_filter(state: PrognosticState, strength: float, mesh: Mesh) -> PrognosticState:
    """Filter every prognostic field; identity when strength is zero."""
    if strength == 0.0:
        return state.copy()
    vec = np.vstack([state.rho_p[None, :], state.u, state.theta_vp[None, :],
                     state.q_vp[None, :], state.q_c[None, :], state.q_r[None, :]])
    out = filter_field(mesh, vec, strength)
    dim = mesh.dim
    return PrognosticState(rho_p=out[0], u=out[1:1 + dim].copy(), theta_vp=out[1 + dim],
                           q_vp=out[2 + dim], q_c=out[3 + dim], q_r=out[4 + dim])
