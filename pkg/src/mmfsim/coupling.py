"""Superparameterization plumbing: one coarse simulator per run plus
many fine 2D slab simulators, exchanging column profiles once per
coarse step.

The coarse model (LSP) sees the fine models (SSP) through a relaxation
tendency F = (<q> - Q)/dT built from horizontally averaged SSP
profiles; each SSP sees the coarse model through f = (Q_new - <q>)/dT
held fixed over its M substeps. Only horizontal velocity, theta_v',
q_v', q_c and q_r are coupled; density and vertical velocity never
are. Vertical grids may differ by an integer refinement ratio, bridged
by per-element L2 projection matrices.
"""

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .dynamics import (DEFAULT_CONSTANTS, PhysConstants, ReferenceState, Sounding,
                       SpongeConfig, apply_filter, build_reference, evaluate_rhs,
                       sponge_profile)
from .errors import ConfigurationError, StateError
from .grid import Mesh, build_box_mesh, build_lgl_rule
from .microphysics import KesslerParams, apply_microphysics
from .operators import PrognosticState
from .timeint import GmresConfig, ImexOperatorSplit, linear_operator, step_ark2

__all__ = [
    "COUPLED_VARS",
    "MmfConfig",
    "Simulator",
    "SspInstance",
    "VerticalProjection",
    "horizontal_average",
    "build_vertical_projection",
    "project_column_S_to_L",
    "project_column_L_to_S",
    "forcing_tendency",
    "feedback_tendency",
    "spawn_ssp_instances",
    "mmf_step",
]

# coupling order is fixed so diagnostics files are stable
COUPLED_VARS = ("u", "theta_vp", "q_vp", "q_c", "q_r")


@dataclass
class MmfConfig:
    ssp_length: float = 8000.0          # m
    ssp_elems_x: int = 10
    ssp_elems_z: int = 30
    ssp_order: int = 4
    substeps: int = 10                  # M; coarse step = M * fine step
    coupled: tuple = COUPLED_VARS
    granularity: str = "element"        # or "point": one SSP per grid column
    perturbation_amplitude: float = 0.3  # K
    perturbation_theta_scale: float = 3.0  # envelope normalization (bubble amplitude)
    ssp_filter_strength: float = 0.0
    microphysics: bool = True           # Kessler on the SSPs (never the coarse model)

    def __post_init__(self):
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")
        if self.granularity not in ("element", "point"):
            raise ConfigurationError(f"unknown SSP granularity {self.granularity!r}")
        bad = set(self.coupled) - set(COUPLED_VARS)
        if bad:
            raise ConfigurationError(f"unsupported coupled variables: {sorted(bad)}")
        if "rho_p" in self.coupled or "w" in self.coupled:
            raise ConfigurationError("density and vertical velocity are never coupled")


# ---------------------------------------------------------------------------
# one simulator = mesh + reference + state + physics switches

@dataclass
class Simulator:
    """State and operators of a single (coarse or fine) model."""

    mesh: Mesh
    reference: ReferenceState
    state: PrognosticState
    constants: PhysConstants = DEFAULT_CONSTANTS
    sponge_rw: Optional[np.ndarray] = None
    sponge_cfg: Optional[SpongeConfig] = None
    delta: int = 1
    gmres: GmresConfig = dc_field(default_factory=GmresConfig)
    filter_strength: float = 0.0
    kessler: Optional[KesslerParams] = None
    dynamics_enabled: bool = True
    sounding: Optional[Sounding] = None

    def step(self, dt: float, coupling: Optional[PrognosticState] = None,
             state: Optional[PrognosticState] = None):
        """One pure step; returns (new_state, precip_per_column or None).

        Order: IMEX step, floor the moisture fields (dispersive
        advection undershoots), Kessler columns if enabled, modal
        filter, re-impose w=0 on the impermeable boundaries. Does not
        commit: the caller assigns .state, which lets a coarse+fine
        composite step fail atomically. `state` overrides self.state
        so substep chains stay pure.
        """
        if state is None:
            state = self.state
        if self.dynamics_enabled:
            split = ImexOperatorSplit(
                s=lambda q: evaluate_rhs(q, self.reference, self.mesh,
                                         self.constants, sponge_rw=self.sponge_rw),
                lin=lambda q: linear_operator(q, self.reference, self.mesh,
                                              self.constants, sponge_rw=self.sponge_rw),
                delta=self.delta, coupling=coupling)
            new = step_ark2(state, dt, split, self.gmres)
        else:
            new = state.copy()
            if coupling is not None:
                vec = new.as_vector() + dt * coupling.as_vector()
                new = PrognosticState.from_vector(vec, new.dim)

        np.maximum(new.q_c, 0.0, out=new.q_c)
        np.maximum(new.q_r, 0.0, out=new.q_r)
        np.maximum(new.q_vp, -self.reference.q_v0, out=new.q_vp)

        precip = None
        if self.kessler is not None:
            new, precip = apply_microphysics(new, self.reference, self.mesh, dt,
                                             self.kessler, self.constants)
        if self.filter_strength > 0.0:
            new = apply_filter(new, self.filter_strength, self.mesh)
            new.u[-1][self.mesh.bottom_nodes] = 0.0
            new.u[-1][self.mesh.top_nodes] = 0.0
        return new, precip


# ---------------------------------------------------------------------------
# horizontal averaging and vertical projection

def horizontal_average(mesh: Mesh, field: np.ndarray) -> np.ndarray:
    """Quadrature-weighted horizontal average per vertical level."""
    cols = mesh.column_view(field)
    if mesh.dim == 2:
        w = np.asarray(mesh.lumped_1d[0])
    else:
        wy = np.asarray(mesh.lumped_1d[1])
        wx = np.asarray(mesh.lumped_1d[0])
        w = (wy[:, None] * wx[None, :]).reshape(-1)
    return (w @ cols) / w.sum()


@dataclass(frozen=True)
class VerticalProjection:
    """Element-level transfer matrices between vertical discretizations.

    An LSP element of order N is split into n_sl SSP elements of the
    same order. s2l is the L2-best-fit restriction (N+1, n_sl*(N+1));
    l2s is polynomial interpolation (n_sl*(N+1), N+1), which equals
    the L2 projection because coarse polynomials are exactly
    representable on the fine side. s2l @ l2s is the identity.
    """

    order: int
    n_sl: int
    s: float
    offsets: np.ndarray
    s2l: np.ndarray
    l2s: np.ndarray


def _lagrange_eval(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix P[a, i] = psi_i(x[a]) of Lagrange basis through `nodes`."""
    n = nodes.size
    bw = np.ones(n)
    for i in range(n):
        bw[i] = 1.0 / np.prod(nodes[i] - np.delete(nodes, i))
    P = np.empty((x.size, n))
    for a, xa in enumerate(np.asarray(x, dtype=float)):
        d = xa - nodes
        hit = np.nonzero(np.abs(d) < 1e-14)[0]
        if hit.size:
            row = np.zeros(n)
            row[hit[0]] = 1.0
        else:
            t = bw / d
            row = t / t.sum()
        P[a] = row
    return P


def build_vertical_projection(order: int, n_sl: int) -> VerticalProjection:
    if n_sl < 1:
        raise ConfigurationError(f"vertical refinement ratio must be >= 1, got {n_sl}")
    rule = build_lgl_rule(order)
    Np = order + 1
    s = 1.0 / n_sl
    offsets = np.array([(2 * k - 1) * s - 1.0 for k in range(1, n_sl + 1)])

    # exact integrals: Gauss-Legendre with enough points for degree 2N
    gx, gw = np.polynomial.legendre.leggauss(order + 2)
    psi_g = _lagrange_eval(rule.points, gx)               # fine basis at quad pts
    Mhat = np.zeros((Np, Np))
    blocks = []
    for k in range(n_sl):
        coarse_at = _lagrange_eval(rule.points, s * gx + offsets[k])
        G = s * (coarse_at.T * gw) @ psi_g                # (Np, Np) mixed mass block
        blocks.append(G)
    # coarse full mass on [-1, 1]
    coarse_g = _lagrange_eval(rule.points, gx)
    Mhat = (coarse_g.T * gw) @ coarse_g
    s2l = np.linalg.solve(Mhat, np.hstack(blocks))

    l2s = np.vstack([_lagrange_eval(rule.points, s * rule.points + offsets[k])
                     for k in range(n_sl)])
    return VerticalProjection(order=order, n_sl=n_sl, s=s, offsets=offsets,
                              s2l=s2l, l2s=l2s)


def _broken(profile: np.ndarray, ne: int, order: int) -> np.ndarray:
    """(ne, N+1) element-wise view of a shared-node column profile."""
    N = order
    idx = np.arange(ne)[:, None] * N + np.arange(N + 1)[None, :]
    return profile[..., idx]


def _assemble(elem_vals: np.ndarray, ne: int, order: int) -> np.ndarray:
    """Average element-wise values back onto shared nodes."""
    N = order
    npts = ne * N + 1
    idx = (np.arange(ne)[:, None] * N + np.arange(N + 1)[None, :]).reshape(-1)
    out = np.zeros(elem_vals.shape[:-2] + (npts,))
    cnt = np.zeros(npts)
    np.add.at(cnt, idx, 1.0)
    flat = elem_vals.reshape(elem_vals.shape[:-2] + (-1,))
    if flat.ndim == 1:
        np.add.at(out, idx, flat)
    else:
        for row in range(flat.shape[0]):
            np.add.at(out[row], idx, flat[row])
    return out / cnt


def project_column_S_to_L(ssp_profile: np.ndarray, proj: VerticalProjection,
                          lsp_elems: int) -> np.ndarray:
    """Fine column -> coarse column, element-by-element L2 restriction."""
    N, K = proj.order, proj.n_sl
    nz_s = lsp_elems * K * N + 1
    if ssp_profile.shape[-1] != nz_s:
        raise ConfigurationError(
            f"fine profile has {ssp_profile.shape[-1]} levels, expected {nz_s}")
    B = _broken(ssp_profile, lsp_elems * K, N)           # (..., neS, N+1)
    grouped = B.reshape(B.shape[:-2] + (lsp_elems, K * (N + 1)))
    Y = grouped @ proj.s2l.T                             # (..., neL, N+1)
    return _assemble(Y, lsp_elems, N)


def project_column_L_to_S(lsp_profile: np.ndarray, proj: VerticalProjection,
                          lsp_elems: int) -> np.ndarray:
    """Coarse column -> fine column by interpolation (exact on degree <= N)."""
    N, K = proj.order, proj.n_sl
    nz_l = lsp_elems * N + 1
    if lsp_profile.shape[-1] != nz_l:
        raise ConfigurationError(
            f"coarse profile has {lsp_profile.shape[-1]} levels, expected {nz_l}")
    X = _broken(lsp_profile, lsp_elems, N)               # (..., neL, N+1)
    Y = X @ proj.l2s.T                                   # (..., neL, K*(N+1))
    Y = Y.reshape(Y.shape[:-2] + (lsp_elems * K, N + 1))
    return _assemble(Y, lsp_elems * K, N)


# ---------------------------------------------------------------------------
# relaxation tendencies

def forcing_tendency(Q_n: dict, avg_q_n: dict, dT: float) -> dict:
    """F = (<q^n> - Q^n)/dT per coupled variable, on the coarse levels."""
    return {v: (avg_q_n[v] - Q_n[v]) / dT for v in Q_n}


def feedback_tendency(Q_np1: dict, avg_q_n: dict, dT: float) -> dict:
    """f = (Q^{n+1} - <q^n>)/dT per coupled variable, on the fine levels."""
    return {v: (Q_np1[v] - avg_q_n[v]) / dT for v in Q_np1}


# ---------------------------------------------------------------------------
# SSP instances

@dataclass
class SspInstance:
    index: int
    anchor: tuple            # element or grid-column indices in the coarse mesh
    columns: np.ndarray      # coarse horizontal column ids covered by the anchor
    weights: np.ndarray      # gather quadrature weights over those columns
    scatter_coeff: np.ndarray  # weights normalized by the global column measure
    projection: VerticalProjection
    sim: Simulator

    def gather_profile(self, lsp_cols: np.ndarray) -> np.ndarray:
        """Weighted x(,y)-average of a coarse column-view field over the anchor."""
        return (self.weights @ lsp_cols[self.columns]) / self.weights.sum()


def _state_field(state: PrognosticState, name: str) -> np.ndarray:
    if name == "u":
        return state.u[0]
    return getattr(state, name)


def _set_state_field(state: PrognosticState, name: str, values: np.ndarray) -> None:
    if name == "u":
        state.u[0] = values
    else:
        setattr(state, name, values)


def _horizontal_weights(mesh: Mesh):
    """Per-column quadrature weights matching column_view ordering."""
    if mesh.dim == 2:
        return np.asarray(mesh.lumped_1d[0])
    wy = np.asarray(mesh.lumped_1d[1])
    wx = np.asarray(mesh.lumped_1d[0])
    return (wy[:, None] * wx[None, :]).reshape(-1)


def _element_column_nodes(mesh: Mesh, anchor: tuple):
    """Column ids and local quadrature weights of one element column."""
    N = mesh.orders[0]
    nx = mesh.npts_1d[0]
    rule_x = mesh.rules[0]
    hx = mesh.extents[0] / mesh.elem_counts[0]
    ex = anchor[0]
    ix = (ex * N + np.arange(N + 1)) % nx
    wxl = 0.5 * hx * rule_x.weights
    if mesh.dim == 2:
        return ix, wxl
    Ny = mesh.orders[1]
    ny = mesh.npts_1d[1]
    rule_y = mesh.rules[1]
    hy = mesh.extents[1] / mesh.elem_counts[1]
    ey = anchor[1]
    iy = (ey * Ny + np.arange(Ny + 1)) % ny
    wyl = 0.5 * hy * rule_y.weights
    cols = (iy[:, None] * nx + ix[None, :]).reshape(-1)
    w = (wyl[:, None] * wxl[None, :]).reshape(-1)
    return cols, w


def spawn_ssp_instances(lsp: Simulator, cfg: MmfConfig, seed: int = 0,
                        kessler: Optional[KesslerParams] = None) -> list:
    """Create, initialize and perturb one fine simulator per anchor.

    Each instance starts horizontally uniform at the coarse column
    profile of every prognostic (interpolated to its vertical grid),
    then receives a bubble-envelope-modulated uniform random
    temperature perturbation drawn from a counter RNG keyed by (seed,
    instance index), so results never depend on spawn or execution
    order.
    """
    mesh = lsp.mesh
    if lsp.sounding is None:
        raise ConfigurationError("the coarse simulator needs its sounding to spawn instances")
    ne_z_l = mesh.elem_counts[-1]
    if cfg.ssp_order != mesh.orders[-1]:
        raise ConfigurationError("fine and coarse vertical orders must match")
    if cfg.ssp_elems_z % ne_z_l != 0:
        raise ConfigurationError(
            f"fine vertical element count {cfg.ssp_elems_z} must be an integer "
            f"multiple of the coarse count {ne_z_l}")
    n_sl = cfg.ssp_elems_z // ne_z_l
    proj = build_vertical_projection(cfg.ssp_order, n_sl)

    ssp_mesh = build_box_mesh(
        (cfg.ssp_length, mesh.extents[-1]),
        (cfg.ssp_elems_x, cfg.ssp_elems_z),
        (cfg.ssp_order, cfg.ssp_order),
        periodicity=(True,))
    min_lsp_wavelength = mesh.extents[0] / max(mesh.npts_1d[0] // 2, 1)
    if cfg.ssp_length < min_lsp_wavelength:
        import warnings
        warnings.warn("fine domain is shorter than the smallest coarse-resolvable "
                      "wavelength; coupling may alias", stacklevel=2)
    ssp_ref = build_reference(lsp.sounding, ssp_mesh, lsp.constants)
    ssp_rw = None
    if lsp.sponge_cfg is not None:
        ssp_rw = sponge_profile(ssp_mesh.coords[:, -1], lsp.sponge_cfg)
    elif lsp.sponge_rw is not None:
        # no analytic config available; resample the nodal profile
        ssp_rw = np.interp(ssp_mesh.coords[:, -1], lsp.reference.z1d,
                           lsp.mesh.column_view(lsp.sponge_rw)[0])

    if cfg.granularity == "element":
        if mesh.dim == 2:
            anchors = [(ex,) for ex in range(mesh.elem_counts[0])]
        else:
            anchors = [(ex, ey) for ey in range(mesh.elem_counts[1])
                       for ex in range(mesh.elem_counts[0])]
    else:
        anchors = [(i,) for i in range(mesh.ncols)]

    glob_w = _horizontal_weights(mesh)
    lsp_cols = {v: mesh.column_view(_state_field(lsp.state, v)) for v in
                ("rho_p", "u", "theta_vp", "q_vp", "q_c", "q_r")}
    w_cols = mesh.column_view(lsp.state.u[-1])

    instances = []
    for idx, anchor in enumerate(anchors):
        if cfg.granularity == "element":
            cols, wloc = _element_column_nodes(mesh, anchor)
            # periodic wrap can list a column twice; merge duplicates
            cols, inv = np.unique(cols, return_inverse=True)
            w_merged = np.zeros(cols.size)
            np.add.at(w_merged, inv, wloc)
            wloc = w_merged
        else:
            cols = np.array([anchor[0]])
            wloc = np.array([1.0])
            scatter = np.array([1.0])
        if cfg.granularity == "element":
            scatter = wloc / glob_w[cols]

        st = PrognosticState.zeros(ssp_mesh)
        nx_s = ssp_mesh.npts_1d[0]

        def to_fine(prof_l):
            prof_s = project_column_L_to_S(prof_l, proj, ne_z_l)
            return np.repeat(prof_s, nx_s)

        gather = lambda cv: (wloc @ cv[cols]) / wloc.sum()
        st.rho_p = to_fine(gather(lsp_cols["rho_p"]))
        st.u[0] = to_fine(gather(lsp_cols["u"]))
        st.u[1] = to_fine(gather(w_cols))
        st.theta_vp = to_fine(gather(lsp_cols["theta_vp"]))
        st.q_vp = to_fine(gather(lsp_cols["q_vp"]))
        st.q_c = to_fine(gather(lsp_cols["q_c"]))
        st.q_r = to_fine(gather(lsp_cols["q_r"]))
        st.u[1][ssp_mesh.bottom_nodes] = 0.0
        st.u[1][ssp_mesh.top_nodes] = 0.0

        if cfg.perturbation_amplitude > 0.0:
            from .cases import PerturbationSpec, random_theta_perturbation

            pspec = PerturbationSpec(amplitude=cfg.perturbation_amplitude,
                                     seed=seed,
                                     theta_scale=cfg.perturbation_theta_scale)
            st.theta_vp = st.theta_vp + random_theta_perturbation(
                pspec, st.theta_vp, instance=idx)

        sim = Simulator(mesh=ssp_mesh, reference=ssp_ref, state=st,
                        constants=lsp.constants, sponge_rw=ssp_rw,
                        sponge_cfg=lsp.sponge_cfg,
                        delta=lsp.delta, gmres=lsp.gmres,
                        filter_strength=cfg.ssp_filter_strength,
                        kessler=(kessler if cfg.microphysics else None),
                        dynamics_enabled=lsp.dynamics_enabled,
                        sounding=lsp.sounding)
        instances.append(SspInstance(index=idx, anchor=anchor, columns=cols,
                                     weights=wloc, scatter_coeff=scatter,
                                     projection=proj, sim=sim))
    return instances


# ---------------------------------------------------------------------------
# the staggered coarse/fine step

def _cols_to_field(mesh: Mesh, cols: np.ndarray) -> np.ndarray:
    """Inverse of Mesh.column_view for one field."""
    nz = mesh.npts_1d[-1]
    if mesh.dim == 2:
        return cols.T.reshape(-1)
    ny, nx = mesh.npts_1d[1], mesh.npts_1d[0]
    return np.moveaxis(cols.reshape(ny, nx, nz), 2, 0).reshape(-1)


def _broadcast_profile(mesh: Mesh, profile: np.ndarray) -> np.ndarray:
    """Horizontally uniform field from a vertical profile (fine mesh)."""
    return np.repeat(profile, int(np.prod(mesh.npts_1d[:-1])))


def mmf_step(lsp: Simulator, instances: list, dT: float, M: int = None,
             cfg: MmfConfig = None, executor=None):
    """Advance the coupled system by one coarse step of size dT.

    Sequence: (1) horizontally average each fine state and restrict to
    the coarse levels, (2) advance the coarse model with the forcing
    F = (<q> - Q)/dT, (3) interpolate the updated coarse columns back
    and form the feedback f = (Q_new - <q>)/dT per instance, (4) run M
    fine substeps per instance with f frozen. Nothing commits until
    every simulator has finished its step, so failures leave all
    states at time t.

    Returns (diagnostics, precip) where diagnostics holds per
    (instance, level, variable) the pre-step coupling residual
    |Q - <q>| along with |Q|, and precip maps instance index to
    accumulated surface rain (mm per fine column), with the coarse
    model under index -1 when its microphysics is on.
    """
    if cfg is None:
        cfg = MmfConfig()
    if M is None:
        M = cfg.substeps
    dt_f = dT / M
    coupled = cfg.coupled
    ne_z_l = lsp.mesh.elem_counts[-1]

    lsp_cols = {v: lsp.mesh.column_view(_state_field(lsp.state, v)) for v in coupled}

    avg_native = []
    F_prof = []
    diagnostics = []
    for inst in instances:
        av = {v: horizontal_average(inst.sim.mesh, _state_field(inst.sim.state, v))
              for v in coupled}
        av_L = {v: project_column_S_to_L(av[v], inst.projection, ne_z_l)
                for v in coupled}
        Q = {v: inst.gather_profile(lsp_cols[v]) for v in coupled}
        avg_native.append(av)
        F_prof.append(forcing_tendency(Q, av_L, dT))
        for v in coupled:
            diagnostics.append((inst.index, v, np.abs(Q[v] - av_L[v]), np.abs(Q[v])))

    # assemble the forcing field on the coarse mesh
    F_state = PrognosticState.zeros(lsp.mesh)
    nz_l = lsp.mesh.npts_1d[-1]
    for v in coupled:
        buf = np.zeros((lsp.mesh.ncols, nz_l))
        for inst, fp in zip(instances, F_prof):
            buf[inst.columns] += inst.scatter_coeff[:, None] * fp[v][None, :]
        _set_state_field(F_state, v, _cols_to_field(lsp.mesh, buf))

    new_lsp_state, lsp_precip = lsp.step(dT, coupling=F_state)

    new_cols = {v: lsp.mesh.column_view(_state_field(new_lsp_state, v)) for v in coupled}

    def advance_instance(args):
        inst, av = args
        Q_new_fine = {v: project_column_L_to_S(inst.gather_profile(new_cols[v]),
                                               inst.projection, ne_z_l)
                      for v in coupled}
        f_prof = feedback_tendency(Q_new_fine, av, dT)
        f_state = PrognosticState.zeros(inst.sim.mesh)
        for v in coupled:
            _set_state_field(f_state, v, _broadcast_profile(inst.sim.mesh, f_prof[v]))
        st = inst.sim.state
        precip = None
        for _ in range(M):
            st, pr = inst.sim.step(dt_f, coupling=f_state, state=st)
            if pr is not None:
                precip = pr if precip is None else precip + pr
        return st, precip

    work = list(zip(instances, avg_native))
    if executor is None:
        results = [advance_instance(a) for a in work]
    else:
        results = list(executor.map(advance_instance, work))

    # commit phase: every simulator advanced, in instance order
    lsp.state = new_lsp_state
    precip_out = {}
    if lsp_precip is not None:
        precip_out[-1] = lsp_precip
    for inst, (st, pr) in zip(instances, results):
        inst.sim.state = st
        if pr is not None:
            precip_out[inst.index] = pr
    return diagnostics, precip_out
