"""IMEX ARK2 time stepping and the matrix-free GMRES it relies on.

One step treats the full nonlinear tendency S(q) explicitly and, when
delta=1, shifts a constant-coefficient linearization L(q) about the
reference state (acoustic, gravity/buoyancy, sponge terms) to the
implicit side:

    S_delta(q, q*) = [S(q) - delta L(q)] + delta L(q*)

Each implicit stage solves (I - gamma dt L) x = rhs by restarted GMRES
with no preconditioner. delta=0 degenerates to the purely explicit
ARK2 explicit table. An optional constant coupling tendency is added
to the explicit part at every stage (it is defined at step
granularity, so it is frozen across stages).
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, SolverError
from .grid import Mesh
from .operators import PrognosticState, get_ops

__all__ = [
    "Ark2Tableau",
    "ark2_tableau",
    "stability_function",
    "GmresConfig",
    "gmres_solve",
    "ImexOperatorSplit",
    "linear_operator",
    "step_ark2",
]


@dataclass(frozen=True)
class Ark2Tableau:
    """Three-stage, second-order additive RK pair sharing the weights b."""

    a_explicit: np.ndarray
    a_implicit: np.ndarray
    b: np.ndarray
    order: int = 2

    def __post_init__(self):
        ae, ai, b = self.a_explicit, self.a_implicit, self.b
        if ae.shape != (3, 3) or ai.shape != (3, 3) or b.shape != (3,):
            raise ConfigurationError("tableau must be 3-stage")
        if abs(b.sum() - 1.0) > 1e-14:
            raise ConfigurationError("weights b must sum to 1")
        if np.max(np.abs(ai[2] - b)) > 1e-14:
            raise ConfigurationError("implicit table must be stiffly accurate (last row = b)")

    @property
    def gamma(self) -> float:
        return float(self.a_implicit[1, 1])

    @property
    def c(self) -> np.ndarray:
        """Abscissae from the explicit row sums."""
        return self.a_explicit.sum(axis=1)


def ark2_tableau() -> Ark2Tableau:
    """The ARK(2,3,2)b pair: gamma = 1 - 1/sqrt(2), two-register form."""
    g = 1.0 - 1.0 / math.sqrt(2.0)
    a32 = (3.0 + 2.0 * math.sqrt(2.0)) / 6.0
    ae = np.array([
        [0.0, 0.0, 0.0],
        [2.0 * g, 0.0, 0.0],
        [1.0 - a32, a32, 0.0],
    ])
    ai = np.array([
        [0.0, 0.0, 0.0],
        [g, g, 0.0],
        [1.0 / (2.0 * math.sqrt(2.0)), 1.0 / (2.0 * math.sqrt(2.0)), g],
    ])
    b = ai[2].copy()
    return Ark2Tableau(a_explicit=ae, a_implicit=ai, b=b)


def stability_function(tableau: Ark2Tableau, z):
    """One-step amplification R(z) of the implicit table on q' = z q.

    For dq/dt = lambda q fed through the IMEX split with S = L the
    explicit increments cancel and the step is purely diagonally
    implicit: R(z) = 1 + z b^T (I - z A)^{-1} 1.
    """
    z = np.asarray(z, dtype=complex)
    out = np.empty(z.shape, dtype=complex)
    I = np.eye(3)
    ones = np.ones(3)
    for idx, zz in np.ndenumerate(z):
        out[idx] = 1.0 + zz * (tableau.b @ np.linalg.solve(I - zz * tableau.a_implicit, ones))
    return out if out.shape else complex(out)


# ---------------------------------------------------------------------------
# GMRES

@dataclass(frozen=True)
class GmresConfig:
    tol: float = 1e-6        # relative residual target
    restart: int = 30
    maxiter: int = 300       # total matvec budget across restarts

    def __post_init__(self):
        if not 0.0 < self.tol < 1.0:
            raise ConfigurationError(f"GMRES tolerance must be in (0,1), got {self.tol}")
        if self.restart < 1 or self.maxiter < 1:
            raise ConfigurationError("GMRES restart and maxiter must be >= 1")


def gmres_solve(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                config: GmresConfig = GmresConfig()) -> np.ndarray:
    """Restarted GMRES on A x = b with A given only as an action.

    Arnoldi with modified Gram-Schmidt, Givens-rotation least squares,
    zero initial guess. Raises SolverError (carrying the final
    residual) if the relative residual has not reached config.tol
    within config.maxiter total matvecs.
    """
    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    target = config.tol * bnorm

    x = np.zeros_like(b)
    matvecs = 0
    resnorm = bnorm
    while matvecs < config.maxiter:
        r = b - apply_A(x) if matvecs else b.copy()
        resnorm = float(np.linalg.norm(r))
        if resnorm <= target:
            return x
        m = min(config.restart, config.maxiter - matvecs)
        V = np.empty((m + 1, b.size))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = resnorm
        V[0] = r / resnorm
        k_used = 0
        for k in range(m):
            # copy so an apply_A that returns (a view of) its input
            # cannot be clobbered by the in-place orthogonalization
            w = np.array(apply_A(V[k]), dtype=float)
            matvecs += 1
            for j in range(k + 1):
                H[j, k] = V[j] @ w
                w -= H[j, k] * V[j]
            H[k + 1, k] = float(np.linalg.norm(w))
            # previously accumulated Givens rotations
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            denom = math.hypot(H[k, k], H[k + 1, k])
            cs[k] = H[k, k] / denom
            sn[k] = H[k + 1, k] / denom
            H[k, k] = denom
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_used = k + 1
            resnorm = abs(g[k + 1])
            happy = H[k + 1, k] <= 1e-14 * max(1.0, abs(H[k, k]))
            if resnorm <= target or happy:
                break
            V[k + 1] = w / H[k + 1, k]
        y = np.linalg.solve(np.triu(H[:k_used, :k_used]), g[:k_used])
        x = x + y @ V[:k_used]
        if resnorm <= target:
            # trust but verify: the rotated-residual estimate can drift
            true_res = float(np.linalg.norm(b - apply_A(x)))
            if true_res <= target * (1.0 + 1e-8) or true_res <= resnorm * 1.01 + 1e-300:
                return x
            resnorm = true_res
    raise SolverError(
        f"GMRES did not reach tol={config.tol:g} within {config.maxiter} iterations "
        f"(relative residual {resnorm / bnorm:.3e})",
        residual=resnorm / bnorm)


# ---------------------------------------------------------------------------
# linearized operator about the reference state

def linear_operator(state_increment: PrognosticState, reference, mesh: Mesh,
                    constants=None, sponge_rw=None) -> PrognosticState:
    """Constant-coefficient linearization L of the fast-wave terms.

    Rows: continuity -div(rho0 u); momentum -(1/rho0) grad p'_lin with
    p'_lin = (cp/cv)[(p0/rho0) rho' + (p0/theta_v0) theta_v'], plus
    buoyancy -g rho'/rho0 and sponge -R_w w on the vertical component;
    thermodynamic -w d(theta_v0)/dz; vapor -w d(q_v0)/dz. Cloud and
    rain rows are zero; vertical-velocity rows vanish at the
    impermeable boundaries.
    """
    from .dynamics import DEFAULT_CONSTANTS
    if constants is None:
        constants = DEFAULT_CONSTANTS
    ops = get_ops(mesh)
    dim = mesh.dim
    q = state_increment
    rho0 = reference.rho0
    gam = constants.c_p / constants.c_v
    p_lin = gam * (reference.p0 / rho0 * q.rho_p
                   + reference.p0 / reference.theta_v0 * q.theta_vp)
    gp = ops.grad(p_lin)
    d_rho = -ops.div(rho0 * q.u)
    du = -gp / rho0
    w = q.u[-1]
    du[-1] -= constants.g * q.rho_p / rho0
    if sponge_rw is not None:
        du[-1] -= sponge_rw * w
    du[-1][mesh.bottom_nodes] = 0.0
    du[-1][mesh.top_nodes] = 0.0
    d_th = -w * reference.dtheta_v0_dz
    d_qv = -w * reference.dq_v0_dz
    zero = np.zeros_like(d_rho)
    return PrognosticState(rho_p=d_rho, u=du, theta_vp=d_th, q_vp=d_qv,
                           q_c=zero, q_r=zero.copy())


# ---------------------------------------------------------------------------
# the ARK2 step

@dataclass
class ImexOperatorSplit:
    """Tendency pair for one simulator plus the explicit/implicit switch.

    s and lin map a PrognosticState to a tendency PrognosticState; lin
    must be linear. delta=1 treats lin implicitly, delta=0 runs fully
    explicit. coupling, when present, is a constant tendency added to
    the explicit part of every stage.
    """

    s: Callable[[PrognosticState], PrognosticState]
    lin: Callable[[PrognosticState], PrognosticState]
    delta: int = 1
    coupling: Optional[PrognosticState] = None

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise ConfigurationError(f"delta must be 0 or 1, got {self.delta}")


def step_ark2(state: PrognosticState, dt: float, split: ImexOperatorSplit,
              gmres_cfg: GmresConfig = GmresConfig(),
              tableau: Ark2Tableau = None) -> PrognosticState:
    """Advance one step; returns a new state.

    The final update uses the shared weights b on S(q_i) + coupling
    only: the delta L contributions cancel exactly between the
    explicit and implicit tables, which keeps the continuity row in
    pure divergence form regardless of the linear-solve tolerance.
    """
    if dt <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if tableau is None:
        tableau = ark2_tableau()
    dim = state.dim
    ae, ai, b = tableau.a_explicit, tableau.a_implicit, tableau.b
    gamma = tableau.gamma
    delta = split.delta
    cvec = split.coupling.as_vector() if split.coupling is not None else 0.0

    def S(vec):
        return split.s(PrognosticState.from_vector(vec, dim)).as_vector()

    def L(vec):
        return split.lin(PrognosticState.from_vector(vec, dim)).as_vector()

    q0 = state.as_vector()
    stages_e = []    # S(q_i) + coupling - delta L(q_i)
    stages_S = []    # S(q_i) + coupling, reused by the final b-sum
    lin_stages = []  # L(q_i), implicit-table contributions

    def solve_stage(rhs):
        if delta == 0:
            return rhs
        shift = delta * dt * gamma

        def apply_A(v):
            return v - shift * L(v)

        return gmres_solve(apply_A, rhs, gmres_cfg)

    qi = q0
    for i in range(3):
        if i > 0:
            rhs = q0.copy()
            for j in range(i):
                rhs += dt * ae[i, j] * stages_e[j]
                if delta:
                    rhs += dt * delta * ai[i, j] * lin_stages[j]
            qi = solve_stage(rhs)
        sv = S(qi) + cvec
        stages_S.append(sv)
        if i < 2:
            # later stages never reference stage-2 increments
            if delta:
                lv = L(qi)
                lin_stages.append(lv)
                stages_e.append(sv - delta * lv)
            else:
                lin_stages.append(0.0)
                stages_e.append(sv)

    out = q0.copy()
    for i in range(3):
        out += dt * b[i] * stages_S[i]
    return PrognosticState.from_vector(out, dim)

