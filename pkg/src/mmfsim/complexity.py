"""Closed-form cost model: flops, communicated bytes, arithmetic intensity.

Compares a standard (single-grid) run against the split-grid configuration
at matched fine resolution.  The per-point kernel constants (816, 4635 for
flops; 784 bytes per boundary point per step) are model constants, not
measurements: nothing in here instruments the actual code.  The vertical
direction is never partitioned across ranks, so communicating boundaries
are lateral only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ConfigurationError

# model constants: flop kernel is Np^3 (FLOP_A * Np + FLOP_B) per element
# per step, and each lateral boundary point moves BYTES_PER_POINT bytes
# per step (all prognostic fields, both directions, 8 bytes per number)
FLOP_A = 816.0
FLOP_B = 4635.0
BYTES_PER_POINT = 784.0

_MODES = ("standard", "mmf")


@dataclass(frozen=True)
class CostModelInput:
    """Problem description for the closed-form cost model.

    Lengths and grid spacings are nodal (fine-grid) values in metres; the
    element width is ``(n_p - 1) * spacing``.  The refinement ratios
    ``r_t, r_x, r_z`` are coarse/fine ratios, all >= 1; ranks factor as
    ``n_r = n_rx * n_ry``.
    """

    n_p: int                 # points per element per direction
    l_x: float               # domain lengths, m
    l_y: float
    l_z: float
    dx: float                # fine nodal spacings, m
    dy: float
    dz: float
    duration: float          # simulated time, s
    dt: float                # fine time step, s
    r_t: float = 1.0
    r_x: float = 1.0
    r_z: float = 1.0
    n_rx: int = 1
    n_ry: int = 1

    def __post_init__(self):
        if self.n_p < 2:
            raise ConfigurationError(f"n_p must be >= 2, got {self.n_p}")
        for name in ("l_x", "l_y", "l_z", "dx", "dy", "dz", "duration", "dt"):
            v = getattr(self, name)
            if not v > 0.0:
                raise ConfigurationError(f"{name} must be positive, got {v}")
        for name in ("r_t", "r_x", "r_z"):
            v = getattr(self, name)
            if not v >= 1.0:
                raise ConfigurationError(
                    f"refinement ratio {name} must be >= 1, got {v}")
        for name in ("n_rx", "n_ry"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ConfigurationError(f"{name} must be an integer >= 1")

    @property
    def n_r(self) -> int:
        return self.n_rx * self.n_ry

    @property
    def order(self) -> int:
        return self.n_p - 1


def _check_mode(mode: str):
    if mode not in _MODES:
        raise ConfigurationError(f"mode must be one of {_MODES}, got {mode!r}")


def element_counts(inp: CostModelInput) -> tuple:
    """Element counts (standard, coarse-of-split) at matched resolution."""
    n = inp.order
    vol = inp.l_x * inp.l_y * inp.l_z
    ne_s = vol / (n ** 3 * inp.dx * inp.dy * inp.dz)
    ne_m = ne_s / (inp.r_x * inp.r_z)
    return ne_s, ne_m


def step_counts(inp: CostModelInput) -> tuple:
    """Step counts (standard, coarse-of-split) over the run duration."""
    nt_s = inp.duration / inp.dt
    nt_m = nt_s / inp.r_t
    return nt_s, nt_m


def flops(inp: CostModelInput, mode: str = "standard") -> float:
    """Total floating-point operations for the whole run."""
    _check_mode(mode)
    ne_s, ne_m = element_counts(inp)
    nt_s, nt_m = step_counts(inp)
    kernel = inp.n_p ** 3 * (FLOP_A * inp.n_p + FLOP_B)
    if mode == "standard":
        return nt_s * ne_s * kernel
    # coarse grid plus one embedded fine grid per coarse column: the fine
    # work exceeds the coarse by a factor r_t*r_x*r_z*n_p
    return nt_m * ne_m * (1.0 + inp.r_t * inp.r_x * inp.r_z * inp.n_p) * kernel


def boundary_points(inp: CostModelInput, mode: str = "standard") -> float:
    """Lateral-boundary point count per rank (model, not a plan)."""
    _check_mode(mode)
    n = inp.order
    nez = inp.l_z / (n * inp.dz)
    nex = inp.l_x / (inp.n_rx * n * inp.dx)
    ney = inp.l_y / (inp.n_ry * n * inp.dy)
    if mode == "standard":
        return 2.0 * (nex + ney) * nez * inp.n_p ** 2
    return 2.0 * (nex / inp.r_x + ney) * (nez / inp.r_z) * inp.n_p ** 2


def comm_bytes(inp: CostModelInput, mode: str = "standard") -> float:
    """Total bytes moved between ranks over the whole run."""
    _check_mode(mode)
    nt_s, nt_m = step_counts(inp)
    nt = nt_s if mode == "standard" else nt_m
    return nt * inp.n_r * BYTES_PER_POINT * boundary_points(inp, mode)


def arithmetic_intensity(inp: CostModelInput) -> tuple:
    """(standard, split) flop/byte ratios, computed literally as F/B."""
    return (flops(inp, "standard") / comm_bytes(inp, "standard"),
            flops(inp, "mmf") / comm_bytes(inp, "mmf"))


def simplified_intensity(inp: CostModelInput) -> tuple:
    """Reduced closed forms valid for a symmetric setup.

    Requires n_rx == n_ry, l_x == l_y, dx == dy, r_x == r_t and r_z == 1;
    raises ConfigurationError otherwise.  The coefficients 0.520 and 2.956
    are the rounded ratios 816/1568 and 4635/1568, so agreement with the
    general F/B is to about 0.1%, not machine precision.
    """
    if inp.n_rx != inp.n_ry:
        raise ConfigurationError("simplified form requires n_rx == n_ry")
    if inp.l_x != inp.l_y or inp.dx != inp.dy:
        raise ConfigurationError("simplified form requires l_x == l_y, dx == dy")
    if inp.r_x != inp.r_t or inp.r_z != 1.0:
        raise ConfigurationError("simplified form requires r_x == r_t, r_z == 1")
    r = inp.r_x
    np_ = inp.n_p
    width = inp.n_rx * inp.order * inp.dx / inp.l_x
    kernel = np_ * (0.520 * np_ + 2.956)
    i_s = kernel / (2.0 * width)
    i_m = (1.0 / r + r * np_) / ((1.0 / r + 1.0) * width) * kernel
    return i_s, i_m


@dataclass(frozen=True)
class CostReport:
    """Evaluated cost model with the standard/split ratios spelled out."""

    inputs: CostModelInput
    flops_standard: float
    flops_mmf: float
    bytes_standard: float
    bytes_mmf: float
    intensity_standard: float
    intensity_mmf: float
    flop_ratio: float        # mmf / standard
    byte_ratio: float
    intensity_ratio: float

    def rows(self) -> list:
        """(name, standard, mmf) rows for tabular output."""
        return [
            ("flops", self.flops_standard, self.flops_mmf),
            ("bytes", self.bytes_standard, self.bytes_mmf),
            ("intensity", self.intensity_standard, self.intensity_mmf),
        ]


def cost_report(inp: CostModelInput) -> CostReport:
    f_s = flops(inp, "standard")
    f_m = flops(inp, "mmf")
    b_s = comm_bytes(inp, "standard")
    b_m = comm_bytes(inp, "mmf")
    return CostReport(
        inputs=inp,
        flops_standard=f_s, flops_mmf=f_m,
        bytes_standard=b_s, bytes_mmf=b_m,
        intensity_standard=f_s / b_s, intensity_mmf=f_m / b_m,
        flop_ratio=f_m / f_s, byte_ratio=b_m / b_s,
        intensity_ratio=(f_m / b_m) / (f_s / b_s),
    )


@dataclass(frozen=True)
class RankBlock:
    """One rank's rectangular element block (half-open index ranges)."""

    rank: int
    coords: tuple                 # (ix,) or (ix, iy) rank coordinates
    x_elems: tuple                # (start, stop)
    y_elems: Optional[tuple]      # None on 2D meshes
    z_elems: tuple                # always the full vertical extent
    boundary_points: int          # points this rank sends each step


@dataclass(frozen=True)
class PartitionPlan:
    n_rx: int
    n_ry: int
    blocks: tuple
    total_boundary_points: int


def _suggest_factors(count: int) -> str:
    divs = [d for d in range(1, count + 1) if count % d == 0]
    return ", ".join(str(d) for d in divs)


def plan_partition(elem_counts: Sequence[int], order: int,
                   n_rx: int, n_ry: int = 1,
                   periodic: Optional[Sequence[bool]] = None) -> PartitionPlan:
    """Columns-preserving rectangular partition with actual comm counts.

    ``elem_counts`` is (nex, nez) or (nex, ney, nez); the vertical is never
    split.  Boundary points are counted per element face (n_p per edge in
    2D, n_p^2 per face in 3D, shared interface nodes counted once per
    face), and a face only communicates when its neighbour is a different
    rank, so a single rank communicates nothing even on a periodic mesh.
    """
    elem_counts = tuple(int(e) for e in elem_counts)
    dim = len(elem_counts)
    if dim not in (2, 3):
        raise ConfigurationError("elem_counts must have 2 or 3 entries")
    if order < 1:
        raise ConfigurationError(f"order must be >= 1, got {order}")
    if n_rx < 1 or n_ry < 1:
        raise ConfigurationError("rank factors must be >= 1")
    if dim == 2 and n_ry != 1:
        raise ConfigurationError("a 2D mesh cannot be partitioned in y")
    if periodic is None:
        periodic = (True,) * (dim - 1)
    periodic = tuple(bool(p) for p in periodic)
    if len(periodic) != dim - 1:
        raise ConfigurationError("periodic needs one flag per lateral direction")

    nex = elem_counts[0]
    ney = elem_counts[1] if dim == 3 else None
    nez = elem_counts[-1]
    if nex % n_rx != 0:
        raise ConfigurationError(
            f"{nex} x-elements do not divide over {n_rx} ranks; "
            f"valid factors: {_suggest_factors(nex)}")
    if dim == 3 and ney % n_ry != 0:
        raise ConfigurationError(
            f"{ney} y-elements do not divide over {n_ry} ranks; "
            f"valid factors: {_suggest_factors(ney)}")

    n_p = order + 1
    bx = nex // n_rx
    by = ney // n_ry if dim == 3 else None
    # points on one face perpendicular to x / to y
    if dim == 2:
        face_x = nez * n_p
        face_y = 0
    else:
        face_x = by * nez * n_p ** 2
        face_y = bx * nez * n_p ** 2

    def comm_faces(idx, nr, is_periodic):
        faces = 0
        for side in (-1, +1):
            nb = idx + side
            if 0 <= nb < nr:
                faces += 1          # interior neighbour, always another rank
            elif is_periodic and nr > 1:
                faces += 1          # periodic wrap to a different rank
        return faces

    blocks = []
    total = 0
    for iy in range(n_ry):
        for ix in range(n_rx):
            pts = comm_faces(ix, n_rx, periodic[0]) * face_x
            if dim == 3:
                pts += comm_faces(iy, n_ry, periodic[1]) * face_y
            rank = ix + n_rx * iy
            blocks.append(RankBlock(
                rank=rank,
                coords=(ix,) if dim == 2 else (ix, iy),
                x_elems=(ix * bx, (ix + 1) * bx),
                y_elems=None if dim == 2 else (iy * by, (iy + 1) * by),
                z_elems=(0, nez),
                boundary_points=pts,
            ))
            total += pts
    return PartitionPlan(n_rx=n_rx, n_ry=n_ry, blocks=tuple(blocks),
                         total_boundary_points=total)
