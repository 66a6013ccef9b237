"""Fully nonlinear 1-D Lagrangian free-boundary hydrodynamics.

Radial Navier-Stokes-Poisson flow in mass coordinates x in [0, M]:

    d(rho)/dt + 4 pi rho^2 d(r^2 v)/dx = 0
    dv/dt + 4 pi r^2 d(P - 4 pi W)/dx + x/r^2 = 16 pi eps r^2 d(v/r)/dx
    dr/dt = v

with P = K rho^gamma, the viscous flux

    W = delta rho d(r^2 v)/dx + (4 eps / 3) rho r^3 d(v/r)/dx,

and the vacuum surface condition (P - 4 pi W) = 0 at x = M.  Gravity is
exact in mass coordinates: the enclosed mass at x is x itself, so no
field solve is needed.

Discretization: staggered Lagrangian layout.  Velocities and radii live
on nodes x_0 = 0 < ... < x_N = M; densities, pressures, and viscous
fluxes live in the cells between them.  Cell masses are fixed once and
for all, so continuity is exact: rho equals cell mass over cell volume
to round-off at every step.  The background star is constructed
directly on the staggered grid (discrete hydrostatic balance, see
``discrete_equilibrium``) which makes the unperturbed state an exact
fixed point of the stepper rather than an O(h^2) near-equilibrium.

Time stepping is IMEX: pressure and gravity are explicit at half-step
geometry under an acoustic CFL limit, while the viscous operator, stiff
near the vacuum boundary where rho degenerates, is integrated by
backward Euler with one tridiagonal solve per step.  The resulting
splitting error on the slowly growing mode is O(lambda dt) relative,
far below the few-percent rate tolerances of interest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .equilibrium import StationaryStar
from .errors import (
    AmplitudeOutOfRangeError,
    NoEscapeError,
    StiffFailureError,
    VacuumCollapseError,
    ViscousSolveFailError,
)
from .linear import RateFit, measure_growth_rate
from .modes import GrowingMode

__all__ = [
    "EnergyReport",
    "FluidState",
    "InstabilityResult",
    "LagrangianLab",
    "cfl_dt",
    "discrete_equilibrium",
    "energy_balance_residual",
    "energy_report",
    "escape_time_slope",
    "hydro_faces",
    "identity_check",
    "init_state",
    "run_instability",
    "state_norm0_sq",
    "step",
    "sweep_escape_times",
    "taylor_radius_residual",
]

FOUR_PI = 4.0 * math.pi


def hydro_faces(radius: float, n_cells: int, surface_exponent: float = 1.2) -> np.ndarray:
    """Cell-face radii on [0, radius], optionally clustered at the surface.

    exponent 1 is uniform; larger values shrink the outermost cells where
    the density degenerates.  Clustering is bounded in practice by the
    density floor: once the outermost cell mass-averages below
    1e-14 of the central density the background itself would be clipped,
    so the builder rejects such grids.
    """
    if n_cells < 16:
        raise ValueError(f"n_cells={n_cells} too coarse; need >= 16")
    if surface_exponent < 1.0:
        raise ValueError("surface_exponent must be >= 1")
    u = np.linspace(0.0, 1.0, n_cells + 1)
    faces = radius * (1.0 - (1.0 - u) ** surface_exponent)
    faces[0] = 0.0
    faces[-1] = radius
    return faces


@dataclass(frozen=True)
class LagrangianLab:
    """Immutable staggered-grid background: the discrete hydrostatic star.

    faces are the equilibrium node radii, dm the fixed cell masses, x the
    node masses (x[0] = 0, x[-1] = total mass), node_mass the momentum
    control-volume masses (half cells at the ends).  rho0 / p0 satisfy the
    discrete momentum balance exactly, so a state seeded with them is a
    fixed point of ``step`` up to round-off.
    """

    star: StationaryStar
    faces: np.ndarray
    dm: np.ndarray
    x: np.ndarray
    node_mass: np.ndarray
    rho0: np.ndarray
    p0: np.ndarray
    r0_cells: np.ndarray
    eps: float
    delta: float
    phys_energy0: float
    balance_iterations: int
    balance_residual: float
    # Gauss nodes per cell and the seeding-norm density weight
    # K gamma rho0(z)^(gamma-2) dV there; midpoint sampling of the norm
    # integrand would cost the seeding norm its stated accuracy
    norm_gauss_z: np.ndarray
    norm_gauss_w: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.dm.size

    @property
    def total_mass(self) -> float:
        return float(self.x[-1])

    @property
    def nu(self) -> float:
        # the minimal viscosity coefficient weighting the radius energy
        return min(self.delta, 4.0 * self.eps / 3.0)

    @property
    def rho_floor(self) -> float:
        return 1e-14 * self.star.params.central_density

    def cell_radius(self, r: np.ndarray) -> np.ndarray:
        """Volume-centered radius of each cell for node radii r."""
        return np.cbrt(0.5 * (r[:-1] ** 3 + r[1:] ** 3))


def _node_masses(dm: np.ndarray) -> np.ndarray:
    mbar = np.empty(dm.size + 1)
    mbar[0] = 0.5 * dm[0]
    mbar[-1] = 0.5 * dm[-1]
    mbar[1:-1] = 0.5 * (dm[:-1] + dm[1:])
    return mbar


def _balance_pressures(faces: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Cell pressures balancing gravity for the given cell densities.

    Back-substitution of the staggered momentum equations from the vacuum
    face inward: the same one-sided differences the stepper uses, so a
    state satisfying P = K rho^gamma with these pressures has exactly zero
    acceleration.
    """
    dm = rho * (FOUR_PI / 3.0) * np.diff(faces**3)
    x = np.concatenate(([0.0], np.cumsum(dm)))
    grav = x[1:] / (FOUR_PI * faces[1:] ** 4)    # at nodes 1..N
    mbar = _node_masses(dm)
    incr = mbar[1:-1] * grav[:-1]                # interior nodes 1..N-1
    p = np.empty(rho.size)
    p[-1] = mbar[-1] * grav[-1]
    p[:-1] = p[-1] + np.cumsum(incr[::-1])[::-1]
    return p


def discrete_equilibrium(
    star: StationaryStar,
    n_cells: int = 192,
    surface_exponent: float = 1.2,
    eps: float | None = None,
    delta: float | None = None,
) -> LagrangianLab:
    """Solve the discrete hydrostatic balance on the staggered grid.

    Finds cell densities whose pressures P = K rho^gamma satisfy the same
    one-sided momentum differences the stepper sees, with the vacuum flux
    beyond the last cell.  The fixed point is computed by a Newton-type
    root solve in log density (plain re-substitution diverges: for
    gamma < 4/3 the balance map has an expanding direction, which is the
    very instability this laboratory studies).  eps / delta default to
    the star's viscosities and may be overridden (e.g. zeroed) for
    forced-update checks.
    """
    from scipy.optimize import root

    params = star.params
    faces = hydro_faces(star.radius, n_cells, surface_exponent)
    vol = (FOUR_PI / 3.0) * np.diff(faces**3)
    r_c = np.cbrt(0.5 * (faces[:-1] ** 3 + faces[1:] ** 3))
    k, gamma = params.entropy_k, params.gamma

    def residual(u: np.ndarray) -> np.ndarray:
        p = _balance_pressures(faces, np.exp(u))
        return u - np.log(p / k) / gamma

    guess = np.log(star.rho0(r_c))
    sol = root(residual, guess, method="hybr", tol=1e-14)
    shift = float(np.max(np.abs(sol.fun)))
    if shift > 1e-12:
        raise StiffFailureError(
            f"discrete hydrostatic balance stalled at log residual {shift:.3e}")
    rho = np.exp(sol.x)
    iterations = int(sol.nfev)

    floor = 1e-14 * params.central_density
    if rho.min() < 4.0 * floor:
        raise ValueError(
            "outermost equilibrium cell density "
            f"{rho.min():.3e} sits within 4x of the density floor "
            f"{floor:.3e}; reduce n_cells or surface_exponent")

    dm = rho * vol
    x = np.concatenate(([0.0], np.cumsum(dm)))
    mbar = _node_masses(dm)
    p = k * rho**gamma
    # residual acceleration of the converged background, round-off level
    p_pad = np.concatenate((p, [0.0]))
    accel = (-FOUR_PI * faces[1:] ** 2 * (p_pad[1:] - p[:]) / mbar[1:]
             - x[1:] / faces[1:] ** 2)
    phys0 = (float(np.sum(k * rho ** (gamma - 1.0) / (gamma - 1.0) * dm))
             - float(np.sum(mbar[1:] * x[1:] / faces[1:])))

    nodes_gl, wts_gl = np.polynomial.legendre.leggauss(6)
    half = 0.5 * np.diff(faces)
    mid = 0.5 * (faces[:-1] + faces[1:])
    zg = mid[:, None] + half[:, None] * nodes_gl[None, :]
    wg = half[:, None] * wts_gl[None, :]
    norm_w = (k * gamma * star.rho0(zg.ravel()).reshape(zg.shape)
              ** (gamma - 2.0) * FOUR_PI * zg**2 * wg)
    return LagrangianLab(
        star=star,
        faces=faces,
        dm=dm,
        x=x,
        node_mass=mbar,
        rho0=rho,
        p0=p,
        r0_cells=r_c,
        eps=params.shear_visc if eps is None else float(eps),
        delta=params.bulk_visc if delta is None else float(delta),
        phys_energy0=phys0,
        balance_iterations=iterations,
        balance_residual=float(np.max(np.abs(accel))),
        norm_gauss_z=zg,
        norm_gauss_w=norm_w,
    )


# -- state -----------------------------------------------------------------------


@dataclass
class FluidState:
    """Nonlinear Lagrangian state on the fixed mass grid.

    v and r at nodes (v[0] = 0, r[0] = 0), rho in cells.  clip_count
    tracks density-floor events; any nonzero count marks the run invalid
    for quantitative use.
    """

    lab: LagrangianLab
    time: float
    v: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    clip_count: int = 0

    @property
    def pressure(self) -> np.ndarray:
        p = self.lab.star.params
        return p.entropy_k * self.rho**p.gamma

    @property
    def sigma(self) -> np.ndarray:
        return self.rho - self.lab.rho0

    @property
    def sigma_ratio(self) -> np.ndarray:
        """sigma / rho0 per cell."""
        return self.rho / self.lab.rho0 - 1.0

    def cell_radius(self) -> np.ndarray:
        return self.lab.cell_radius(self.r)

    def mass_residual(self) -> float:
        """Continuity defect: cell mass from rho and volume vs the grid mass."""
        vol = (FOUR_PI / 3.0) * np.diff(self.r**3)
        return float(np.max(np.abs(self.rho * vol / self.lab.dm - 1.0)))

    def viscous_flux(self) -> np.ndarray:
        """W per cell at the current geometry."""
        lab = self.lab
        d_r2v = np.diff(self.r**2 * self.v) / lab.dm
        q = _q_nodes(self.v, self.r)
        d_q = np.diff(q) / lab.dm
        r_c = self.cell_radius()
        return lab.delta * self.rho * d_r2v + (4.0 * lab.eps / 3.0) * self.rho * r_c**3 * d_q

    def sup_norms(self) -> tuple[float, float]:
        """(sup |sigma/rho0|, sup |1 - r0/r|), the guarded amplitude pair."""
        sup_sigma = float(np.max(np.abs(self.sigma_ratio)))
        sup_r = float(np.max(np.abs(1.0 - self.lab.r0_cells / self.cell_radius())))
        return sup_sigma, sup_r


def _q_nodes(v: np.ndarray, r: np.ndarray) -> np.ndarray:
    """v / r at nodes; the center value is the regular limit from node 1."""
    q = np.empty_like(v)
    q[1:] = v[1:] / r[1:]
    q[0] = q[1]
    return q


def init_state(lab: LagrangianLab, mode: GrowingMode | None, iota: float) -> FluidState:
    """Seed the discrete equilibrium with iota times the growing mode.

    rho = rho0 + iota sigma* cell-averaged, v = iota v* at nodes, r from
    exact mass consistency.  iota = 0 reproduces the stationary state
    bitwise (mode may be None in that case).  The admissibility condition
    rho0 + iota sigma* >= 0.9 rho0 is enforced cellwise.
    """
    if not np.isfinite(iota) or iota < 0.0:
        raise ValueError("iota must be a nonnegative finite number")
    if iota == 0.0:
        return FluidState(lab, 0.0, np.zeros(lab.n_cells + 1),
                          lab.faces.copy(), lab.rho0.copy())
    sigma_star = mode.sigma_of_z(lab.r0_cells)
    rho = lab.rho0 + iota * sigma_star
    if np.any(rho < 0.9 * lab.rho0):
        worst = float(np.max(-iota * sigma_star / lab.rho0))
        raise AmplitudeOutOfRangeError(
            f"iota={iota:.3e} depletes a cell by {worst:.3f} of rho0 (limit 0.1)")
    v = np.empty(lab.n_cells + 1)
    v[0] = 0.0
    v[1:] = iota * mode.v_of_z(lab.faces[1:])
    r3 = np.concatenate(([0.0], np.cumsum(lab.dm / rho))) * (3.0 / FOUR_PI)
    return FluidState(lab, 0.0, v, np.cbrt(r3), rho)


# -- stepping --------------------------------------------------------------------


def _viscous_coefficients(lab: LagrangianLab, r: np.ndarray, rho: np.ndarray):
    """Tridiagonal rows (lo, di, up) of the linear-in-v viscous operator.

    Row j gives the viscous acceleration at node j as
    lo[j] v[j-1] + di[j] v[j] + up[j] v[j+1]; row 0 is zero (pinned
    center).  Includes both the flux divergence of W and the
    non-conservative 16 pi eps r^2 d(v/r)/dx term; the vacuum face value
    of W beyond the last cell is zero together with the pressure there.
    """
    n = lab.n_cells
    dm, mbar = lab.dm, lab.node_mass
    r2 = r**2
    r_c = lab.cell_radius(r)
    alpha = lab.delta * rho / dm
    beta = (4.0 * lab.eps / 3.0) * rho * r_c**3 / dm
    inv_r = np.zeros(n + 1)
    inv_r[1:] = 1.0 / r[1:]

    f = np.zeros(n + 1)
    f[1:] = 16.0 * math.pi**2 * r2[1:] / mbar[1:]
    g_half = np.zeros(n + 1)
    g_half[1:] = 16.0 * math.pi * lab.eps * r2[1:] / (2.0 * mbar[1:])

    lo = np.zeros(n + 1)
    di = np.zeros(n + 1)
    up = np.zeros(n + 1)

    j = np.arange(1, n)  # interior nodes
    up[j] = f[j] * (alpha[j] * r2[j + 1] + beta[j] * inv_r[j + 1]) \
        + g_half[j] * inv_r[j + 1]
    di[j] = -f[j] * ((alpha[j] + alpha[j - 1]) * r2[j]
                     + (beta[j] + beta[j - 1]) * inv_r[j])
    lo[j] = f[j] * (alpha[j - 1] * r2[j - 1] + beta[j - 1] * inv_r[j - 1]) \
        - g_half[j] * inv_r[j - 1]

    # center cell: q at the origin is the regular limit q_1, so the strain
    # difference of cell 0 and the centered d(v/r) at node 1 lose their
    # q_0 leg onto the diagonal
    di[1] += f[1] * beta[0] * inv_r[1] - g_half[1] * inv_r[1]

    # surface node: vacuum flux beyond the last cell, one-sided d(v/r)
    di[n] = -f[n] * (alpha[n - 1] * r2[n] + beta[n - 1] * inv_r[n])
    lo[n] = f[n] * (alpha[n - 1] * r2[n - 1] + beta[n - 1] * inv_r[n - 1])
    g_surf = 16.0 * math.pi * lab.eps * r2[n] / dm[n - 1]
    di[n] += g_surf * inv_r[n]
    lo[n] -= g_surf * inv_r[n - 1]
    return lo, di, up


def _explicit_accel(lab: LagrangianLab, r: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Pressure-gradient plus gravity acceleration at nodes; row 0 is zero."""
    a = np.zeros(lab.n_cells + 1)
    p_pad = np.concatenate((p, [0.0]))            # vacuum beyond the surface
    a[1:] = (-FOUR_PI * r[1:] ** 2 * (p_pad[1:] - p[:]) / lab.node_mass[1:]
             - lab.x[1:] / r[1:] ** 2)
    return a


def _viscous_accel(lab: LagrangianLab, r: np.ndarray, rho: np.ndarray,
                   v: np.ndarray) -> np.ndarray:
    lo, di, up = _viscous_coefficients(lab, r, rho)
    acc = di * v
    acc[1:] += lo[1:] * v[:-1]
    acc[:-1] += up[:-1] * v[1:]
    return acc


def _cell_volumes(r: np.ndarray) -> np.ndarray:
    vol = (FOUR_PI / 3.0) * np.diff(r**3)
    if np.any(vol <= 0.0) or not np.all(np.isfinite(vol)):
        raise VacuumCollapseError("cell volume collapsed or inverted")
    return vol


def step(state: FluidState, dt: float, include_pressure: bool = True) -> FluidState:
    """Advance one IMEX step: explicit pressure/gravity, implicit viscosity.

    Geometry for the force evaluation is the half-step predictor
    r + dt v / 2; the viscous solve is backward Euler on the frozen
    half-step geometry.  Afterwards r advances with the midpoint velocity
    and rho is recomputed from the exact per-cell mass.  Setting
    include_pressure False (with zero viscosities in the lab) reduces the
    update to the pure gravity kick dv = -dt x / r^2.
    """
    if not np.isfinite(dt) or dt <= 0.0:
        raise ValueError("step size must be positive and finite")
    lab = state.lab
    r_h = state.r + 0.5 * dt * state.v
    vol_h = _cell_volumes(r_h)
    rho_h = lab.dm / vol_h
    if include_pressure:
        p_h = lab.star.params.entropy_k * rho_h**lab.star.params.gamma
    else:
        p_h = np.zeros(lab.n_cells)
    rhs = state.v + dt * _explicit_accel(lab, r_h, p_h)
    rhs[0] = 0.0

    lo, di, up = _viscous_coefficients(lab, r_h, rho_h)
    n1 = lab.n_cells + 1
    ab = np.zeros((3, n1))
    ab[0, 1:] = -dt * up[:-1]
    ab[1, :] = 1.0 - dt * di
    ab[2, :-1] = -dt * lo[1:]
    try:
        v_new = solve_banded((1, 1), ab, rhs)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ViscousSolveFailError(str(exc)) from exc
    if not np.all(np.isfinite(v_new)):
        raise ViscousSolveFailError("viscous solve produced non-finite velocities")
    v_new[0] = 0.0

    r_new = state.r + 0.5 * dt * (state.v + v_new)
    rho_new = lab.dm / _cell_volumes(r_new)
    clipped = int(np.count_nonzero(rho_new < lab.rho_floor))
    if clipped:
        rho_new = np.maximum(rho_new, lab.rho_floor)
    return FluidState(lab, state.time + dt, v_new, r_new, rho_new,
                      clip_count=state.clip_count + clipped)


def cfl_dt(state: FluidState, cfl: float = 0.5) -> float:
    """Acoustic step limit: cfl times the minimal cell crossing time."""
    if cfl <= 0.0:
        raise ValueError("cfl must be positive")
    gamma = state.lab.star.params.gamma
    c_s = np.sqrt(gamma * state.pressure / state.rho)
    return float(cfl * np.min(np.diff(state.r) / c_s))


# -- diagnostics -----------------------------------------------------------------


@dataclass(frozen=True)
class EnergyReport:
    """Instantaneous energy / dissipation diagnostics of a fluid state.

    physical_energy is measured relative to the discrete stationary value
    so the report vanishes identically at equilibrium; its time derivative
    is what the balance check uses.  Its gravity term is the node potential
    -sum mbar x/r whose gradient is the momentum stencil's force, making
    the stationary background an exact critical point of the reported
    functional.  scheme_dissipation is the viscous power -v.(Lv) of the
    actual tridiagonal operator; it approaches d0 under refinement and is
    the series against which the balance residual is exact up to time
    discretization.  sup_sigma and sup_r are the guarded amplitude pair
    sup |sigma/rho0| and sup |1 - r0/r|.
    """

    e0_v: float
    e0_sigma: float
    e0_r: float
    d0: float
    e1: float
    d1: float
    e2: float
    d2: float
    physical_energy: float
    sup_sigma: float
    sup_r: float
    e1_v: float
    e1_sigma: float
    scheme_dissipation: float

    @property
    def e0(self) -> float:
        return self.e0_v + self.e0_sigma + self.e0_r

    @property
    def sqrt_e0(self) -> float:
        return math.sqrt(self.e0)

    @property
    def data_norm(self) -> float:
        """sqrt(E0v + E0sigma + E1v) + sqrt(E0r), the seeding amplitude."""
        return math.sqrt(self.e0_v + self.e0_sigma + self.e1_v) + math.sqrt(self.e0_r)


def energy_report(state: FluidState,
                  dots: tuple[np.ndarray, np.ndarray] | None = None) -> EnergyReport:
    """Quadrature of the energy family on the staggered grid.

    dots optionally supplies (dv/dt at nodes, d(sigma/rho0)/dt in cells);
    by default both are evaluated from the spatial operators, i.e. the
    momentum equation and the continuity equation at the current state.
    """
    lab = state.lab
    params = lab.star.params
    k, gamma = params.entropy_k, params.gamma
    dm, mbar = lab.dm, lab.node_mass
    v, r, rho = state.v, state.r, state.rho
    r_c = state.cell_radius()
    s = state.sigma_ratio
    one_plus = 1.0 + s

    e0_v = 0.5 * float(np.sum(v**2 * mbar))
    e0_sigma = 0.5 * float(np.sum(
        k * gamma * lab.rho0 ** (gamma - 1.0) / one_plus**2 * s**2 * dm))
    ratio_r = 1.0 - lab.r0_cells / r_c
    e0_r = 0.5 * lab.nu * float(np.sum(ratio_r**2 * dm))

    d_r2v = np.diff(r**2 * v) / dm
    d_q = np.diff(_q_nodes(v, r)) / dm
    pi2_16 = 16.0 * math.pi**2
    strain_d = pi2_16 * rho * d_r2v**2
    strain_s = pi2_16 * rho * r_c**6 * d_q**2
    d0 = float(np.sum((lab.delta * strain_d + (4.0 * lab.eps / 3.0) * strain_s) * dm))
    e1_v = 0.5 * d0

    # sigma gradient lives at interior nodes (cell-to-cell differences)
    ds = np.diff(s) / mbar[1:-1]
    s_node = 0.5 * (s[:-1] + s[1:])
    visc_sum = lab.delta + 4.0 * lab.eps / 3.0
    e1_sigma = 0.5 * float(np.sum(
        visc_sum * pi2_16 * r[1:-1] ** 4 / (1.0 + s_node) * ds**2 * mbar[1:-1]))
    e1 = e1_v + e1_sigma

    if dots is None:
        v_dot = (_explicit_accel(lab, r, state.pressure)
                 + _viscous_accel(lab, r, rho, v))
        s_dot = -FOUR_PI * rho**2 * d_r2v / lab.rho0
    else:
        v_dot, s_dot = dots
    e2 = 0.5 * float(np.sum(v_dot**2 * mbar)) + 0.5 * float(np.sum(
        k * gamma * lab.rho0 ** (gamma - 1.0) / one_plus**2 * s_dot**2 * dm))

    rho0_node = 0.5 * (lab.rho0[:-1] + lab.rho0[1:])
    d1 = float(np.sum(v_dot**2 * mbar)) + float(np.sum(
        pi2_16 * k * gamma * r[1:-1] ** 4 * rho0_node**gamma * ds**2 * mbar[1:-1]))

    d_r2vd = np.diff(r**2 * v_dot) / dm
    d_qd = np.diff(_q_nodes(v_dot, r)) / dm
    d2 = float(np.sum((lab.delta * pi2_16 * rho * d_r2vd**2
                       + (4.0 * lab.eps / 3.0) * pi2_16 * rho * r_c**6 * d_qd**2) * dm))

    # node-based potential: its gradient is exactly the -x/r^2 force term
    phys = (0.5 * float(np.sum(v**2 * mbar))
            + float(np.sum(k * rho ** (gamma - 1.0) / (gamma - 1.0) * dm))
            - float(np.sum(mbar[1:] * lab.x[1:] / r[1:]))
            - lab.phys_energy0)

    visc_power = _viscous_accel(lab, r, rho, v)
    d_scheme = -float(np.sum(v * visc_power * mbar))

    sup_sigma, sup_r = state.sup_norms()
    return EnergyReport(e0_v=e0_v, e0_sigma=e0_sigma, e0_r=e0_r, d0=d0,
                        e1=e1, d1=d1, e2=e2, d2=d2, physical_energy=phys,
                        sup_sigma=sup_sigma, sup_r=sup_r,
                        e1_v=e1_v, e1_sigma=e1_sigma,
                        scheme_dissipation=d_scheme)


def energy_balance_residual(times: np.ndarray, physical_energy: np.ndarray,
                            d0: np.ndarray) -> np.ndarray:
    """d(physical energy)/dt plus the dissipation rate, sampled midpoints.

    The continuous system satisfies this identically (the vacuum boundary
    flux vanishes), so the series measures the scheme defect.
    """
    times = np.asarray(times, dtype=float)
    e = np.asarray(physical_energy, dtype=float)
    d = np.asarray(d0, dtype=float)
    if times.size < 2:
        raise ValueError("need at least two samples to difference")
    return np.diff(e) / np.diff(times) + 0.5 * (d[:-1] + d[1:])


def identity_check(state: FluidState) -> tuple[float, float]:
    """Both sides of int v^2/(rho r^2) <= (32 pi^2/9) int rho [..] dx."""
    lab = state.lab
    v_c = 0.5 * (state.v[:-1] + state.v[1:])
    r_c = state.cell_radius()
    lhs = float(np.sum(v_c**2 / (state.rho * r_c**2) * lab.dm))
    d_r2v = np.diff(state.r**2 * state.v) / lab.dm
    d_q = np.diff(_q_nodes(state.v, state.r)) / lab.dm
    rhs = (32.0 * math.pi**2 / 9.0) * float(np.sum(
        state.rho * (d_r2v**2 + r_c**6 * d_q**2) * lab.dm))
    return lhs, rhs


def taylor_radius_residual(state: FluidState) -> float:
    """Defect of the first-order expansion of r0/r in the density shift.

    r0/r - 1 should match (1/(4 pi r0^3)) int_0^x sigma/rho0^2 dy up to a
    quadratic remainder; returns the sup of the difference over interior
    nodes.
    """
    lab = state.lab
    lead = np.cumsum(state.sigma / lab.rho0**2 * lab.dm)
    geo = lab.faces[1:] / state.r[1:] - 1.0
    return float(np.max(np.abs(geo - lead / (FOUR_PI * lab.faces[1:] ** 3))))


def state_norm0_sq(state: FluidState) -> float:
    """Linearized data norm of (sigma, w): the seeding normalization.

    Quadratics are frozen at the equilibrium geometry, matching the norm
    in which the growing mode has unit amplitude.
    """
    from scipy.interpolate import CubicSpline

    lab = state.lab
    # cell values are midpoint samples of a smooth field; integrating their
    # spline against the exact weight removes the h^2 sampling error that
    # would otherwise dominate the seeding norm
    sigma_of = CubicSpline(lab.r0_cells, state.sigma)
    e_sigma = 0.5 * float(np.sum(lab.norm_gauss_w * sigma_of(lab.norm_gauss_z) ** 2))
    e_v = 0.5 * float(np.sum(state.v**2 * lab.node_mass))
    d_r2v = np.diff(lab.faces**2 * state.v) / lab.dm
    d_q = np.diff(_q_nodes(state.v, lab.faces)) / lab.dm
    pi2_16 = 16.0 * math.pi**2
    e_strain = 0.5 * float(np.sum(
        pi2_16 * lab.rho0 * (lab.delta * d_r2v**2
                             + (4.0 * lab.eps / 3.0) * lab.r0_cells**6 * d_q**2)
        * lab.dm))
    return e_sigma + e_v + e_strain


# -- the instability experiment ----------------------------------------------------


@dataclass
class InstabilityResult:
    """Escape-time experiment record with the trajectory diagnostics."""

    iota: float
    theta0: float
    escape_time: float
    rate_fit: RateFit | None
    times: np.ndarray
    sqrt_e0: np.ndarray
    e0_v: np.ndarray
    e0_sigma: np.ndarray
    e0_r: np.ndarray
    d0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    physical_energy: np.ndarray
    sup_sigma: np.ndarray
    sup_r: np.ndarray
    scheme_dissipation: np.ndarray
    dt: float
    n_steps: int
    clip_count: int

    @property
    def valid(self) -> bool:
        # any density-floor clip disqualifies the run from quantitative use
        return self.clip_count == 0

    @property
    def sup_sigma_max(self) -> float:
        return float(np.max(self.sup_sigma))

    @property
    def sup_r_max(self) -> float:
        return float(np.max(self.sup_r))


def run_instability(
    lab: LagrangianLab,
    mode: GrowingMode,
    iota: float,
    theta0: float,
    t_max: float,
    cfl: float = 0.5,
    sample_interval: float | None = None,
    rate_discard: float | None = None,
) -> InstabilityResult:
    """Evolve modal data of amplitude iota until sqrt(E0) crosses theta0.

    The escape time is refined by log-linear interpolation between the
    bracketing samples.  The growth rate is fitted on sqrt(E0) over the
    samples with sqrt(E0) in [10 iota, theta0/10], discarding an initial
    transient window (default one e-folding time) so the O(iota^2)
    seeding mismatch decays out of the fit; None if fewer than ten
    samples qualify.  No crossing by t_max raises the no-escape error
    with the final amplitude.
    """
    if theta0 <= iota:
        raise ValueError("theta0 must exceed iota")
    lam = mode.growth_rate
    if sample_interval is None:
        sample_interval = 1.0 / (25.0 * lam)
    if rate_discard is None:
        rate_discard = 1.0 / lam

    state = init_state(lab, mode, iota)
    dt = cfl_dt(state, cfl)
    stride = max(1, int(round(sample_interval / dt)))

    records: list[tuple] = []

    def sample(st: FluidState) -> float:
        rep = energy_report(st)
        records.append((st.time, rep.sqrt_e0, rep.e0_v, rep.e0_sigma, rep.e0_r,
                        rep.d0, rep.e1, rep.e2, rep.physical_energy,
                        rep.sup_sigma, rep.sup_r, rep.scheme_dissipation))
        return rep.sqrt_e0

    amp = sample(state)
    n_steps = 0
    escape_time = None
    while state.time < t_max:
        for _ in range(stride):
            state = step(state, dt)
            n_steps += 1
        prev_amp, prev_time = amp, records[-1][0]
        amp = sample(state)
        if amp >= theta0:
            # log-linear refinement inside the bracketing interval
            frac = ((math.log(theta0) - math.log(prev_amp))
                    / (math.log(amp) - math.log(prev_amp)))
            escape_time = prev_time + frac * (state.time - prev_time)
            break
    cols = [np.asarray(c) for c in zip(*records)]
    (times, sqrt_e0, e0_v, e0_sigma, e0_r, d0, e1, e2, phys,
     sup_sigma, sup_r, d_scheme) = cols
    if escape_time is None:
        raise NoEscapeError(
            f"amplitude {amp:.3e} never reached theta0={theta0:.3e} "
            f"by t_max={t_max:.6g}")

    window = (times >= rate_discard) & (sqrt_e0 >= 10.0 * iota) \
        & (sqrt_e0 <= theta0 / 10.0)
    rate_fit = None
    if int(np.count_nonzero(window)) >= 10:
        rate_fit = measure_growth_rate(times[window], sqrt_e0[window])

    return InstabilityResult(
        iota=iota, theta0=theta0, escape_time=float(escape_time),
        rate_fit=rate_fit, times=times, sqrt_e0=sqrt_e0, e0_v=e0_v,
        e0_sigma=e0_sigma, e0_r=e0_r, d0=d0, e1=e1, e2=e2,
        physical_energy=phys, sup_sigma=sup_sigma, sup_r=sup_r,
        scheme_dissipation=d_scheme,
        dt=dt, n_steps=n_steps, clip_count=state.clip_count)


def sweep_escape_times(
    lab: LagrangianLab,
    mode: GrowingMode,
    iotas,
    theta0: float,
    t_max: float,
    **kwargs,
) -> list[InstabilityResult]:
    """Run the escape experiment for each amplitude in sequence."""
    return [run_instability(lab, mode, float(iota), theta0, t_max, **kwargs)
            for iota in iotas]


def escape_time_slope(results: list[InstabilityResult]) -> tuple[float, float]:
    """Fit escape_time against ln(1/iota); the slope estimates 1/lambda."""
    if len(results) < 2:
        raise ValueError("need at least two runs to fit a slope")
    logs = np.array([math.log(1.0 / res.iota) for res in results])
    times = np.array([res.escape_time for res in results])
    slope, intercept = np.polyfit(logs, times, 1)
    return float(slope), float(intercept)
