"""Polytropic equilibrium stars in gravitational units (G = 1).

A barotropic gas ball with pressure law P = K rho^gamma in hydrostatic
balance with its own Newtonian gravity is the classical polytrope of
index n = 1/(gamma - 1).  Writing rho0(z) = rho_c theta(xi)^n with
z = alpha xi and

    alpha^2 = (n + 1) K rho_c^(1/n - 1) / (4 pi),

theta solves the Lane-Emden equation

    (xi^2 theta')' = -xi^2 theta^n,   theta(0) = 1, theta'(0) = 0.

For n < 5 theta has a first zero xi1 < infinity; the star has radius
R = alpha xi1 and total mass M = -4 pi alpha^3 rho_c xi1^2 theta'(xi1).
The enclosed mass m(xi) = int_0^xi s^2 theta^n ds is accumulated as an
extra state of the same integration, so that the tabulated mass
coordinate is independent of the identity m = -xi^2 theta' and the
hydrostatic residual measures genuine solver consistency.

Everything downstream (mode solver, evolutions) consumes the
:class:`StationaryStar` container built here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import (
    DegenerateGridError,
    InfiniteSupportError,
    MonotonicityViolationError,
    StiffFailureError,
    UnsupportedGammaError,
    ZeroNotFoundError,
)

# Dimensionless radius below which the power series replaces the ODE;
# the regular singular point at xi = 0 is not integrable directly.
SERIES_CUT = 1e-4


@dataclass(frozen=True)
class PolytropeParams:
    """Physical parameters of the viscous polytropic star.

    Attributes:
        gamma: adiabatic exponent, 1 < gamma < 2 for equilibrium,
            6/5 < gamma < 4/3 for the instability window.
        entropy_k: entropy constant K in P = K rho^gamma.
        shear_visc: shear viscosity epsilon >= 0.
        bulk_visc: bulk viscosity delta >= 0.
        central_density: rho_c > 0.
    """

    gamma: float = 1.25
    entropy_k: float = 1.0
    shear_visc: float = 1.0
    bulk_visc: float = 1.0
    central_density: float = 1.0

    def __post_init__(self):
        if not (1.0 < self.gamma < 2.0):
            raise UnsupportedGammaError(
                f"gamma={self.gamma} outside the supported range (1, 2)")
        if self.entropy_k <= 0.0:
            raise UnsupportedGammaError("entropy constant K must be positive")
        if self.central_density <= 0.0:
            raise UnsupportedGammaError("central density must be positive")
        if self.shear_visc < 0.0 or self.bulk_visc < 0.0:
            raise UnsupportedGammaError("viscosities must be nonnegative")

    @property
    def index_n(self) -> float:
        return 1.0 / (self.gamma - 1.0)

    @property
    def alpha(self) -> float:
        """Length scale of the Lane-Emden rescaling z = alpha xi."""
        n = self.index_n
        return np.sqrt((n + 1.0) * self.entropy_k
                       * self.central_density ** (1.0 / n - 1.0) / (4.0 * np.pi))

    @property
    def in_unstable_window(self) -> bool:
        return 6.0 / 5.0 < self.gamma < 4.0 / 3.0

    @property
    def visc_min(self) -> float:
        """nu = min(delta, 4 epsilon / 3), the weaker viscous coefficient."""
        return min(self.bulk_visc, 4.0 * self.shear_visc / 3.0)


def _series_eval(xi, n):
    """Power series of theta, theta', m about xi = 0 (through xi^6)."""
    xi = np.asarray(xi, dtype=float)
    xi2 = xi * xi
    c6 = n * (8.0 * n - 5.0) / 15120.0
    theta = 1.0 - xi2 / 6.0 + n * xi2 * xi2 / 120.0 - c6 * xi2 ** 3
    dtheta = -xi / 3.0 + n * xi * xi2 / 30.0 - 6.0 * c6 * xi2 ** 2 * xi
    mass = xi * xi2 / 3.0 - n * xi2 * xi2 * xi / 30.0 \
        + n * (8.0 * n - 5.0) * xi2 ** 3 * xi / 2520.0
    return theta, dtheta, mass


@dataclass
class EmdenSolution:
    """Lane-Emden profile with enclosed-mass state.

    xi_grid, theta, dtheta, mass are tabulated on the accepted solver
    steps (series start included); first_zero is xi1, or None when
    n >= 5 (infinite support).  Evaluation methods use the dense solver
    output above SERIES_CUT and the power series below it.
    """

    index_n: float
    xi_grid: np.ndarray
    theta: np.ndarray
    dtheta: np.ndarray
    mass: np.ndarray
    first_zero: float | None
    tol: float
    _dense: object = field(repr=False, default=None)

    def _eval(self, xi, component):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        out = np.empty_like(xi)
        small = xi < SERIES_CUT
        if small.any():
            out[small] = _series_eval(xi[small], self.index_n)[component]
        rest = ~small
        if rest.any():
            hi = self.xi_grid[-1]
            clipped = np.minimum(xi[rest], hi)
            vals = self._dense(clipped)[component]
            if component == 0:
                vals = np.maximum(vals, 0.0)
                if self.first_zero is not None:
                    vals[xi[rest] >= self.first_zero] = 0.0
            out[rest] = vals
        return out

    def theta_at(self, xi):
        return self._eval(xi, 0)

    def dtheta_at(self, xi):
        return self._eval(xi, 1)

    def mass_at(self, xi):
        return self._eval(xi, 2)

    @property
    def dtheta_at_zero(self) -> float:
        if self.first_zero is None:
            raise InfiniteSupportError("profile has no zero (n >= 5)")
        return float(self.dtheta_at(self.first_zero)[0])


def integrate_emden(n: float, tol: float = 1e-12,
                    xi_max: float | None = None) -> EmdenSolution:
    """Integrate the Lane-Emden equation of index n.

    Starts from the power series at SERIES_CUT, runs an adaptive
    high-order integrator with a terminal root event on theta, and
    polishes the first zero against the dense output.  For n >= 5 (no
    zero) the profile is integrated out to xi_max and first_zero is
    None.

    Raises:
        ZeroNotFoundError: n < 5 but no sign change before xi_max.
        StiffFailureError: the integrator gave up.
    """
    if n <= 0:
        raise UnsupportedGammaError(f"polytropic index n={n} must be positive")
    has_zero = n < 5.0
    if xi_max is None:
        xi_max = 1e3 if has_zero else 50.0

    def rhs(xi, y):
        theta = max(y[0], 0.0)
        tn = theta ** n
        return (y[1], -tn - 2.0 * y[1] / xi, xi * xi * tn)

    def surface(xi, y):
        return y[0]
    surface.terminal = has_zero
    surface.direction = -1.0

    t0, dt0, m0 = _series_eval(SERIES_CUT, n)
    sol = solve_ivp(rhs, (SERIES_CUT, xi_max), [float(t0), float(dt0), float(m0)],
                    method="DOP853", rtol=tol, atol=tol * 1e-3,
                    events=surface, dense_output=True)
    if not sol.success:
        raise StiffFailureError(f"Lane-Emden integration failed: {sol.message}")

    first_zero = None
    if has_zero:
        if sol.t_events[0].size == 0:
            raise ZeroNotFoundError(
                f"no surface zero found below xi_max={xi_max} for n={n}")
        xi1 = float(sol.t_events[0][0])
        # polish against the dense output; the event root is already
        # tight but this pins the bracketing contract explicitly
        lo, hi = 0.999 * xi1, min(1.001 * xi1, sol.t[-1])
        if sol.sol(lo)[0] > 0.0 > sol.sol(hi)[0]:
            xi1 = brentq(lambda x: sol.sol(x)[0], lo, hi, xtol=1e-15 * xi1)
        first_zero = xi1

    return _finalize_solution(n, sol, first_zero, tol, xi_max)


def _finalize_solution(n, sol, first_zero, tol, xi_max):
    end = first_zero if first_zero is not None else xi_max
    grid = sol.t[sol.t < end]
    grid = np.concatenate([grid, [end]])
    vals = sol.sol(grid)
    theta = np.maximum(vals[0], 0.0)
    if first_zero is not None:
        theta[-1] = 0.0
    return EmdenSolution(index_n=n, xi_grid=grid, theta=theta,
                         dtheta=vals[1], mass=vals[2],
                         first_zero=first_zero, tol=tol, _dense=sol.sol)


_GAUSS10 = np.polynomial.legendre.leggauss(10)


def _cell_masses(emden: EmdenSolution, params: PolytropeParams,
                 z_nodes: np.ndarray) -> np.ndarray:
    """Exact-to-quadrature masses int 4 pi s^2 rho0 ds over each cell.

    Near the surface the enclosed-mass function is flat to far below
    float resolution (theta^n with theta ~ 1e-4), so differencing the
    integrated mass state cannot produce positive cell masses there;
    per-cell quadrature of the positive integrand can.
    """
    gx, gw = _GAUSS10
    a = z_nodes[:-1]
    h = np.diff(z_nodes)
    pts = a[:, None] + np.outer(h, 0.5 * (gx + 1.0))
    th = emden.theta_at(pts.ravel() / params.alpha).reshape(pts.shape)
    rho = params.central_density * th ** emden.index_n
    integrand = 4.0 * np.pi * pts ** 2 * rho
    return 0.5 * h * (integrand @ gw)


@dataclass
class MassMap:
    """Mass-coordinate tables of a star.

    Nodes are images x(z_j) of a uniform z grid, which makes the cell
    widths shrink like (M - x)^(1/gamma) toward the surface (the
    degenerate end) and like x^(2/3) toward the center.
    """

    x: np.ndarray          # mass nodes, x[0] = 0, x[-1] = M
    z: np.ndarray          # r0 at the nodes (uniform in z)
    rho0: np.ndarray       # equilibrium density at the nodes, 0 at M

    @property
    def n_cells(self) -> int:
        return self.x.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.x)


@dataclass
class StationaryStar:
    """Equilibrium star with dense profile tables and coordinate maps."""

    params: PolytropeParams
    emden: EmdenSolution
    radius: float
    mass: float
    z_table: np.ndarray
    rho0_table: np.ndarray
    p0_table: np.ndarray
    dp0dz_table: np.ndarray
    x_table: np.ndarray

    @property
    def alpha(self) -> float:
        return self.params.alpha

    # -- z-side profile evaluation (dense ODE accuracy) --

    def rho0(self, z):
        th = self.emden.theta_at(np.asarray(z) / self.alpha)
        return self.params.central_density * th ** self.emden.index_n

    def p0(self, z):
        return self.params.entropy_k * self.rho0(z) ** self.params.gamma

    def dp0dz(self, z):
        """Profile-route pressure gradient K rho_c^g (n+1) theta^n theta' / alpha."""
        p = self.params
        n = self.emden.index_n
        xi = np.asarray(z) / self.alpha
        th = self.emden.theta_at(xi)
        return (p.entropy_k * p.central_density ** p.gamma * (n + 1.0)
                * th ** n * self.emden.dtheta_at(xi) / self.alpha)

    def dp0dx(self, z):
        """d P0 / dx along the profile; the theta^n / theta^n cancellation
        is done analytically so the surface value is finite."""
        p = self.params
        n = self.emden.index_n
        xi = np.asarray(z, dtype=float) / self.alpha
        return (p.entropy_k * (n + 1.0) * p.central_density ** (p.gamma - 1.0)
                * self.emden.dtheta_at(xi)
                / (4.0 * np.pi * self.alpha * np.asarray(z) ** 2))

    def mass_x(self, z):
        """Mass coordinate x(z), from the integrated enclosed-mass state."""
        p = self.params
        return (4.0 * np.pi * self.alpha ** 3 * p.central_density
                * self.emden.mass_at(np.asarray(z) / self.alpha))

    def drho0dz(self, z):
        p = self.params
        n = self.emden.index_n
        xi = np.asarray(z) / self.alpha
        th = self.emden.theta_at(xi)
        return (p.central_density * n * th ** (n - 1.0)
                * self.emden.dtheta_at(xi) / self.alpha)

    # -- x-side maps --

    @cached_property
    def _z_of_x(self):
        # interpolate z^3 against x: z^3 is C^1 in x at the center
        # (d z^3 / dx = 3 / (4 pi rho0)), unlike z itself.  The mass
        # coordinate is flat beyond float resolution at the surface
        # (increments ~ (R-z)^(n+1)), so collapse duplicate x values
        # and let the final segment carry z = R.
        x = self.x_table
        w = self.z_table ** 3
        keep = np.ones(x.size, dtype=bool)
        keep[1:] = np.diff(x) > 0.0
        xs, ws = x[keep], w[keep]
        if x[-1] > xs[-1]:
            xs = np.append(xs, x[-1])
            ws = np.append(ws, w[-1])
        else:
            ws[-1] = w[-1]
        return PchipInterpolator(xs, ws)

    def r0_of_x(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.mass)
        return np.cbrt(np.maximum(self._z_of_x(x), 0.0))

    def rho0_of_x(self, x):
        return self.rho0(self.r0_of_x(x))

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_z_of_x", None)
        return state

    @property
    def sup_x_over_r03(self) -> float:
        """sup of x / r0^3, attained at the center (4 pi rho_c / 3)."""
        center = 4.0 * np.pi * self.params.central_density / 3.0
        z = self.z_table[1:]
        return float(max(center, np.max(self.x_table[1:] / z ** 3)))


def build_star(params: PolytropeParams, tol: float = 1e-12,
               n_profile: int = 4096) -> StationaryStar:
    """Solve the equilibrium profile and assemble the star container.

    The profile table spans [0, R] on a uniform z grid of n_profile
    cells; evaluation methods go through the dense ODE output, so table
    resolution only matters for the x->z inverse map and CSV export.
    """
    n = params.index_n
    emden = integrate_emden(n, tol=tol)
    if emden.first_zero is None:
        raise InfiniteSupportError(
            f"gamma={params.gamma} gives index n={n} >= 5: no finite radius")
    alpha = params.alpha
    xi1 = emden.first_zero
    radius = alpha * xi1
    mass = -4.0 * np.pi * alpha ** 3 * params.central_density \
        * xi1 ** 2 * emden.dtheta_at_zero

    z = np.linspace(0.0, radius, n_profile + 1)
    rho0 = params.central_density * emden.theta_at(z / alpha) ** n
    rho0[-1] = 0.0
    p0 = params.entropy_k * rho0 ** params.gamma
    xi = z / alpha
    dp0dz = (params.entropy_k * params.central_density ** params.gamma
             * (n + 1.0) * emden.theta_at(xi) ** n * emden.dtheta_at(xi) / alpha)
    cell = _cell_masses(emden, params, z)
    if np.any(cell <= 0.0):
        raise MonotonicityViolationError("mass coordinate is not increasing")
    x = np.concatenate([[0.0], np.cumsum(cell)])

    return StationaryStar(params=params, emden=emden, radius=radius,
                          mass=mass, z_table=z, rho0_table=rho0,
                          p0_table=p0, dp0dz_table=dp0dz, x_table=x)


def mass_map(star: StationaryStar, n_cells: int = 512) -> MassMap:
    """Tabulate the mass coordinate on a surface-graded grid.

    Nodes are x(z_j) for z_j uniform on [0, R]; the resulting cell
    widths scale like (M - x)^(1/gamma) at the surface.  The exact
    endpoint values 0 and M are pinned.
    """
    if n_cells < 4:
        raise DegenerateGridError(f"n_cells={n_cells} too small")
    z = np.linspace(0.0, star.radius, n_cells + 1)
    cell = _cell_masses(star.emden, star.params, z)
    if np.any(cell <= 0.0):
        raise MonotonicityViolationError("mass nodes are not strictly increasing")
    x = np.concatenate([[0.0], np.cumsum(cell)])
    rho0 = star.rho0(z)
    rho0[-1] = 0.0
    return MassMap(x=x, z=z, rho0=rho0)


def hydrostatic_residual(star: StationaryStar, n_cells: int = 512,
                         density_scale: float = 1.0) -> float:
    """Normalized force balance defect max |4 pi r0^2 dP0/dx + x / r0^2|.

    dP0/dx comes from the profile-derivative route (theta'), x from the
    integrated mass state; the two agree only up to solver error, which
    is what this measures.  density_scale multiplies the density profile
    (and rescales pressure consistently), for sensitivity checks.
    """
    grid = mass_map(star, n_cells)
    z = grid.z[1:]
    x = grid.x[1:] * density_scale
    dp0dx = star.dp0dx(z) * density_scale ** (star.params.gamma - 1.0)
    gravity = x / z ** 2
    residual = np.abs(4.0 * np.pi * z ** 2 * dp0dx + gravity)
    return float(residual.max() / np.abs(gravity).max())


def central_density_for_mass(params: PolytropeParams,
                             target_mass: float) -> PolytropeParams:
    """Rescale the central density so the star has the requested mass.

    M scales as rho_c^((3-n)/(2n)) at fixed K, so the rescaling is an
    exact power law; no iteration is needed.
    """
    n = params.index_n
    if abs(n - 3.0) < 1e-12:
        raise UnsupportedGammaError(
            "total mass is independent of central density at n = 3")
    star = build_star(params, tol=1e-10, n_profile=64)
    ratio = target_mass / star.mass
    return replace(params,
                   central_density=params.central_density
                   * ratio ** (2.0 * n / (3.0 - n)))
