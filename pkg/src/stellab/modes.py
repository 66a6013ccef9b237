"""Growth-rate computation via constrained minimization and fixed-point inversion.

For each relaxation value s >= 0 the smallest eigenvalue mu(s) of

    (E0 + s E1) phi = mu J phi

is computed on the free dofs of a cubic element grid.  mu is strictly
increasing in s, so g(s) = sqrt(-mu(s)) - s has at most one zero s*; there
the pair (lambda, phi) with lambda = s* solves the viscous eigenproblem
with its natural boundary condition, and lambda is the growth rate of the
dominant unstable mode.

reconstruct_mode maps the minimizer into mass coordinates: sigma = rho0^2
d(phi)/dx, v = -lambda phi / (4 pi r0^2), w = r0^2 v, normalized so the
initial-data norm of (sigma, w) is one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .equilibrium import StationaryStar, mass_map
from .errors import (
    EigenFailError,
    FixedPointFailError,
    GramFailError,
    InadmissibleTrialError,
    ModeRegularityFailError,
    NoUnstableWindowError,
    StableRegimeError,
)
from .forms import QuadraticForms, assemble_forms
from .grids import CubicGrid, _decay_exponent, build_mesh

__all__ = [
    "EigenResult",
    "FixedPointResult",
    "GrowingMode",
    "LowerBound",
    "VariationalReport",
    "cutoff_sensitivity",
    "euler_lagrange_residual",
    "find_fixed_point",
    "lambda_lower_bound",
    "mu_ladder",
    "mu_of_s",
    "reconstruct_mode",
    "sandwich_constants",
    "variational_inequality_check",
]


@dataclass(frozen=True)
class EigenResult:
    """Constrained minimizer of E0 + s E1 at one relaxation value."""

    s_value: float
    mu: float
    phi: np.ndarray
    el_residual: float
    bc_residual: float
    e0_value: float
    e1_value: float
    j_value: float


def _strong_residual(forms: QuadraticForms, phi: np.ndarray, mu: float, s: float):
    """Pointwise strong-form residual on interior elements, plus term norms."""
    grid = forms.grid
    star = forms.star
    params = star.params
    sl = slice(1, grid.n_elements - 1)

    zq = grid.quad_z[sl]
    wq = grid.quad_w[sl]
    p0 = star.p0(zq.ravel()).reshape(zq.shape)
    dp0 = star.dp0dz(zq.ravel()).reshape(zq.shape)
    rho0 = star.rho0(zq.ravel()).reshape(zq.shape)

    u = grid.quad_values(phi)[sl]
    du = grid.quad_values(phi, deriv=1)[sl]
    d2u = grid.quad_values(phi, deriv=2)[sl]

    visc = s * (4.0 * params.shear_visc / 3.0 + params.bulk_visc)
    coef = visc + params.gamma * p0
    # -(coef phi'/z^2)' expands to the first three groups
    terms = (
        -params.gamma * dp0 * du / zq**2,
        -coef * d2u / zq**2,
        2.0 * coef * du / zq**3,
        4.0 * dp0 * u / zq**3,
        -mu * rho0 * u / zq**2,
    )
    resid = sum(terms)
    weight = wq * zq**4
    num = np.sqrt(np.sum(weight * resid**2))
    den = sum(np.sqrt(np.sum(weight * t**2)) for t in terms)
    return num / max(den, 1e-300)


def _boundary_residual(forms: QuadraticForms, phi: np.ndarray, s: float) -> float:
    grid = forms.grid
    params = forms.star.params
    R = grid.mesh.radius
    phi_r = phi[-1]
    dphi_r = grid.eval_at(phi, np.array([R]), deriv=1)[0]
    bulk = s * params.bulk_visc
    shear = s * 4.0 * params.shear_visc / 3.0
    val = bulk * dphi_r / R**2 + shear * (dphi_r / R**2 - 3.0 * phi_r / R**3)
    scale = (bulk + shear) * (abs(dphi_r) / R**2 + 3.0 * abs(phi_r) / R**3)
    return abs(val) / max(scale, 1e-300)


def euler_lagrange_residual(
    forms: QuadraticForms, phi: np.ndarray, mu: float, s: float
) -> tuple[float, float]:
    """Relative strong-form and natural-boundary residuals of a candidate."""
    return (_strong_residual(forms, phi, mu, s),
            _boundary_residual(forms, phi, s))


def _pencil_smallest(a: np.ndarray, b: np.ndarray, tau: float,
                     context: str) -> tuple[float, np.ndarray]:
    """Smallest eigenvalue of a x = mu b x given a bound tau < min eig.

    The inertia form degenerates like (R-z)^(n+1) at the surface while the
    energy forms stay order one there, so the raw pencil carries Rayleigh
    quotients up to ~1/eps_machine^2 and a dense solve loses the bottom of
    the spectrum entirely.  With M = a - tau b positive definite, the
    flipped pencil b y = nu M y has the target as its LARGEST eigenvalue
    nu = 1/(mu - tau), which a dense solve resolves to round-off.  Diagonal
    congruence scaling tames the remaining spread.
    """
    m = a - tau * b
    dm = np.diag(m)
    if np.any(dm <= 0.0) or not np.all(np.isfinite(dm)):
        raise EigenFailError(f"shifted operator lost positivity in {context}")
    d = 1.0 / np.sqrt(dm)
    m_s = m * d[:, None] * d[None, :]
    b_s = b * d[:, None] * d[None, :]
    n = m_s.shape[0]
    try:
        vals, vecs = linalg.eigh(b_s, m_s, subset_by_index=[n - 1, n - 1])
    except linalg.LinAlgError as exc:
        raise EigenFailError(f"eigensolve failed in {context}") from exc
    nu = float(vals[0])
    if not np.isfinite(nu) or nu <= 0.0:
        raise EigenFailError(f"flipped pencil returned nu={nu!r} in {context}")
    mu = 1.0 / nu + tau
    x = d * vecs[:, 0]
    # Two inverse iterations with the shift just below the eigenvalue (so the
    # shifted matrix stays definite) scrub the dense-solver noise from the
    # vector.
    delta = 1e-6 * (abs(mu) + 1.0)
    try:
        lu = linalg.lu_factor(a - (mu - delta) * b)
        y = x
        for _ in range(2):
            y = linalg.lu_solve(lu, b @ y)
            y /= np.sqrt(abs(y @ b @ y))
        mu_rq = float(y @ a @ y) / float(y @ b @ y)
        if np.isfinite(mu_rq) and abs(mu_rq - mu) < 10.0 * delta:
            x, mu = y, mu_rq
    except linalg.LinAlgError:
        pass
    return mu, x


def _gravity_shift(forms: QuadraticForms) -> float:
    # the gravity weight obeys 4 dP0/dz / z^3 >= -4 (4 pi/3) rho_c rho0/z^2
    # pointwise, so every eigenvalue of (E0 + s E1, J) exceeds this tau
    return -5.0 * (4.0 * np.pi / 3.0) * forms.star.params.central_density


def mu_of_s(forms: QuadraticForms, s: float) -> EigenResult:
    """Smallest constrained eigenvalue and minimizer at relaxation s."""
    if s < 0.0:
        raise ValueError("relaxation must be nonnegative")
    a = forms.free(forms.mat_e0 + s * forms.mat_e1)
    b = forms.free(forms.mat_j)

    db = np.diag(b)
    if np.any(db <= 0.0) or not np.all(np.isfinite(db)):
        raise GramFailError("inertia form has nonpositive diagonal")
    d_b = 1.0 / np.sqrt(db)
    try:
        np.linalg.cholesky(b * d_b[:, None] * d_b[None, :])
    except np.linalg.LinAlgError as exc:
        raise GramFailError("inertia form is not positive definite") from exc

    mu, x = _pencil_smallest(a, b, _gravity_shift(forms), f"mu(s={s!r})")
    # the compensated Rayleigh quotient strips BLAS summation noise, which
    # the fixed-point residual tolerance cannot afford
    full = np.zeros(forms.n_dofs)
    full[1:] = x
    mu_c = forms.rayleigh(full, s)
    if np.isfinite(mu_c):
        mu = mu_c
    phi = np.zeros(forms.n_dofs)
    phi[1:] = x
    phi /= np.sqrt(forms.j(phi))
    anchor = phi[-1] if phi[-1] != 0.0 else phi[np.argmax(np.abs(phi))]
    if anchor < 0.0:
        phi = -phi
    el, bc = euler_lagrange_residual(forms, phi, mu, s)
    return EigenResult(
        s_value=float(s), mu=mu, phi=phi, el_residual=el, bc_residual=bc,
        e0_value=forms.e0(phi), e1_value=forms.e1(phi), j_value=forms.j(phi),
    )


def sandwich_constants(forms: QuadraticForms) -> tuple[float, float]:
    """Discrete constants (C3, C4) with s*C4 - C3 <= mu(s) for all s >= 0.

    C3 = -min-eig(E0, J) and C4 = min-eig(E1, J) on the free dofs; the
    affine lower bound follows from superadditivity of constrained minima.
    """
    b = forms.free(forms.mat_j)
    mu0, _ = _pencil_smallest(forms.free(forms.mat_e0), b,
                              _gravity_shift(forms), "potential pencil")
    mu1, _ = _pencil_smallest(forms.free(forms.mat_e1), b, -1.0,
                              "viscous pencil")
    return -mu0, mu1


def mu_ladder(forms: QuadraticForms, s_values) -> list[EigenResult]:
    return [mu_of_s(forms, s) for s in s_values]


# -- lower bound ---------------------------------------------------------


@dataclass(frozen=True)
class LowerBound:
    """Growth-rate lower bound from the cubic trial field."""

    c1: float
    c2: float
    value: float


def lambda_lower_bound(star: StationaryStar, n_cells: int = 2000) -> LowerBound:
    """C1, C2 and the bound (-C1 + sqrt(C1^2 + 4 C2))/2 by refined quadrature.

    The cubic trial field gives E1 = C1 J and E0 = -C2 J with
    C1 = 3 delta R^3 / int rho0 z^4, C2 = (12 - 9 gamma) int K rho0^gamma z^2
    / int rho0 z^4; C2 > 0 requires gamma < 4/3.
    """
    params = star.params
    if params.gamma >= 4.0 / 3.0:
        raise StableRegimeError(
            f"gamma={params.gamma} is at or above 4/3; the cubic trial "
            "field no longer has negative potential energy"
        )
    gx, gw = np.polynomial.legendre.leggauss(10)
    edges = np.linspace(0.0, star.radius, n_cells + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * np.diff(edges)
    z = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
    w = (half[:, None] * gw[None, :]).ravel()
    rho0 = star.rho0(z)
    i4 = float(np.sum(w * rho0 * z**4))
    ip = float(np.sum(w * params.entropy_k * rho0**params.gamma * z**2))
    c1 = 3.0 * params.bulk_visc * star.radius**3 / i4
    c2 = (12.0 - 9.0 * params.gamma) * ip / i4
    # c1 >> c2 here, so the textbook root formula cancels; use the conjugate
    value = 2.0 * c2 / (c1 + np.sqrt(c1 * c1 + 4.0 * c2))
    return LowerBound(c1=c1, c2=c2, value=float(value))


# -- fixed point ---------------------------------------------------------


@dataclass
class FixedPointResult:
    s_star: float
    eigen: EigenResult
    lower: LowerBound
    history: list = field(default_factory=list)

    @property
    def growth_rate(self) -> float:
        return self.s_star


def find_fixed_point(
    forms: QuadraticForms,
    bracket: tuple[float, float] | None = None,
    tol: float = 2e-9,
    max_expand: int = 60,
    max_iter: int = 200,
) -> FixedPointResult:
    """Solve g(s) = sqrt(-mu(s)) - s = 0 by bracketed bisection/secant.

    mu is increasing in s, so g is strictly decreasing where mu < 0; once a
    sign change is bracketed the zero is unique.  mu(s) >= 0 is treated as
    g(s) = -s for bracketing purposes.
    """
    lower = lambda_lower_bound(forms.star)
    history: list[tuple[float, float]] = []

    def g_of(s: float) -> float:
        eig = mu_of_s(forms, s)
        history.append((s, eig.mu))
        if eig.mu >= 0.0:
            return -s
        return float(np.sqrt(-eig.mu) - s)

    if bracket is not None:
        s_lo, s_hi = bracket
        g_lo, g_hi = g_of(s_lo), g_of(s_hi)
        if not (g_lo > 0.0 >= g_hi):
            raise FixedPointFailError(
                f"supplied bracket ({s_lo!r}, {s_hi!r}) does not straddle the root"
            )
    else:
        s_lo = 1e-6
        g_lo = g_of(s_lo)
        if g_lo <= 0.0:
            raise NoUnstableWindowError(
                f"no growth at the smallest relaxation s={s_lo!r}"
            )
        s_hi, g_hi = s_lo, g_lo
        for _ in range(max_expand):
            s_hi *= 2.0
            g_hi = g_of(s_hi)
            if g_hi <= 0.0:
                break
            s_lo, g_lo = s_hi, g_hi
        else:
            raise NoUnstableWindowError(
                f"no sign change of the fixed-point map within {max_expand} doublings"
            )

    from scipy.optimize import brentq

    try:
        root = brentq(g_of, s_lo, s_hi, xtol=1e-300, rtol=4.0 * np.finfo(float).eps,
                      maxiter=max_iter)
    except (ValueError, RuntimeError) as exc:
        raise FixedPointFailError(f"bracketed root solve failed: {exc}") from exc

    # The eigensolve takes discretely different rounding paths as s moves in
    # its last bits, so g carries deterministic noise of order 1e-11 near the
    # root and brentq stops on an arbitrary sign change inside that band.
    # Freezing the minimizer at the brentq root turns the quotient into a
    # linear function of s, and the fixed-point condition into the quadratic
    # J s^2 + E1 s + E0 = 0, whose positive root (E0 < 0 here) satisfies the
    # identity to rounding.  The frozen-vector bias is second order in the
    # minimizer's suboptimality over the ~1e-14 move, far below everything.
    raw = mu_of_s(forms, root)
    e0v, e1v, jv = forms.form_values(raw.phi)
    disc = e1v * e1v - 4.0 * jv * e0v
    if e0v >= 0.0 or disc <= 0.0 or jv <= 0.0:
        raise FixedPointFailError(
            f"minimizer at s={root!r} has no growing root (E0={e0v!r})"
        )
    s_star = -2.0 * e0v / (e1v + np.sqrt(disc))
    if not 0.5 * root < s_star < 2.0 * root:
        raise FixedPointFailError(
            f"frozen-vector refinement drifted from {root!r} to {s_star!r}"
        )
    mu_star = (e0v + s_star * e1v) / jv
    if mu_star >= 0.0 or abs(np.sqrt(-mu_star) - s_star) > tol * s_star:
        raise FixedPointFailError(
            f"fixed-point residual {abs(np.sqrt(-mu_star) - s_star):.3e} "
            f"exceeds {tol} * {s_star!r}"
        )
    el, bc = euler_lagrange_residual(forms, raw.phi, mu_star, s_star)
    eig = EigenResult(
        s_value=float(s_star), mu=float(mu_star), phi=raw.phi,
        el_residual=el, bc_residual=bc,
        e0_value=e0v, e1_value=e1v, j_value=jv,
    )
    history.append((float(s_star), float(mu_star)))
    return FixedPointResult(s_star=float(s_star), eigen=eig,
                            lower=lower, history=history)


def cutoff_sensitivity(
    star: StationaryStar,
    n_elements: int = 192,
    z_min_frac: float = 1e-3,
) -> dict:
    """Growth-rate shift when the center cutoff is halved."""
    rates = []
    for frac in (z_min_frac, 0.5 * z_min_frac):
        grid = CubicGrid(build_mesh(star.radius, n_elements=n_elements,
                                    z_min_frac=frac))
        forms = assemble_forms(star, grid)
        rates.append(find_fixed_point(forms).s_star)
    return {
        "z_min_frac": z_min_frac,
        "rate": rates[0],
        "rate_halved_cutoff": rates[1],
        "relative_shift": abs(rates[1] - rates[0]) / rates[0],
    }


# -- mode reconstruction --------------------------------------------------


@dataclass
class GrowingMode:
    """Dominant unstable mode in mass coordinates, unit initial-data norm."""

    growth_rate: float
    star: StationaryStar
    grid: CubicGrid
    phi: np.ndarray          # element coefficients, normalized
    x: np.ndarray            # mass nodes including 0 and M
    z: np.ndarray            # matching radii
    phi_x: np.ndarray
    sigma_x: np.ndarray
    v_x: np.ndarray
    w_x: np.ndarray
    norm0: float             # before rescaling
    integrals: dict
    trace_value: float       # phi at the surface
    trace_gradient: float    # rho0 d(phi)/dx at the surface
    exponent_phi: float
    exponent_dphi: float

    def sigma_of_z(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        dphi = self.grid.eval_at(self.phi, z, deriv=1)
        return self.star.rho0(z) * dphi / (4.0 * np.pi * z**2)

    def v_of_z(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        phi = self.grid.eval_at(self.phi, z)
        return -self.growth_rate * phi / (4.0 * np.pi * z**2)

    def w_of_z(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return -self.growth_rate * self.grid.eval_at(self.phi, z) / (4.0 * np.pi)


def _fit_exponent(grid: CubicGrid, coeffs: np.ndarray, radius: float,
                  deriv: int = 0) -> float:
    z = np.geomspace(0.005 * radius, 0.05 * radius, 40)
    vals = np.abs(grid.eval_at(coeffs, z, deriv=deriv))
    if np.any(vals <= 0.0):
        return np.nan
    return float(np.polyfit(np.log(z), np.log(vals), 1)[0])


def reconstruct_mode(
    forms: QuadraticForms,
    eigen: EigenResult,
    growth_rate: float,
    n_mass: int = 1024,
) -> GrowingMode:
    """Map the minimizer to (sigma, v, w) on a mass grid and normalize.

    The continuity relation lambda sigma + 4 pi rho0^2 d(w)/dx = 0 holds
    identically for the reconstructed pair, so the mode quality is carried
    by the momentum residual (el_residual of the eigen solve).
    """
    star = forms.star
    grid = forms.grid
    lam = float(growth_rate)
    phi = eigen.phi.copy()

    e0p = float(phi @ forms.mat_e0_pressure @ phi)
    jv = forms.j(phi)
    e1v = forms.e1(phi)
    norm0_sq = (e0p + lam**2 * jv + lam**2 * e1v) / (8.0 * np.pi)
    if not np.isfinite(norm0_sq) or norm0_sq <= 0.0:
        raise ModeRegularityFailError("initial-data norm of the mode is not positive")
    norm0 = float(np.sqrt(norm0_sq))
    phi /= norm0

    mm = mass_map(star, n_cells=n_mass)
    z = mm.z
    x = mm.x
    phi_z = grid.eval_at(phi, z[1:])
    dphi_z = grid.eval_at(phi, z[1:], deriv=1)
    rho0_z = star.rho0(z[1:])

    phi_x = np.concatenate(([0.0], phi_z))
    sigma_x = np.concatenate(([_center_sigma(grid, phi, star)],
                              rho0_z * dphi_z / (4.0 * np.pi * z[1:] ** 2)))
    v_x = np.concatenate(([0.0], -lam * phi_z / (4.0 * np.pi * z[1:] ** 2)))
    w_x = -lam * phi_x / (4.0 * np.pi)

    integrals = _mode_integrals(forms, phi, lam)
    for key, val in integrals.items():
        if not np.isfinite(val):
            raise ModeRegularityFailError(f"mode integral {key} is not finite")

    R = grid.mesh.radius
    dphi_R = grid.eval_at(phi, np.array([R]), deriv=1)[0]
    return GrowingMode(
        growth_rate=lam,
        star=star,
        grid=grid,
        phi=phi,
        x=x,
        z=z,
        phi_x=phi_x,
        sigma_x=sigma_x,
        v_x=v_x,
        w_x=w_x,
        norm0=norm0,
        integrals=integrals,
        trace_value=float(phi[-1]),
        trace_gradient=float(dphi_R / (4.0 * np.pi * R**2)),
        exponent_phi=_fit_exponent(grid, phi, R),
        exponent_dphi=_fit_exponent(grid, phi, R, deriv=1),
    )


def _center_sigma(grid: CubicGrid, phi: np.ndarray, star: StationaryStar) -> float:
    # sigma -> rho_c phi'/(4 pi z^2), finite since phi ~ c z^3
    z0 = np.array([2.0 * grid.mesh.z_min])
    dphi = grid.eval_at(phi, z0, deriv=1)[0]
    return star.params.central_density * dphi / (4.0 * np.pi * z0[0] ** 2)


def _mode_integrals(forms: QuadraticForms, phi: np.ndarray, lam: float) -> dict:
    """Regularity integrals of the mode pair in radial form."""
    grid = forms.grid
    star = forms.star
    zq = grid.quad_z
    rho0 = star.rho0(zq.ravel()).reshape(zq.shape)
    drho0 = star.drho0dz(zq.ravel()).reshape(zq.shape)
    u = grid.quad_values(phi)
    du = grid.quad_values(phi, deriv=1)
    d2u = grid.quad_values(phi, deriv=2)

    fourpi = 4.0 * np.pi
    # sigma as a function of z and its z-derivative
    sig = rho0 * du / (fourpi * zq**2)
    dsig = (drho0 * du + rho0 * d2u) / (fourpi * zq**2) \
        - 2.0 * rho0 * du / (fourpi * zq**3)

    i1 = grid.integrate(rho0 * du**2 / zq**2) / fourpi
    with np.errstate(divide="ignore"):
        dens = np.where(rho0 > 0.0, zq**2 * dsig**2 / np.where(rho0 > 0, rho0, 1.0), 0.0)
    i2 = grid.integrate(dens) / fourpi
    i3 = lam**2 / fourpi * grid.integrate(u**2 / zq**4)
    i4 = lam**2 / (16.0 * np.pi**2 * fourpi) * grid.integrate(du**2 / zq**2)
    i5 = lam**2 / (16.0 * np.pi**2) * i2
    return {
        "density_sq": i1,
        "density_gradient_sq": i2,
        "velocity_sq": i3,
        "flux_gradient_sq": i4,
        "flux_curvature_sq": i5,
    }


# -- variational inequality ------------------------------------------------


@dataclass(frozen=True)
class VariationalReport:
    margin: float
    margin_slack: float
    e0_value: float
    e1_value: float
    j_value: float
    holds: bool


def variational_inequality_check(
    forms: QuadraticForms, lam: float, theta, tol: float = 1e-8
) -> VariationalReport:
    """Check E0 + lam E1 + lam^2 J >= 0 for an admissible trial field.

    Equality is attained by the minimizer at the fixed point.  The slack
    variant halves the potential term and is strictly positive for any
    nonzero admissible field.  Trials must decay faster than z^(3/2) at
    the center to lie in the weighted space.
    """
    grid = forms.grid
    coeffs = grid.interpolate(theta) if callable(theta) else np.asarray(theta, float)
    if coeffs.shape != (grid.n_dofs,):
        raise ValueError("trial field does not match the grid")

    p = _decay_exponent(grid, coeffs)
    if p <= 1.5 + 1e-6:
        raise InadmissibleTrialError(
            f"trial decays like z^{p:.3f} at the center; needs faster than z^1.5"
        )

    e0 = forms.e0(coeffs)
    e1 = forms.e1(coeffs)
    j = forms.j(coeffs)
    if j <= 0.0:
        raise InadmissibleTrialError("trial field has vanishing inertia norm")
    margin = (e0 + lam * e1 + lam**2 * j) / j
    margin_slack = (0.5 * e0 + lam * e1 + lam**2 * j) / j
    holds = bool(margin >= -tol and margin_slack >= -tol)
    return VariationalReport(margin=float(margin), margin_slack=float(margin_slack),
                             e0_value=e0, e1_value=e1, j_value=j, holds=holds)
