"""Graded radial meshes and a cubic Lagrange element space.

The quadratic forms of the stability problem carry 1/z^2 weights and their
minimizers vanish like z^3 at the center, while equilibrium coefficients
degenerate like (R - z)^(n+1) at the surface.  Meshes are therefore graded
toward both ends of (0, R] through a regularized incomplete beta map.  The
element space is C^0 cubic Lagrange on each cell with a fixed 8-point Gauss
rule; all reference tables are built once at construction.

A small left cutoff z_min > 0 stands in for the coordinate singularity at
z = 0; fields in the weighted space vanish there fast enough that the cutoff
error is far below discretization error (the solver reports its sensitivity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import DegenerateGridError, NotInWeightedSpaceError

__all__ = [
    "CubicGrid",
    "GradedMesh",
    "HardyReport",
    "build_mesh",
    "hardy_verify",
]

# Reference cubic Lagrange basis on [0, 1], nodes at t = 0, 1/3, 2/3, 1.
# Columns hold coefficients in increasing powers of t.
_REF_COEF = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [-11.0 / 2.0, 9.0, -9.0 / 2.0, 1.0],
        [9.0, -45.0 / 2.0, 18.0, -9.0 / 2.0],
        [-9.0 / 2.0, 27.0 / 2.0, -27.0 / 2.0, 9.0 / 2.0],
    ]
)
_REF_COEF_D1 = (_REF_COEF[1:] * np.array([1.0, 2.0, 3.0])[:, None])
_REF_COEF_D2 = (_REF_COEF_D1[1:] * np.array([1.0, 2.0])[:, None])

_REF_NODES = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])

_NQ = 8
_gx, _gw = np.polynomial.legendre.leggauss(_NQ)
_QUAD_T = 0.5 * (_gx + 1.0)
_QUAD_W = 0.5 * _gw


def _ref_eval(t: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Evaluate the four reference basis functions at t, shape (4, len(t))."""
    coef = (_REF_COEF, _REF_COEF_D1, _REF_COEF_D2)[deriv]
    return np.polynomial.polynomial.polyval(t, coef)


@dataclass(frozen=True)
class GradedMesh:
    """Strictly increasing element edges on [z_min, radius]."""

    edges: np.ndarray
    radius: float
    z_min: float

    def __post_init__(self) -> None:
        if np.any(np.diff(self.edges) <= 0.0):
            raise DegenerateGridError("mesh edges contain duplicate nodes")

    @property
    def n_elements(self) -> int:
        return len(self.edges) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def build_mesh(
    radius: float,
    n_elements: int = 192,
    z_min_frac: float = 1e-3,
    grading: tuple[float, float] = (2.5, 1.6),
) -> GradedMesh:
    """Beta-map graded mesh on [z_min_frac*radius, radius].

    grading = (a, b) are the incomplete-beta exponents; a > 1 clusters
    elements near the center, b > 1 near the surface.
    """
    if n_elements < 32:
        raise ValueError(
            f"n_elements={n_elements} too coarse for the weighted forms; need >= 32"
        )
    if not radius > 0.0:
        raise ValueError("radius must be positive")
    if not 0.0 < z_min_frac <= 1e-3:
        raise ValueError("z_min_frac must lie in (0, 1e-3]")
    a, b = grading
    if a <= 0.0 or b <= 0.0:
        raise ValueError("grading exponents must be positive")
    t = np.linspace(0.0, 1.0, n_elements + 1)
    y = betainc(a, b, t)
    # endpoint exactness regardless of rounding in betainc
    y[0], y[-1] = 0.0, 1.0
    z_min = z_min_frac * radius
    edges = z_min + (radius - z_min) * y
    return GradedMesh(edges=edges, radius=float(radius), z_min=float(z_min))


class CubicGrid:
    """Cubic Lagrange space on a graded mesh with tabulated quadrature.

    Global node k sits at nodes[k]; element e owns dofs 3e..3e+3.  The first
    dof (at z_min) is the essential-condition slot; assembly routines keep
    the full matrices and expose the free block separately.
    """

    def __init__(self, mesh: GradedMesh):
        self.mesh = mesh
        edges = mesh.edges
        h = mesh.widths
        n_el = mesh.n_elements

        nodes = (edges[:-1, None] + h[:, None] * _REF_NODES[None, :]).ravel()
        # drop repeated element endpoints: keep 4, 3, 3, ... per element
        keep = np.ones(4 * n_el, dtype=bool)
        keep[4::4] = False
        self.nodes = nodes[keep]
        if np.any(np.diff(self.nodes) <= 0.0):
            raise DegenerateGridError("element nodes collapsed; mesh too distorted")

        self.n_elements = n_el
        self.n_dofs = 3 * n_el + 1
        self.element_dofs = 3 * np.arange(n_el)[:, None] + np.arange(4)[None, :]

        self.quad_z = edges[:-1, None] + h[:, None] * _QUAD_T[None, :]
        self.quad_w = h[:, None] * _QUAD_W[None, :]
        # reference values at quadrature points, shape (nq, 4)
        self.basis_val = _ref_eval(_QUAD_T).T
        self.basis_d1 = _ref_eval(_QUAD_T, deriv=1).T
        self.basis_d2 = _ref_eval(_QUAD_T, deriv=2).T

    # -- field handling -------------------------------------------------

    def interpolate(self, f) -> np.ndarray:
        """Nodal interpolant of a callable f(z)."""
        return np.asarray(f(self.nodes), dtype=float)

    def quad_values(self, coeffs: np.ndarray, deriv: int = 0) -> np.ndarray:
        """Field (or z-derivative) values at all quadrature points, (n_el, nq)."""
        local = np.asarray(coeffs, dtype=float)[self.element_dofs]
        table = (self.basis_val, self.basis_d1, self.basis_d2)[deriv]
        vals = local @ table.T
        if deriv:
            vals = vals / self.mesh.widths[:, None] ** deriv
        return vals

    def integrate(self, quad_vals: np.ndarray) -> float:
        return float(np.sum(quad_vals * self.quad_w))

    def eval_at(self, coeffs: np.ndarray, z, deriv: int = 0) -> np.ndarray:
        """Evaluate the element field at arbitrary points of [z_min, R]."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        edges = self.mesh.edges
        idx = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, self.n_elements - 1)
        h = self.mesh.widths[idx]
        t = (z - edges[idx]) / h
        table = _ref_eval(t, deriv=deriv)  # (4, npts)
        local = np.asarray(coeffs, dtype=float)[self.element_dofs[idx]]  # (npts, 4)
        vals = np.einsum("pi,ip->p", local, table)
        if deriv:
            vals = vals / h**deriv
        return vals


# -- weighted-space diagnostics -----------------------------------------


@dataclass(frozen=True)
class HardyReport:
    """Both sides of the weighted Hardy inequality and the sup-norm bound."""

    lhs: float
    rhs: float
    sup_lhs: float
    sup_rhs: float
    holds: bool


def _decay_exponent(grid: CubicGrid, coeffs: np.ndarray) -> float:
    """Log-log slope of |u| over the first elements, for admissibility."""
    n_fit = min(7, grid.n_dofs - 1)
    z = grid.nodes[1 : 1 + n_fit]
    u = np.abs(np.asarray(coeffs, dtype=float)[1 : 1 + n_fit])
    mask = u > 0.0
    if mask.sum() < 3:
        # numerically zero near the origin decays arbitrarily fast
        return np.inf
    slope = np.polyfit(np.log(z[mask]), np.log(u[mask]), 1)[0]
    return float(slope)


def hardy_verify(u, tau: float, grid: CubicGrid, tol: float = 1e-9) -> HardyReport:
    """Check the Hardy inequality and the weighted sup bound for one field.

    u may be a callable of z or an array of nodal coefficients.  Measures
      lhs     = int |u|^2 / z^(tau+2)
      rhs     = 4/(1+tau)^2 * int |u'|^2 / z^tau
      sup_lhs = sup |u| z^(-(tau+1)/2)
      sup_rhs = ((1+tau)^(-1) * int |u'|^2 / z^tau)^(1/2)
    over the grid and reports whether both inequalities hold within tol.

    Fields that decay too slowly at the center for the integrals to exist
    are rejected rather than reported as violations.
    """
    if tau <= -1.0:
        raise ValueError("tau must exceed -1")
    coeffs = grid.interpolate(u) if callable(u) else np.asarray(u, dtype=float)
    if coeffs.shape != (grid.n_dofs,):
        raise ValueError("coefficient vector does not match the grid")

    p = _decay_exponent(grid, coeffs)
    if p <= 0.5 * (1.0 + tau) + 1e-6:
        raise NotInWeightedSpaceError(
            f"field decays like z^{p:.3f} at the center; needs faster than "
            f"z^{0.5 * (1.0 + tau):.3f} for tau={tau}"
        )

    zq = grid.quad_z
    uq = grid.quad_values(coeffs)
    duq = grid.quad_values(coeffs, deriv=1)
    lhs = grid.integrate(uq**2 / zq ** (tau + 2.0))
    grad = grid.integrate(duq**2 / zq**tau)
    rhs = 4.0 / (1.0 + tau) ** 2 * grad

    weight = np.abs(uq) * zq ** (-0.5 * (1.0 + tau))
    nodes = grid.nodes
    weight_nodes = np.abs(coeffs) * nodes ** (-0.5 * (1.0 + tau))
    sup_lhs = float(max(weight.max(), weight_nodes.max()))
    sup_rhs = float(np.sqrt(grad / (1.0 + tau)))

    holds = bool(lhs <= rhs * (1.0 + tol) and sup_lhs <= sup_rhs * (1.0 + tol))
    return HardyReport(lhs=float(lhs), rhs=float(rhs), sup_lhs=sup_lhs,
                       sup_rhs=sup_rhs, holds=holds)
