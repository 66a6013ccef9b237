"""Assembly of the stability quadratic forms on a cubic element grid.

Three symmetric forms on fields over (z_min, R] drive everything downstream:

  E0(phi) = int gamma P0 |phi'|^2 / z^2 + 4 P0' |phi|^2 / z^3   (potential)
  E1(phi) = int delta |phi'|^2 / z^2
            + (4 eps/3) |phi' - 3 phi/z|^2 / z^2                (viscous)
  J(phi)  = int rho0 |phi|^2 / z^2                              (inertia)

E0 splits into a positive pressure part and a negative gravity part; both
blocks are kept so energy bookkeeping downstream can reuse them.  Matrices
are dense, symmetric by construction, and assembled with the grid's Gauss
rule.  Row/column 0 corresponds to the pinned node at z_min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import StationaryStar
from .errors import SingularQuadratureError
from .grids import CubicGrid

__all__ = ["QuadraticForms", "assemble_forms", "dump_triplets"]


def _scatter(n_dofs: int, dofs: np.ndarray, local: np.ndarray) -> np.ndarray:
    mat = np.zeros((n_dofs, n_dofs))
    for i in range(4):
        for j in range(4):
            np.add.at(mat, (dofs[:, i], dofs[:, j]), local[:, i, j])
    return 0.5 * (mat + mat.T)


@dataclass
class QuadraticForms:
    """Dense form matrices plus the grid and star they were built on."""

    grid: CubicGrid
    star: StationaryStar
    mat_j: np.ndarray
    mat_e0_pressure: np.ndarray
    mat_e0_gravity: np.ndarray
    mat_e1: np.ndarray
    local_j: np.ndarray
    local_e0_pressure: np.ndarray
    local_e0_gravity: np.ndarray
    local_e1: np.ndarray
    relaxation: float = 0.0
    mat_e0: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.mat_e0 = self.mat_e0_pressure + self.mat_e0_gravity

    @property
    def n_dofs(self) -> int:
        return self.grid.n_dofs

    def mat_e(self, s: float | None = None) -> np.ndarray:
        s = self.relaxation if s is None else s
        return self.mat_e0 + s * self.mat_e1

    @staticmethod
    def free(mat: np.ndarray) -> np.ndarray:
        """Block with the pinned center dof removed."""
        return mat[1:, 1:]

    def surface_load(self) -> np.ndarray:
        """Nodal functional picking out the boundary value at z = R."""
        e = np.zeros(self.n_dofs)
        e[-1] = 1.0
        return e

    # convenient scalar evaluations
    def e0(self, phi: np.ndarray) -> float:
        return float(phi @ self.mat_e0 @ phi)

    def e1(self, phi: np.ndarray) -> float:
        return float(phi @ self.mat_e1 @ phi)

    def j(self, phi: np.ndarray) -> float:
        return float(phi @ self.mat_j @ phi)

    def energy(self, phi: np.ndarray, s: float | None = None) -> float:
        s = self.relaxation if s is None else s
        return self.e0(phi) + s * self.e1(phi)

    def form_values(self, phi: np.ndarray) -> tuple[float, float, float]:
        """(E0, E1, J) at phi with compensated summation over elements.

        The plain BLAS quadratic forms carry noise ~ eps * ||mat|| * sqrt(n),
        which dominates the near-cancellation of the potential and viscous
        parts at the fixed point; fsum over exact per-element contributions
        keeps each value accurate to a few ulps.
        """
        v = np.asarray(phi, dtype=float)[self.grid.element_dofs]  # (n_el, 4)
        def parts(local):
            return np.einsum("eij,ei,ej->e", local, v, v)

        e0 = math.fsum(np.concatenate(
            [parts(self.local_e0_pressure), parts(self.local_e0_gravity)]))
        e1 = math.fsum(parts(self.local_e1))
        j = math.fsum(parts(self.local_j))
        return e0, e1, j

    def rayleigh(self, phi: np.ndarray, s: float | None = None) -> float:
        """(E0 + s E1)/J with compensated summation, see form_values."""
        s = self.relaxation if s is None else s
        e0, e1, j = self.form_values(phi)
        return (e0 + s * e1) / j


def assemble_forms(
    star: StationaryStar, grid: CubicGrid, relaxation: float = 0.0
) -> QuadraticForms:
    """Build J, E0 (pressure/gravity split) and E1 on the given grid."""
    params = star.params
    zq = grid.quad_z
    wq = grid.quad_w
    p0 = star.p0(zq.ravel()).reshape(zq.shape)
    dp0 = star.dp0dz(zq.ravel()).reshape(zq.shape)
    rho0 = star.rho0(zq.ravel()).reshape(zq.shape)

    h = grid.mesh.widths
    val = grid.basis_val  # (nq, 4)
    d1 = grid.basis_d1
    # physical derivative tables per element: (n_el, nq, 4)
    d1z = d1[None, :, :] / h[:, None, None]
    valz = np.broadcast_to(val[None, :, :], d1z.shape)

    coef_p = wq * params.gamma * p0 / zq**2
    coef_g = wq * 4.0 * dp0 / zq**3
    coef_j = wq * rho0 / zq**2
    coef_d = wq * params.bulk_visc / zq**2
    coef_s = wq * (4.0 * params.shear_visc / 3.0) / zq**2

    for name, c in (("pressure", coef_p), ("gravity", coef_g), ("inertia", coef_j),
                    ("bulk", coef_d), ("shear", coef_s)):
        if not np.all(np.isfinite(c)):
            raise SingularQuadratureError(f"non-finite {name} weight at quadrature")

    local_p = np.einsum("eqi,eqj,eq->eij", d1z, d1z, coef_p)
    local_g = np.einsum("eqi,eqj,eq->eij", valz, valz, coef_g)
    local_j = np.einsum("eqi,eqj,eq->eij", valz, valz, coef_j)
    strain = d1z - 3.0 * valz / zq[:, :, None]
    local_e1 = (np.einsum("eqi,eqj,eq->eij", d1z, d1z, coef_d)
                + np.einsum("eqi,eqj,eq->eij", strain, strain, coef_s))

    dofs = grid.element_dofs
    n = grid.n_dofs
    mats = {
        "mat_e0_pressure": _scatter(n, dofs, local_p),
        "mat_e0_gravity": _scatter(n, dofs, local_g),
        "mat_j": _scatter(n, dofs, local_j),
        "mat_e1": _scatter(n, dofs, local_e1),
    }
    for name, m in mats.items():
        if not np.all(np.isfinite(m)):
            raise SingularQuadratureError(f"non-finite entries in {name}")

    return QuadraticForms(
        grid=grid, star=star, relaxation=relaxation,
        local_j=local_j, local_e0_pressure=local_p,
        local_e0_gravity=local_g, local_e1=local_e1,
        **mats,
    )


def dump_triplets(mat: np.ndarray, path, drop_tol: float = 0.0) -> int:
    """Write a dense matrix as 'i j value' triplet lines; returns the count."""
    rows, cols = np.nonzero(np.abs(mat) > drop_tol)
    with open(path, "w") as fh:
        for i, j in zip(rows, cols):
            fh.write(f"{i} {j} {mat[i, j]:.17g}\n")
    return len(rows)
