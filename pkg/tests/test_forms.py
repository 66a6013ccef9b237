"""Mesh, element-space, and quadratic-form tests.

Reference constants were frozen from an independent refined-quadrature
oracle (composite Gauss-10 on 2000 and 4000 cells, agreeing to all printed
digits) for the default star gamma=1.25, K=1, rho_c=1, eps=delta=1.
"""

import numpy as np
import pytest

from stellab import PolytropeParams, build_star
from stellab.errors import (
    DegenerateGridError,
    NotInWeightedSpaceError,
    SingularQuadratureError,
)
from stellab.forms import assemble_forms, dump_triplets
from stellab.grids import CubicGrid, GradedMesh, build_mesh, hardy_verify

# int rho0 z^4 dz, int K rho0^gamma z^2 dz and derived coefficients
I4_REF = 1.3621717936960263
C1_REF = 1854.9386885961765
C2_REF = 0.14906655447921272


@pytest.fixture(scope="module")
def star():
    return build_star(PolytropeParams())


@pytest.fixture(scope="module")
def grid(star):
    return CubicGrid(build_mesh(star.radius, n_elements=192))


@pytest.fixture(scope="module")
def forms(star, grid):
    return assemble_forms(star, grid)


def test_mesh_shape_and_grading(star):
    mesh = build_mesh(star.radius, n_elements=128)
    assert mesh.n_elements == 128
    assert mesh.z_min == pytest.approx(1e-3 * star.radius)
    assert mesh.edges[-1] == pytest.approx(star.radius, rel=1e-15)
    w = mesh.widths
    assert np.all(w > 0)
    # graded: cells near both ends are finer than mid-domain cells
    assert w[0] < 0.2 * w.max()
    assert w[-1] < 0.7 * w.max()
    assert np.argmax(w) not in (0, len(w) - 1)


def test_mesh_refusals(star):
    with pytest.raises(ValueError):
        build_mesh(star.radius, n_elements=8)
    with pytest.raises(ValueError):
        build_mesh(star.radius, z_min_frac=0.0)
    with pytest.raises(ValueError):
        build_mesh(star.radius, z_min_frac=0.1)
    with pytest.raises(DegenerateGridError):
        edges = np.array([0.01, 0.5, 0.5, 1.0])
        GradedMesh(edges=edges, radius=1.0, z_min=0.01)


def test_quadrature_exactness(grid):
    # Gauss-8 per element integrates monomials up to degree 15 exactly
    z_min, R = grid.mesh.z_min, grid.mesh.radius
    for k in range(16):
        vals = grid.quad_z**k
        exact = (R ** (k + 1) - z_min ** (k + 1)) / (k + 1)
        assert grid.integrate(vals) == pytest.approx(exact, rel=1e-13)


def test_cubic_reproduction(grid):
    rng = np.random.default_rng(7)
    c = rng.standard_normal(4)
    poly = np.polynomial.Polynomial(c)
    coeffs = grid.interpolate(poly)
    z = np.linspace(grid.mesh.z_min, grid.mesh.radius, 337)
    assert np.allclose(grid.eval_at(coeffs, z), poly(z), rtol=1e-12, atol=1e-12)
    assert np.allclose(grid.eval_at(coeffs, z, deriv=1), poly.deriv()(z),
                       rtol=1e-11, atol=1e-11)
    # 1/h^2 on the finest graded cells amplifies round-off in deriv=2
    assert np.allclose(grid.eval_at(coeffs, z, deriv=2), poly.deriv(2)(z),
                       rtol=1e-6, atol=1e-6)
    # nodal evaluation returns the coefficients themselves
    assert np.allclose(grid.eval_at(coeffs, grid.nodes), coeffs, rtol=1e-12)


def test_interpolation_error_decays_at_element_order(star):
    f = lambda z: np.sin(1.5 * z) * z
    errs = []
    for n in (48, 96):
        g = CubicGrid(build_mesh(star.radius, n_elements=n))
        coeffs = g.interpolate(f)
        errs.append(np.max(np.abs(g.quad_values(coeffs) - f(g.quad_z))))
    # cubic elements: interpolation error O(h^4), halving h gains ~16x
    assert errs[0] / errs[1] > 8.0


def test_forms_symmetry_and_zero(forms):
    for m in (forms.mat_j, forms.mat_e0, forms.mat_e1,
              forms.mat_e0_pressure, forms.mat_e0_gravity):
        assert np.array_equal(m, m.T)
        assert np.all(np.isfinite(m))
    zero = np.zeros(forms.n_dofs)
    assert forms.e0(zero) == 0.0
    assert forms.e1(zero) == 0.0
    assert forms.j(zero) == 0.0
    # inertia form is positive definite on the free block
    np.linalg.cholesky(forms.free(forms.mat_j))


def test_e1_positive_semidefinite(forms):
    evals = np.linalg.eigvalsh(forms.free(forms.mat_e1))
    assert evals.min() > 0.0


def test_cubic_trial_identities(star):
    # z^3 is reproduced exactly by the element space; its form values have
    # closed reductions E1 = 3 delta R^3, E0 = -C2 * J, J = int rho0 z^4.
    grid = CubicGrid(build_mesh(star.radius, n_elements=192, z_min_frac=1e-6))
    forms = assemble_forms(star, grid)
    phi = grid.interpolate(lambda z: z**3)
    jval = forms.j(phi)
    assert jval == pytest.approx(I4_REF, rel=1e-8)
    assert forms.e1(phi) == pytest.approx(3.0 * star.params.bulk_visc
                                          * star.radius**3, rel=1e-9)
    assert forms.e1(phi) / jval == pytest.approx(C1_REF, rel=1e-8)
    assert forms.e0(phi) / jval == pytest.approx(-C2_REF, rel=1e-6)


def test_rayleigh_quotient_of_cubic_trial(star):
    grid = CubicGrid(build_mesh(star.radius, n_elements=192, z_min_frac=1e-6))
    forms = assemble_forms(star, grid)
    phi = grid.interpolate(lambda z: z**3)
    jval = forms.j(phi)
    for s in (0.5, 1.0, 2.0):
        quotient = forms.energy(phi, s) / jval
        assert quotient == pytest.approx(s * C1_REF - C2_REF, rel=1e-6)


def test_forms_value_convergence(star):
    f = lambda z: z**2 * np.sin(z)
    ref_grid = CubicGrid(build_mesh(star.radius, n_elements=384))
    ref = assemble_forms(star, ref_grid)
    ref_val = ref.energy(ref_grid.interpolate(f), 1.0)
    errs = []
    for n in (48, 96):
        g = CubicGrid(build_mesh(star.radius, n_elements=n))
        fo = assemble_forms(star, g)
        errs.append(abs(fo.energy(g.interpolate(f), 1.0) - ref_val))
    assert errs[0] / errs[1] > 8.0


def test_hardy_square_field():
    grid = CubicGrid(build_mesh(1.0, n_elements=64, z_min_frac=1e-8))
    rep = hardy_verify(lambda z: z**2, tau=2.0, grid=grid)
    assert rep.lhs == pytest.approx(1.0, rel=1e-7)
    assert rep.rhs == pytest.approx(16.0 / 9.0, rel=1e-7)
    assert rep.lhs / rep.rhs == pytest.approx(9.0 / 16.0, rel=1e-7)
    assert rep.holds
    assert rep.sup_lhs == pytest.approx(1.0, rel=1e-7)
    assert rep.sup_rhs == pytest.approx(np.sqrt(4.0 / 3.0), rel=1e-7)


def test_hardy_cubic_field():
    grid = CubicGrid(build_mesh(1.0, n_elements=64, z_min_frac=1e-8))
    rep = hardy_verify(lambda z: z**3, tau=2.0, grid=grid)
    assert rep.lhs == pytest.approx(1.0 / 3.0, rel=1e-7)
    assert rep.rhs == pytest.approx(4.0 / 3.0, rel=1e-7)
    assert rep.lhs / rep.rhs == pytest.approx(0.25, rel=1e-7)
    assert rep.holds


def test_hardy_random_admissible_fields():
    grid = CubicGrid(build_mesh(1.0, n_elements=64, z_min_frac=1e-8))
    rng = np.random.default_rng(20260814)
    for _ in range(100):
        a, b, c = rng.uniform(-1.0, 1.0, size=3)
        if abs(a) < 1e-3:
            a = 1e-3
        rep = hardy_verify(lambda z: a * z**2 + b * z**3 + c * z**4,
                           tau=2.0, grid=grid)
        assert rep.holds


def test_hardy_rejects_slow_decay():
    grid = CubicGrid(build_mesh(1.0, n_elements=64, z_min_frac=1e-8))
    with pytest.raises(NotInWeightedSpaceError):
        hardy_verify(lambda z: z, tau=2.0, grid=grid)
    with pytest.raises(NotInWeightedSpaceError):
        hardy_verify(lambda z: z**1.2, tau=2.0, grid=grid)


def test_singular_quadrature_guard(star, grid):
    class BadStar:
        def __init__(self, inner):
            self._inner = inner
            self.params = inner.params

        def p0(self, z):
            out = self._inner.p0(z)
            return np.where(z > 0.5, np.nan, out)

        def __getattr__(self, name):
            return getattr(self._inner, name)

    with pytest.raises(SingularQuadratureError):
        assemble_forms(BadStar(star), grid)


def test_triplet_dump_roundtrip(forms, tmp_path):
    path = tmp_path / "e1.txt"
    count = dump_triplets(forms.mat_e1, path)
    data = np.loadtxt(path)
    assert len(data) == count
    rebuilt = np.zeros_like(forms.mat_e1)
    rebuilt[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
    assert np.array_equal(rebuilt, forms.mat_e1 * (np.abs(forms.mat_e1) > 0))
