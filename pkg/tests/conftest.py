"""Session-scoped fixtures shared across the mode-solver and acceptance suites.

Building the default star, assembling the forms, and locating the fixed
point are the expensive steps; everything downstream reuses them.
"""

import pytest

from stellab.equilibrium import PolytropeParams, build_star
from stellab.forms import assemble_forms
from stellab.grids import CubicGrid, build_mesh
from stellab.modes import find_fixed_point, reconstruct_mode


@pytest.fixture(scope="session")
def star125():
    return build_star(PolytropeParams(gamma=1.25))


@pytest.fixture(scope="session")
def forms125(star125):
    grid = CubicGrid(build_mesh(star125.radius, n_elements=192, z_min_frac=1e-3))
    return assemble_forms(star125, grid)


@pytest.fixture(scope="session")
def fixed_point125(forms125):
    return find_fixed_point(forms125)


@pytest.fixture(scope="session")
def mode125(forms125, fixed_point125):
    return reconstruct_mode(forms125, fixed_point125.eigen,
                            fixed_point125.growth_rate)


@pytest.fixture(scope="session")
def forms96(star125):
    grid = CubicGrid(build_mesh(star125.radius, n_elements=96, z_min_frac=1e-3))
    return assemble_forms(star125, grid)


@pytest.fixture(scope="session")
def fixed_point96(forms96):
    return find_fixed_point(forms96)


@pytest.fixture(scope="session")
def mode96(forms96, fixed_point96):
    return reconstruct_mode(forms96, fixed_point96.eigen,
                            fixed_point96.growth_rate)
