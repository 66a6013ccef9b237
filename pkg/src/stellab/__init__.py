"""stellab: a numerical laboratory for the viscous radial instability of
self-gravitating polytropic gas stars.

The package computes Lane-Emden equilibria, constructs the viscous
growing mode of the linearized Navier-Stokes-Poisson system by
constrained variational minimization plus fixed-point inversion, and
verifies the instability dynamically with linearized and fully
nonlinear free-boundary simulations in Lagrangian mass coordinates.
"""

from .equilibrium import (
    EmdenSolution,
    MassMap,
    PolytropeParams,
    StationaryStar,
    build_star,
    central_density_for_mass,
    hydrostatic_residual,
    integrate_emden,
    mass_map,
)
from .forms import QuadraticForms, assemble_forms
from .grids import CubicGrid, GradedMesh, build_mesh, hardy_verify
from .linear import (
    DuhamelReport,
    GrowthBoundReport,
    LinearForcing,
    LinearState,
    PairTrajectory,
    RateFit,
    Trajectory,
    apply_operators,
    boundary_corrector,
    duhamel_residual,
    evolve_first_order,
    evolve_second_order,
    measure_growth_rate,
    verify_growth_bounds,
)
from .modes import (
    EigenResult,
    FixedPointResult,
    GrowingMode,
    LowerBound,
    cutoff_sensitivity,
    euler_lagrange_residual,
    find_fixed_point,
    lambda_lower_bound,
    mu_ladder,
    mu_of_s,
    reconstruct_mode,
    sandwich_constants,
    variational_inequality_check,
)
from .hydro import (
    EnergyReport,
    FluidState,
    InstabilityResult,
    LagrangianLab,
    cfl_dt,
    discrete_equilibrium,
    energy_balance_residual,
    energy_report,
    escape_time_slope,
    hydro_faces,
    identity_check,
    init_state,
    run_instability,
    state_norm0_sq,
    step,
    sweep_escape_times,
    taylor_radius_residual,
)

__all__ = [
    "EmdenSolution",
    "MassMap",
    "PolytropeParams",
    "StationaryStar",
    "build_star",
    "central_density_for_mass",
    "hydrostatic_residual",
    "integrate_emden",
    "mass_map",
    "QuadraticForms",
    "assemble_forms",
    "CubicGrid",
    "GradedMesh",
    "build_mesh",
    "hardy_verify",
    "DuhamelReport",
    "GrowthBoundReport",
    "LinearForcing",
    "LinearState",
    "PairTrajectory",
    "RateFit",
    "Trajectory",
    "apply_operators",
    "boundary_corrector",
    "duhamel_residual",
    "evolve_first_order",
    "evolve_second_order",
    "measure_growth_rate",
    "verify_growth_bounds",
    "EigenResult",
    "FixedPointResult",
    "GrowingMode",
    "LowerBound",
    "cutoff_sensitivity",
    "euler_lagrange_residual",
    "find_fixed_point",
    "lambda_lower_bound",
    "mu_ladder",
    "mu_of_s",
    "reconstruct_mode",
    "sandwich_constants",
    "variational_inequality_check",
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

__version__ = "0.1.0"
