"""Nonlinear free-boundary simulator: equilibrium fidelity, energy law,
and the escape-time instability experiment.

Escape runs reuse module-scoped trajectories; the expensive reference
numbers are frozen from converged runs of this configuration.
"""

import dataclasses
import math

import numpy as np
import pytest

from stellab.errors import (
    AmplitudeOutOfRangeError,
    NoEscapeError,
    VacuumCollapseError,
    ViscousSolveFailError,
)
from stellab.hydro import (
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

# sharp growth rate of the default star from the high-order eigenvalue
# pipeline; the staggered-grid rate must land within 5% of it
LAMBDA_STAR = 2.7392957387873617e-3


@pytest.fixture(scope="module")
def lab(star125):
    return discrete_equilibrium(star125)


@pytest.fixture(scope="module")
def escape_base(lab, mode125):
    return run_instability(lab, mode125, iota=1e-6, theta0=1e-3, t_max=6000.0)


@pytest.fixture(scope="module")
def escape_half(lab, mode125):
    return run_instability(lab, mode125, iota=5e-7, theta0=1e-3, t_max=6000.0)


@pytest.fixture(scope="module")
def escape_big(lab, mode125):
    return run_instability(lab, mode125, iota=1e-5, theta0=1e-3, t_max=6000.0)


@pytest.fixture(scope="module")
def escape_tiny(lab, mode125):
    return run_instability(lab, mode125, iota=1e-7, theta0=1e-3, t_max=6000.0)


# -- grid and background ---------------------------------------------------------


def test_faces_uniform_and_graded():
    r = 9.5
    uniform = hydro_faces(r, 20, surface_exponent=1.0)
    assert np.allclose(uniform, np.linspace(0.0, r, 21), rtol=0.0, atol=1e-14)
    graded = hydro_faces(r, 20, surface_exponent=1.5)
    assert graded[0] == 0.0
    assert graded[-1] == pytest.approx(r, rel=1e-15)
    assert np.all(np.diff(graded) > 0.0)
    # clustering shrinks the outermost cell
    assert graded[-1] - graded[-2] < uniform[-1] - uniform[-2]
    with pytest.raises(ValueError):
        hydro_faces(r, 15)
    with pytest.raises(ValueError):
        hydro_faces(r, 20, surface_exponent=0.9)


def test_discrete_equilibrium_balance(lab, star125):
    assert lab.balance_residual < 1e-13
    assert lab.balance_iterations > 0
    assert abs(lab.total_mass / star125.mass - 1.0) < 5e-3
    assert lab.rho0.min() > 4.0 * lab.rho_floor
    assert np.all(np.diff(lab.faces) > 0.0)
    assert np.all(lab.p0 > 0.0)
    # pressures recompute from the stored densities
    params = star125.params
    assert np.allclose(lab.p0, params.entropy_k * lab.rho0**params.gamma,
                       rtol=1e-15)


def test_equilibrium_rejects_subfloor_grid(star125):
    with pytest.raises(ValueError, match="density floor"):
        discrete_equilibrium(star125, n_cells=192, surface_exponent=1.4)


def test_lab_derived_quantities(lab):
    assert lab.n_cells == 192
    assert lab.nu == pytest.approx(1.0)          # min(delta, 4 eps / 3)
    assert lab.rho_floor == pytest.approx(1e-14)
    assert lab.total_mass == pytest.approx(lab.x[-1], rel=0.0)
    assert lab.node_mass[0] == pytest.approx(0.5 * lab.dm[0], rel=0.0)
    r_c = lab.cell_radius(lab.faces)
    assert np.all((lab.faces[:-1] < r_c) & (r_c < lab.faces[1:]))


def test_stationary_preservation(lab, star125):
    state = init_state(lab, None, 0.0)
    dt = cfl_dt(state)
    params = star125.params
    scale = math.sqrt(params.entropy_k * lab.total_mass ** (params.gamma - 1.0))
    for _ in range(1000):
        state = step(state, dt)
    assert np.max(np.abs(state.v)) <= 1e-10 * scale
    assert np.max(np.abs(state.v)) < 1e-13    # measured 5e-18
    assert state.clip_count == 0
    assert state.mass_residual() < 1e-14
    rep = energy_report(state)
    assert abs(rep.physical_energy) < 1e-15
    assert rep.e0 < 1e-30


def test_free_fall_single_step_exact(star125, lab):
    lab0 = discrete_equilibrium(star125, eps=0.0, delta=0.0)
    state = init_state(lab0, None, 0.0)
    dt = 0.01
    after = step(state, dt, include_pressure=False)
    r_half = state.r + 0.5 * dt * state.v
    expect = state.v.copy()
    expect[1:] = state.v[1:] - dt * lab0.x[1:] / r_half[1:] ** 2
    assert np.max(np.abs(after.v - expect)) < 1e-15


def test_iota_zero_reproduces_background(lab):
    state = init_state(lab, None, 0.0)
    assert np.array_equal(state.v, np.zeros(lab.n_cells + 1))
    assert np.array_equal(state.r, lab.faces)
    assert np.array_equal(state.rho, lab.rho0)
    rep = energy_report(state)
    assert rep.e0 == 0.0
    assert rep.physical_energy == 0.0
    assert rep.d0 == 0.0


# -- seeding ---------------------------------------------------------------------


def test_seeding_norm_matches_iota(lab, mode125):
    for iota in (1e-4, 1e-6):
        state = init_state(lab, mode125, iota)
        norm0 = math.sqrt(state_norm0_sq(state))
        assert abs(norm0 / iota - 1.0) < 1e-3     # stated accuracy
        assert abs(norm0 / iota - 1.0) < 1e-4     # measured 1.2e-6


def test_seeding_energy_brackets(lab, mode125):
    state = init_state(lab, mode125, 1e-6)
    rep = energy_report(state)
    # sqrt(E0) in [iota/2, 2 iota]
    assert 0.5e-6 <= rep.sqrt_e0 <= 2e-6
    assert rep.sqrt_e0 == pytest.approx(1.074297e-6, rel=1e-4)
    # data norm sqrt(E0v + E0sigma + E1v) + sqrt(E0r) in the same bracket
    assert 0.5e-6 <= rep.data_norm <= 2e-6
    assert rep.data_norm == pytest.approx(1.391895e-6, rel=1e-4)


def test_seeding_norm_comparable_to_energy(lab, mode125):
    # norm0^2 stays within [1/4, 2] of E0sigma + E0v + E1v at amplitudes
    # far beyond the fitting regime
    for iota, frozen in ((1e-2, 1.0141), (5e-2, 1.0758)):
        state = init_state(lab, mode125, iota)
        rep = energy_report(state)
        ratio = state_norm0_sq(state) / (rep.e0_sigma + rep.e0_v + rep.e1_v)
        assert 0.25 < ratio < 2.0
        assert ratio == pytest.approx(frozen, rel=1e-2)


def test_seeding_surface_radius_offset_linear(lab, mode125, star125):
    offsets = {}
    for iota in (1e-4, 1e-6):
        state = init_state(lab, mode125, iota)
        offsets[iota] = abs(state.r[-1] - star125.radius) / iota
    assert offsets[1e-4] == pytest.approx(offsets[1e-6], rel=1e-2)
    assert offsets[1e-6] == pytest.approx(0.0539, rel=2e-2)


def test_seeding_mass_consistency(lab, mode125):
    state = init_state(lab, mode125, 1e-4)
    assert state.mass_residual() < 1e-12
    dt = cfl_dt(state)
    for _ in range(50):
        state = step(state, dt)
    assert state.mass_residual() < 1e-12
    assert state.clip_count == 0


def test_seeding_amplitude_guard(lab, mode125):
    # the mode only compresses, so depletion needs the flipped sign
    flipped = dataclasses.replace(mode125, phi=-mode125.phi)
    init_state(lab, flipped, 0.11)
    with pytest.raises(AmplitudeOutOfRangeError):
        init_state(lab, flipped, 0.12)
    # compression of any admissible size passes the depletion guard
    state = init_state(lab, mode125, 0.5)
    assert np.all(state.rho >= lab.rho0)


def test_seeding_validation(lab, mode125):
    with pytest.raises(ValueError):
        init_state(lab, mode125, -1e-6)
    with pytest.raises(ValueError):
        init_state(lab, mode125, float("nan"))


# -- stepping --------------------------------------------------------------------


def test_per_step_modal_growth(lab, mode125):
    state = init_state(lab, mode125, 1e-6)
    dt = cfl_dt(state)
    # discard the seeding transient before measuring the one-step factor
    for _ in range(200):
        state = step(state, dt)
    after = step(state, dt)
    lam = mode125.growth_rate
    mask = np.abs(state.sigma) > 1e-3 * np.max(np.abs(state.sigma))
    ratios = (after.sigma[mask] - state.sigma[mask]) / (lam * dt * state.sigma[mask])
    med = float(np.median(ratios))
    assert abs(med - 1.0) < 0.05
    assert med == pytest.approx(1.0119, abs=2e-3)


def test_cfl_dt_scales(lab, mode125):
    state = init_state(lab, None, 0.0)
    dt = cfl_dt(state)
    assert 0.02 < dt < 0.03
    assert cfl_dt(state, cfl=0.25) == pytest.approx(0.5 * dt, rel=1e-14)


def test_step_rejects_bad_dt(lab):
    state = init_state(lab, None, 0.0)
    for bad in (0.0, -0.1, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            step(state, bad)


def test_vacuum_collapse_on_huge_step(lab, mode125):
    state = init_state(lab, mode125, 0.01)
    with pytest.raises(VacuumCollapseError):
        step(state, 1e4)


def test_viscous_solve_failure_reported(star125, mode125):
    lab_bad = discrete_equilibrium(star125, eps=float("nan"))
    state = init_state(lab_bad, mode125, 1e-6)
    with pytest.raises(ViscousSolveFailError):
        step(state, 0.01)


def test_density_floor_clip_counter(lab):
    # inflate the outermost cell volume far beyond the floor margin
    state = init_state(lab, None, 0.0)
    state.v[-1] = 1e3
    after = step(state, 0.01)
    assert after.clip_count >= 1
    assert np.all(after.rho >= lab.rho_floor)


# -- energy reports --------------------------------------------------------------


def test_energy_report_signs_and_finiteness(lab, mode125):
    rep = energy_report(init_state(lab, mode125, 1e-4))
    values = dataclasses.asdict(rep)
    assert all(np.isfinite(v) for v in values.values())
    for name in ("e0_v", "e0_sigma", "e0_r", "d0", "d1", "d2", "e1_v",
                 "e1_sigma", "e2", "scheme_dissipation"):
        assert values[name] >= 0.0
    assert rep.e0 == rep.e0_v + rep.e0_sigma + rep.e0_r
    assert rep.e1 == rep.e1_v + rep.e1_sigma
    assert rep.sqrt_e0 == math.sqrt(rep.e0)


def test_velocity_identity_inequality(lab, mode125):
    for iota in (1e-3, 1e-4):
        lhs, rhs = identity_check(init_state(lab, mode125, iota))
        assert lhs < rhs
        assert lhs / rhs == pytest.approx(0.743, abs=0.02)


def test_taylor_radius_expansion_quadratic(lab, mode125):
    res = {iota: taylor_radius_residual(init_state(lab, mode125, iota))
           for iota in (1e-3, 1e-4)}
    assert res[1e-3] / res[1e-4] == pytest.approx(100.0, rel=0.05)
    assert res[1e-4] == pytest.approx(8.566e-10, rel=2e-2)


def test_energy_balance_stationary_zero(lab):
    state = init_state(lab, None, 0.0)
    dt = cfl_dt(state)
    records = []
    for _ in range(20):
        for _ in range(10):
            state = step(state, dt)
        rep = energy_report(state)
        records.append((state.time, rep.physical_energy, rep.d0))
    times, phys, d0 = (np.array(c) for c in zip(*records))
    residual = energy_balance_residual(times, phys, d0)
    assert np.max(np.abs(residual)) < 1e-20


def test_energy_balance_modal_run(escape_base, mode125):
    times = escape_base.times
    mids = 0.5 * (times[1:] + times[:-1])
    late = mids >= 1.0 / mode125.growth_rate
    sup_d0 = float(np.max(escape_base.d0))
    res_scheme = energy_balance_residual(times, escape_base.physical_energy,
                                         escape_base.scheme_dissipation)
    res_d0 = energy_balance_residual(times, escape_base.physical_energy,
                                     escape_base.d0)
    # one order below the dissipation magnitude, with margin
    assert np.max(np.abs(res_scheme[late])) < 0.1 * sup_d0
    assert np.max(np.abs(res_scheme[late])) < 2e-3 * sup_d0   # measured 4.6e-4
    assert np.max(np.abs(res_d0[late])) < 0.1 * sup_d0
    # the physical energy only decays
    assert escape_base.physical_energy[-1] < 0.0


def test_energy_balance_large_viscosity(star125, lab, mode125):
    lab10 = discrete_equilibrium(star125, eps=10.0, delta=10.0)
    rep10 = energy_report(init_state(lab10, mode125, 1e-4))
    rep1 = energy_report(init_state(lab, mode125, 1e-4))
    # dissipation rate of the same data scales with the viscosities
    assert rep10.d0 / rep1.d0 == pytest.approx(10.0, rel=1e-3)

    state = init_state(lab10, mode125, 1e-4)
    dt = cfl_dt(state)
    records = []
    while state.time < 400.0:
        for _ in range(50):
            state = step(state, dt)
        rep = energy_report(state)
        records.append((state.time, rep.physical_energy,
                        rep.scheme_dissipation, rep.d0))
    times, phys, scheme, d0 = (np.array(c) for c in zip(*records))
    assert state.clip_count == 0
    assert phys[-1] < -1e-11
    assert np.all(np.diff(phys) < 1e-13)      # monotone decay, round-off slack
    residual = energy_balance_residual(times, phys, scheme)
    assert np.max(np.abs(residual)) < 0.1 * np.max(d0)


# -- the instability experiment --------------------------------------------------


def test_escape_run_rate_matches_eigenvalue(escape_base):
    assert escape_base.valid
    assert escape_base.clip_count == 0
    fit = escape_base.rate_fit
    assert fit is not None and fit.n_samples >= 30
    assert abs(fit.rate / LAMBDA_STAR - 1.0) < 0.05     # measured 1.87e-2
    assert fit.rate == pytest.approx(2.6881257892e-3, rel=1e-6)
    assert fit.r_squared > 1.0 - 1e-8
    assert escape_base.escape_time == pytest.approx(2547.84, abs=2.0)


def test_escape_trajectory_diagnostics(escape_base):
    n = escape_base.times.size
    for name in ("sqrt_e0", "e0_v", "e0_sigma", "e0_r", "d0", "e1", "e2",
                 "physical_energy", "sup_sigma", "sup_r", "scheme_dissipation"):
        assert getattr(escape_base, name).shape == (n,)
    assert escape_base.sqrt_e0[-1] >= 1e-3         # crossed theta0
    assert np.all(np.isfinite(escape_base.e1))
    # amplitude guard until escape
    assert escape_base.sup_sigma_max <= 0.5
    assert escape_base.sup_r_max <= 0.5
    assert escape_base.sup_sigma_max == pytest.approx(8.329e-4, rel=1e-2)


def test_escape_time_shift_under_halving(escape_base, escape_half):
    shift = escape_half.escape_time - escape_base.escape_time
    assert abs(shift * LAMBDA_STAR / math.log(2.0) - 1.0) < 0.1
    assert shift == pytest.approx(257.85, abs=1.0)


def test_escape_sweep_slope(escape_big, escape_base, escape_tiny):
    runs = [escape_big, escape_base, escape_tiny]
    assert escape_big.escape_time < escape_base.escape_time < escape_tiny.escape_time
    slope, intercept = escape_time_slope(runs)
    assert abs(slope * LAMBDA_STAR - 1.0) < 0.1      # measured 1.9e-2
    assert slope == pytest.approx(371.996, rel=1e-3)
    assert intercept > 0.0


def test_sweep_matches_single_runs(lab, mode125, escape_big):
    runs = sweep_escape_times(lab, mode125, [1e-5], theta0=1e-3, t_max=6000.0)
    assert len(runs) == 1
    assert runs[0].escape_time == escape_big.escape_time
    assert np.array_equal(runs[0].sqrt_e0, escape_big.sqrt_e0)


def test_linearized_limit_pairwise(lab, mode125):
    # deviation of sigma/iota from the common linear profile is O(iota):
    # consecutive decade differences shrink tenfold
    lam = mode125.growth_rate
    t_probe = 3.0 / lam
    profiles = {}
    for iota in (1e-5, 1e-6, 1e-7):
        state = init_state(lab, mode125, iota)
        dt = cfl_dt(state)
        n = int(math.ceil(t_probe / dt))
        dt = t_probe / n
        for _ in range(n):
            state = step(state, dt)
        profiles[iota] = state.sigma / iota
    d_56 = np.max(np.abs(profiles[1e-5] - profiles[1e-6]))
    d_67 = np.max(np.abs(profiles[1e-6] - profiles[1e-7]))
    assert 6.0 < d_56 / d_67 < 18.0


def test_run_validation_and_no_escape(lab, mode125):
    with pytest.raises(ValueError):
        run_instability(lab, mode125, iota=1e-3, theta0=1e-4, t_max=100.0)
    with pytest.raises(NoEscapeError, match="never reached"):
        run_instability(lab, mode125, iota=1e-6, theta0=1e-3, t_max=400.0)
    with pytest.raises(NoEscapeError):
        run_instability(lab, mode125, iota=0.0, theta0=1e-3, t_max=60.0)


def test_slope_needs_two_runs(escape_base):
    with pytest.raises(ValueError):
        escape_time_slope([escape_base])
