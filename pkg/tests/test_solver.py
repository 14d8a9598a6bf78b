import math

import numpy as np
import pytest

from conftest import CONSTANT_TAUS, constant_pair, perturbed_pair
from slgeodesic.barriers import build_barriers, check_sandwich
from slgeodesic.errors import AdmissibilityViolation, NoConvergence
from slgeodesic.fields import ChiField, CylinderGrid, TorusGrid, assemble_chi, interpolation_values
from slgeodesic.solver import (
    ContinuationSchedule,
    NewtonSettings,
    assemble_jacobian,
    c1_norms,
    jacobian_fd_check,
    linearize_apply,
    newton_solve,
    residual,
    run_tau_sweep,
    run_zeta_path,
)
from slgeodesic.spectral import eigenvalues, select_branch

MU = 4 / 3  # arctan(4/3) + 2 arctan 2 = pi


def closed_form(grid):
    t = grid.times()
    return grid.time_profile(0.5 * MU * grid.tau * t * (t - 1))


def setup(pair, n, N=16, Nt=17, tau=1.0):
    grid = CylinderGrid(TorusGrid(n, N), Nt, tau)
    chi = assemble_chi(pair, grid)
    branch = select_branch(n)
    return grid, chi, branch, build_barriers(chi, branch)


def test_closed_form_identity():
    assert abs(math.atan(MU) + 2 * math.atan(2.0) - math.pi) <= 1e-12


def test_schedule_and_settings_validation():
    for kw in ({"zeta_steps": (0.1, 1.0)}, {"zeta_steps": (0.0, 0.5, 0.5, 1.0)}, {"tau_sequence": ()},
               {"tau_sequence": (1.0, 1.0)}, {"tau_sequence": (2.0,)}, {"tau_sequence": (0.5, 0.0)}):
        with pytest.raises(ValueError):
            ContinuationSchedule(**kw)
    for kw in ({"residual_tolerance": 0.0}, {"backtrack": 1.0}, {"max_iterations": 0}, {"min_step": 0.0}):
        with pytest.raises(ValueError):
            NewtonSettings(**kw)


@pytest.mark.parametrize("pair,n", [(constant_pair(), 2), (perturbed_pair(), 1)])
@pytest.mark.parametrize("tau", [1.0, 1 / 64])
def test_anchor_is_exact(pair, n, tau):
    grid, chi, branch, b = setup(pair, n, tau=tau)
    assert np.abs(residual(b.v_sub, chi, 0.0, b)).max() <= 1e-12


def test_closed_form_residual():
    grid, chi, branch, b = setup(constant_pair(), 2)
    assert np.abs(residual(closed_form(grid), chi, 1.0, b)).max() <= 1e-12


def test_synthetic_chi_solves_target():
    grid = CylinderGrid(TorusGrid(2, 8), 9)
    chi = ChiField.constant(grid, np.diag([MU, 2.0, 2.0]))
    b = build_barriers(chi, select_branch(2))
    assert np.abs(residual(grid.zeros(), chi, 1.0, b)).max() <= 1e-15
    v, records = run_zeta_path(chi, b)
    assert np.abs(v).max() <= 1e-10
    assert all(r.sandwich["ok"] for r in records)


def test_linearization():
    grid, chi, branch, b = setup(perturbed_pair(), 1, N=16, tau=0.25)
    v = 0.3 * b.v_sub
    assert not linearize_apply(v, chi, grid.zeros()).any()
    assert jacobian_fd_check(v, chi, 0.5, b) <= 1e-6
    J, A = assemble_jacobian(v, chi)
    w = np.zeros(grid.shape)
    w[1:-1] = np.random.default_rng(5).standard_normal(grid.interior_shape)
    assert np.allclose(J @ w[1:-1].ravel(), linearize_apply(v, chi, w).ravel(), rtol=1e-12, atol=1e-9)
    assert eigenvalues(A).min() > 0


def test_linearization_n2():
    grid, chi, branch, b = setup(constant_pair(), 2, N=8, Nt=9, tau=1 / 16)
    assert jacobian_fd_check(0.5 * b.v_sub, chi, 0.3, b, rng=np.random.default_rng(1)) <= 1e-6


def test_newton_from_exact_solution_and_anchor():
    grid, chi, branch, b = setup(constant_pair(), 2)
    v, rec = newton_solve(closed_form(grid), chi, 1.0, b)
    assert rec.iterations <= 1
    v0, rec0 = newton_solve(b.v_sub, chi, 0.0, b)
    assert rec0.iterations == 0 and np.array_equal(v0, b.v_sub)


def test_newton_reports_non_convergence():
    grid, chi, branch, b = setup(perturbed_pair(), 1)
    with pytest.raises(NoConvergence) as info:
        newton_solve(b.v_sub, chi, 1.0, b, NewtonSettings(max_iterations=1, predictor=False))
    assert info.value.iterations == 1 and info.value.residual > 1e-10


def test_zeta_path_constant_case():
    grid, chi, branch, b = setup(constant_pair(), 2, N=32, Nt=33)
    v, records = run_zeta_path(chi, b)
    assert np.abs(v - closed_form(grid)).max() <= 1e-9
    assert [r.zeta for r in records] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert all(r.iterations <= 3 for r in records)
    assert records[0].jacobian_check <= 1e-6
    assert all(r.min_ellipticity >= 1e-12 for r in records)


def test_inadmissible_pair_fails_before_the_path():
    grid = CylinderGrid(TorusGrid(2, 8), 9)
    with pytest.raises(AdmissibilityViolation):
        build_barriers(assemble_chi(constant_pair(1.0), grid), select_branch(2))


def test_bisection_recovers_from_a_coarse_schedule():
    grid, chi, branch, b = setup(perturbed_pair(), 1, N=32, Nt=33, tau=1 / 256)
    schedule = ContinuationSchedule(zeta_steps=(0.0, 1.0))
    settings = NewtonSettings(max_iterations=6, predictor=False)
    v, records = run_zeta_path(chi, b, schedule, settings)
    assert records[-1].zeta == 1.0 and len(records) > 2
    assert np.abs(residual(v, chi, 1.0, b)).max() <= 1e-10


def test_constant_sweep_law(constant_sweep):
    res = constant_sweep
    assert res.ok and [r.tau for r in res.taus] == list(CONSTANT_TAUS)
    for r in res.taus:
        assert abs(r.c0 - r.tau / 6) <= 1e-8
        assert abs(r.v_hat.min() + r.tau / 6) <= 1e-8
    ratios = [a / b for a, b in zip(res.gaps, res.gaps[1:])]
    assert all(abs(q - 4.0) <= 0.2 for q in ratios)
    linear = interpolation_values(constant_pair(), res.grid)
    assert np.abs(res.u - linear).max() <= CONSTANT_TAUS[-1] / 6 + 1e-8


def test_perturbed_sweep_regressions(perturbed_sweep):
    res = perturbed_sweep
    assert res.ok and len(res.taus) == 5
    # frozen from first runs: at most 12 Newton iterations per zeta step at N = 32
    assert max(rec.iterations for r in res.taus for rec in r.records) <= 12
    assert all(rec.final_residual <= 1e-10 for r in res.taus for rec in r.records)
    c1 = [r.c1_total for r in res.taus]
    assert max(c1) <= 2 * c1[0]
    assert all(b <= a for a, b in zip(res.gaps, res.gaps[1:]))
    for r in res.taus:
        for rec in r.records:
            assert rec.sandwich["ok"]
            assert rec.min_ellipticity >= 1e-12
        assert r.normal_derivatives["warnings"] == []


def test_c1_norms_of_parabola():
    grid = CylinderGrid(TorusGrid(1, 8), 5)
    v = grid.time_profile(grid.times() * (1 - grid.times()))
    c0, c1 = c1_norms(v, grid)
    assert c0 == 0.25 and abs(c1 - 0.75) < 1e-15


def test_warm_start_matches_cold_start():
    pair = perturbed_pair()
    branch = select_branch(1)
    taus = (1.0, 0.25, 1 / 16)
    cold = run_tau_sweep(pair, branch, ContinuationSchedule(tau_sequence=taus), N=16, time_points=17)
    warm = run_tau_sweep(pair, branch, ContinuationSchedule(tau_sequence=taus, warm_start=True), N=16, time_points=17)
    assert warm.ok
    for a, b in zip(cold.taus, warm.taus):
        assert np.abs(a.v_hat - b.v_hat).max() <= 1e-9


def test_parallel_sweep_is_identical():
    pair = perturbed_pair()
    branch = select_branch(1)
    schedule = ContinuationSchedule(tau_sequence=(1.0, 0.25))
    serial = run_tau_sweep(pair, branch, schedule, N=16, time_points=17)
    parallel = run_tau_sweep(pair, branch, schedule, N=16, time_points=17, jobs=2)
    for a, b in zip(serial.taus, parallel.taus):
        assert np.array_equal(a.v_hat, b.v_hat)
    assert np.array_equal(serial.u, parallel.u)
