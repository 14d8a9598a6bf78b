import math
import warnings

import numpy as np
import pytest

from conftest import CONSTANT_TAUS, constant_pair, perturbed_pair
from slgeodesic.errors import InputError
from slgeodesic.fields import BoundaryPair, ChiField, CylinderGrid, PotentialSpec, TorusGrid, assemble_chi, scaled_hessian
from slgeodesic.solver import ContinuationSchedule, run_tau_sweep
from slgeodesic.spectral import select_branch
from slgeodesic.verify import (
    FAIL,
    INSUFFICIENT,
    PASS,
    WARN,
    VerificationReport,
    arrow_matrix,
    convexity_check,
    degenerate_residual,
    energy_functional,
    geodesic_residual_trend,
    gradient_fd_check,
    lemma_asymptotics_check,
    loglog_slope,
    monge_ampere_oracle,
    phase_admissibility_report,
    sigma_det_identity_check,
    spectral_selftest,
)


def test_report_bookkeeping():
    rep = VerificationReport()
    rep.add("b", {"status": PASS})
    rep.add("a", {"status": WARN})
    assert rep.status == WARN and list(rep.to_dict()["checks"]) == ["a", "b"]
    with pytest.raises(ValueError):
        rep.add("a", {"status": PASS})
    rep.add("c", {"status": FAIL})
    assert rep.status == FAIL and rep.failed == ["c"]


def test_lemma_table_large_corner():
    rep = lemma_asymptotics_check((1.0, 2.0, 3.0), (1.0, 1.0, 1.0), (1e6,), (1.0,))
    row = rep["table"][0]
    assert row["small_deviation"] <= 1e-4
    assert row["largest_relative_error"] <= 1e-5


def test_lemma_table_block_diagonal_is_exact():
    rep = lemma_asymptotics_check((1.0, 2.0, 3.0), (0.0, 0.0, 0.0), (1e2, 1e3, 1e4), (1.0, 0.25))
    assert rep["status"] == PASS
    assert all(r["small_deviation"] == 0.0 for r in rep["table"])


def test_lemma_table_slope():
    rep = lemma_asymptotics_check((1.0, 2.0, 3.0), (2.0, -1.5, 1.0), (1e2, 1e3, 1e4), (1.0, 0.25))
    assert rep["status"] == PASS
    assert all(abs(s + 1.0) <= 0.2 for s in rep["slopes"].values())
    A = arrow_matrix((1.0, 2.0), (0.5, 0.5), 100.0, 0.25)
    assert A[0, 0] == 400.0 and A[0, 1] == 1.0 and np.array_equal(A, A.T)


def test_identity_and_gradient_sweeps():
    assert sigma_det_identity_check(samples=100)["status"] == PASS
    assert gradient_fd_check(samples=10)["status"] == PASS
    assert spectral_selftest(1).status == PASS


def test_monge_ampere_oracle_closed_form():
    # n = 1, Q = 3: v = t(t-1)/6 tau makes the scaled Hessian diag(1/3, 3)
    grid = CylinderGrid(TorusGrid(1, 16), 17, 0.25)
    spec = PotentialSpec([[3.0]])
    chi = assemble_chi(BoundaryPair(spec, spec), grid)
    t = grid.times()
    v = grid.time_profile(0.5 * (1 / 3) * grid.tau * t * (t - 1))
    rep = monge_ampere_oracle(v, chi)
    assert rep["status"] == PASS and rep["max_det_error"] <= 1e-10


def test_monge_ampere_oracle_negative_control():
    grid = CylinderGrid(TorusGrid(1, 16), 17)
    chi = ChiField.constant(grid, [[2.0, 0.3], [0.3, 1.0]])
    rep = monge_ampere_oracle(grid.zeros(), chi)
    assert rep["status"] == FAIL and rep["max_det_error"] > 0.5
    with pytest.raises(InputError):
        monge_ampere_oracle(np.zeros((5, 8, 8)), ChiField.constant(CylinderGrid(TorusGrid(2, 8), 5), np.eye(3)))


def test_convexity_check():
    M = np.broadcast_to(np.diag([4 / 3, 2.0, 2.0]), (3, 4, 4, 3, 3))
    rep = convexity_check(M)
    assert rep["status"] == PASS and abs(rep["min_eigenvalue"] - 4 / 3) < 1e-15
    bad = np.array(M)
    bad[1, 2, 3] = np.diag([-1.0, 2.0, 2.0])
    rep = convexity_check(bad)
    assert rep["status"] == FAIL and rep["location"] == [1, 2, 3]


def test_convexity_after_sign_mapping(constant_sweep):
    pair = constant_pair(-2.0)
    assert phase_admissibility_report(pair, select_branch(2), TorusGrid(2, 8))["branch"] == "negative"
    mapped = pair.negated()
    r = constant_sweep.taus[0]
    g = constant_sweep.grid
    M = assemble_chi(mapped, g).matrices() + scaled_hessian(r.v_hat, g)
    assert convexity_check(M)["status"] == PASS


def _linear_path(grid, shift, t_extent=1.0):
    x = grid.space.coords()
    base = np.einsum("...i,...i->...", x, x)  # |x|^2, Hessian 2I
    t = np.linspace(0.0, t_extent, grid.time_points).reshape(-1, 1, 1)
    return base[None] + shift * t / t_extent


def test_energy_examples():
    grid = CylinderGrid(TorusGrid(2, 8), 9)
    branch = select_branch(2)
    e, w = energy_functional(_linear_path(grid, 1.0), branch, grid, quadratic=2 * np.eye(2))
    assert abs(e - 1.5) <= 1e-12 and abs(w - 3.0) <= 1e-12
    e0, _ = energy_functional(_linear_path(grid, 0.0), branch, grid, quadratic=2 * np.eye(2))
    assert e0 == 0.0
    e2, _ = energy_functional(_linear_path(grid, 1.0, 2.0), branch, grid, quadratic=2 * np.eye(2), t_extent=2.0)
    assert abs(e2 - 0.5 * e) <= 1e-12


def test_energy_warns_on_negative_weight():
    grid = CylinderGrid(TorusGrid(2, 8), 5)
    u = np.zeros(grid.shape) + np.linspace(0, 1, 5).reshape(-1, 1, 1)
    with pytest.warns(UserWarning):
        energy_functional(u, select_branch(2), grid)  # zero Hessian: weight Re(-1) < 0


def test_phase_admissibility_reports():
    grid = TorusGrid(2, 8)
    b = select_branch(2)
    rep = phase_admissibility_report(constant_pair(), b, grid)
    assert rep["status"] == PASS and abs(rep["raw_margin"] - (2 * math.atan(2) - math.pi / 2)) < 1e-15
    assert abs(rep["raw_margin"] - 0.6435011087932844) < 1e-12
    assert phase_admissibility_report(constant_pair(1.0), b, grid)["status"] == FAIL
    neg = phase_admissibility_report(constant_pair(-2.0), b, grid)
    assert neg["status"] == PASS and neg["branch"] == "negative" and "negate" in neg["mapping"]


def test_degenerate_residual_trend_constant(constant_sweep):
    res = constant_sweep
    entries = [(r.tau, r.v_hat) for r in res.taus]
    rep = geodesic_residual_trend(entries, constant_pair(), select_branch(2), res.grid)
    assert rep["status"] == PASS
    assert abs(rep["loglog_slope"] - 1.0) <= 0.1
    # closed form: the tau-term left over is exactly 4 tau
    assert all(abs(n - 4 * t) <= 1e-10 for t, n in zip(CONSTANT_TAUS, rep["norms"]))
    single = geodesic_residual_trend(entries[:1], constant_pair(), select_branch(2), res.grid)
    assert single["status"] == INSUFFICIENT


def test_degenerate_residual_trend_perturbed(perturbed_sweep):
    res = perturbed_sweep
    rep = geodesic_residual_trend([(r.tau, r.v_hat) for r in res.taus], perturbed_pair(), select_branch(1), res.grid)
    assert rep["status"] == PASS
    assert all(b < a for a, b in zip(rep["norms"], rep["norms"][1:]))


def test_residual_trend_flags_growth(constant_sweep):
    res = constant_sweep
    entries = [(r.tau, r.v_hat) for r in reversed(res.taus)]
    rep = geodesic_residual_trend(entries, constant_pair(), select_branch(2), res.grid)
    assert rep["status"] == FAIL


def test_loglog_slope():
    x = np.array([1.0, 2.0, 4.0])
    assert abs(loglog_slope(x, 3 * x**2) - 2.0) < 1e-12
