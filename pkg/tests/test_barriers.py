import math

import numpy as np
import pytest

from conftest import constant_pair
from slgeodesic.barriers import (
    MARGIN_TOL,
    admissibility_margin,
    build_barriers,
    build_subsolution,
    build_supersolution,
    check_sandwich,
    normal_derivative_monitor,
)
from slgeodesic.errors import AdmissibilityViolation, BarrierFailure
from slgeodesic.fields import BoundaryPair, CylinderGrid, PotentialSpec, TorusGrid, assemble_chi
from slgeodesic.spectral import arctan_sum, select_branch
from slgeodesic.solver import scaled_hessian_operator

# (2 arctan 2 - pi/2) / 2, i.e. arctan(1/3); evaluated with 50-digit arithmetic
DELTA_Q2 = 0.32175055439664219340


def cyl(n=2, N=8, Nt=9, tau=1.0):
    return CylinderGrid(TorusGrid(n, N), Nt, tau)


def test_margin_constant_hessian():
    delta = admissibility_margin(constant_pair(), select_branch(2), TorusGrid(2, 8))
    assert abs(delta - DELTA_Q2) < 1e-15
    assert abs(math.tan(delta) - 1 / 3) < 1e-15


def test_margin_on_cone_boundary_is_rejected():
    with pytest.raises(AdmissibilityViolation) as info:
        admissibility_margin(constant_pair(1.0), select_branch(2), TorusGrid(2, 8))
    assert info.value.margin <= 0


def test_margin_names_the_bad_endpoint_and_node():
    good = PotentialSpec(2 * np.eye(2))
    bad = PotentialSpec(2 * np.eye(2), (((1, 0), 0.04, 0.0),))  # H11 = 2 - 0.04 (2 pi)^2 < 1/2 at x1 = 0
    with pytest.raises(AdmissibilityViolation) as info:
        admissibility_margin(BoundaryPair(good, bad), select_branch(2), TorusGrid(2, 8))
    assert info.value.endpoint == 1
    assert info.value.node[0] == 0
    assert "u1" in str(info.value)


@pytest.mark.parametrize("tau", [1.0, 0.25, 1 / 64])
def test_subsolution_constant_case(tau):
    g = cyl(tau=tau)
    chi = assemble_chi(constant_pair(), g)
    branch = select_branch(2)
    lam, v, phase, doublings = build_subsolution(DELTA_Q2, tau, g, chi, branch)
    assert doublings == 0
    assert abs(lam - 3 * tau) <= 1e-14
    assert np.array_equal(v[0], np.zeros((8, 8))) and np.array_equal(v[-1], np.zeros((8, 8)))
    assert abs(v[4].min() + lam / 8) < 1e-15 and abs(v[4].max() + lam / 8) < 1e-15
    # arctan 3 + 2 arctan 2 = pi + delta
    assert abs(phase.min() - (math.pi + DELTA_Q2)) < 1e-12
    assert phase.min() >= math.pi + DELTA_Q2 - MARGIN_TOL


def test_subsolution_rejects_bad_arguments():
    g = cyl()
    chi = assemble_chi(constant_pair(), g)
    with pytest.raises(BarrierFailure):
        build_subsolution(0.0, 1.0, g, chi, select_branch(2))
    with pytest.raises(BarrierFailure):
        build_subsolution(0.1, 1.5, g, chi, select_branch(2))
    with pytest.raises(BarrierFailure):
        build_subsolution(math.pi, 1.0, g, chi, select_branch(2))


def test_subsolution_gives_up_on_unreachable_margin():
    g = cyl()
    chi = assemble_chi(constant_pair(1.0), g)
    with pytest.raises(BarrierFailure):
        build_subsolution(1.5, 1.0, g, chi, select_branch(2))


def test_larger_margin_never_needs_smaller_lambda():
    pair = BoundaryPair(PotentialSpec(2 * np.eye(2), (((1, 1), 0.01, 0.0),)), PotentialSpec(2 * np.eye(2)))
    g = cyl(tau=0.25)
    chi = assemble_chi(pair, g)
    branch = select_branch(2)
    data_delta = build_barriers(chi, branch).delta
    lams = [build_subsolution(d, g.tau, g, chi, branch)[0] for d in np.linspace(0.02, data_delta, 8)]
    assert all(b <= a for a, b in zip(lams, lams[1:]))


@pytest.mark.parametrize("tau", [1.0, 0.5, 0.25])
def test_supersolution_constant_case(tau):
    g = cyl(tau=tau)
    lam, v = build_supersolution(tau, g, assemble_chi(constant_pair(), g))
    assert abs(lam - 4 * tau) < 1e-14
    assert abs(v.max() - lam / 8) < 1e-15
    assert np.array_equal(v[0], np.zeros((8, 8)))


def test_supersolution_periodic_only():
    spec = PotentialSpec(np.zeros((1, 1)), (((1,), 0.1, 0.0),))
    g = cyl(n=1, N=16)
    lam, v = build_supersolution(1.0, g, assemble_chi(BoundaryPair(spec, spec), g))
    assert abs(lam - 0.1 * (2 * math.pi) ** 2) < 1e-12
    assert np.trace(scaled_hessian_operator(v, assemble_chi(BoundaryPair(spec, spec), g)), axis1=-2, axis2=-1).max() <= 1e-12


def test_barrier_pair_sign_and_faces():
    g = cyl(tau=0.25)
    b = build_barriers(assemble_chi(constant_pair(), g), select_branch(2))
    assert (b.v_sub <= 0).all() and (b.v_super >= 0).all()
    assert not b.v_sub[0].any() and not b.v_super[-1].any()
    d = b.to_dict()
    assert d["doublings"] == 0 and d["sub_min_margin"] >= b.delta - MARGIN_TOL


def test_sandwich_examples():
    g = cyl()
    b = build_barriers(assemble_chi(constant_pair(), g), select_branch(2))
    rep = check_sandwich(b.v_sub, b)
    assert rep.ok and rep.lower_violation == 0.0
    assert check_sandwich(np.zeros(g.shape), b).ok
    t = g.times()
    exact = g.time_profile(0.5 * (4 / 3) * t * (t - 1))
    assert check_sandwich(exact, b).ok
    bad = np.zeros(g.shape)
    bad[3, 2, 5] = 1.0
    rep = check_sandwich(bad, b)
    assert not rep.ok and rep.upper_location == (3, 2, 5)
    assert rep.to_dict()["upper_violation"] > 0


def test_normal_derivative_monitor():
    g = cyl(tau=0.25)
    b = build_barriers(assemble_chi(constant_pair(), g), select_branch(2))
    t = g.times()
    exact = g.time_profile(0.5 * (4 / 3) * g.tau * t * (t - 1))
    mon = normal_derivative_monitor(exact, b, g)
    assert mon["warnings"] == []
    assert mon["s0_min"] < 0 < mon["bound_sub"]
    steep = 10 * b.v_sub
    assert normal_derivative_monitor(steep, b, g)["warnings"]
