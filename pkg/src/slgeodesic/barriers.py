"""Explicit sub- and supersolutions and the comparison checks built on them.

Both barriers are space-constant parabolas in the rescaled time t:

    v_sub(t)   = lambda_sub   t (t - 1) / 2   (<= 0)
    v_super(t) = lambda_super t (1 - t) / 2   (>= 0)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AdmissibilityViolation, BarrierFailure
from .fields import sample_potential, scaled_hessian_operator
from .spectral import arctan_sum

MARGIN_TOL = 1e-10
LAMBDA_CAP = 1e12


@dataclass
class BarrierPair:
    delta: float
    lambda_sub: float
    lambda_super: float
    v_sub: np.ndarray
    v_super: np.ndarray
    branch: object = None
    sub_phase: np.ndarray = field(default=None, repr=False)
    doublings: int = 0

    def to_dict(self):
        return {
            "delta": self.delta,
            "lambda_sub": self.lambda_sub,
            "lambda_super": self.lambda_super,
            "doublings": self.doublings,
            "sub_min_margin": None
            if self.sub_phase is None or self.branch is None
            else float(self.sub_phase.min() - self.branch.big_theta),
        }


def margin_from_hessians(hessians, branch):
    """delta from stacks of boundary Hessians; raises when delta <= 0.

    ``hessians`` is a sequence (endpoint 0, endpoint 1) of ``(N.., n, n)`` arrays.
    """
    lower = branch.big_theta - math.pi / 2
    worst = None
    for endpoint, hess in enumerate(hessians):
        phase = arctan_sum(hess)
        idx = np.unravel_index(int(np.argmin(phase)), phase.shape)
        cand = (float(phase[idx]) - lower, endpoint, tuple(int(i) for i in idx), float(phase[idx]))
        if worst is None or cand[0] < worst[0]:
            worst = cand
    margin, endpoint, node, phase = worst
    delta = 0.5 * margin
    if delta <= 0.0:
        raise AdmissibilityViolation(
            f"endpoint u{endpoint} violates the phase condition at node {node}: "
            f"phase {phase:.17g} <= {lower:.17g}",
            endpoint=endpoint,
            node=node,
            phase=phase,
            margin=margin,
        )
    return delta


def admissibility_margin(pair, branch, grid):
    """Half the smallest gap between the boundary phases and big_theta - pi/2."""
    h0, _ = sample_potential(pair.u0, grid)
    h1, _ = sample_potential(pair.u1, grid)
    return margin_from_hessians((h0, h1), branch)


def subsolution_profile(lam, grid):
    t = grid.times()
    return grid.time_profile(0.5 * lam * t * (t - 1.0))


def supersolution_profile(lam, grid):
    t = grid.times()
    return grid.time_profile(0.5 * lam * t * (1.0 - t))


def build_subsolution(delta, tau, grid, chi, branch):
    """Smallest lambda = (tau / tan delta) 2^j with phase(chi + D^2 v_sub) >= big_theta + delta.

    Returns ``(lambda_sub, v_sub, sub_phase, doublings)`` where ``sub_phase`` is
    the pointwise arctan sum at the subsolution (the anchor of the continuation).
    """
    if not (0.0 < delta < math.pi / 2):
        raise BarrierFailure(f"margin delta={delta} outside (0, pi/2)")
    if not (0.0 < tau <= 1.0):
        raise BarrierFailure(f"tau={tau} outside (0, 1]")
    target = branch.big_theta + delta - MARGIN_TOL
    lam = tau / math.tan(delta)
    doublings = 0
    while lam <= LAMBDA_CAP:
        v = subsolution_profile(lam, grid)
        phase = arctan_sum(scaled_hessian_operator(v, chi, grid))
        if float(phase.min()) >= target:
            return lam, v, phase, doublings
        lam *= 2.0
        doublings += 1
    raise BarrierFailure(
        f"subsolution margin not reached for lambda <= {LAMBDA_CAP:g}; "
        "data inadmissible or under-resolved"
    )


def build_supersolution(tau, grid, chi):
    """lambda_super = max(0, sup trace chi) tau, checked against trace(chi + D^2 v).

    For data from a boundary pair the corner of chi vanishes and the spatial
    trace is affine in t, so the sup is the largest boundary Laplacian.
    """
    lap = float(np.trace(chi.matrices(interior=False), axis1=-2, axis2=-1).max())
    lam = max(0.0, lap) * tau
    v = supersolution_profile(lam, grid)
    tr = np.trace(scaled_hessian_operator(v, chi, grid), axis1=-2, axis2=-1)
    if float(tr.max()) > MARGIN_TOL * max(1.0, abs(lap)):
        raise BarrierFailure(f"supersolution trace check failed: max trace {float(tr.max()):.3e} > 0")
    return lam, v


def build_barriers(chi, branch, delta=None):
    """Both barriers for the cylinder problem carried by ``chi``.

    When ``delta`` is omitted it is read off the spatial blocks of ``chi`` on
    the two faces, which are exactly the boundary Hessians.
    """
    grid = chi.grid
    if delta is None:
        delta = margin_from_hessians(chi.face_hessians(), branch)
    lam_sub, v_sub, phase, doublings = build_subsolution(delta, grid.tau, grid, chi, branch)
    lam_sup, v_sup = build_supersolution(grid.tau, grid, chi)
    return BarrierPair(delta, lam_sub, lam_sup, v_sub, v_sup, branch, phase, doublings)


@dataclass
class SandwichReport:
    ok: bool
    slack: float
    lower_violation: float
    lower_location: tuple
    upper_violation: float
    upper_location: tuple

    def to_dict(self):
        return {
            "ok": self.ok,
            "slack": self.slack,
            "lower_violation": self.lower_violation,
            "lower_location": list(self.lower_location),
            "upper_violation": self.upper_violation,
            "upper_location": list(self.upper_location),
        }


def check_sandwich(v, barriers):
    """Report whether v_sub <= v <= v_super, with worst violations; never raises."""
    v = np.asarray(v, dtype=float)
    slack = 1e-9 * (1.0 + float(np.abs(v).max()))
    low = barriers.v_sub - v
    up = v - barriers.v_super
    il = np.unravel_index(int(np.argmax(low)), low.shape)
    iu = np.unravel_index(int(np.argmax(up)), up.shape)
    lv, uv = float(low[il]), float(up[iu])
    return SandwichReport(
        ok=lv <= slack and uv <= slack,
        slack=slack,
        lower_violation=max(lv, 0.0),
        lower_location=tuple(int(i) for i in il),
        upper_violation=max(uv, 0.0),
        upper_location=tuple(int(i) for i in iu),
    )


def normal_derivative_monitor(v, barriers, grid):
    """Compare one-sided s-derivatives of v on both faces with the barrier slopes.

    Returns a dict with the extreme derivatives, the bounds and a list of
    warning strings (empty when every bound holds).
    """
    dt, rs = grid.dt, 1.0 / math.sqrt(grid.tau)
    d0 = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dt) * rs
    d1 = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * dt) * rs
    lo = 0.5 * barriers.lambda_sub * rs
    hi = 0.5 * barriers.lambda_super * rs
    tol = 1e-8 * (1.0 + lo + hi)
    warnings = []
    if d0.min() < -lo - tol or d0.max() > hi + tol:
        warnings.append(f"face s=0 derivative range [{d0.min():.6g}, {d0.max():.6g}] outside [{-lo:.6g}, {hi:.6g}]")
    if d1.min() < -hi - tol or d1.max() > lo + tol:
        warnings.append(f"face s=sqrt(tau) derivative range [{d1.min():.6g}, {d1.max():.6g}] outside [{-hi:.6g}, {lo:.6g}]")
    return {
        "s0_min": float(d0.min()),
        "s0_max": float(d0.max()),
        "s1_min": float(d1.min()),
        "s1_max": float(d1.max()),
        "bound_sub": lo,
        "bound_super": hi,
        "warnings": warnings,
    }
