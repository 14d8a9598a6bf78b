"""Independent checks on the spectral kernels and on computed solutions.

Each check returns a plain dict (``status`` plus details) so that reports can
be merged into the JSON run report without further conversion.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .fields import assemble_chi, sample_potential, scaled_hessian
from .spectral import (
    arctan_sum,
    arctan_sum_gradient,
    eigenvalues,
    geodesic_operator_det,
    geodesic_operator_sigma,
    select_branch,
)

PASS, WARN, FAIL, INSUFFICIENT = "pass", "warn", "fail", "insufficient-data"


@dataclass
class VerificationReport:
    checks: dict = field(default_factory=dict)

    def add(self, name, result):
        if name in self.checks:
            raise ValueError(f"check {name!r} recorded twice")
        self.checks[name] = result
        return result

    @property
    def status(self):
        states = {c["status"] for c in self.checks.values()}
        if FAIL in states:
            return FAIL
        return WARN if WARN in states else PASS

    @property
    def failed(self):
        return sorted(k for k, c in self.checks.items() if c["status"] == FAIL)

    def to_dict(self):
        return {"status": self.status, "checks": {k: self.checks[k] for k in sorted(self.checks)}}


def loglog_slope(x, y):
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def refinement_order(spacings, errors):
    return loglog_slope(spacings, errors)


def arrow_matrix(lambda_prime, a_vec, a, tau=1.0):
    lp = np.asarray(lambda_prime, dtype=float)
    av = np.asarray(a_vec, dtype=float)
    n = lp.shape[0]
    A = np.zeros((n + 1, n + 1))
    A[0, 0] = a / tau
    A[0, 1:] = av / math.sqrt(tau)
    A[1:, 0] = av / math.sqrt(tau)
    A[1:, 1:] = np.diag(lp)
    return A


def lemma_asymptotics_check(lambda_prime, a_vec, a_values, tau_values, slope_band=0.2):
    """Eigenvalues of the arrow matrix against their large-corner asymptotics.

    For every (a, tau) the n small eigenvalues are compared with the fixed
    diagonal and the largest one with a / tau (relative tolerance 10 / a).
    The decay of the small-eigenvalue deviation is fitted per tau on a log-log
    scale; its slope must lie within -1 +- ``slope_band``.
    """
    lp = np.sort(np.asarray(lambda_prime, dtype=float))
    n = lp.shape[0]
    rows = []
    ok = True
    slopes = {}
    for tau in tau_values:
        devs = []
        for a in a_values:
            w = eigenvalues(arrow_matrix(lambda_prime, a_vec, a, tau))
            dev = float(np.abs(w[:n] - lp).max())
            rel = float(abs(w[n] - a / tau) / (a / tau))
            within = rel <= 10.0 / a
            ok &= within
            rows.append({"tau": tau, "a": a, "small_deviation": dev, "largest_relative_error": rel, "largest_ok": within})
            devs.append(dev)
        if len(a_values) >= 2 and all(d > 0 for d in devs):
            s = loglog_slope(a_values, devs)
            slopes[str(tau)] = s
            ok &= abs(s + 1.0) <= slope_band
        else:
            slopes[str(tau)] = None
            ok &= all(d == 0.0 for d in devs) or len(a_values) < 2
    return {"status": PASS if ok else FAIL, "table": rows, "slopes": slopes}


def sigma_det_identity_check(n_values=(1, 2, 3, 4), samples=1000, seed=0, tol=1e-10):
    """Determinant form against sigma_k form of the tau-operator on random data."""
    rng = np.random.default_rng(seed)
    worst = {}
    ok = True
    for n in n_values:
        branch = select_branch(n)
        utt = rng.standard_normal(samples)
        g = rng.standard_normal((samples, n))
        h = rng.standard_normal((samples, n, n))
        h = 0.5 * (h + np.swapaxes(h, 1, 2))
        tau = rng.uniform(0.0, 1.0, samples)
        sig = geodesic_operator_sigma(utt, g, h, tau, branch)
        det = np.array([geodesic_operator_det(utt[i], g[i], h[i], tau[i], branch) for i in range(samples)])
        err = np.abs(sig - det) / np.maximum(1.0, np.abs(det))
        worst[str(n)] = float(err.max())
        ok &= bool(err.max() <= tol)
    return {"status": PASS if ok else FAIL, "worst_relative_error": worst, "samples": samples, "tolerance": tol}


def gradient_fd_check(samples=100, m=4, seed=0, step=1e-5, tol=1e-6):
    """arctan_sum_gradient against central differences of arctan_sum, per entry pair."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        A = rng.uniform(-10.0, 10.0, (m, m))
        A = 0.5 * (A + A.T)
        G = arctan_sum_gradient(A)
        fd = np.empty((m, m))
        for i in range(m):
            for j in range(i, m):
                E = np.zeros((m, m))
                E[i, j] = E[j, i] = 1.0
                d = (arctan_sum(A + step * E) - arctan_sum(A - step * E)) / (2 * step)
                # a symmetric perturbation of an off-diagonal pair moves both entries
                fd[i, j] = fd[j, i] = d if i == j else 0.5 * d
        worst = max(worst, float(np.abs(fd - G).max() / np.abs(G).max()))
    return {"status": PASS if worst <= tol else FAIL, "worst_relative_error": worst, "samples": samples, "tolerance": tol}


def _d1_4(f, axis, h, periodic):
    if periodic:
        r = lambda k: np.roll(f, -k, axis)
        return (-r(2) + 8 * r(1) - 8 * r(-1) + r(-2)) / (12.0 * h)
    s = lambda k: np.take(f, range(2 + k, f.shape[axis] - 2 + k), axis=axis)
    return (-s(2) + 8 * s(1) - 8 * s(-1) + s(-2)) / (12.0 * h)


def _d2_4(f, axis, h, periodic):
    if periodic:
        r = lambda k: np.roll(f, -k, axis)
        return (-r(2) + 16 * r(1) - 30 * f + 16 * r(-1) - r(-2)) / (12.0 * h * h)
    s = lambda k: np.take(f, range(2 + k, f.shape[axis] - 2 + k), axis=axis)
    return (-s(2) + 16 * s(1) - 30 * s(0) + 16 * s(-1) - s(-2)) / (12.0 * h * h)


def fourth_order_hessian(v, grid):
    """Scaled (s, x) Hessian of v by fourth-order central differences, n = 1.

    Only time slices 2..N_t-3 carry a full stencil; returns shape
    ``(N_t - 4, N, 2, 2)``.
    """
    dt, h, tau = grid.dt, grid.h, grid.tau
    out = np.empty((v.shape[0] - 4,) + v.shape[1:] + (2, 2))
    out[..., 0, 0] = _d2_4(v, 0, dt, False) / tau
    mixed = _d1_4(_d1_4(v, 0, dt, False), 1, h, True) / math.sqrt(tau)
    out[..., 0, 1] = mixed
    out[..., 1, 0] = mixed
    out[..., 1, 1] = _d2_4(v[2:-2], 1, h, True)
    return out


def monge_ampere_oracle(v, chi, tol=1e-2, strip=0.125):
    """det(chi + D^2 v) against 1 for n = 1 on the pi/2 branch.

    Two arctangents summing to pi/2 means the eigenvalues multiply to 1, so
    the determinant of the scaled Hessian must be 1.  The Hessian of v is
    rebuilt with fourth-order stencils (independent of the solver's
    discretization) and ``chi`` is analytic, so the deviation measures the
    solver's own discretization error.  Nodes within ``strip`` of a time face
    are skipped: the evaluation window stays fixed under refinement.
    """
    grid = chi.grid
    if grid.n != 1:
        raise InputError("the Monge-Ampere oracle needs n = 1")
    M = chi.matrices(interior=False)[2:-2] + fourth_order_hessian(np.asarray(v, dtype=float), grid)
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] ** 2
    t = grid.times()[2:-2]
    window = (t >= strip - 1e-12) & (t <= 1.0 - strip + 1e-12)
    if not window.any():
        raise InputError("time grid too coarse for the oracle window")
    dev = np.abs(det - 1.0)[window]
    idx = np.unravel_index(int(np.argmax(dev)), dev.shape)
    err = float(dev[idx])
    return {
        "status": PASS if err <= tol else FAIL,
        "max_det_error": err,
        "location": [float(t[window][idx[0]]), int(idx[1])],
        "h": grid.h,
        "tolerance": tol,
        "strip": strip,
    }


def convexity_check(M):
    """Smallest eigenvalue over all nodes of the Hessian field M; pass iff positive."""
    w = eigenvalues(M)
    lmin = w[..., 0]
    idx = np.unravel_index(int(np.argmin(lmin)), lmin.shape)
    val = float(lmin[idx])
    return {"status": PASS if val > 0 else FAIL, "min_eigenvalue": val, "location": [int(i) for i in idx]}


def energy_functional(u, branch, grid, quadratic=None, t_extent=1.0):
    """Energy 1/2 int int (du/dt)^2 Re(e^{-i theta} det(I + i hess u)) dx dt.

    ``u`` is sampled on ``grid`` with the time axis spanning [0, t_extent];
    ``quadratic`` is the constant non-periodic Hessian part of u, which is
    subtracted before periodic differencing and added back analytically.
    Returns ``(energy, min_weight)``; a negative weight triggers a warning.
    """
    u = np.asarray(u, dtype=float)
    n = grid.n
    Q = np.zeros((n, n)) if quadratic is None else np.asarray(quadratic, dtype=float)
    x = grid.space.coords()
    periodic = u - 0.5 * np.einsum("...i,ij,...j->...", x, Q, x)[None]
    dt = t_extent / (grid.time_points - 1)
    ut = np.gradient(u, dt, axis=0, edge_order=2)
    h = grid.h
    hess = np.empty(u.shape + (n, n))
    for k in range(n):
        for l in range(k, n):
            if k == l:
                d = (np.roll(periodic, -1, k + 1) - 2 * periodic + np.roll(periodic, 1, k + 1)) / (h * h)
            else:
                dk = (np.roll(periodic, -1, k + 1) - np.roll(periodic, 1, k + 1)) / (2 * h)
                d = (np.roll(dk, -1, l + 1) - np.roll(dk, 1, l + 1)) / (2 * h)
            hess[..., k, l] = hess[..., l, k] = d + Q[k, l]
    w = eigenvalues(hess)
    vol = np.prod(1.0 + 1j * w, axis=-1)
    weight = (np.exp(-1j * branch.theta) * vol).real
    min_w = float(weight.min())
    if min_w < 0:
        warnings.warn(f"Re(Omega) weight negative somewhere (min {min_w:.3e}); path leaves the positive cone")
    integrand = (ut * ut * weight).reshape(u.shape[0], -1).mean(axis=1)
    energy = 0.5 * float(np.sum(0.5 * (integrand[1:] + integrand[:-1])) * dt)
    return energy, min_w


def degenerate_residual(v_hat, pair, branch, grid):
    """Geodesic operator (tau = 0) on u = u0 + t (u1 - u0) + v_hat at interior nodes."""
    g1 = grid.with_tau(1.0)
    M = assemble_chi(pair, g1).matrices() + scaled_hessian(v_hat, g1)
    return geodesic_operator_sigma(M[..., 0, 0], M[..., 0, 1:], M[..., 1:, 1:], 0.0, branch)


def geodesic_residual_trend(entries, pair, branch, grid):
    """Sup norm of the degenerate residual for each (tau, v_hat) entry.

    Passes when the norms are nonincreasing in the order given (decreasing
    tau).  The log-log slope against tau is reported for reference.
    """
    if len(entries) < 2:
        return {"status": INSUFFICIENT, "norms": [float(np.abs(degenerate_residual(v, pair, branch, grid)).max()) for _, v in entries]}
    taus = [t for t, _ in entries]
    norms = [float(np.abs(degenerate_residual(v, pair, branch, grid)).max()) for _, v in entries]
    nonincreasing = all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))
    slope = loglog_slope(taus, norms) if all(x > 0 for x in norms) else None
    return {
        "status": PASS if nonincreasing else FAIL,
        "taus": taus,
        "norms": norms,
        "nonincreasing": nonincreasing,
        "loglog_slope": slope,
        "note": "trend thresholds are regression bounds, not rates from theory",
    }


def phase_admissibility_report(pair, branch, grid):
    """Raw boundary phases against the admissible cone (and its mirror image).

    ``grid`` is the torus grid.  When both endpoints lie strictly below
    -(big_theta - pi/2) the report asks for the sign flip u -> -u.
    """
    lower = branch.big_theta - math.pi / 2
    endpoints = {}
    for name, spec in (("u0", pair.u0), ("u1", pair.u1)):
        hess, _ = sample_potential(spec, grid)
        phase = arctan_sum(hess)
        endpoints[name] = {"min_phase": float(phase.min()), "max_phase": float(phase.max())}
    lo = min(e["min_phase"] for e in endpoints.values())
    hi = max(e["max_phase"] for e in endpoints.values())
    margin = lo - lower
    out = {"endpoints": endpoints, "threshold": lower, "raw_margin": margin, "delta": 0.5 * margin}
    if margin > 0:
        out.update(status=PASS, branch="positive", mapping=None)
    elif hi < -lower:
        out.update(
            status=PASS,
            branch="negative",
            raw_margin=-lower - hi,
            delta=0.5 * (-lower - hi),
            mapping="solve with -u0, -u1 and negate the resulting potential",
        )
    else:
        out.update(status=FAIL, branch=None, mapping=None)
    return out


def spectral_selftest(seed=0):
    """Identity sweeps and lemma table that need no configuration."""
    report = VerificationReport()
    report.add("sigma_det_identity", sigma_det_identity_check(seed=seed))
    report.add("gradient_finite_difference", gradient_fd_check(seed=seed))
    report.add(
        "lemma_asymptotics",
        lemma_asymptotics_check((1.0, 2.0, 3.0), (2.0, -1.5, 1.0), (1e2, 1e3, 1e4), (1.0, 0.25)),
    )
    return report
