"""Newton-continuation solver for the regularized geodesic problem.

For fixed tau the Dirichlet problem

    arctan_sum(chi + D^2 v) = phi_zeta,   v = 0 on t in {0, 1},
    phi_zeta = (1 - zeta) arctan_sum(chi + D^2 v_sub) + zeta * big_theta

is solved along zeta = 0 -> 1, starting from the subsolution (which solves
the zeta = 0 problem exactly).  The tau-sweep repeats this for a decreasing
sequence of tau and extracts the geodesic potential from the smallest one.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .barriers import build_barriers, check_sandwich, normal_derivative_monitor
from .errors import NoConvergence, StepCollapse
from .fields import (
    CylinderGrid,
    TorusGrid,
    assemble_chi,
    interpolation_values,
    scaled_hessian,
    scaled_hessian_operator,
)
from .spectral import arctan_sum, arctan_sum_gradient, jacobi_eigh

log = logging.getLogger(__name__)

ELLIPTICITY_FLOOR = 1e-12


@dataclass(frozen=True)
class NewtonSettings:
    residual_tolerance: float = 1e-10
    max_iterations: int = 50
    backtrack: float = 0.5
    min_step: float = 2.0**-20
    linear_rtol: float = 1e-10
    predictor: bool = True

    def __post_init__(self):
        if self.residual_tolerance <= 0:
            raise ValueError("residual tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not (0.0 < self.backtrack < 1.0):
            raise ValueError("backtrack factor must lie in (0, 1)")
        if not (0.0 < self.min_step <= 1.0):
            raise ValueError("min_step must lie in (0, 1]")
        if self.linear_rtol <= 0:
            raise ValueError("linear_rtol must be positive")


@dataclass(frozen=True)
class ContinuationSchedule:
    zeta_steps: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    tau_sequence: tuple = (1.0, 0.25, 1 / 16, 1 / 64, 1 / 256)
    warm_start: bool = False
    max_bisections: int = 8

    def __post_init__(self):
        z = tuple(float(x) for x in self.zeta_steps)
        t = tuple(float(x) for x in self.tau_sequence)
        if not z or z[0] != 0.0 or z[-1] != 1.0:
            raise ValueError("zeta steps must start at 0 and end at 1")
        if any(b <= a for a, b in zip(z, z[1:])):
            raise ValueError("zeta steps must be strictly increasing")
        if not t:
            raise ValueError("tau sequence is empty")
        if any(not (0.0 < x <= 1.0) for x in t):
            raise ValueError("tau values must lie in (0, 1]")
        if any(b >= a for a, b in zip(t, t[1:])):
            raise ValueError("tau sequence must be strictly decreasing")
        object.__setattr__(self, "zeta_steps", z)
        object.__setattr__(self, "tau_sequence", t)


@dataclass
class SolveRecord:
    tau: float
    zeta: float
    iterations: int = 0
    residual_norms: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    sandwich: dict = None
    transient_sandwich_violations: int = 0
    min_ellipticity: float = float("nan")
    min_eigenvalue: float = float("nan")
    jacobian_check: float = None
    wall_time: float = 0.0

    @property
    def final_residual(self):
        return self.residual_norms[-1] if self.residual_norms else float("nan")

    def to_dict(self):
        return {
            "tau": self.tau,
            "zeta": self.zeta,
            "iterations": self.iterations,
            "residual_norms": list(self.residual_norms),
            "step_sizes": list(self.step_sizes),
            "sandwich": self.sandwich,
            "transient_sandwich_violations": self.transient_sandwich_violations,
            "min_ellipticity": self.min_ellipticity,
            "min_eigenvalue": self.min_eigenvalue,
            "jacobian_check": self.jacobian_check,
            "wall_time": self.wall_time,
        }


def target_phase(zeta, barriers, branch=None):
    branch = barriers.branch if branch is None else branch
    return (1.0 - zeta) * barriers.sub_phase + zeta * branch.big_theta


def residual(v, chi, zeta, barriers, branch=None):
    """arctan_sum(chi + D^2 v) - phi_zeta at the interior nodes."""
    M = scaled_hessian_operator(v, chi)
    return arctan_sum(M) - target_phase(zeta, barriers, branch)


def linearize_apply(v, chi, w):
    """Directional derivative of the residual at v along w (w zero on the faces)."""
    A = arctan_sum_gradient(scaled_hessian_operator(v, chi))
    H = scaled_hessian(w, chi.grid)
    return np.einsum("...ij,...ij->...", A, H)


class _Stencil:
    """Index bookkeeping for assembling the linearized operator on interior nodes."""

    def __init__(self, grid):
        self.grid = grid
        ishape = grid.interior_shape
        self.size = int(np.prod(ishape))
        padded = -np.ones(grid.shape, dtype=np.int64)
        padded[1:-1] = np.arange(self.size).reshape(ishape)
        self.padded = padded
        self.rows = padded[1:-1]

    def neighbours(self, dt_off, space_off):
        nt = self.grid.time_points
        cols = self.padded[1 + dt_off : nt - 1 + dt_off]
        for axis, off in enumerate(space_off):
            if off:
                cols = np.roll(cols, -off, axis=axis + 1)
        return cols


def assemble_jacobian(v, chi, stencil=None):
    """Sparse matrix of :func:`linearize_apply` restricted to interior unknowns.

    Also returns the per-node coefficient matrices (I + M^2)^{-1}.
    """
    grid = chi.grid
    st = stencil or _Stencil(grid)
    n, dt, h, tau = grid.n, grid.dt, grid.h, grid.tau
    A = arctan_sum_gradient(scaled_hessian_operator(v, chi, grid))
    rows_all, cols_all, vals_all = [], [], []

    def add(coef, dt_off, space_off):
        cols = st.neighbours(dt_off, space_off)
        mask = cols >= 0
        rows_all.append(st.rows[mask])
        cols_all.append(cols[mask])
        vals_all.append(np.broadcast_to(coef, mask.shape)[mask])

    zero = (0,) * n
    c = A[..., 0, 0] / (tau * dt * dt)
    add(c, 1, zero)
    add(c, -1, zero)
    add(-2.0 * c, 0, zero)
    for k in range(n):
        ek = tuple(1 if i == k else 0 for i in range(n))
        mk = tuple(-x for x in ek)
        c = 2.0 * A[..., 0, k + 1] / math.sqrt(tau) / (4.0 * dt * h)
        add(c, 1, ek)
        add(-c, 1, mk)
        add(-c, -1, ek)
        add(c, -1, mk)
        c = A[..., k + 1, k + 1] / (h * h)
        add(c, 0, ek)
        add(c, 0, mk)
        add(-2.0 * c, 0, zero)
        for l in range(k + 1, n):
            el = tuple(1 if i == l else 0 for i in range(n))
            c = 2.0 * A[..., k + 1, l + 1] / (4.0 * h * h)
            add(c, 0, tuple(a + b for a, b in zip(ek, el)))
            add(-c, 0, tuple(a - b for a, b in zip(ek, el)))
            add(-c, 0, tuple(b - a for a, b in zip(ek, el)))
            add(c, 0, tuple(-a - b for a, b in zip(ek, el)))
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    return sp.csr_matrix((vals, (rows, cols)), shape=(st.size, st.size)), A


class FourierPreconditioner:
    """Exact inverse of the linearization with node-averaged coefficients.

    Space is diagonalized by the FFT (the central-difference symbols are
    known in closed form); each Fourier mode leaves a complex tridiagonal
    system in time, factorized once by the Thomas algorithm.
    """

    def __init__(self, grid, A):
        n, dt, h, tau = grid.n, grid.dt, grid.h, grid.tau
        a = A.reshape(-1, n + 1, n + 1).mean(axis=0)
        N = grid.space.N
        freqs = np.meshgrid(*([np.arange(N)] * n), indexing="ij")
        s = [np.sin(2 * math.pi * f * h) / h for f in freqs]
        c2 = [-(4.0 / (h * h)) * np.sin(math.pi * f * h) ** 2 for f in freqs]
        gamma = np.zeros(grid.space.shape)
        beta = np.zeros(grid.space.shape, dtype=complex)
        for k in range(n):
            gamma = gamma + a[k + 1, k + 1] * c2[k]
            beta = beta + 2j * a[0, k + 1] * s[k] / math.sqrt(tau)
            for l in range(k + 1, n):
                gamma = gamma - 2 * a[k + 1, l + 1] * s[k] * s[l]
        alpha = a[0, 0] / tau
        lo = alpha / dt**2 - beta / (2 * dt)
        up = alpha / dt**2 + beta / (2 * dt)
        dg = -2 * alpha / dt**2 + gamma
        m = grid.time_points - 2
        self.shape = grid.interior_shape
        self.lo = lo
        # forward elimination factors (Thomas), constant coefficients per mode
        cp = np.empty((m,) + lo.shape, dtype=complex)
        den = np.empty((m,) + lo.shape, dtype=complex)
        den[0] = dg
        cp[0] = up / dg
        for j in range(1, m):
            den[j] = dg - lo * cp[j - 1]
            cp[j] = up / den[j]
        self.cp, self.den, self.m = cp, den, m
        self.axes = tuple(range(1, n + 1))

    def solve(self, b):
        r = np.fft.fftn(b.reshape(self.shape), axes=self.axes)
        y = np.empty_like(r)
        y[0] = r[0] / self.den[0]
        for j in range(1, self.m):
            y[j] = (r[j] - self.lo * y[j - 1]) / self.den[j]
        for j in range(self.m - 2, -1, -1):
            y[j] = y[j] - self.cp[j] * y[j + 1]
        return np.fft.ifftn(y, axes=self.axes).real.ravel()


class LinearSolver:
    """Linear solves with the Newton Jacobian.

    n = 1 uses a direct sparse LU (the system is banded).  For n >= 2 GMRES
    runs with the Fourier preconditioner, then with an AMG preconditioner if
    that stalls, and finally falls back to a direct factorization.
    """

    def __init__(self, J, grid, coefficients, rtol=1e-10):
        self.J = J.tocsr()
        self.grid = grid
        self.coefficients = coefficients
        self.rtol = rtol
        self._lu = None
        self._fourier = None
        self.fallbacks = 0
        self.krylov_iterations = 0

    def _direct(self):
        if self._lu is None:
            self._lu = spla.splu(self.J.tocsc())
        return self._lu

    def _gmres(self, b, precond):
        counter = []
        M = spla.LinearOperator(self.J.shape, precond)
        x, info = spla.gmres(
            self.J, b, M=M, rtol=self.rtol, atol=0.0, restart=50, maxiter=6,
            callback=counter.append, callback_type="pr_norm",
        )
        self.krylov_iterations += len(counter)
        return x, info

    def solve(self, b):
        if self.grid.n == 1 or self._lu is not None:
            return self._direct().solve(b)
        if self._fourier is None:
            self._fourier = FourierPreconditioner(self.grid, self.coefficients)
        x, info = self._gmres(b, self._fourier.solve)
        if info == 0:
            return x
        self.fallbacks += 1
        log.info("Fourier-preconditioned GMRES stalled; trying AMG")
        amg = pyamg.ruge_stuben_solver(-self.J)
        x, info = self._gmres(b, lambda r: -amg.solve(r, tol=1e-3, maxiter=1, cycle="V"))
        if info == 0:
            return x
        self.fallbacks += 1
        log.warning("AMG-preconditioned GMRES stalled; using direct factorization")
        return self._direct().solve(b)


def _pad(x, grid):
    out = np.zeros(grid.shape)
    out[1:-1] = x.reshape(grid.interior_shape)
    return out


def iterate_diagnostics(M, branch):
    """Smallest ellipticity eigenvalue, smallest Hessian eigenvalue, branch-positivity flag."""
    w, _ = jacobi_eigh(M)
    ell = 1.0 / (1.0 + (w * w).max(axis=-1))
    f = np.arctan(w).sum(axis=-1)
    m = M.shape[-1]
    on_branch = f >= (m - 1) * math.pi / 2
    positive = bool(np.all(w[..., 0][on_branch] > 0.0))
    return float(ell.min()), float(w[..., 0].min()), positive


def jacobian_fd_check(v, chi, zeta, barriers, rng=None, eps=1e-6):
    """Relative mismatch between linearize_apply and a central difference of the residual."""
    rng = np.random.default_rng(0) if rng is None else rng
    grid = chi.grid
    w = np.zeros(grid.shape)
    w[1:-1] = rng.standard_normal(grid.interior_shape)
    # unit-size scaled Hessian keeps the difference quotient in its linear regime
    w /= np.abs(scaled_hessian(w, grid)).max()
    exact = linearize_apply(v, chi, w)
    fd = (residual(v + eps * w, chi, zeta, barriers) - residual(v - eps * w, chi, zeta, barriers)) / (2 * eps)
    return float(np.abs(exact - fd).max() / max(np.abs(exact).max(), 1e-300))


def newton_solve(v0, chi, zeta, barriers, settings=None, record=None, check_jacobian=False):
    """Damped Newton iteration for the zeta-problem.

    Returns ``(v, record)``; raises :class:`NoConvergence` or
    :class:`StepCollapse` when the iteration fails.
    """
    settings = settings or NewtonSettings()
    grid = chi.grid
    record = record or SolveRecord(tau=grid.tau, zeta=zeta)
    start = time.perf_counter()
    stencil = _Stencil(grid)
    v = np.array(v0, dtype=float, copy=True)
    v[0] = 0.0
    v[-1] = 0.0
    F = residual(v, chi, zeta, barriers)
    norm = float(np.abs(F).max())
    record.residual_norms.append(norm)
    if check_jacobian:
        record.jacobian_check = jacobian_fd_check(v, chi, zeta, barriers)
    while norm > settings.residual_tolerance:
        if record.iterations >= settings.max_iterations:
            record.wall_time += time.perf_counter() - start
            raise NoConvergence(
                f"Newton did not converge at tau={grid.tau:g}, zeta={zeta:g}",
                record.iterations,
                norm,
            )
        J, A = assemble_jacobian(v, chi, stencil)
        solver = LinearSolver(J, grid, A, settings.linear_rtol)
        dv = _pad(solver.solve(-F.ravel()), grid)
        step = 1.0
        while True:
            trial = v + step * dv
            Ft = residual(trial, chi, zeta, barriers)
            nt = float(np.abs(Ft).max())
            if np.isfinite(nt) and nt < norm:
                break
            step *= settings.backtrack
            if step < settings.min_step:
                record.wall_time += time.perf_counter() - start
                raise StepCollapse(
                    f"step collapse at tau={grid.tau:g}, zeta={zeta:g}", record.iterations, norm
                )
        if not check_sandwich(trial, barriers).ok:
            record.transient_sandwich_violations += 1
        v, F, norm = trial, Ft, nt
        record.iterations += 1
        record.residual_norms.append(norm)
        record.step_sizes.append(step)
    M = scaled_hessian_operator(v, chi)
    ell, lmin, positive = iterate_diagnostics(M, barriers.branch)
    record.min_ellipticity = ell
    record.min_eigenvalue = lmin
    if ell < ELLIPTICITY_FLOOR:
        raise NoConvergence(f"ellipticity lost (min {ell:.3e})", record.iterations, norm)
    if not positive:
        raise NoConvergence("iterate on the concave branch has a non-positive eigenvalue", record.iterations, norm)
    record.wall_time += time.perf_counter() - start
    return v, record


class SandwichViolation(NoConvergence):
    """An accepted iterate left the barrier envelope (wrong-branch convergence)."""


def run_zeta_path(chi, barriers, schedule=None, settings=None, v_start=None):
    """Continuation in zeta from the subsolution to the target equation.

    ``v_start`` (warm start across tau) is first tried as a direct guess for
    zeta = 1; the full path runs only if that fails.  Returns
    ``(v, records)``; ``v`` solves the zeta = 1 problem.
    """
    schedule = schedule or ContinuationSchedule()
    settings = settings or NewtonSettings()
    grid = chi.grid
    records = []
    v, rec = newton_solve(barriers.v_sub, chi, 0.0, barriers, settings, check_jacobian=True)
    rec.sandwich = check_sandwich(v, barriers).to_dict()
    records.append(rec)
    if v_start is not None:
        try:
            v_new, rec = newton_solve(v_start, chi, 1.0, barriers, settings)
            report = check_sandwich(v_new, barriers)
            if report.ok:
                rec.sandwich = report.to_dict()
                return v_new, records + [rec]
        except NoConvergence as exc:
            log.info("warm start failed, running the full path: %s", exc)
    zeta = 0.0
    pending = list(schedule.zeta_steps[1:])
    bisections = 0
    while pending:
        z_next = pending[0]
        guess = _predict(v, chi, zeta, z_next, barriers, settings) if settings.predictor else v
        try:
            v_new, rec = newton_solve(guess, chi, z_next, barriers, settings)
        except NoConvergence as exc:
            if bisections >= schedule.max_bisections:
                raise
            bisections += 1
            mid = 0.5 * (zeta + z_next)
            log.info("bisecting zeta interval [%g, %g] after: %s", zeta, z_next, exc)
            pending.insert(0, mid)
            continue
        report = check_sandwich(v_new, barriers)
        rec.sandwich = report.to_dict()
        records.append(rec)
        if not report.ok:
            raise SandwichViolation(
                f"accepted iterate violates the barriers at tau={grid.tau:g}, zeta={z_next:g}",
                rec.iterations,
                rec.final_residual,
            )
        v, zeta = v_new, z_next
        pending.pop(0)
    return v, records


def _predict(v, chi, z0, z1, barriers, settings):
    # Tangent of the solution curve: J dv/dzeta = d(phi)/d(zeta).
    J, A = assemble_jacobian(v, chi)
    rhs = (barriers.branch.big_theta - barriers.sub_phase).ravel()
    dv = LinearSolver(J, chi.grid, A, settings.linear_rtol).solve(rhs)
    return v + (z1 - z0) * _pad(dv, chi.grid)


def c1_norms(v_hat, grid):
    """Sup norm and discrete Lipschitz seminorm of v_hat on [0, 1] x T^n."""
    c0 = float(np.abs(v_hat).max())
    d = float(np.abs(np.diff(v_hat, axis=0)).max()) / grid.dt
    for ax in range(1, grid.n + 1):
        diff = np.roll(v_hat, -1, axis=ax) - v_hat
        d = max(d, float(np.abs(diff).max()) / grid.h)
    return c0, d


@dataclass
class TauResult:
    tau: float
    status: str
    v_hat: np.ndarray = None
    barriers: object = None
    records: list = field(default_factory=list)
    c0: float = float("nan")
    c1: float = float("nan")
    normal_derivatives: dict = None
    error: str = None

    @property
    def c1_total(self):
        return self.c0 + self.c1

    def to_dict(self):
        return {
            "tau": self.tau,
            "status": self.status,
            "error": self.error,
            "sup_norm": self.c0,
            "lipschitz": self.c1,
            "c1_norm": self.c1_total,
            "barriers": None if self.barriers is None else self.barriers.to_dict(),
            "normal_derivatives": self.normal_derivatives,
            "newton_iterations": [r.iterations for r in self.records],
            "records": [r.to_dict() for r in self.records],
        }


@dataclass
class GeodesicResult:
    grid: CylinderGrid
    branch: object
    taus: list
    gaps: list
    u: np.ndarray = None
    negated: bool = False

    @property
    def ok(self):
        return bool(self.taus) and all(r.status == "ok" for r in self.taus)

    @property
    def solved(self):
        return [r for r in self.taus if r.status == "ok"]


def solve_tau(chi, branch, schedule=None, settings=None, v_start=None):
    """Barriers plus zeta-path for the cylinder problem carried by ``chi``."""
    grid = chi.grid
    barriers = build_barriers(chi, branch)
    v, records = run_zeta_path(chi, barriers, schedule, settings, v_start=v_start)
    c0, c1 = c1_norms(v, grid)
    return TauResult(
        tau=grid.tau,
        status="ok",
        v_hat=v,
        barriers=barriers,
        records=records,
        c0=c0,
        c1=c1,
        normal_derivatives=normal_derivative_monitor(v, barriers, grid),
    )


def _solve_tau_job(args):
    pair, grid, branch, schedule, settings = args
    return _safe_solve(assemble_chi(pair, grid), branch, schedule, settings)


def _safe_solve(chi, branch, schedule, settings, v_start=None):
    try:
        return solve_tau(chi, branch, schedule, settings, v_start)
    except NoConvergence as exc:
        return TauResult(tau=chi.grid.tau, status="failed", error=str(exc))


def run_tau_sweep(pair, branch, schedule=None, settings=None, N=32, time_points=33, jobs=1):
    """Solve for every tau in the schedule and extract the geodesic potential.

    The sweep stops at the first failed tau.  ``u`` on the result is
    u0 + t (u1 - u0) + v_hat at the smallest solved tau.
    """
    schedule = schedule or ContinuationSchedule()
    settings = settings or NewtonSettings()
    base = CylinderGrid(TorusGrid(pair.n, N), time_points, 1.0)
    taus = []
    if jobs > 1 and not schedule.warm_start:
        from concurrent.futures import ProcessPoolExecutor

        work = [(pair, base.with_tau(t), branch, schedule, settings) for t in schedule.tau_sequence]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_tau_job, work))
        for r in results:
            taus.append(r)
            if r.status != "ok":
                break
    else:
        prev = None
        for t in schedule.tau_sequence:
            chi = assemble_chi(pair, base.with_tau(t))
            start = prev.v_hat if (schedule.warm_start and prev is not None) else None
            r = _safe_solve(chi, branch, schedule, settings, start)
            taus.append(r)
            log.info("tau=%g status=%s sup|v|=%.6g", t, r.status, r.c0)
            if r.status != "ok":
                break
            prev = r
    solved = [r for r in taus if r.status == "ok"]
    gaps = [float(np.abs(b.v_hat - a.v_hat).max()) for a, b in zip(solved, solved[1:])]
    u = None
    if solved:
        u = interpolation_values(pair, base) + solved[-1].v_hat
    return GeodesicResult(grid=base, branch=branch, taus=taus, gaps=gaps, u=u)
