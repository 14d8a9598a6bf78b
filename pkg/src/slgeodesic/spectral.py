"""Pointwise matrix calculus for the special Lagrangian operator.

Every routine accepts either a single ``(m, m)`` symmetric matrix or a stack
``(..., m, m)`` and works along the trailing two axes, so the solver can call
them on whole grids at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

JACOBI_MAX_SWEEPS = 60
PIVOT_FLOOR = 1e-14


class SymmetricMatrix:
    """Dense real symmetric matrix.

    The constructor rejects visibly non-symmetric input and then stores the
    symmetrized array, so ``entries[i, j] == entries[j, i]`` holds bit for bit.
    """

    __slots__ = ("_a",)

    def __init__(self, entries, atol=1e-12):
        a = np.array(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise InputError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InputError("matrix has non-finite entries")
        scale = max(1.0, float(np.abs(a).max()))
        if np.abs(a - a.T).max() > atol * scale:
            raise InputError("matrix is not symmetric")
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        self._a = a

    @property
    def dim(self):
        return self._a.shape[0]

    @property
    def entries(self):
        return self._a

    def __array__(self, dtype=None, copy=None):
        return self._a if dtype is None else self._a.astype(dtype)

    def __repr__(self):
        return f"SymmetricMatrix({self._a.tolist()!r})"

    @classmethod
    def diag(cls, values):
        return cls(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def identity(cls, m):
        return cls(np.eye(m))


def _as_stack(A):
    a = np.asarray(A, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise InputError(f"expected (..., m, m) matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError("matrix has non-finite entries")
    return a


def jacobi_eigh(A, tol=1e-15):
    """Cyclic Jacobi eigendecomposition of a stack of symmetric matrices.

    Sweeps visit the pairs (p, q), p < q, in row order; the stopping test is
    applied to the whole stack, so the iteration count (and hence the result)
    depends only on the input values.

    Returns ``(w, V)`` with ``w`` sorted ascending and ``A = V diag(w) V^T``.
    """
    a = _as_stack(A).copy()
    m = a.shape[-1]
    v = np.broadcast_to(np.eye(m), a.shape).copy()
    if m > 1:
        iu = np.triu_indices(m, 1)
        for _ in range(JACOBI_MAX_SWEEPS):
            off = np.sqrt((a[..., iu[0], iu[1]] ** 2).sum(axis=-1))
            scale = np.sqrt((a * a).sum(axis=(-2, -1)))
            if np.all(off <= tol * np.maximum(scale, np.finfo(float).tiny)):
                break
            for p in range(m - 1):
                for q in range(p + 1, m):
                    apq = a[..., p, q]
                    active = apq != 0.0
                    if not np.any(active):
                        continue
                    safe = np.where(active, apq, 1.0)
                    with np.errstate(over="ignore"):
                        theta = (a[..., q, q] - a[..., p, p]) / (2.0 * safe)
                        big = np.abs(theta) > 1e150
                        th = np.where(big, 1.0, theta)
                        t = np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0))
                    # tan of the rotation angle ~ 1/(2 theta) once theta*theta overflows
                    t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
                    t = np.where(theta == 0.0, 1.0, t)
                    t = np.where(active, t, 0.0)
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    c_ = c[..., None]
                    s_ = s[..., None]
                    colp = a[..., :, p].copy()
                    colq = a[..., :, q].copy()
                    a[..., :, p] = c_ * colp - s_ * colq
                    a[..., :, q] = s_ * colp + c_ * colq
                    rowp = a[..., p, :].copy()
                    rowq = a[..., q, :].copy()
                    a[..., p, :] = c_ * rowp - s_ * rowq
                    a[..., q, :] = s_ * rowp + c_ * rowq
                    a[..., p, q] = 0.0
                    a[..., q, p] = 0.0
                    vp = v[..., :, p].copy()
                    vq = v[..., :, q].copy()
                    v[..., :, p] = c_ * vp - s_ * vq
                    v[..., :, q] = s_ * vp + c_ * vq
    w = np.diagonal(a, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    return w, v


def eigenvalues(A):
    """Eigenvalues in nondecreasing order along the last axis."""
    return jacobi_eigh(A)[0]


def arctan_sum(A):
    """Sum of arctangents of the eigenvalues, in (-m pi/2, m pi/2)."""
    return np.arctan(eigenvalues(A)).sum(axis=-1)


def arctan_sum_gradient(A):
    """Derivative of :func:`arctan_sum` with respect to the matrix entries.

    Equals ``(I + A^2)^{-1}``, symmetric positive definite for any symmetric A.
    """
    a = _as_stack(A)
    m = a.shape[-1]
    g = np.linalg.inv(np.eye(m) + a @ a)
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def elementary_symmetric_all(values):
    """All elementary symmetric polynomials sigma_0..sigma_m of ``values``.

    Built from the product expansion of prod_i (1 + values_i x); works along the
    last axis of a stack.
    """
    vals = np.asarray(values, dtype=float)
    m = vals.shape[-1]
    sig = np.zeros(vals.shape[:-1] + (m + 1,))
    sig[..., 0] = 1.0
    for i in range(m):
        lam = vals[..., i : i + 1]
        sig[..., 1 : i + 2] = sig[..., 1 : i + 2] + lam * sig[..., 0 : i + 1]
    return sig


def elementary_symmetric(values, k):
    vals = np.asarray(values, dtype=float)
    m = vals.shape[-1]
    if not (isinstance(k, (int, np.integer)) and 0 <= k <= m):
        raise InputError(f"k must be an integer in [0, {m}], got {k!r}")
    return elementary_symmetric_all(vals)[..., k]


@dataclass(frozen=True)
class PhaseBranch:
    """Calibration angle ``theta`` and the level ``big_theta = k pi + theta``."""

    n: int
    theta: float
    big_theta: float

    def __post_init__(self):
        if self.n < 1:
            raise InputError("spatial dimension must be >= 1")
        if not (-math.pi < self.theta <= math.pi):
            raise InputError(f"theta={self.theta} outside (-pi, pi]")
        k = (self.big_theta - self.theta) / math.pi
        if abs(k - round(k)) > 1e-12:
            raise InputError("big_theta - theta must be an integer multiple of pi")
        m = self.n + 1
        lo, hi = (m - 1) * math.pi / 2, (m + 1) * math.pi / 2
        if not (lo - 1e-12 <= self.big_theta < hi):
            raise InputError(
                f"big_theta={self.big_theta} outside the concave branch [{lo}, {hi})"
            )

    @property
    def k(self):
        return int(round((self.big_theta - self.theta) / math.pi))


_THETA_BY_RESIDUE = (0.0, math.pi / 2, math.pi, -math.pi / 2)


def select_branch(n):
    """Critical branch for dimension n: big_theta = n pi / 2."""
    if n < 1:
        raise InputError("n must be >= 1")
    return PhaseBranch(n=n, theta=_THETA_BY_RESIDUE[n % 4], big_theta=n * math.pi / 2)


def complex_det(M):
    """Determinant of a small complex matrix by LU with partial pivoting."""
    a = np.array(M, dtype=complex)
    m = a.shape[0]
    det = 1.0 + 0.0j
    for j in range(m):
        p = j + int(np.argmax(np.abs(a[j:, j])))
        if abs(a[p, j]) < PIVOT_FLOOR:
            return 0.0 + 0.0j
        if p != j:
            a[[j, p]] = a[[p, j]]
            det = -det
        det *= a[j, j]
        a[j + 1 :, j:] -= np.outer(a[j + 1 :, j] / a[j, j], a[j, j:])
    return det


def _check_operator_args(u_tt, grad_u_t, hess_x):
    g = np.atleast_1d(np.asarray(grad_u_t, dtype=float))
    h = np.asarray(hess_x, dtype=float)
    n = g.shape[-1]
    if h.shape[-2:] != (n, n):
        raise InputError(f"hess_x shape {h.shape} inconsistent with gradient length {n}")
    return float(u_tt), g, h


def geodesic_operator_det(u_tt, grad_u_t, hess_x, tau, branch):
    """Im(e^{-i theta} det M) with the complex block matrix of the tau-family.

    M has (1,1) entry ``tau + i u_tt``, off-diagonal row ``i grad_u_t`` and
    lower block ``I + i hess_x``.  ``tau = 0`` is the geodesic operator itself.
    """
    u_tt, g, h = _check_operator_args(u_tt, grad_u_t, hess_x)
    n = g.shape[0]
    M = np.zeros((n + 1, n + 1), dtype=complex)
    M[0, 0] = tau + 1j * u_tt
    M[0, 1:] = 1j * g
    M[1:, 0] = 1j * g
    M[1:, 1:] = np.eye(n) + 1j * h
    return float((np.exp(-1j * branch.theta) * complex_det(M)).imag)


def _im_rotated_sum(sig, theta):
    # Im(e^{-i theta} sum_k i^k sigma_k) split into odd (cos) and even (sin) parts.
    m = sig.shape[-1] - 1
    odd = sum((-1) ** j * sig[..., 2 * j + 1] for j in range((m - 1) // 2 + 1))
    even = sum((-1) ** j * sig[..., 2 * j] for j in range(m // 2 + 1))
    return math.cos(theta) * odd - math.sin(theta) * even


def geodesic_operator_sigma(u_tt, grad_u_t, hess_x, tau, branch):
    """Same operator as :func:`geodesic_operator_det`, via sigma_k expansions.

    Uses det(M) = det(I + i D^2u) - (1 - tau) det(I + i hess_x), with D^2u the
    full (t, x) Hessian, and expands both determinants in elementary symmetric
    functions of the Hessian eigenvalues.  Accepts stacked inputs.
    """
    u_tt = np.asarray(u_tt, dtype=float)
    g = np.asarray(grad_u_t, dtype=float)
    h = np.asarray(hess_x, dtype=float)
    if g.ndim == 0:
        g = g[None]
    n = g.shape[-1]
    if h.shape[-2:] != (n, n):
        raise InputError(f"hess_x shape {h.shape} inconsistent with gradient length {n}")
    batch = np.broadcast_shapes(u_tt.shape, g.shape[:-1], h.shape[:-2])
    full = np.zeros(batch + (n + 1, n + 1))
    full[..., 0, 0] = u_tt
    full[..., 0, 1:] = g
    full[..., 1:, 0] = g
    full[..., 1:, 1:] = h
    sig_full = elementary_symmetric_all(eigenvalues(full))
    sig_x = elementary_symmetric_all(eigenvalues(np.broadcast_to(h, batch + (n, n))))
    val = _im_rotated_sum(sig_full, branch.theta) - (1.0 - tau) * _im_rotated_sum(
        sig_x, branch.theta
    )
    return float(val) if np.ndim(val) == 0 else val


def wrap_phase(x):
    """Representative of x modulo 2 pi in (-pi, pi]."""
    r = np.mod(np.asarray(x, dtype=float) + math.pi, 2 * math.pi) - math.pi
    r = np.where(r == -math.pi, math.pi, r)
    return float(r) if np.ndim(r) == 0 else r


def lagrangian_phase(hess_x, theta, reduce=True):
    """Phase of the graph with Hessian ``hess_x`` against the form e^{-i theta} dz.

    ``reduce=False`` returns the unreduced value sum(arctan) - theta, which is
    what every admissibility inequality compares.
    """
    raw = arctan_sum(hess_x) - theta
    if not reduce:
        return float(raw) if np.ndim(raw) == 0 else raw
    return wrap_phase(raw)
