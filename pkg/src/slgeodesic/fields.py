"""Grids, boundary potentials and finite-difference Hessians on the cylinder.

Fields live on the rescaled cylinder [0, 1] x T^n, stored as arrays of shape
``(N_t, N, ..., N)``: axis 0 is time (Dirichlet faces at indices 0 and -1),
axes 1..n are periodic space with side length 1.  The physical time
``s = sqrt(tau) t`` only enters through the scale factors applied when the
Hessian is assembled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class TorusGrid:
    n: int
    N: int

    def __post_init__(self):
        if not 1 <= self.n <= 3:
            raise ConfigError(f"spatial dimension {self.n} not supported (1 <= n <= 3)")
        if self.N < 4:
            raise ConfigError(f"need at least 4 points per axis, got {self.N}")

    @property
    def h(self):
        return 1.0 / self.N

    @property
    def shape(self):
        return (self.N,) * self.n

    @property
    def size(self):
        return self.N**self.n

    def coords(self):
        """Node coordinates, shape ``(N, ..., N, n)`` with values in [0, 1)."""
        axes = [np.arange(self.N) * self.h] * self.n
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class CylinderGrid:
    space: TorusGrid
    time_points: int
    tau: float = 1.0
    rescaled: bool = True

    def __post_init__(self):
        if self.time_points < 3:
            raise ConfigError(f"need at least 3 time points, got {self.time_points}")
        if not (0.0 < self.tau <= 1.0):
            raise InputError(f"tau must lie in (0, 1], got {self.tau}")

    @property
    def n(self):
        return self.space.n

    @property
    def dt(self):
        return 1.0 / (self.time_points - 1)

    @property
    def h(self):
        return self.space.h

    @property
    def shape(self):
        return (self.time_points,) + self.space.shape

    @property
    def interior_shape(self):
        return (self.time_points - 2,) + self.space.shape

    def times(self):
        return np.linspace(0.0, 1.0, self.time_points)

    def with_tau(self, tau):
        return CylinderGrid(self.space, self.time_points, tau, self.rescaled)

    def zeros(self):
        return np.zeros(self.shape)

    def time_profile(self, values):
        """Broadcast a length-N_t profile to a space-constant field."""
        prof = np.asarray(values, dtype=float).reshape((-1,) + (1,) * self.n)
        return np.broadcast_to(prof, self.shape).copy()


@dataclass(frozen=True)
class PotentialSpec:
    """u(x) = x^T Q x / 2 + sum_k [a_k cos(2 pi k.x) + b_k sin(2 pi k.x)]."""

    quadratic: np.ndarray
    trig_modes: tuple = ()

    def __post_init__(self):
        q = np.array(self.quadratic, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise InputError("quadratic part must be a square matrix")
        if not np.allclose(q, q.T, rtol=0, atol=1e-12):
            raise InputError("quadratic part must be symmetric")
        q = 0.5 * (q + q.T)
        q.setflags(write=False)
        modes = []
        for k, a, b in self.trig_modes:
            kv = tuple(int(c) for c in np.atleast_1d(k))
            if len(kv) != q.shape[0]:
                raise InputError(f"wave vector {kv} does not match dimension {q.shape[0]}")
            modes.append((kv, float(a), float(b)))
        object.__setattr__(self, "quadratic", q)
        object.__setattr__(self, "trig_modes", tuple(modes))

    @property
    def n(self):
        return self.quadratic.shape[0]

    def negated(self):
        return PotentialSpec(-self.quadratic, tuple((k, -a, -b) for k, a, b in self.trig_modes))

    def _phases(self, x):
        for k, a, b in self.trig_modes:
            kv = np.array(k, dtype=float)
            yield kv, a, b, TWO_PI * (x @ kv)

    def values(self, x):
        x = np.asarray(x, dtype=float)
        out = 0.5 * np.einsum("...i,ij,...j->...", x, self.quadratic, x)
        for _, a, b, ph in self._phases(x):
            out = out + a * np.cos(ph) + b * np.sin(ph)
        return out

    def periodic_values(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for _, a, b, ph in self._phases(x):
            out = out + a * np.cos(ph) + b * np.sin(ph)
        return out

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        out = x @ self.quadratic
        for kv, a, b, ph in self._phases(x):
            out = out + (TWO_PI * (-a * np.sin(ph) + b * np.cos(ph)))[..., None] * kv
        return out

    def periodic_hessian(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.n, self.n))
        for kv, a, b, ph in self._phases(x):
            amp = -(TWO_PI**2) * (a * np.cos(ph) + b * np.sin(ph))
            out = out + amp[..., None, None] * np.outer(kv, kv)
        return out

    def hessian(self, x):
        return self.quadratic + self.periodic_hessian(x)


@dataclass(frozen=True)
class BoundaryPair:
    u0: PotentialSpec
    u1: PotentialSpec

    def __post_init__(self):
        if self.u0.n != self.u1.n:
            raise InputError("endpoint potentials have different dimensions")
        if not np.array_equal(self.u0.quadratic, self.u1.quadratic):
            raise InputError(
                "endpoint potentials must share the quadratic part "
                "(u1 - u0 has to be a periodic function on the torus)"
            )

    @property
    def n(self):
        return self.u0.n

    def negated(self):
        return BoundaryPair(self.u0.negated(), self.u1.negated())


def sample_potential(spec, grid):
    """Exact Hessian ``(N.., n, n)`` and gradient ``(N.., n)`` at the torus nodes."""
    if spec.n != grid.n:
        raise InputError(f"potential of dimension {spec.n} on a {grid.n}-dimensional grid")
    x = grid.coords()
    return spec.hessian(x), spec.gradient(x)


def _periodic_gradient(spec, x):
    d = np.zeros(x.shape)
    for kv, a, b, ph in spec._phases(x):
        d = d + (TWO_PI * (-a * np.sin(ph) + b * np.cos(ph)))[..., None] * kv
    return d


def gradient_difference(pair, grid):
    """grad(u1 - u0) at the torus nodes; periodic because the quadratics cancel."""
    x = grid.coords()
    return _periodic_gradient(pair.u1, x) - _periodic_gradient(pair.u0, x)


def interpolation_potential(pair, grid):
    """grad(u1 - u0) on the torus and the per-slice Hessian (1-t) H0 + t H1.

    Returns ``(gdiff, hess)`` with shapes ``(N.., n)`` and ``(N_t, N.., n, n)``.
    """
    space = grid.space
    h0, _ = sample_potential(pair.u0, space)
    h1, _ = sample_potential(pair.u1, space)
    t = grid.times().reshape((-1,) + (1,) * (grid.n + 2))
    hess = (1.0 - t) * h0[None] + t * h1[None]
    hess[0] = h0
    hess[-1] = h1
    return gradient_difference(pair, space), hess


def interpolation_values(pair, grid):
    """The linear interpolation u0 + t (u1 - u0) sampled on the cylinder nodes."""
    x = grid.space.coords()
    u0 = pair.u0.values(x)
    du = pair.u1.periodic_values(x) - pair.u0.periodic_values(x)
    t = grid.times().reshape((-1,) + (1,) * grid.n)
    return u0[None] + t * du[None]


@dataclass(frozen=True)
class ChiField:
    """Hessian of the interpolating potential in (s, x) coordinates.

    ``first_row`` holds grad(u1 - u0)/sqrt(tau) on the torus; ``lower`` holds
    the spatial block for every time slice; the (1,1) entry is ``corner``
    (zero for data coming from a boundary pair, free for synthetic fields).
    """

    grid: CylinderGrid
    first_row: np.ndarray
    lower: np.ndarray
    corner: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.grid.n
        fr = np.broadcast_to(np.asarray(self.first_row, dtype=float), self.grid.shape + (n,))
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), self.grid.shape + (n, n))
        c = 0.0 if self.corner is None else self.corner
        c = np.broadcast_to(np.asarray(c, dtype=float), self.grid.shape)
        object.__setattr__(self, "first_row", fr)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "corner", c)

    @property
    def tau(self):
        return self.grid.tau

    def matrices(self, interior=True):
        """Full ``(n+1) x (n+1)`` matrices per node (interior time slices by default)."""
        n = self.grid.n
        sl = slice(1, -1) if interior else slice(None)
        shape = self.corner[sl].shape
        out = np.empty(shape + (n + 1, n + 1))
        out[..., 0, 0] = self.corner[sl]
        out[..., 0, 1:] = self.first_row[sl]
        out[..., 1:, 0] = self.first_row[sl]
        out[..., 1:, 1:] = self.lower[sl]
        return out

    def face_hessians(self):
        """Spatial blocks on the two Dirichlet faces (t = 0 and t = 1)."""
        return self.lower[0], self.lower[-1]

    @classmethod
    def constant(cls, grid, matrix):
        m = np.asarray(matrix, dtype=float)
        n = grid.n
        if m.shape != (n + 1, n + 1):
            raise InputError(f"synthetic chi must be {(n + 1, n + 1)}, got {m.shape}")
        if not np.allclose(m, m.T, rtol=0, atol=1e-14):
            raise InputError("synthetic chi must be symmetric")
        return cls(grid, m[0, 1:], m[1:, 1:], m[0, 0])


def assemble_chi(pair, grid):
    if grid.tau <= 0:
        raise InputError("tau must be positive")
    gdiff, hess = interpolation_potential(pair, grid)
    return ChiField(grid, gdiff / math.sqrt(grid.tau), hess)


def _d1(f, axis, h):
    return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2.0 * h)


def _d2(f, axis, h):
    return (np.roll(f, -1, axis) - 2.0 * f + np.roll(f, 1, axis)) / (h * h)


def scaled_hessian(v, grid):
    """Second-order central Hessian of v in (s, x) coordinates at interior nodes.

    Time derivatives carry the 1/tau (second) and 1/sqrt(tau) (mixed) factors
    of the rescaling; returns shape ``(N_t - 2, N.., n+1, n+1)``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != grid.shape:
        raise InputError(f"field shape {v.shape} does not match grid {grid.shape}")
    n, dt, h, tau = grid.n, grid.dt, grid.h, grid.tau
    out = np.empty(grid.interior_shape + (n + 1, n + 1))
    out[..., 0, 0] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (dt * dt) / tau
    vt = (v[2:] - v[:-2]) / (2.0 * dt)
    rs = 1.0 / math.sqrt(tau)
    inner = v[1:-1]
    for k in range(n):
        ax = k + 1
        mixed = _d1(vt, ax, h) * rs
        out[..., 0, k + 1] = mixed
        out[..., k + 1, 0] = mixed
        out[..., k + 1, k + 1] = _d2(inner, ax, h)
        for l in range(k + 1, n):
            cross = _d1(_d1(inner, ax, h), l + 1, h)
            out[..., k + 1, l + 1] = cross
            out[..., l + 1, k + 1] = cross
    return out


def scaled_hessian_operator(v, chi, grid=None):
    """chi + D^2 v at every interior node (see :func:`scaled_hessian`)."""
    grid = chi.grid if grid is None else grid
    return chi.matrices() + scaled_hessian(v, grid)


def time_hessian(M, tau):
    """Convert scaled (s, x) Hessians to (t, x) coordinates: S M S, S = diag(sqrt(tau), 1..)."""
    out = np.array(M, dtype=float, copy=True)
    r = math.sqrt(tau)
    out[..., 0, :] *= r
    out[..., :, 0] *= r
    return out
