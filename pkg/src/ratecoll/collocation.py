"""Meshes, quadrature and numerical differentiation for collocation schemes.

Three schemes are supported:

* ``trap``  -- trapezoidal, two-point intervals sharing end points;
* ``hs``    -- Hermite-Simpson in separated form (mid points are grid points);
* ``lgr``   -- Legendre-Gauss-Radau, ``N`` collocation nodes per interval
  including the left end, plus the non-collocated end point of the last
  interval.

Time is normalised to ``tau`` in ``[0, 1]`` over the whole horizon.  LGR
intervals are additionally parameterised by a local ``s`` in ``[-1, 1]``.
All conversions go through :class:`TimeMap`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh_tridiagonal

from .errors import EmptyMesh, NonpositiveStep, OrderTooSmall

__all__ = [
    "Scheme",
    "Mesh",
    "Grid",
    "DiffOperator",
    "TimeMap",
    "trapezoidal_diff",
    "hs_diff",
    "lgr_points",
    "lgr_diff_matrix",
    "quadrature_weights",
    "barycentric_weights",
    "lagrange_diff_matrix",
    "lagrange_eval",
    "legendre",
]


class Scheme(str, enum.Enum):
    TRAPEZOIDAL = "trap"
    HERMITE_SIMPSON = "hs"
    LGR = "lgr"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {
            "trapezoidal": cls.TRAPEZOIDAL,
            "hermitesimpson": cls.HERMITE_SIMPSON,
            "hermite-simpson": cls.HERMITE_SIMPSON,
            "h-s": cls.HERMITE_SIMPSON,
        }
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


# ---------------------------------------------------------------------------
# scalar stencils
# ---------------------------------------------------------------------------

def _check_steps(dtau, dt):
    if not dtau > 0 or not dt > 0:
        raise NonpositiveStep(f"steps must be positive, got dtau={dtau}, dt={dt}")


def trapezoidal_diff(z_i, z_next, dtau, dt):
    """Forward-difference rate ``(z_next - z_i) / (dt * dtau)``."""
    _check_steps(dtau, dt)
    return (z_next - z_i) / (dt * dtau)


def hs_diff(z_i, z_mid, z_next, dtau, dt):
    """Three-point rates at the left, mid and right point of an H-S interval.

    Exact for quadratics in time.  Returns ``(left, mid, right)``.
    """
    _check_steps(dtau, dt)
    h = dt * dtau
    left = (-3.0 * z_i + 4.0 * z_mid - z_next) / h
    mid = (z_next - z_i) / h
    right = (z_i - 4.0 * z_mid + 3.0 * z_next) / h
    return left, mid, right


# stencil coefficients in units of 1/(dt*dtau); shared with the rate rows
TRAP_STENCIL = np.array([-1.0, 1.0])
HS_STENCILS = np.array(
    [
        [-3.0, 4.0, -1.0],  # left
        [-1.0, 0.0, 1.0],   # mid
        [1.0, -4.0, 3.0],   # right
    ]
)


# ---------------------------------------------------------------------------
# Legendre / LGR
# ---------------------------------------------------------------------------

def legendre(n, x):
    """Return ``(P_n(x), P_n'(x))`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    p_prev = np.ones_like(x)
    if n == 0:
        return p_prev, np.zeros_like(x)
    p = x.copy()
    dp_prev = np.zeros_like(x)
    dp = np.ones_like(x)
    for k in range(1, n):
        p_next = ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
        dp_next = dp_prev + (2 * k + 1) * p
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
    return p, dp


def lgr_points(n):
    """Legendre-Gauss-Radau nodes and weights on ``[-1, 1)``.

    The node ``-1`` is included.  The interior nodes are the zeros of the
    Jacobi polynomial ``P^{(0,1)}_{n-1}``, computed as eigenvalues of its
    symmetric tridiagonal Jacobi matrix and then polished by Newton on
    ``P_{n-1} + P_n``.

    Parameters
    ----------
    n : int
        Number of nodes, at least 2.

    Returns
    -------
    nodes, weights : ndarray
    """
    if n < 2:
        raise OrderTooSmall(f"LGR order must be >= 2, got {n}")
    m = n - 1
    k = np.arange(m, dtype=float)
    # Jacobi matrix for alpha=0, beta=1: a_k = 1/((2k+1)(2k+3))
    diag = 1.0 / ((2 * k + 1) * (2 * k + 3))
    kk = np.arange(1, m, dtype=float)
    off = np.sqrt(4 * kk * kk * (kk + 1) * (kk + 1) / ((2 * kk + 1) ** 2 * (2 * kk + 2) * (2 * kk)))
    interior = eigvalsh_tridiagonal(diag, off) if m > 1 else diag.copy()
    interior = np.sort(interior)
    for _ in range(8):
        p0, dp0 = legendre(n - 1, interior)
        p1, dp1 = legendre(n, interior)
        step = (p0 + p1) / (dp0 + dp1)
        interior = interior - step
        if np.max(np.abs(step)) < 1e-15:
            break
    nodes = np.concatenate([[-1.0], interior])
    pn1, _ = legendre(n - 1, nodes)
    weights = np.empty(n)
    weights[0] = 2.0 / n**2
    weights[1:] = (1.0 - interior) / (n * pn1[1:]) ** 2
    return nodes, weights


def barycentric_weights(nodes):
    nodes = np.asarray(nodes, dtype=float)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


def lagrange_diff_matrix(nodes):
    """First-derivative matrix of the Lagrange interpolant on ``nodes``.

    Built in barycentric form; diagonal entries are the negative row sums so
    constants are differentiated to exactly zero.
    """
    nodes = np.asarray(nodes, dtype=float)
    w = barycentric_weights(nodes)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    d = (w[None, :] / w[:, None]) / diff
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(d, -d.sum(axis=1))
    return d


def lagrange_eval(nodes, values, x, weights=None):
    """Evaluate the interpolant through ``(nodes, values)`` at ``x``.

    ``values`` may have trailing dimensions; the result has shape
    ``x.shape + values.shape[1:]``.
    """
    nodes = np.asarray(nodes, dtype=float)
    values = np.asarray(values, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = barycentric_weights(nodes) if weights is None else weights
    diff = x[:, None] - nodes[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    terms = w[None, :] / diff
    flat = values.reshape(len(nodes), -1)
    out = (terms @ flat) / terms.sum(axis=1)[:, None]
    rows, cols = np.nonzero(exact)
    out[rows] = flat[cols]
    return out.reshape((len(x),) + values.shape[1:])


@dataclass(frozen=True)
class DiffOperator:
    """Sparse differentiation operator, ``Z' = scale * matrix @ Z``."""

    matrix: sp.csr_matrix
    scale: float = 1.0

    def apply(self, values):
        return self.scale * (self.matrix @ np.asarray(values, dtype=float))

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def lgr_diff_matrix(n, dt=2.0):
    """LGR differentiation operator on ``n`` nodes plus the end point ``+1``.

    The returned operator maps the ``n + 1`` values to derivatives at all
    ``n + 1`` points in physical time for a horizon of length ``dt``
    (``dt = 2`` gives derivatives with respect to ``s`` itself).
    """
    if n < 2:
        raise OrderTooSmall(f"LGR order must be >= 2, got {n}")
    _check_steps(1.0, dt)
    nodes, _ = lgr_points(n)
    ext = np.concatenate([nodes, [1.0]])
    return DiffOperator(sp.csr_matrix(lagrange_diff_matrix(ext)), 2.0 / dt)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeMap:
    """Affine maps between physical time, global ``tau`` and LGR ``s``."""

    t0: float
    tf: float

    @property
    def dt(self):
        return self.tf - self.t0

    def to_time(self, tau):
        return self.t0 + np.asarray(tau) * (self.tf - self.t0)

    def to_tau(self, t):
        return (np.asarray(t) - self.t0) / (self.tf - self.t0)

    @staticmethod
    def local_to_tau(s, left, length):
        return left + 0.5 * (np.asarray(s) + 1.0) * length

    @staticmethod
    def tau_to_local(tau, left, length):
        return 2.0 * (np.asarray(tau) - left) / length - 1.0


@dataclass(frozen=True)
class Grid:
    """Discrete points generated by a mesh in normalised time.

    Attributes
    ----------
    tau : ndarray
        All grid points, increasing (``n_points``).
    interval : ndarray
        Interval index of each point; the final end point belongs to the
        last interval.
    colloc : ndarray
        Indices of collocation points (points that carry inputs).
    weights : ndarray
        Quadrature weights of the collocation points, summing to 1.
    starts : ndarray
        Index of the first grid point of every interval (length ``K + 1``;
        the last entry is the final point).
    """

    tau: np.ndarray
    interval: np.ndarray
    colloc: np.ndarray
    weights: np.ndarray
    starts: np.ndarray

    @property
    def n_points(self):
        return len(self.tau)

    @property
    def n_colloc(self):
        return len(self.colloc)


@dataclass(frozen=True)
class Mesh:
    """Partition of normalised time into ``K`` intervals.

    ``fractions`` are the interval lengths (positive, summing to one) and
    ``orders`` the number of collocation points per interval.  For the
    h-schemes the order is implied (2 for trapezoidal, 3 for Hermite-Simpson).
    """

    scheme: Scheme
    fractions: tuple
    orders: tuple = field(default=())

    def __post_init__(self):
        scheme = Scheme.parse(self.scheme)
        object.__setattr__(self, "scheme", scheme)
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) == 0:
            raise EmptyMesh("mesh needs at least one interval")
        if any(not f > 0 for f in fr):
            raise NonpositiveStep("interval fractions must be strictly positive")
        if abs(sum(fr) - 1.0) > 1e-10:
            raise ValueError(f"interval fractions must sum to 1, got {sum(fr)!r}")
        object.__setattr__(self, "fractions", fr)
        implied = {Scheme.TRAPEZOIDAL: 2, Scheme.HERMITE_SIMPSON: 3}
        if scheme in implied:
            orders = (implied[scheme],) * len(fr)
        else:
            orders = tuple(int(o) for o in self.orders) if self.orders else (4,) * len(fr)
            if len(orders) == 1 and len(fr) > 1:
                orders = orders * len(fr)
            if len(orders) != len(fr):
                raise ValueError("need one LGR order per interval")
            if min(orders) < 2:
                raise OrderTooSmall(f"LGR order must be >= 2, got {min(orders)}")
        object.__setattr__(self, "orders", orders)

    @classmethod
    def uniform(cls, scheme, n_nodes, order=4):
        """Uniform mesh with ``n_nodes`` mesh nodes (``n_nodes - 1`` intervals)."""
        if n_nodes < 2:
            raise EmptyMesh(f"a mesh needs at least 2 nodes, got {n_nodes}")
        k = n_nodes - 1
        return cls(scheme, (1.0 / k,) * k, (order,) * k)

    @classmethod
    def from_breakpoints(cls, scheme, breakpoints, orders=()):
        b = np.asarray(breakpoints, dtype=float)
        b = (b - b[0]) / (b[-1] - b[0])
        return cls(scheme, tuple(np.diff(b)), tuple(orders))

    @property
    def n_intervals(self):
        return len(self.fractions)

    @property
    def n_nodes(self):
        return len(self.fractions) + 1

    @cached_property
    def breakpoints(self):
        b = np.concatenate([[0.0], np.cumsum(self.fractions)])
        b[-1] = 1.0
        return b

    @cached_property
    def grid(self):
        return _build_grid(self)

    def size(self):
        """Number of collocation points."""
        return self.grid.n_colloc


def _build_grid(mesh):
    b = mesh.breakpoints
    h = np.asarray(mesh.fractions)
    k_int = mesh.n_intervals
    if mesh.scheme is Scheme.TRAPEZOIDAL:
        tau = b.copy()
        interval = np.concatenate([np.arange(k_int), [k_int - 1]])
        colloc = np.arange(len(tau))
        w = np.zeros(len(tau))
        w[:-1] += h / 2
        w[1:] += h / 2
        starts = np.arange(k_int + 1)
    elif mesh.scheme is Scheme.HERMITE_SIMPSON:
        tau = np.empty(2 * k_int + 1)
        tau[0::2] = b
        tau[1::2] = b[:-1] + h / 2
        interval = np.concatenate([np.repeat(np.arange(k_int), 2), [k_int - 1]])
        colloc = np.arange(len(tau))
        w = np.zeros(len(tau))
        w[0:-1:2] += h / 6
        w[1::2] += 4 * h / 6
        w[2::2] += h / 6
        starts = np.arange(0, 2 * k_int + 1, 2)
    else:
        taus, ints, ws, starts = [], [], [], []
        offset = 0
        for k, (left, length, n) in enumerate(zip(b[:-1], h, mesh.orders)):
            s, wk = lgr_points(n)
            taus.append(TimeMap.local_to_tau(s, left, length))
            ints.append(np.full(n, k))
            ws.append(wk * length / 2)
            starts.append(offset)
            offset += n
        taus.append([1.0])
        ints.append([k_int - 1])
        starts.append(offset)
        tau = np.concatenate(taus)
        interval = np.concatenate(ints).astype(int)
        colloc = np.arange(len(tau) - 1)
        w = np.concatenate(ws)
        starts = np.asarray(starts)
    if mesh.scheme is not Scheme.LGR:
        w = w[colloc]
    return Grid(tau=tau, interval=interval.astype(int), colloc=colloc, weights=w, starts=np.asarray(starts))


def quadrature_weights(mesh):
    """Quadrature weights of the collocation points in normalised time.

    Trapezoid weights for ``trap``, Simpson ``(1, 4, 1) / 6`` per interval for
    ``hs`` and scaled Radau weights for ``lgr``.  Multiply by ``tf - t0`` to
    integrate in physical time.
    """
    return mesh.grid.weights.copy()
