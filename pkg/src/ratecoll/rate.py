"""On-mesh linear rate constraints built from the collocation stencils.

A :class:`RateBlock` stores one two-sided row per stencil application.  Its
columns index ``(target, grid point)`` pairs, ``col = target * n_points +
point``; the transcription maps them onto decision-vector positions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .collocation import HS_STENCILS, TRAP_STENCIL, Mesh, Scheme, barycentric_weights, \
    lagrange_diff_matrix, lgr_points
from .errors import EmptyTargets, FreeTimeBlock, NonpositiveStep

__all__ = [
    "RateTarget",
    "RateBlock",
    "ConstantJacobian",
    "build_onmesh",
    "lgr_endpoint_weights",
    "lgr_endpoint_control",
    "precomputed_jacobian",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RateTarget:
    """A rate-bounded variable: ``kind`` is ``"state"`` or ``"input"``."""

    kind: str
    index: int
    lower: float
    upper: float


@dataclass(frozen=True, eq=False)
class RateBlock:
    """Linear rate rows ``lower <= (S z) / dt <= upper``.

    Attributes
    ----------
    stencil : scipy.sparse.csr_matrix
        Derivative with respect to normalised time ``tau`` (``1/dtau`` folded
        in).  Dividing by the horizon length gives physical rates.
    dt : float or None
        Horizon length for fixed-time problems, ``None`` when time is free.
    lower, upper : ndarray
        Row bounds.
    provenance : tuple
        ``(interval, grid point, target position, tag)`` per row.
    """

    stencil: sp.csr_matrix
    dt: float | None
    lower: np.ndarray
    upper: np.ndarray
    provenance: tuple
    targets: tuple
    n_points: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def fixed_time(self):
        return self.dt is not None

    @property
    def n_rows(self):
        return self.stencil.shape[0]

    @property
    def matrix(self):
        """Constant coefficient matrix (fixed time only)."""
        return precomputed_jacobian(self).matrix

    def rates(self, z, dt=None):
        """Row values for stacked grid values ``z`` (``n_targets * n_points``)."""
        dt = self.dt if dt is None else dt
        return self.stencil @ np.asarray(z, dtype=float) / dt

    def rows_for(self, target_pos):
        return [r for r, prov in enumerate(self.provenance) if prov[2] == target_pos]


@dataclass(frozen=True, eq=False)
class ConstantJacobian:
    """Read-only CSR data shared by every solver iteration."""

    matrix: sp.csr_matrix

    @property
    def nnz(self):
        return self.matrix.nnz


def lgr_endpoint_weights(n):
    """Weights ``l`` with ``u(+1) = l @ U`` for the degree ``n - 1`` interpolant."""
    nodes, _ = lgr_points(n)
    w = barycentric_weights(nodes)
    diff = 1.0 - nodes
    terms = w / diff
    return terms / terms.sum()


def lgr_endpoint_control(values, nodes=None):
    """Extrapolate control samples on LGR nodes to the non-collocated end ``+1``.

    Parameters
    ----------
    values : array_like
        Control values at the ``n`` LGR nodes of one interval.
    nodes : array_like, optional
        Node positions; defaults to the standard LGR nodes of order ``n``.

    Returns
    -------
    float
        Value of the degree ``n - 1`` Lagrange interpolant at ``+1``.
    """
    values = np.asarray(values, dtype=float)
    if nodes is None:
        weights = lgr_endpoint_weights(len(values))
    else:
        nodes = np.asarray(nodes, dtype=float)
        w = barycentric_weights(nodes)
        terms = w / (1.0 - nodes)
        weights = terms / terms.sum()
    return float(weights @ values)


def _input_lgr_operator(n, include_endpoint):
    nodes, _ = lgr_points(n)
    d = lagrange_diff_matrix(np.concatenate([nodes, [1.0]]))
    ell = lgr_endpoint_weights(n)
    op = d[:, :n] + np.outer(d[:, n], ell)
    return op if include_endpoint else op[:n]


def build_onmesh(mesh: Mesh, targets, fixed_time=True, dt=None, include_lgr_endpoint=False):
    """Assemble the on-mesh rate rows for ``targets`` on ``mesh``.

    Parameters
    ----------
    mesh : Mesh
    targets : sequence of RateTarget
    fixed_time : bool
        When True, ``dt`` (the horizon length) must be given and the block
        is constant.
    include_lgr_endpoint : bool
        Also enforce the LGR rows at each interval's non-collocated end.

    Notes
    -----
    Trapezoidal rows use the forward difference at every node except the
    last, which reuses the final interval's difference.  Hermite-Simpson
    states get rows at the left, middle and right point of every interval;
    inputs skip the midpoint because their quadratic interpolant has a
    linear rate whose extremes sit at the interval ends.  LGR rows act on
    the interval's nodes plus its ``+1`` basis point, which is the first
    node of the next interval; in the final interval that point carries no
    control, so input rows there use the control extrapolated to ``+1``.
    """
    targets = tuple(targets)
    if not targets:
        raise EmptyTargets("no rate-bounded variables given")
    if fixed_time:
        if dt is None or not dt > 0:
            raise NonpositiveStep("fixed-time rate block needs a positive horizon length")
        dt = float(dt)
    else:
        dt = None
    grid = mesh.grid
    npts = grid.n_points
    h = np.asarray(mesh.fractions)
    starts = grid.starts
    rows, cols, vals = [], [], []
    lower, upper, prov = [], [], []

    def add_row(coeffs, points, tpos, target, k, at, tag):
        r = len(lower)
        for c, pt in zip(coeffs, points):
            if c != 0.0:
                rows.append(r)
                cols.append(tpos * npts + pt)
                vals.append(c)
        lower.append(target.lower)
        upper.append(target.upper)
        prov.append((int(k), int(at), int(tpos), tag))

    lgr_ops = {}
    for tpos, target in enumerate(targets):
        is_input = target.kind == "input"
        for k in range(mesh.n_intervals):
            s = starts[k]
            if mesh.scheme is Scheme.TRAPEZOIDAL:
                add_row(TRAP_STENCIL / h[k], (s, s + 1), tpos, target, k, s, "fwd")
                if k == mesh.n_intervals - 1:
                    add_row(TRAP_STENCIL / h[k], (s, s + 1), tpos, target, k, s + 1, "bwd")
            elif mesh.scheme is Scheme.HERMITE_SIMPSON:
                pts = (s, s + 1, s + 2)
                add_row(HS_STENCILS[0] / h[k], pts, tpos, target, k, s, "left")
                if not is_input:
                    add_row(HS_STENCILS[1] / h[k], pts, tpos, target, k, s + 1, "mid")
                add_row(HS_STENCILS[2] / h[k], pts, tpos, target, k, s + 2, "right")
            else:
                n = mesh.orders[k]
                # only the final interval lacks a control at its +1 basis point
                extrapolate = is_input and k == mesh.n_intervals - 1
                key = (n, extrapolate)
                if key not in lgr_ops:
                    if extrapolate:
                        lgr_ops[key] = _input_lgr_operator(n, include_lgr_endpoint)
                    else:
                        nodes, _ = lgr_points(n)
                        full = lagrange_diff_matrix(np.concatenate([nodes, [1.0]]))
                        lgr_ops[key] = full if include_lgr_endpoint else full[:n]
                op = lgr_ops[key] * (2.0 / h[k])
                pts = tuple(range(s, s + n)) if extrapolate else tuple(range(s, s + n + 1))
                for i, row in enumerate(op):
                    add_row(row, pts, tpos, target, k, s + i, "end" if i == n else "node")
    stencil = sp.csr_matrix((vals, (rows, cols)), shape=(len(lower), len(targets) * npts))
    stencil.sum_duplicates()
    stencil.sort_indices()
    return RateBlock(stencil=stencil, dt=dt, lower=np.asarray(lower, dtype=float),
                     upper=np.asarray(upper, dtype=float), provenance=tuple(prov),
                     targets=targets, n_points=npts)


def precomputed_jacobian(block: RateBlock) -> ConstantJacobian:
    """Constant Jacobian of a fixed-time block, built once and cached."""
    if not block.fixed_time:
        raise FreeTimeBlock("rate rows depend on the free horizon length; no constant Jacobian")
    handle = block._cache.get("jac")
    if handle is None:
        mat = (block.stencil / block.dt).tocsr()
        for arr in (mat.data, mat.indices, mat.indptr):
            arr.flags.writeable = False
        handle = ConstantJacobian(mat)
        block._cache["jac"] = handle
    return handle
