"""Transcription of a validated problem into a sparse nonlinear program.

Decision vector (grid-major)::

    [X_0, U_0, X_1, U_1, ..., X_{P-1}, (U_{P-1}), p, (t0), (tf)]

Every grid point carries a state; only collocation points carry inputs
(the final LGR point does not).  Constraints are stacked in four
partitions, in this order: ``defect``, ``path``, ``boundary``,
``rate_linear``.  The rate partition comes last so its constant Jacobian
is a contiguous tail of the CSR data array.

Pointwise terms are differentiated through the extended local vector
``[x, u, p, t0, tf]``: a point's time is ``t = t0 + tau * (tf - t0)`` and
defect and cost terms carry the horizon factor ``tf - t0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .collocation import Mesh, Scheme, lagrange_diff_matrix, lgr_points
from .errors import EmptyMesh, IncompatibleMode, NonFiniteValue
from .ocp import RateMode, ValidatedSpec, augment_add_path, augment_add_state
from .rate import RateBlock, RateTarget, build_onmesh, precomputed_jacobian

__all__ = [
    "Layout",
    "NlpProblem",
    "Evaluation",
    "transcribe",
    "eval_all",
    "count_constraints",
    "resolve_modes",
    "PARTITIONS",
]

log = logging.getLogger(__name__)

PARTITIONS = ("defect", "path", "boundary", "rate_linear")


# ---------------------------------------------------------------------------
# mode handling and counting
# ---------------------------------------------------------------------------

def resolve_modes(mode):
    """Return ``(input_mode, state_mode)`` from a mode or a pair of modes."""
    if isinstance(mode, (tuple, list)):
        if len(mode) != 2:
            raise IncompatibleMode("mode pair must be (input_mode, state_mode)")
        return RateMode.parse(mode[0]), RateMode.parse(mode[1])
    m = RateMode.parse(mode)
    return m, m


def _check_modes(spec, input_mode, state_mode):
    if spec.input_rate and input_mode is RateMode.ADD_PATH:
        raise IncompatibleMode("input rate bounds cannot use the add-path-constraint form")
    if spec.state_rate and state_mode is RateMode.ADD_STATE:
        raise IncompatibleMode("state rate bounds cannot use the add-state form")


def count_constraints(mesh: Mesh, mode, n_rate_vars: int, kind: str) -> int:
    """Rows contributed by ``n_rate_vars`` rate-bounded variables.

    Counts follow the usual one-sided convention: a two-sided inequality
    counts twice.  ``N`` is the number of mesh nodes and, for LGR, ``p(N-1)``
    generalises to the total number of collocation points.
    """
    mode = RateMode.parse(mode)
    n = mesh.n_nodes
    scheme = mesh.scheme
    p_total = sum(mesh.orders)
    if kind == "input":
        table = {
            RateMode.ADD_STATE: {Scheme.TRAPEZOIDAL: n, Scheme.HERMITE_SIMPSON: 2 * n - 1,
                                 Scheme.LGR: p_total},
            RateMode.ON_MESH: {Scheme.TRAPEZOIDAL: 2 * n, Scheme.HERMITE_SIMPSON: 4 * n - 4,
                               Scheme.LGR: 2 * p_total},
        }
    elif kind == "state":
        table = {
            RateMode.ADD_PATH: {Scheme.TRAPEZOIDAL: 2 * n, Scheme.HERMITE_SIMPSON: 4 * n - 2,
                                Scheme.LGR: 2 * p_total},
            RateMode.ON_MESH: {Scheme.TRAPEZOIDAL: 2 * n, Scheme.HERMITE_SIMPSON: 6 * n - 6,
                               Scheme.LGR: 2 * p_total},
        }
    else:
        raise ValueError("kind must be 'input' or 'state'")
    if mode not in table:
        raise IncompatibleMode(f"{mode.value} does not apply to {kind} rate bounds")
    return table[mode][scheme] * int(n_rate_vars)


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Layout:
    """Positions of every variable in the decision vector."""

    n: int
    x_idx: np.ndarray  # (P, nx)
    u_idx: np.ndarray  # (C, nu)
    p_idx: np.ndarray  # (npar,)
    t0_idx: int
    tf_idx: int
    colloc: np.ndarray  # grid point of each collocation point

    @classmethod
    def build(cls, n_points, colloc, nx, nu, npar, free_t0, free_tf):
        is_col = np.zeros(n_points, dtype=bool)
        is_col[colloc] = True
        x_idx = np.empty((n_points, nx), dtype=np.int64)
        u_idx = np.empty((len(colloc), nu), dtype=np.int64)
        pos = 0
        c = 0
        for i in range(n_points):
            x_idx[i] = np.arange(pos, pos + nx)
            pos += nx
            if is_col[i]:
                u_idx[c] = np.arange(pos, pos + nu)
                pos += nu
                c += 1
        p_idx = np.arange(pos, pos + npar)
        pos += npar
        t0_idx = -1
        tf_idx = -1
        if free_t0:
            t0_idx, pos = pos, pos + 1
        if free_tf:
            tf_idx, pos = pos, pos + 1
        return cls(n=pos, x_idx=x_idx, u_idx=u_idx, p_idx=p_idx, t0_idx=t0_idx,
                   tf_idx=tf_idx, colloc=np.asarray(colloc))

    def column(self, kind, var, point):
        """Decision index of variable ``var`` of ``kind`` at grid point ``point``."""
        if kind == "state":
            return self.x_idx[point, var]
        c = np.searchsorted(self.colloc, point)
        if c >= len(self.colloc) or self.colloc[c] != point:
            raise IndexError(f"grid point {point} carries no input")
        return self.u_idx[c, var]


# ---------------------------------------------------------------------------
# sparse assembly helper
# ---------------------------------------------------------------------------

class _Pattern:
    """Fixed sparsity pattern with a slot map for duplicate-summing assembly."""

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self.shape = shape
        keys = rows * shape[1] + cols
        uniq, inv = np.unique(keys, return_inverse=True)
        self.slot = inv.astype(np.int64)
        self.nnz = len(uniq)
        r = uniq // shape[1]
        self.indices = (uniq % shape[1]).astype(np.int32)
        self.indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(self.indptr, r + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        self.rows = r

    def data(self, values):
        return np.bincount(self.slot, weights=values, minlength=self.nnz)

    def matrix(self, data):
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


# ---------------------------------------------------------------------------
# problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Evaluation:
    objective: float
    constraints: np.ndarray
    gradient: np.ndarray | None = None
    jacobian: sp.csr_matrix | None = None


@dataclass(frozen=True, eq=False)
class NlpProblem:
    """Sparse NLP ``min f(z) s.t. g_L <= g(z) <= g_U, z_L <= z <= z_U``."""

    spec: ValidatedSpec
    mesh: Mesh
    modes: tuple
    layout: Layout
    x_lower: np.ndarray
    x_upper: np.ndarray
    g_lower: np.ndarray
    g_upper: np.ndarray
    partitions: dict  # name -> slice
    rate_block: RateBlock | None
    row_labels: tuple
    _data: dict = field(repr=False, default_factory=dict)

    # -- sizes ------------------------------------------------------------------
    @property
    def n(self):
        return self.layout.n

    @property
    def m(self):
        return len(self.g_lower)

    @property
    def n_nonlinear_rows(self):
        return self.partitions["rate_linear"].start if self.rate_linear_constant else self.m

    @property
    def rate_linear_constant(self):
        return self.rate_block is not None and self.rate_block.fixed_time

    def partition_counts(self):
        return {k: s.stop - s.start for k, s in self.partitions.items()}

    @property
    def jacobian_pattern(self):
        return self._data["jac_pattern"]

    @property
    def hessian_pattern(self):
        """Upper-triangular pattern of the Lagrangian Hessian (CSR, ones)."""
        pat = self._data["hess_pattern"]
        return pat.matrix(np.ones(pat.nnz))

    def jacobian_structure(self):
        pat = self._data["jac_pattern"]
        return pat.matrix(np.ones(pat.nnz))

    # -- unpacking --------------------------------------------------------------
    def unpack(self, z):
        lay = self.layout
        z = np.asarray(z, dtype=float)
        X = z[lay.x_idx]
        U = z[lay.u_idx]
        p = z[lay.p_idx]
        t0 = z[lay.t0_idx] if lay.t0_idx >= 0 else self.spec.t0_bounds[0]
        tf = z[lay.tf_idx] if lay.tf_idx >= 0 else self.spec.tf_bounds[0]
        return X, U, p, float(t0), float(tf)

    def pack(self, X, U, p=None, t0=None, tf=None):
        lay = self.layout
        z = np.zeros(lay.n)
        z[lay.x_idx] = X
        z[lay.u_idx] = U
        if self.spec.npar:
            z[lay.p_idx] = p
        if lay.t0_idx >= 0:
            z[lay.t0_idx] = t0
        if lay.tf_idx >= 0:
            z[lay.tf_idx] = tf
        return z

    def times(self, z):
        _, _, _, t0, tf = self.unpack(z)
        return t0 + self.mesh.grid.tau * (tf - t0)

    def initial_guess(self):
        """Straight line between the end values of the problem's guess data."""
        vs = self.spec
        g = vs.guess_dict()

        def pick(key, lo, hi, fallback):
            if key in g:
                return g[key]
            lo, hi = np.asarray(lo), np.asarray(hi)
            val = np.where(lo == hi, lo, fallback)
            return np.where(np.isfinite(val), val, 0.0)

        x0 = pick("x0", vs.x0_lb, vs.x0_ub, 0.0)
        xf = pick("xf", vs.xf_lb, vs.xf_ub, x0)
        u0 = pick("u0", vs.u0_lb, vs.u0_ub, 0.0)
        uf = g.get("uf", u0)
        p = g.get("p", np.zeros(vs.npar))
        tau = self.mesh.grid.tau
        X = x0[None, :] + tau[:, None] * (xf - x0)[None, :]
        tc = tau[self.layout.colloc]
        U = u0[None, :] + tc[:, None] * (np.asarray(uf) - u0)[None, :]
        t0 = g.get("t0", [np.mean(_finite(vs.t0_bounds))])[0]
        tf = g.get("tf", [np.mean(_finite(vs.tf_bounds))])[0]
        return self.pack(X, U, p, t0, tf)

    # -- evaluation -------------------------------------------------------------
    def _points(self, z):
        X, U, p, t0, tf = self.unpack(z)
        lay = self.layout
        tc = t0 + self.mesh.grid.tau[lay.colloc] * (tf - t0)
        return X, X[lay.colloc], U, tc, p, t0, tf

    def _endpoint(self, X, t0, tf, p):
        return np.concatenate([X[0], [t0], X[-1], [tf], p])

    def evaluate(self, z, derivatives=True, rate_jacobian=None):
        """Objective and constraints, with first derivatives if requested.

        ``rate_jacobian`` optionally supplies the constant rate-row data
        (CSR data array in pattern order); when omitted it is taken from
        the precomputed store.
        """
        d = self._data
        vs = self.spec
        X, Xc, U, tc, p, t0, tf = self._points(z)
        dt = tf - t0
        g = np.empty(self.m)

        F = vs.dynamics.value(Xc, U, tc, p)
        defect = (d["A"] @ X) - dt * (d["B"] @ F)
        g[self.partitions["defect"]] = defect.ravel()
        if vs.path is not None:
            C = vs.path.value(Xc, U, tc, p)
            g[self.partitions["path"]] = C.ravel()
        e = self._endpoint(X, t0, tf, p)
        if vs.boundary is not None:
            g[self.partitions["boundary"]] = vs.boundary.value_e(e)
        if self.rate_block is not None:
            g[self.partitions["rate_linear"]] = d["rate_cols"] @ z / dt
        f = 0.0
        w = d["weights"]
        if vs.lagrange is not None:
            L = vs.lagrange.value(Xc, U, tc, p)[:, 0]
            f += dt * float(w @ L)
        if vs.mayer is not None:
            f += float(vs.mayer.value_e(e)[0])
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise NonFiniteValue("objective or constraints not finite at the current point")
        if not derivatives:
            return Evaluation(f, g)

        lay = self.layout
        ext = self._extend
        # gradient
        grad = np.zeros(self.n)
        if vs.lagrange is not None:
            JL = ext(vs.lagrange.jacobian(Xc, U, tc, p), tc)[:, 0, :]
            gm = d["gmap"]
            vals = dt * w[:, None] * JL
            keep = gm >= 0
            np.add.at(grad, gm[keep], vals[keep])
            if self._free_time:
                s = float(w @ L)
                if lay.t0_idx >= 0:
                    grad[lay.t0_idx] -= s
                if lay.tf_idx >= 0:
                    grad[lay.tf_idx] += s
        if vs.mayer is not None:
            ge = vs.mayer.jacobian_e(e)[0]
            gme = d["gmap_e"]
            keep = gme >= 0
            np.add.at(grad, gme[keep], ge[keep])

        # Jacobian values in entry order
        parts = []
        JF = ext(vs.dynamics.jacobian(Xc, U, tc, p), tc)
        parts.append(d["defect_lin_vals"])
        q = d["defect_q"]
        parts.append((-dt * q["bval"][:, None] * JF[q["c"][:, None], q["j"][None, :],
                                                    q["l"][None, :]]).ravel()[q["keep"]])
        if self._free_time:
            BF = (d["B"] @ F).ravel()
            parts.append(np.concatenate([BF] * len(d["dt_sign"])) * d["dt_sign_rep"])
        if vs.path is not None:
            JC = ext(vs.path.jacobian(Xc, U, tc, p), tc)
            pp = d["path_q"]
            parts.append(JC[:, pp["j"], pp["l"]].ravel()[pp["keep"]])
        if vs.boundary is not None:
            JB = vs.boundary.jacobian_e(e)
            bq = d["bnd_q"]
            parts.append(JB[bq["j"], bq["l"]])
        if self.rate_block is not None and not self.rate_linear_constant:
            rq = d["rate_q"]
            sz = d["rate_cols"] @ z
            parts.append(rq["stencil_vals"] / dt)
            parts.append(np.concatenate([sz / dt ** 2] * len(rq["dt_sign"])) * rq["dt_sign_rep"])
        nl = d["jac_nl_pattern"].data(np.concatenate(parts))
        if self.rate_linear_constant:
            rate_data = d["rate_const_data"] if rate_jacobian is None else rate_jacobian
            data = np.concatenate([nl, rate_data])
        else:
            data = nl
        jac = d["jac_pattern"].matrix(data)
        return Evaluation(f, g, grad, jac)

    def hessian(self, z, y, sigma=1.0):
        """Upper triangle of ``sigma * H_f + sum_r y_r H_{g_r}`` as CSR."""
        d = self._data
        vs = self.spec
        X, Xc, U, tc, p, t0, tf = self._points(z)
        dt = tf - t0
        y = np.asarray(y, dtype=float)
        nve = d["nve"]
        C = len(tc)
        Hloc = np.zeros((C, nve, nve))
        gloc = np.zeros((C, nve))  # gradients of horizon-scaled terms (for cross terms)
        # defect: weights -B^T Y scaled by dt
        Y = y[self.partitions["defect"]].reshape(-1, vs.nx)
        Wdef = -(d["B"].T @ Y)
        self._add_point_hessian(Hloc, vs.dynamics, Xc, U, tc, p, Wdef, dt)
        if self._free_time:
            JF = self._extend(vs.dynamics.jacobian(Xc, U, tc, p), tc)
            gloc += np.einsum("cj,cjl->cl", Wdef, JF)
        if vs.lagrange is not None and sigma != 0.0:
            wl = (sigma * d["weights"])[:, None]
            self._add_point_hessian(Hloc, vs.lagrange, Xc, U, tc, p, wl, dt)
            if self._free_time:
                JL = self._extend(vs.lagrange.jacobian(Xc, U, tc, p), tc)
                gloc += wl * JL[:, 0, :]
        if vs.path is not None:
            Yp = y[self.partitions["path"]].reshape(C, vs.path.n_out)
            self._add_point_hessian(Hloc, vs.path, Xc, U, tc, p, Yp, 1.0)
        if self._free_time:
            edt = d["e_dt"]
            Hloc += gloc[:, :, None] * edt[None, None, :] + edt[None, :, None] * gloc[:, None, :]
        hq = d["hess_point_q"]
        parts = [Hloc[:, hq["a"], hq["b"]].ravel()[hq["keep"]]]
        e = self._endpoint(X, t0, tf, p)
        if d["hess_end_q"] is not None:
            He = np.zeros((len(e), len(e)))
            if vs.mayer is not None and sigma != 0.0:
                He += sigma * vs.mayer.hessian_e(e, [1.0])
            if vs.boundary is not None:
                He += vs.boundary.hessian_e(e, y[self.partitions["boundary"]])
            eq = d["hess_end_q"]
            parts.append(He[eq["a"], eq["b"]])
        if self.rate_block is not None and not self.rate_linear_constant:
            yr = y[self.partitions["rate_linear"]]
            sz = d["rate_cols"] @ z
            parts.append(self._rate_time_hessian(yr, sz, dt))
        data = d["hess_pattern"].data(np.concatenate(parts))
        return d["hess_pattern"].matrix(data)

    def _rate_time_hessian(self, yr, sz, dt):
        # g_r = s_r / dt: d2/dz d(dt) = -S/dt^2 and d2/d(dt)^2 = 2 s/dt^3
        d = self._data
        rq = d["rate_hq"]
        ys = d["rate_cols"].T @ yr  # (n,)
        cross = -ys[rq["zcols"]] / dt ** 2
        vals = [cross * s for s in rq["dt_sign"]]
        tt = 2.0 * float(yr @ sz) / dt ** 3
        vals.append(tt * rq["tt_sign"])
        return np.concatenate(vals)

    def _add_point_hessian(self, Hloc, pf, Xc, U, tc, p, W, scale):
        if not pf.hess_mask.any():
            return
        H = pf.hessian(Xc, U, tc, p, W) * scale
        nvl = pf.nv
        Hloc[:, :nvl - 1, :nvl - 1] += H[:, :nvl - 1, :nvl - 1]
        d = self._data
        tcol = H[:, :nvl - 1, nvl - 1]
        ttt = H[:, nvl - 1, nvl - 1]
        tau = d["tau_c"]
        for k, coef in ((nvl - 1, 1.0 - tau), (nvl, tau)):
            Hloc[:, :nvl - 1, k] += tcol * coef[:, None]
            Hloc[:, k, :nvl - 1] += tcol * coef[:, None]
        a, b = 1.0 - tau, tau
        Hloc[:, nvl - 1, nvl - 1] += ttt * a * a
        Hloc[:, nvl, nvl] += ttt * b * b
        Hloc[:, nvl - 1, nvl] += ttt * a * b
        Hloc[:, nvl, nvl - 1] += ttt * a * b

    @property
    def _free_time(self):
        return self.layout.t0_idx >= 0 or self.layout.tf_idx >= 0

    def _extend(self, J, tc):
        """Map ``(C, n_out, nv)`` local Jacobians to the extended local vector."""
        tau = self._data["tau_c"]
        nv = J.shape[2]
        out = np.empty(J.shape[:2] + (nv + 1,))
        out[:, :, :nv - 1] = J[:, :, :nv - 1]
        out[:, :, nv - 1] = J[:, :, nv - 1] * (1.0 - tau)[:, None]
        out[:, :, nv] = J[:, :, nv - 1] * tau[:, None]
        return out

    def multipliers_by_partition(self, y):
        return {k: np.asarray(y)[s] for k, s in self.partitions.items()}

    def rate_jacobian_data(self):
        """Rate-row Jacobian data recomputed from the stencils (slow path)."""
        blk = self.rate_block
        if blk is None:
            return np.zeros(0)
        mat = (self._data["rate_cols"] / blk.dt).tocsr()
        mat.sort_indices()
        return mat.data


def _finite(bounds):
    lo, hi = bounds
    if np.isfinite(lo) and np.isfinite(hi):
        return [lo, hi]
    return [v for v in (lo, hi) if np.isfinite(v)] or [0.0]


# ---------------------------------------------------------------------------
# transcription
# ---------------------------------------------------------------------------

def _defect_operators(mesh, nx):
    """Sparse ``A`` (on grid points) and ``B`` (on collocation points)."""
    grid = mesh.grid
    h = np.asarray(mesh.fractions)
    P, C = grid.n_points, grid.n_colloc
    ar, ac, av, br, bc, bv = [], [], [], [], [], []
    row = 0
    if mesh.scheme is Scheme.TRAPEZOIDAL:
        for k in range(mesh.n_intervals):
            ar += [row, row]
            ac += [k + 1, k]
            av += [1.0, -1.0]
            br += [row, row]
            bc += [k, k + 1]
            bv += [h[k] / 2, h[k] / 2]
            row += 1
    elif mesh.scheme is Scheme.HERMITE_SIMPSON:
        for k in range(mesh.n_intervals):
            s = 2 * k
            # Simpson row
            ar += [row, row]
            ac += [s + 2, s]
            av += [1.0, -1.0]
            br += [row] * 3
            bc += [s, s + 1, s + 2]
            bv += [h[k] / 6, 4 * h[k] / 6, h[k] / 6]
            row += 1
            # Hermite interpolation row
            ar += [row] * 3
            ac += [s + 1, s, s + 2]
            av += [1.0, -0.5, -0.5]
            br += [row, row]
            bc += [s, s + 2]
            bv += [h[k] / 8, -h[k] / 8]
            row += 1
    else:
        for k in range(mesh.n_intervals):
            n = mesh.orders[k]
            s = grid.starts[k]
            nodes, _ = lgr_points(n)
            D = lagrange_diff_matrix(np.concatenate([nodes, [1.0]]))[:n]
            for i in range(n):
                for j in range(n + 1):
                    ar.append(row)
                    ac.append(s + j)
                    av.append(D[i, j])
                br.append(row)
                bc.append(s + i)
                bv.append(h[k] / 2)
                row += 1
    A = sp.csr_matrix((av, (ar, ac)), shape=(row, P))
    B = sp.csr_matrix((bv, (br, bc)), shape=(row, C))
    return A, B


def transcribe(spec: ValidatedSpec, mesh: Mesh, mode=RateMode.ON_MESH,
               include_lgr_endpoint=False) -> NlpProblem:
    """Build the NLP for ``spec`` on ``mesh``.

    ``mode`` is a :class:`RateMode` applied to every rate bound, or a pair
    ``(input_mode, state_mode)``.  Add-state and add-path forms are produced
    by rewriting ``spec``; the on-mesh form appends linear rate rows.
    """
    if mesh is None or mesh.n_intervals < 1:
        raise EmptyMesh("mesh has no intervals")
    input_mode, state_mode = resolve_modes(mode)
    _check_modes(spec, input_mode, state_mode)
    vs = spec
    if vs.input_rate and input_mode is RateMode.ADD_STATE:
        vs = augment_add_state(vs)
    if vs.state_rate and state_mode is RateMode.ADD_PATH:
        vs = augment_add_path(vs)

    grid = mesh.grid
    nx, nu, npar = vs.nx, vs.nu, vs.npar
    lay = Layout.build(grid.n_points, grid.colloc, nx, nu, npar, vs.free_t0, vs.free_tf)
    P, C = grid.n_points, grid.n_colloc
    nv = nx + nu + npar + 1
    nve = nv + 1
    tau_c = grid.tau[grid.colloc]

    # extended local -> global column map; entries -1 are fixed quantities
    gmap = np.hstack([lay.x_idx[grid.colloc], lay.u_idx,
                      np.broadcast_to(lay.p_idx, (C, npar)),
                      np.full((C, 1), lay.t0_idx), np.full((C, 1), lay.tf_idx)]).astype(np.int64)
    gmap_e = np.concatenate([lay.x_idx[0], [lay.t0_idx], lay.x_idx[-1], [lay.tf_idx],
                             lay.p_idx]).astype(np.int64)
    free_time = vs.free_t0 or vs.free_tf
    dt_cols = [(c, s) for c, s in ((lay.t0_idx, -1.0), (lay.tf_idx, 1.0)) if c >= 0]

    def ext_mask(mask):  # (n_out, nv) -> (n_out, nve)
        out = np.zeros((mask.shape[0], nve), dtype=bool)
        out[:, :nv - 1] = mask[:, :nv - 1]
        out[:, nv - 1] = mask[:, nv - 1]
        out[:, nv] = mask[:, nv - 1]
        return out

    # ---- constraints ----------------------------------------------------------
    A, B = _defect_operators(mesh, nx)
    n_cond = A.shape[0]
    m_def = n_cond * nx
    n_path = vs.path.n_out if vs.path is not None else 0
    m_path = C * n_path
    m_bnd = vs.n_boundary
    rate_block = None
    targets = []
    if input_mode is RateMode.ON_MESH:
        targets += [RateTarget("input", j, lo, hi) for j, lo, hi in vs.input_rate]
    if state_mode is RateMode.ON_MESH:
        targets += [RateTarget("state", j, lo, hi) for j, lo, hi in vs.state_rate]
    if targets:
        dt_fixed = vs.tf_bounds[0] - vs.t0_bounds[0] if vs.fixed_time else None
        rate_block = build_onmesh(mesh, targets, fixed_time=vs.fixed_time, dt=dt_fixed,
                                  include_lgr_endpoint=include_lgr_endpoint)
        if not vs.fixed_time:
            log.info("free final time: on-mesh rate rows depend on the horizon length; "
                     "constant-Jacobian fast path disabled")
    m_rate = rate_block.n_rows if rate_block is not None else 0
    offs = np.cumsum([0, m_def, m_path, m_bnd, m_rate])
    partitions = {name: slice(int(offs[i]), int(offs[i + 1])) for i, name in enumerate(PARTITIONS)}
    m = int(offs[-1])

    g_lower = np.zeros(m)
    g_upper = np.zeros(m)
    if n_path:
        g_lower[partitions["path"]] = np.tile(vs.path_lb, C)
        g_upper[partitions["path"]] = np.tile(vs.path_ub, C)
    rate_cols = None
    if rate_block is not None:
        g_lower[partitions["rate_linear"]] = rate_block.lower
        g_upper[partitions["rate_linear"]] = rate_block.upper
        # map (target, point) columns to decision indices
        col_map = np.empty(len(targets) * P, dtype=np.int64)
        for t, tgt in enumerate(targets):
            for i in range(P):
                try:
                    col_map[t * P + i] = lay.column(tgt.kind, tgt.index, i)
                except IndexError:
                    col_map[t * P + i] = -1
        st = rate_block.stencil.tocoo()
        if np.any(col_map[st.col] < 0):
            raise AssertionError("rate stencil references a grid point without the variable")
        rate_cols = sp.csr_matrix((st.data, (st.row, col_map[st.col])), shape=(m_rate, lay.n))
        rate_cols.sum_duplicates()
        rate_cols.sort_indices()

    labels = []
    for a in range(n_cond):
        labels += [f"defect[{a}].{vs.state_names[j]}" for j in range(nx)]
    for c in range(C):
        labels += [f"{vs.path_labels[j]}@{c}" for j in range(n_path)]
    labels += [f"boundary[{j}]" for j in range(m_bnd)]
    if rate_block is not None:
        names = {"state": vs.state_names, "input": vs.input_names}
        for k, pt, tpos, tag in rate_block.provenance:
            tgt = targets[tpos]
            labels.append(f"rate[{names[tgt.kind][tgt.index]}]@{pt}:{tag}")

    # ---- variable bounds ---------------------------------------------------------
    x_lower = np.full(lay.n, -np.inf)
    x_upper = np.full(lay.n, np.inf)
    x_lower[lay.x_idx] = vs.x_lb
    x_upper[lay.x_idx] = vs.x_ub
    x_lower[lay.x_idx[0]] = np.maximum(vs.x_lb, vs.x0_lb)
    x_upper[lay.x_idx[0]] = np.minimum(vs.x_ub, vs.x0_ub)
    x_lower[lay.x_idx[-1]] = np.maximum(vs.x_lb, vs.xf_lb)
    x_upper[lay.x_idx[-1]] = np.minimum(vs.x_ub, vs.xf_ub)
    if nu:
        x_lower[lay.u_idx] = vs.u_lb
        x_upper[lay.u_idx] = vs.u_ub
        x_lower[lay.u_idx[0]] = np.maximum(vs.u_lb, vs.u0_lb)
        x_upper[lay.u_idx[0]] = np.minimum(vs.u_ub, vs.u0_ub)
    x_lower[lay.p_idx] = vs.p_lb
    x_upper[lay.p_idx] = vs.p_ub
    if lay.t0_idx >= 0:
        x_lower[lay.t0_idx], x_upper[lay.t0_idx] = vs.t0_bounds
    if lay.tf_idx >= 0:
        x_lower[lay.tf_idx], x_upper[lay.tf_idx] = vs.tf_bounds

    # ---- Jacobian pattern (entry order must match NlpProblem.evaluate) ----------
    rows_l, cols_l = [], []
    Acoo = A.tocoo()
    # linear defect part: row a*nx+j, col x_idx[point, j]
    jj = np.arange(nx)
    lin_rows = (Acoo.row[:, None] * nx + jj[None, :]).ravel()
    lin_cols = lay.x_idx[Acoo.col][:, :].ravel()
    rows_l.append(lin_rows)
    cols_l.append(lin_cols)
    defect_lin_vals = np.repeat(Acoo.data, nx)

    Bcoo = B.tocoo()
    fmask = ext_mask(vs.dynamics.jac_mask)
    fj, fl = np.nonzero(fmask)
    qr = (Bcoo.row[:, None] * nx + fj[None, :])
    qc = gmap[Bcoo.col][:, fl]
    keep = (qc >= 0).ravel()
    rows_l.append(qr.ravel()[keep])
    cols_l.append(qc.ravel()[keep])
    defect_q = {"c": Bcoo.col, "j": fj, "l": fl, "bval": Bcoo.data, "keep": keep}
    dt_sign, dt_sign_rep = [], np.zeros(0)
    if free_time:
        for col, sgn in dt_cols:
            rows_l.append(np.arange(m_def))
            cols_l.append(np.full(m_def, col))
            dt_sign.append(sgn)
        # d(-dt * BF)/d(dt) = -BF; d(dt)/dt0 = -1, d(dt)/dtf = +1
        dt_sign_rep = np.concatenate([np.full(m_def, -s) for s in dt_sign])

    path_q = None
    if n_path:
        pmask = ext_mask(vs.path.jac_mask)
        pj, pl = np.nonzero(pmask)
        pr = partitions["path"].start + np.arange(C)[:, None] * n_path + pj[None, :]
        pc = gmap[:, pl]
        keep = (pc >= 0).ravel()
        rows_l.append(pr.ravel()[keep])
        cols_l.append(pc.ravel()[keep])
        path_q = {"j": pj, "l": pl, "keep": keep}

    bnd_q = None
    if m_bnd:
        bj, bl = np.nonzero(vs.boundary.jac_mask)
        keep = gmap_e[bl] >= 0
        bj, bl = bj[keep], bl[keep]
        rows_l.append(partitions["boundary"].start + bj)
        cols_l.append(gmap_e[bl])
        bnd_q = {"j": bj, "l": bl}

    rate_q = None
    if rate_block is not None and not vs.fixed_time:
        rc = rate_cols.tocoo()
        r0 = partitions["rate_linear"].start
        rows_l.append(r0 + rc.row)
        cols_l.append(rc.col)
        rsign = []
        for col, sgn in dt_cols:
            rows_l.append(r0 + np.arange(m_rate))
            cols_l.append(np.full(m_rate, col))
            rsign.append(sgn)
        rate_q = {"stencil_vals": rc.data, "dt_sign": rsign,
                  # d(s/dt)/d(dt) = -s/dt^2
                  "dt_sign_rep": np.concatenate([np.full(m_rate, -s) for s in rsign])}

    m_nl = m if (rate_block is None or not vs.fixed_time) else partitions["rate_linear"].start
    jac_nl_pattern = _Pattern(np.concatenate(rows_l), np.concatenate(cols_l), (m_nl, lay.n))
    if rate_block is not None and vs.fixed_time:
        const = precomputed_jacobian(rate_block)
        const_mat = (rate_cols / rate_block.dt).tocsr()
        const_mat.sort_indices()
        rc = const_mat.tocoo()
        all_rows = np.concatenate([jac_nl_pattern.rows, m_nl + rc.row])
        all_cols = np.concatenate([jac_nl_pattern.indices, rc.col])
        jac_pattern = _Pattern(all_rows, all_cols, (m, lay.n))
        rate_const_data = const_mat.data.copy()
        rate_const_data.flags.writeable = False
        assert const.nnz == len(rate_const_data)
    else:
        jac_pattern = jac_nl_pattern
        rate_const_data = None

    # ---- Hessian pattern (upper triangle) ----------------------------------------
    def ext_hess(mask):  # (n_out, nv, nv) -> (nve, nve) union
        h = mask.any(axis=0)
        out = np.zeros((nve, nve), dtype=bool)
        t = nv - 1
        out[:t, :t] = h[:t, :t]
        for k in (t, t + 1):
            out[:t, k] = h[:t, t]
            out[k, :t] = h[t, :t]
        out[t:, t:] = h[t, t]
        return out

    loc = ext_hess(vs.dynamics.hess_mask)
    if vs.lagrange is not None:
        loc |= ext_hess(vs.lagrange.hess_mask)
    if n_path:
        loc |= ext_hess(vs.path.hess_mask)
    e_dt = np.zeros(nve)
    e_dt[nv - 1], e_dt[nv] = -1.0, 1.0
    if free_time:
        used = fmask.any(axis=0)
        if vs.lagrange is not None:
            used |= ext_mask(vs.lagrange.jac_mask).any(axis=0)
        loc[used, nv - 1:] = True
        loc[nv - 1:, used] = True
    ha, hb = np.nonzero(np.triu(loc))
    ga, gb = gmap[:, ha], gmap[:, hb]
    keep = ((ga >= 0) & (gb >= 0)).ravel()
    hrows = [np.minimum(ga, gb).ravel()[keep]]
    hcols = [np.maximum(ga, gb).ravel()[keep]]
    hess_point_q = {"a": ha, "b": hb, "keep": keep}
    hess_end_q = None
    emask = np.zeros((len(gmap_e), len(gmap_e)), dtype=bool)
    if vs.mayer is not None:
        emask |= vs.mayer.hess_mask
    if m_bnd:
        emask |= vs.boundary.hess_mask
    if vs.mayer is not None or m_bnd:
        ea, eb = np.nonzero(np.triu(emask))
        keep = (gmap_e[ea] >= 0) & (gmap_e[eb] >= 0)
        ea, eb = ea[keep], eb[keep]
        hrows.append(np.minimum(gmap_e[ea], gmap_e[eb]))
        hcols.append(np.maximum(gmap_e[ea], gmap_e[eb]))
        hess_end_q = {"a": ea, "b": eb}
    rate_hq = None
    if rate_block is not None and not vs.fixed_time:
        zcols = np.unique(rate_cols.indices)
        tcols = [c for c, _ in dt_cols]
        for col in tcols:
            hrows.append(np.minimum(zcols, col))
            hcols.append(np.maximum(zcols, col))
        tt_r, tt_c, tt_s = [], [], []
        for ia, (ca, sa) in enumerate(dt_cols):
            for cb, sb in dt_cols[ia:]:
                tt_r.append(min(ca, cb))
                tt_c.append(max(ca, cb))
                tt_s.append(sa * sb)
        hrows.append(np.asarray(tt_r))
        hcols.append(np.asarray(tt_c))
        rate_hq = {"zcols": zcols, "dt_sign": [s for _, s in dt_cols], "tt_sign": np.asarray(tt_s)}
    hess_pattern = _Pattern(np.concatenate(hrows), np.concatenate(hcols), (lay.n, lay.n))

    data = dict(
        A=A, B=B, weights=grid.weights, gmap=gmap, gmap_e=gmap_e, nve=nve, tau_c=tau_c,
        defect_lin_vals=defect_lin_vals, defect_q=defect_q, dt_sign=dt_sign,
        dt_sign_rep=dt_sign_rep, path_q=path_q, bnd_q=bnd_q, rate_q=rate_q,
        rate_cols=rate_cols, jac_nl_pattern=jac_nl_pattern, jac_pattern=jac_pattern,
        rate_const_data=rate_const_data, hess_pattern=hess_pattern,
        hess_point_q=hess_point_q, hess_end_q=hess_end_q, rate_hq=rate_hq, e_dt=e_dt,
    )
    return NlpProblem(spec=vs, mesh=mesh, modes=(input_mode, state_mode), layout=lay,
                      x_lower=x_lower, x_upper=x_upper, g_lower=g_lower, g_upper=g_upper,
                      partitions=partitions, rate_block=rate_block, row_labels=tuple(labels),
                      _data=data)


def eval_all(problem: NlpProblem, point, multipliers=None, sigma=1.0):
    """Objective, constraints, Jacobian and (optionally) Lagrangian Hessian.

    Returns ``(f, g, J, H)``; ``H`` is the upper triangle and is ``None``
    when ``multipliers`` is not given.
    """
    point = np.asarray(point, dtype=float)
    if point.shape != (problem.n,):
        raise ValueError(f"point has shape {point.shape}, expected {(problem.n,)}")
    ev = problem.evaluate(point)
    hess = None
    if multipliers is not None:
        hess = problem.hessian(point, multipliers, sigma)
    return ev.objective, ev.constraints, ev.jacobian, hess
