"""Primal-dual interior-point solver for the transcribed NLP.

The method follows the familiar line of barrier solvers: inequality rows
get slack variables, all finite bounds carry logarithmic barriers, and each
iteration solves the condensed KKT system::

    [ W + Sigma_x + dw   J^T ] [dx]     [ -r_x ]
    [ J                  -D  ] [dy]  =  [ -r_c ]

with ``D = dc`` on equality rows and ``D = 1/Sigma_s + dc`` on inequality
rows.  The matrix is factorised by a sparse LDL^T kernel without pivoting
in a banded elimination order; wrong inertia is corrected by increasing
``dw``.  Steps are accepted by backtracking on an l1 merit function with a
second-order correction.

Multiplier sign convention: the Lagrangian is ``f + y^T g``, so ``y_r >= 0``
when the upper bound of row ``r`` is active and ``y_r <= 0`` at an active
lower bound.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import _core
from .errors import LineSearchFailure, MaxIterations, SingularKKT

__all__ = ["SolverOptions", "NlpSolution", "solve", "kkt_residuals", "KktSystem"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    """Interior-point settings.

    Attributes
    ----------
    max_iterations : int
    tol : float
        Convergence tolerance on the scaled KKT error.
    mu_init, kappa_mu, theta_mu, kappa_eps, tau_min : float
        Monotone barrier schedule ``mu <- max(tol/10, min(kappa_mu*mu, mu**theta_mu))``
        once the barrier problem is solved to ``kappa_eps * mu``.
    bound_push, bound_frac : float
        Initial point interiorisation.
    armijo, backtrack, max_backtracks
        Line-search parameters.
    exploit_linear_rows : bool
        Serve the rate-row Jacobian from the precomputed constant store.
    kernel : str or None
        ``"cython"`` or ``"python"``; default picks the compiled kernel.
    """

    max_iterations: int = 500
    tol: float = 1e-8
    mu_init: float = 0.1
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    kappa_eps: float = 10.0
    tau_min: float = 0.99
    bound_push: float = 1e-2
    bound_frac: float = 1e-2
    bound_relax: float = 1e-9
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    s_max: float = 100.0
    delta_c: float = 1e-9
    refine_steps: int = 5
    exploit_linear_rows: bool = True
    kernel: str | None = None
    verbose: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("tol", "mu_init", "bound_push", "bound_frac"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class NlpSolution:
    """Result of :func:`solve`.

    ``y`` holds constraint multipliers in row order; ``multipliers`` splits
    them by partition.  ``z_lower``/``z_upper`` are bound multipliers of the
    primal variables (zero for infinite bounds).
    """

    x: np.ndarray
    y: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    status: str
    iterations: int
    objective: float
    multipliers: dict
    iteration_times: list = field(default_factory=list)
    kkt: tuple = ()
    counters: dict = field(default_factory=dict)
    message: str = ""
    mu_history: list = field(default_factory=list)

    @property
    def success(self):
        return self.status == "success"

    def mean_iteration_time(self, phase="total"):
        if not self.iteration_times:
            return float("nan")
        return float(np.mean([t[phase] for t in self.iteration_times]))


# ---------------------------------------------------------------------------
# KKT system
# ---------------------------------------------------------------------------

class KktSystem:
    """Assembly and LDL^T factorisation of the condensed KKT matrix.

    The sparsity pattern, elimination order and elimination tree are fixed
    at construction; each factorisation only scatters new values.
    """

    def __init__(self, n, m, w_upper, jac, global_cols=(), kernel=None):
        self.n, self.m = n, m
        self.kernel = _core.backends()[kernel] if kernel else _core.ldl
        w_upper = w_upper.tocsr()
        jac = jac.tocsr()
        self._w_pattern = w_upper
        self._j_pattern = jac
        self.perm = self._ordering(n, m, jac, set(int(c) for c in global_cols))
        inv = np.empty(n + m, dtype=np.int64)
        inv[self.perm] = np.arange(n + m)
        self.inv = inv

        wc = w_upper.tocoo()
        w_rows, w_cols = wc.row.astype(np.int64), wc.col.astype(np.int64)
        jr = np.repeat(np.arange(m), np.diff(jac.indptr)).astype(np.int64)
        jcol = jac.indices.astype(np.int64)
        rows = np.concatenate([w_rows, n + jr, np.arange(n + m)])
        cols = np.concatenate([w_cols, jcol, np.arange(n + m)])
        pr, pc = inv[rows], inv[cols]
        lo, hi = np.minimum(pr, pc), np.maximum(pr, pc)
        keys = hi * (n + m) + lo  # column-major, sorted rows within column
        uniq, slot = np.unique(keys, return_inverse=True)
        self.slot = slot.astype(np.int64)
        self.nnz = len(uniq)
        self.Ai = (uniq % (n + m)).astype(np.int64)
        colidx = uniq // (n + m)
        Ap = np.zeros(n + m + 1, dtype=np.int64)
        np.add.at(Ap, colidx + 1, 1)
        self.Ap = np.cumsum(Ap)
        self.n_w, self.n_j = len(w_rows), len(jcol)
        self.parent, self.lnz = self.kernel.etree(n + m, self.Ap, self.Ai)
        signs = np.ones(n + m)
        signs[n:] = -1.0
        self.signs = signs[self.perm].astype(float)
        self.factors = None
        self.w_diag_pos = None

    @staticmethod
    def _ordering(n, m, jac, global_cols):
        """Banded elimination order: each row follows its last local variable."""
        key = np.full(m, -1, dtype=np.int64)
        indptr, indices = jac.indptr, jac.indices
        if global_cols:
            is_global = np.zeros(n, dtype=bool)
            is_global[list(global_cols)] = True
        else:
            is_global = None
        for r in range(m):
            cols = indices[indptr[r]:indptr[r + 1]]
            if is_global is not None:
                cols = cols[~is_global[cols]]
            if len(cols):
                key[r] = cols.max()
        locals_ = [c for c in range(n) if c not in global_cols]
        # stable: rows sorted by key, grouped after their variable
        rows_by_key = {}
        for r in np.argsort(key, kind="stable"):
            rows_by_key.setdefault(int(key[r]), []).append(n + int(r))
        order = []
        for c in locals_:
            order.append(c)
            order.extend(rows_by_key.get(c, ()))
        order.extend(sorted(global_cols))
        order.extend(rows_by_key.get(-1, ()))
        return np.asarray(order, dtype=np.int64)

    def factor(self, w_data, j_data, diag_x, diag_c, pivot_tol=1e-14, dyn_reg=1e-10):
        values = np.concatenate([w_data, j_data, diag_x, -diag_c])
        ax = np.bincount(self.slot, weights=values, minlength=self.nnz)
        out = self.kernel.factor(self.n + self.m, self.Ap, self.Ai, ax, self.parent, self.lnz,
                                 self.signs, pivot_tol, dyn_reg)
        self.factors = out
        return out[5], out[6]  # number of positive pivots, dynamic regularisations

    def solve(self, rhs):
        Lp, Li, Lx, _, Dinv = self.factors[:5]
        sol = self.kernel.solve(Lp, Li, Lx, Dinv, np.ascontiguousarray(rhs[self.perm]))
        out = np.empty_like(sol)
        out[self.perm] = sol
        return out


def _sym_matvec(w_upper, v):
    return w_upper @ v + w_upper.T @ v - w_upper.diagonal() * v


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

class _Bounds:
    """Finite-bound bookkeeping for a vector with barrier terms."""

    def __init__(self, lower, upper, relax):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        self.orig_lower, self.orig_upper = lower, upper
        self.has_l = np.isfinite(lower)
        self.has_u = np.isfinite(upper)
        self.lower = np.where(self.has_l, lower - relax * np.maximum(1.0, np.abs(lower)), -np.inf)
        self.upper = np.where(self.has_u, upper + relax * np.maximum(1.0, np.abs(upper)), np.inf)

    def push(self, v, k1, k2):
        v = np.asarray(v, dtype=float).copy()
        lo, hi = self.lower, self.upper
        width = np.where(self.has_l & self.has_u, hi - lo, np.inf)
        pl = np.minimum(k1 * np.maximum(1.0, np.abs(lo)), k2 * width)
        pu = np.minimum(k1 * np.maximum(1.0, np.abs(hi)), k2 * width)
        pl = np.where(self.has_l, pl, 0.0)
        pu = np.where(self.has_u, pu, 0.0)
        v = np.where(self.has_l, np.maximum(v, lo + pl), v)
        v = np.where(self.has_u, np.minimum(v, hi - pu), v)
        both = self.has_l & self.has_u
        mid = 0.5 * (np.where(both, lo, 0.0) + np.where(both, hi, 0.0))
        v = np.where(both & (lo + pl > hi - pu), mid, v)
        return v

    def slacks(self, v):
        sl = np.where(self.has_l, v - self.lower, 1.0)
        su = np.where(self.has_u, self.upper - v, 1.0)
        return sl, su


def _max_step(v, dv, lo_mask, lo, hi_mask, hi, tau):
    alpha = 1.0
    if lo_mask.any():
        d = dv[lo_mask]
        neg = d < 0
        if neg.any():
            gap = (v[lo_mask] - lo[lo_mask])[neg]
            alpha = min(alpha, float(np.min(-tau * gap / d[neg])))
    if hi_mask.any():
        d = dv[hi_mask]
        pos = d > 0
        if pos.any():
            gap = (hi[hi_mask] - v[hi_mask])[pos]
            alpha = min(alpha, float(np.min(tau * gap / d[pos])))
    return alpha


def _max_step_pos(z, dz, mask, tau):
    if not mask.any():
        return 1.0
    d = dz[mask]
    neg = d < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-tau * z[mask][neg] / d[neg])))


class _State:
    pass


def solve(problem, initial_guess=None, options: SolverOptions | None = None) -> NlpSolution:
    """Solve ``problem`` from ``initial_guess`` (default: the problem's own guess).

    Raises
    ------
    MaxIterations, LineSearchFailure, SingularKKT
        Each carries the last iterate as ``exc.solution``.
    """
    opt = options or SolverOptions()
    return _Solver(problem, opt).run(initial_guess)


class _Solver:
    def __init__(self, problem, opt):
        self.pb = problem
        self.opt = opt
        n, m = problem.n, problem.m
        self.n, self.m = n, m
        self.eq = problem.g_lower == problem.g_upper
        self.ineq = ~self.eq
        self.ii = np.nonzero(self.ineq)[0]
        self.xb = _Bounds(problem.x_lower, problem.x_upper, opt.bound_relax)
        self.sb = _Bounds(problem.g_lower[self.ii], problem.g_upper[self.ii], opt.bound_relax)
        self.ge = problem.g_lower[self.eq]
        lay = problem.layout
        glob = list(lay.p_idx) + [c for c in (lay.t0_idx, lay.tf_idx) if c >= 0]
        self.kkt = KktSystem(n, m, problem.hessian_pattern, problem.jacobian_structure(),
                             glob, opt.kernel)
        self.counters = {"rate_jacobian_evals": 0, "rate_hessian_calls": 0, "factorizations": 0,
                         "function_evals": 0, "derivative_evals": 0}
        self.times = []
        self.delta_w_last = 0.0

    # -- evaluation ----------------------------------------------------------------
    def _eval(self, x, derivatives=True):
        pb = self.pb
        if derivatives:
            self.counters["derivative_evals"] += 1
            rate = None
            if pb.rate_block is not None and pb.rate_linear_constant and not self.opt.exploit_linear_rows:
                rate = pb.rate_jacobian_data()
                self.counters["rate_jacobian_evals"] += 1
            return pb.evaluate(x, True, rate_jacobian=rate)
        self.counters["function_evals"] += 1
        return pb.evaluate(x, False)

    def _hessian(self, x, y):
        if self.pb.rate_block is not None and not self.opt.exploit_linear_rows:
            self.counters["rate_hessian_calls"] += 1
        return self.pb.hessian(x, y, 1.0)

    def _resid_c(self, g, s):
        c = np.empty(self.m)
        c[self.eq] = g[self.eq] - self.ge
        c[self.ineq] = g[self.ineq] - s
        return c

    # -- main loop -------------------------------------------------------------------
    def run(self, x0):
        opt, pb = self.opt, self.pb
        n, m = self.n, self.m
        xb, sb = self.xb, self.sb
        x0 = pb.initial_guess() if x0 is None else np.asarray(x0, dtype=float).copy()
        if x0.shape != (n,):
            raise ValueError(f"initial guess has shape {x0.shape}, expected {(n,)}")
        x = xb.push(x0, opt.bound_push, opt.bound_frac)
        ev = self._eval(x)
        s = sb.push(ev.constraints[self.ii], opt.bound_push, opt.bound_frac)
        zl = np.where(xb.has_l, 1.0, 0.0)
        zu = np.where(xb.has_u, 1.0, 0.0)
        vl = np.where(sb.has_l, 1.0, 0.0)
        vu = np.where(sb.has_u, 1.0, 0.0)
        y = self._initial_multipliers(ev, zl, zu, vl, vu)
        mu = opt.mu_init
        tau = max(opt.tau_min, 1.0 - mu)
        nu = 1.0
        status, message = "max_iterations", "iteration limit reached"
        mu_hist = []
        it = 0
        t_eval = 0.0
        for it in range(opt.max_iterations + 1):
            t_start = time.perf_counter()
            err0, parts0 = self._error(ev, x, s, y, zl, zu, vl, vu, 0.0)
            if err0 <= opt.tol:
                status, message = "success", "converged"
                break
            if it == opt.max_iterations:
                break
            # barrier update
            while True:
                err_mu, _ = self._error(ev, x, s, y, zl, zu, vl, vu, mu)
                if err_mu > opt.kappa_eps * mu or mu <= opt.tol / 10:
                    break
                mu = max(opt.tol / 10, min(opt.kappa_mu * mu, mu ** opt.theta_mu))
                tau = max(opt.tau_min, 1.0 - mu)
            mu_hist.append(mu)

            te = time.perf_counter()
            H = self._hessian(x, y)
            t_eval += time.perf_counter() - te
            t_kkt = 0.0

            xl_s, xu_s = xb.slacks(x)
            sl_s, su_s = sb.slacks(s)
            sig_x = np.where(xb.has_l, zl / xl_s, 0.0) + np.where(xb.has_u, zu / xu_s, 0.0)
            sig_s = np.where(sb.has_l, vl / sl_s, 0.0) + np.where(sb.has_u, vu / su_s, 0.0)
            grad_psi_x = ev.gradient - np.where(xb.has_l, mu / xl_s, 0.0) + np.where(xb.has_u, mu / xu_s, 0.0)
            grad_psi_s = -np.where(sb.has_l, mu / sl_s, 0.0) + np.where(sb.has_u, mu / su_s, 0.0)
            J = ev.jacobian
            c = self._resid_c(ev.constraints, s)
            r_x = grad_psi_x + J.T @ y
            r_s = grad_psi_s - y[self.ii]

            tk = time.perf_counter()
            dw = self._factor_with_inertia(H, J, sig_x, sig_s)
            t_kkt += time.perf_counter() - tk
            sig_s_reg = sig_s + dw

            def direction(c_rhs):
                rhs = np.concatenate([-r_x, -c_rhs])
                rhs[n + self.ii] -= r_s / sig_s_reg
                d = self._solve_refined(rhs, H, J, sig_x + dw, sig_s_reg)
                dx, dy = d[:n], d[n:]
                ds = (dy[self.ii] - r_s) / sig_s_reg
                return dx, ds, dy

            tk = time.perf_counter()
            dx, ds, dy = direction(c)
            t_kkt += time.perf_counter() - tk

            # bound multiplier steps
            dzl = np.where(xb.has_l, mu / xl_s - zl - zl / xl_s * dx, 0.0)
            dzu = np.where(xb.has_u, mu / xu_s - zu + zu / xu_s * dx, 0.0)
            dvl = np.where(sb.has_l, mu / sl_s - vl - vl / sl_s * ds, 0.0)
            dvu = np.where(sb.has_u, mu / su_s - vu + vu / su_s * ds, 0.0)

            a_max = min(_max_step(x, dx, xb.has_l, xb.lower, xb.has_u, xb.upper, tau),
                        _max_step(s, ds, sb.has_l, sb.lower, sb.has_u, sb.upper, tau))
            a_z = min(_max_step_pos(zl, dzl, xb.has_l, tau), _max_step_pos(zu, dzu, xb.has_u, tau),
                      _max_step_pos(vl, dvl, sb.has_l, tau), _max_step_pos(vu, dvu, sb.has_u, tau))

            # merit function and penalty update
            c_norm = float(np.abs(c).sum())
            dphi_lin = float(grad_psi_x @ dx + grad_psi_s @ ds)
            curv = float(dx @ (_sym_matvec(H, dx) + sig_x * dx) + ds @ (sig_s * ds))
            if c_norm > 0:
                nu_trial = (dphi_lin + 0.5 * max(curv, 0.0)) / (0.9 * c_norm)
                if nu < nu_trial:
                    nu = max(nu_trial, nu) + 1.0
            dphi = dphi_lin - nu * c_norm
            phi0 = self._merit(ev.objective, x, s, c_norm, mu, nu)

            alpha = a_max
            accepted = False
            soc_tried = False
            trial_ev = None
            for _ in range(opt.max_backtracks):
                xt, st = x + alpha * dx, s + alpha * ds
                te = time.perf_counter()
                try:
                    trial = self._eval(xt, derivatives=False)
                    ok = True
                except Exception:  # non-finite or failing callback: shorten the step
                    ok = False
                t_eval += time.perf_counter() - te
                if ok:
                    ct = self._resid_c(trial.constraints, st)
                    phit = self._merit(trial.objective, xt, st, float(np.abs(ct).sum()), mu, nu)
                    if phit <= phi0 + opt.armijo * alpha * dphi + 1e-14 * abs(phi0):
                        accepted = True
                        trial_ev = trial
                        break
                    if not soc_tried and alpha == a_max and np.abs(ct).sum() >= c_norm:
                        soc_tried = True
                        tk = time.perf_counter()
                        dxs, dss, dys = direction(alpha * c + ct)
                        t_kkt += time.perf_counter() - tk
                        a_soc = min(_max_step(x, dxs, xb.has_l, xb.lower, xb.has_u, xb.upper, tau),
                                    _max_step(s, dss, sb.has_l, sb.lower, sb.has_u, sb.upper, tau))
                        xs_, ss_ = x + a_soc * dxs, s + a_soc * dss
                        try:
                            te = time.perf_counter()
                            trial_s = self._eval(xs_, derivatives=False)
                            t_eval += time.perf_counter() - te
                            cs = self._resid_c(trial_s.constraints, ss_)
                            phis = self._merit(trial_s.objective, xs_, ss_, float(np.abs(cs).sum()), mu, nu)
                            if phis <= phi0 + opt.armijo * alpha * dphi:
                                dx, ds, alpha = dxs, dss, a_soc
                                xt, st = xs_, ss_
                                accepted = True
                                trial_ev = trial_s
                                break
                        except Exception:
                            pass
                alpha *= opt.backtrack
                if alpha < 1e-14:
                    break
            if not accepted:
                sol = self._solution(x, s, y, zl, zu, vl, vu, ev, it, "line_search_failure",
                                     "line search failed", mu_hist)
                raise LineSearchFailure(f"line search failed at iteration {it}", solution=sol)

            x, s = xt, st
            y = y + alpha * dy
            zl = zl + a_z * dzl
            zu = zu + a_z * dzu
            vl = vl + a_z * dvl
            vu = vu + a_z * dvu
            zl, zu, vl, vu = self._safeguard(x, s, zl, zu, vl, vu, mu)
            te = time.perf_counter()
            ev = self._eval(x)
            t_eval += time.perf_counter() - te
            total = time.perf_counter() - t_start
            self.times.append({"eval": t_eval, "kkt": t_kkt, "other": max(total - t_eval - t_kkt, 0.0),
                               "total": total})
            t_eval = 0.0
            if opt.verbose:
                log.info("it %3d f=%.8e err=%.2e mu=%.1e alpha=%.2e dw=%.1e", it, ev.objective, err0,
                         mu, alpha, dw)
        sol = self._solution(x, s, y, zl, zu, vl, vu, ev, it, status, message, mu_hist)
        if status != "success":
            raise MaxIterations(f"no convergence within {opt.max_iterations} iterations", solution=sol)
        return sol

    # -- helpers ---------------------------------------------------------------------
    def _merit(self, f, x, s, c_norm, mu, nu):
        xl_s, xu_s = self.xb.slacks(x)
        sl_s, su_s = self.sb.slacks(s)
        if np.any(xl_s <= 0) or np.any(xu_s <= 0) or np.any(sl_s <= 0) or np.any(su_s <= 0):
            return np.inf
        bar = (np.log(xl_s[self.xb.has_l]).sum() + np.log(xu_s[self.xb.has_u]).sum()
               + np.log(sl_s[self.sb.has_l]).sum() + np.log(su_s[self.sb.has_u]).sum())
        return f - mu * bar + nu * c_norm

    def _error(self, ev, x, s, y, zl, zu, vl, vu, mu):
        stat_x = ev.gradient + ev.jacobian.T @ y - zl + zu
        stat_s = -y[self.ii] - vl + vu
        c = self._resid_c(ev.constraints, s)
        xl_s, xu_s = self.xb.slacks(x)
        sl_s, su_s = self.sb.slacks(s)
        comp = np.concatenate([
            (xl_s * zl - mu)[self.xb.has_l], (xu_s * zu - mu)[self.xb.has_u],
            (sl_s * vl - mu)[self.sb.has_l], (su_s * vu - mu)[self.sb.has_u]])
        smax = self.opt.s_max
        n_z = self.xb.has_l.sum() + self.xb.has_u.sum() + self.sb.has_l.sum() + self.sb.has_u.sum()
        z_sum = np.abs(zl).sum() + np.abs(zu).sum() + np.abs(vl).sum() + np.abs(vu).sum()
        s_d = max(smax, (np.abs(y).sum() + z_sum) / max(1, self.m + n_z)) / smax
        s_c = max(smax, z_sum / max(1, n_z)) / smax
        stat = max(_inf_norm(stat_x), _inf_norm(stat_s))
        feas = _inf_norm(c)
        compl = _inf_norm(comp)
        return max(stat / s_d, feas, compl / s_c), (stat, feas, compl)

    def _initial_multipliers(self, ev, zl, zu, vl, vu):
        n, m = self.n, self.m
        if m == 0:
            return np.zeros(0)
        try:
            w_zero = np.zeros(self.kkt.n_w)
            diag_c = np.full(m, 0.0)
            diag_c[self.ii] = 1.0
            self.kkt.factor(w_zero, ev.jacobian.data, np.ones(n), diag_c + self.opt.delta_c)
            rhs = np.concatenate([-(ev.gradient - zl + zu), np.zeros(m)])
            rhs[n + self.ii] = vl - vu
            y = self.kkt.solve(rhs)[n:]
            if not np.all(np.isfinite(y)) or _inf_norm(y) > 1e3:
                return np.zeros(m)
            return y
        except Exception:
            return np.zeros(m)

    def _factor_with_inertia(self, H, J, sig_x, sig_s):
        opt = self.opt
        n, m = self.n, self.m
        dw = 0.0
        first = True
        diag_c = np.full(m, opt.delta_c)
        for attempt in range(60):
            diag_c_full = diag_c.copy()
            diag_c_full[self.ii] += 1.0 / (sig_s + dw) if len(self.ii) else 0.0
            self.counters["factorizations"] += 1
            n_pos, n_dyn = self.kkt.factor(H.data, J.data, sig_x + dw, diag_c_full)
            if n_pos == n and n_dyn == 0:
                if dw > 0:
                    self.delta_w_last = dw
                self._diag_c = diag_c_full
                return dw
            if first:
                dw = 1e-4 if self.delta_w_last == 0 else max(1e-20, self.delta_w_last / 3)
                first = False
            else:
                dw = dw * (100.0 if self.delta_w_last == 0 else 8.0)
            if dw > 1e40:
                break
        raise SingularKKT("could not correct KKT inertia")

    def _solve_refined(self, rhs, H, J, diag_x, sig_s_reg):
        n = self.n
        d = self.kkt.solve(rhs)
        # true condensed matrix: equality rows without the static regularisation
        diag_c = np.zeros(self.m)
        if len(self.ii):
            diag_c[self.ii] = 1.0 / sig_s_reg
        for _ in range(self.opt.refine_steps):
            dx, dy = d[:n], d[n:]
            r = rhs - np.concatenate([_sym_matvec(H, dx) + diag_x * dx + J.T @ dy, J @ dx - diag_c * dy])
            if _inf_norm(r) <= 1e-14 * max(1.0, _inf_norm(rhs)):
                break
            d = d + self.kkt.solve(r)
        return d

    def _safeguard(self, x, s, zl, zu, vl, vu, mu, kappa=1e10):
        xl_s, xu_s = self.xb.slacks(x)
        sl_s, su_s = self.sb.slacks(s)

        def clip(z, slack, mask):
            lo = mu / (kappa * slack)
            hi = kappa * mu / slack
            return np.where(mask, np.clip(z, lo, hi), 0.0)

        return (clip(zl, xl_s, self.xb.has_l), clip(zu, xu_s, self.xb.has_u),
                clip(vl, sl_s, self.sb.has_l), clip(vu, su_s, self.sb.has_u))

    def _solution(self, x, s, y, zl, zu, vl, vu, ev, it, status, message, mu_hist):
        sol = NlpSolution(x=x.copy(), y=y.copy(), z_lower=zl.copy(), z_upper=zu.copy(), status=status,
                          iterations=it, objective=float(ev.objective),
                          multipliers=self.pb.multipliers_by_partition(y),
                          iteration_times=list(self.times), counters=dict(self.counters),
                          message=message, mu_history=mu_hist)
        sol.kkt = kkt_residuals(self.pb, sol, evaluation=ev)
        return sol


def _inf_norm(v):
    return float(np.max(np.abs(v))) if len(v) else 0.0


def kkt_residuals(problem, solution, evaluation=None):
    """Unscaled ``(stationarity, feasibility, complementarity)`` infinity norms.

    Computed from the problem's own evaluation at the solution's primal
    point; row complementarity uses the sign of each row multiplier to pick
    the active bound.
    """
    ev = evaluation if evaluation is not None else problem.evaluate(solution.x)
    x, y = solution.x, solution.y
    zl, zu = solution.z_lower, solution.z_upper
    stat = _inf_norm(ev.gradient + ev.jacobian.T @ y - zl + zu)
    g = ev.constraints
    gl, gu = problem.g_lower, problem.g_upper
    xl, xu = problem.x_lower, problem.x_upper
    viol = np.concatenate([
        np.maximum(gl - g, 0.0), np.maximum(g - gu, 0.0),
        np.maximum(xl - x, 0.0), np.maximum(x - xu, 0.0)])
    feas = _inf_norm(viol)
    with np.errstate(invalid="ignore"):
        row_gap = np.where(y > 0, gu - g, np.where(y < 0, g - gl, 0.0))
        row_gap = np.where(np.isfinite(row_gap), row_gap, 1.0)
        row_comp = np.where(problem.g_lower == problem.g_upper, 0.0, np.abs(y) * row_gap)
        x_comp = np.concatenate([np.where(np.isfinite(xl), zl * (x - xl), 0.0),
                                 np.where(np.isfinite(xu), zu * (xu - x), 0.0)])
    comp = _inf_norm(np.nan_to_num(np.concatenate([row_comp, x_comp]), nan=np.inf))
    return stat, feas, comp
