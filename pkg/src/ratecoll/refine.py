"""Continuous reconstruction of discrete solutions and h-refinement.

A :class:`Trajectory` rebuilds states and inputs from a converged NLP
solution with the interpolants native to each scheme.  :func:`estimate_error`
re-integrates the dynamics over every interval from the reconstructed left
state and samples constraint violation between grid points;
:func:`solve_with_refinement` repeats solve, estimate and refine until the
tolerances hold or the budget runs out.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .collocation import Mesh, Scheme, barycentric_weights, lagrange_diff_matrix, lgr_points
from .errors import IntegrationFailure, MeshBudgetExceeded, SolverError, UnconvergedSolution
from .ocp import RateMode
from .solver import SolverOptions, solve
from .transcription import transcribe

__all__ = [
    "PiecewisePolynomial",
    "Trajectory",
    "Tolerances",
    "ErrorEstimate",
    "RoundRecord",
    "RefinementResult",
    "interpolate",
    "estimate_error",
    "refine",
    "solve_with_refinement",
]

log = logging.getLogger(__name__)


class PiecewisePolynomial:
    """Per-interval Lagrange interpolants in the local coordinate ``s`` in ``[0, 1]``.

    Parameters
    ----------
    breaks : array_like
        Interval end points in physical time (``K + 1``).
    nodes : sequence of ndarray
        Local node positions of each interval.  Intervals with the same node
        count must share their nodes.
    values : sequence of ndarray
        Values at the nodes, shape ``(n_k, dim)`` per interval.
    """

    def __init__(self, breaks, nodes, values):
        self.breaks = np.asarray(breaks, dtype=float)
        self.length = np.diff(self.breaks)
        self.nodes = [np.asarray(n, dtype=float) for n in nodes]
        self.values = [np.asarray(v, dtype=float) for v in values]
        self.dim = self.values[0].shape[1]
        self._count = np.array([len(n) for n in self.nodes])
        self._slot = np.empty(len(self.nodes), dtype=int)
        self._groups = {}
        for n in np.unique(self._count):
            ks = np.flatnonzero(self._count == n)
            nd = self.nodes[ks[0]]
            self._groups[int(n)] = (nd, barycentric_weights(nd),
                                    np.stack([self.values[k] for k in ks]))
            self._slot[ks] = np.arange(len(ks))

    @property
    def n_intervals(self):
        return len(self.length)

    def locate(self, t):
        k = np.searchsorted(self.breaks, t, side="right") - 1
        return np.clip(k, 0, self.n_intervals - 1)

    def __call__(self, t, interval=None):
        """Evaluate at times ``t``; ``interval`` selects the piece explicitly."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = self.locate(t) if interval is None else np.broadcast_to(interval, t.shape)
        s = (t - self.breaks[k]) / self.length[k]
        out = np.empty((len(t), self.dim))
        for n, (nd, w, vals) in self._groups.items():
            sel = self._count[k] == n
            if not sel.any():
                continue
            diff = s[sel, None] - nd[None, :]
            # snap to a node when 1/diff would overflow
            exact = np.abs(diff) < 1e-14
            diff[exact] = 1.0
            terms = w[None, :] / diff
            hit = exact.any(axis=1)
            terms[hit] = exact[hit]
            v = vals[self._slot[k[sel]]]
            out[sel] = np.einsum("mn,mnd->md", terms, v) / terms.sum(axis=1)[:, None]
        return out

    def derivative(self):
        """Time derivative, exact for each piece."""
        vals = [lagrange_diff_matrix(nd) @ v / h
                for nd, v, h in zip(self.nodes, self.values, self.length)]
        return PiecewisePolynomial(self.breaks, self.nodes, vals)


def _hermite_cubic_values(x0, x1, f0, f1, h, s):
    """Cubic Hermite interpolant of ``(x0, f0)``, ``(x1, f1)`` sampled at ``s``."""
    s = np.asarray(s)[:, None]
    h00 = 2 * s ** 3 - 3 * s ** 2 + 1
    h10 = s ** 3 - 2 * s ** 2 + s
    h01 = -2 * s ** 3 + 3 * s ** 2
    h11 = s ** 3 - s ** 2
    return h00 * x0 + h10 * h * f0 + h01 * x1 + h11 * h * f1


_CUBIC_NODES = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Continuous-time reconstruction of a discrete solution.

    States use linear pieces (trapezoidal), cubic Hermite pieces through the
    mesh-node values and slopes (Hermite-Simpson) or the degree-``N``
    Lagrange polynomial through the ``N`` Radau nodes and the interval end
    (LGR).  Inputs use linear, quadratic and degree ``N - 1`` pieces.

    Attributes
    ----------
    spec : ValidatedSpec
        The transcribed (possibly rewritten) problem the solution belongs to.
    grid_t : ndarray
        Physical times of every grid point.
    X, U : ndarray
        Discrete states at grid points and inputs at collocation points.
    """

    spec: object
    mesh: Mesh
    t0: float
    tf: float
    p: np.ndarray
    grid_t: np.ndarray
    colloc_t: np.ndarray
    X: np.ndarray
    U: np.ndarray
    states: PiecewisePolynomial
    inputs: PiecewisePolynomial
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def scheme(self):
        return self.mesh.scheme

    @property
    def breaks(self):
        return self.states.breaks

    @property
    def nx(self):
        return self.X.shape[1]

    @property
    def nu(self):
        return self.U.shape[1]

    def state(self, t, interval=None):
        return self.states(t, interval)

    def input(self, t, interval=None):
        return self.inputs(t, interval)

    def state_rate(self, t, interval=None):
        if "dx" not in self._cache:
            self._cache["dx"] = self.states.derivative()
        return self._cache["dx"](t, interval)

    def input_rate(self, t, interval=None):
        if "du" not in self._cache:
            self._cache["du"] = self.inputs.derivative()
        return self._cache["du"](t, interval)

    def original_input(self, t, j=0, interval=None):
        """Input ``j`` of the problem before any add-state rewrite."""
        promoted = dict(self.spec.promoted)
        if j in promoted:
            return self.state(t, interval)[:, promoted[j]]
        return self.input(t, interval)[:, j]

    def original_input_rate(self, t, j=0, interval=None):
        """Rate of original input ``j``: the rate input itself after an add-state rewrite."""
        if j in dict(self.spec.promoted):
            return self.input(t, interval)[:, j]
        return self.input_rate(t, interval)[:, j]

    def sample_times(self, per_interval=10):
        """Uniform samples in every interval (end points included) with interval ids."""
        s = np.linspace(0.0, 1.0, per_interval)
        b = self.breaks
        t = (b[:-1, None] + s[None, :] * np.diff(b)[:, None]).ravel()
        k = np.repeat(np.arange(len(b) - 1), per_interval)
        return t, k


def interpolate(problem, solution, allow_unconverged=False) -> Trajectory:
    """Build the :class:`Trajectory` of ``solution`` for ``problem``.

    Raises
    ------
    UnconvergedSolution
        When the solve did not converge (unless ``allow_unconverged``).
    """
    if not allow_unconverged and not solution.success:
        raise UnconvergedSolution(f"solution status is {solution.status!r}")
    mesh = problem.mesh
    vs = problem.spec
    grid = mesh.grid
    X, U, p, t0, tf = problem.unpack(solution.x)
    span = tf - t0
    grid_t = t0 + grid.tau * span
    colloc_t = grid_t[grid.colloc]
    breaks = t0 + mesh.breakpoints * span
    h = np.diff(breaks)
    starts = grid.starts
    xs_nodes, xs_vals, us_nodes, us_vals = [], [], [], []
    if mesh.scheme is Scheme.TRAPEZOIDAL:
        for k in range(mesh.n_intervals):
            xs_nodes.append([0.0, 1.0])
            xs_vals.append(X[k:k + 2])
            us_nodes.append([0.0, 1.0])
            us_vals.append(U[k:k + 2])
    elif mesh.scheme is Scheme.HERMITE_SIMPSON:
        node_pts = starts
        F = vs.dynamics.value(X[node_pts], U[node_pts], grid_t[node_pts], p)
        for k in range(mesh.n_intervals):
            s = starts[k]
            xs_nodes.append(_CUBIC_NODES)
            xs_vals.append(_hermite_cubic_values(X[s], X[s + 2], F[k], F[k + 1], h[k],
                                                 _CUBIC_NODES))
            us_nodes.append([0.0, 0.5, 1.0])
            us_vals.append(U[s:s + 3])
    else:
        local = {}
        for k in range(mesh.n_intervals):
            n = mesh.orders[k]
            if n not in local:
                local[n] = (lgr_points(n)[0] + 1.0) / 2.0
            s = starts[k]
            xs_nodes.append(np.concatenate([local[n], [1.0]]))
            xs_vals.append(X[s:s + n + 1])
            us_nodes.append(local[n])
            us_vals.append(U[s:s + n])
    return Trajectory(spec=vs, mesh=mesh, t0=t0, tf=tf, p=np.asarray(p, dtype=float),
                      grid_t=grid_t, colloc_t=colloc_t, X=X, U=U,
                      states=PiecewisePolynomial(breaks, xs_nodes, xs_vals),
                      inputs=PiecewisePolynomial(breaks, us_nodes, us_vals))


# ---------------------------------------------------------------------------
# error estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tolerances:
    """Refinement tolerances and budget.

    ``eta`` is the absolute local state error, a scalar or one value per
    state; states added by the add-state rewrite use the smallest given
    value.  ``eps`` bounds the sampled constraint violation.
    """

    eta: object = 1e-4
    eps: float = 1e-5
    max_rounds: int = 8
    max_mesh_size: int = 4000
    lgr_max_order: int = 8

    def __post_init__(self):
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if eta.size == 0 or np.any(eta <= 0) or not self.eps > 0:
            raise ValueError("tolerances must be positive")
        if self.max_rounds < 1 or self.max_mesh_size < 1 or self.lgr_max_order < 2:
            raise ValueError("refinement budget must be positive")

    def eta_for(self, nx):
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if eta.size == 1:
            return np.full(nx, eta[0])
        if eta.size >= nx:
            return eta[:nx]
        return np.concatenate([eta, np.full(nx - eta.size, eta.min())])


@dataclass(frozen=True, eq=False)
class ErrorEstimate:
    """Local errors of a trajectory.

    Attributes
    ----------
    eta : ndarray
        ``(K, nx)`` max deviation from the re-integrated dynamics.
    eps_path, eps_rate : ndarray
        ``(K,)`` max path-constraint and rate-bound violation per interval.
    t_samples, eps_samples : ndarray
        Sample times and the pointwise violation (path and rate combined).
    """

    eta: np.ndarray
    eps_path: np.ndarray
    eps_rate: np.ndarray
    t_samples: np.ndarray
    eps_samples: np.ndarray

    @property
    def eps(self):
        return np.maximum(self.eps_path, self.eps_rate)

    @property
    def max_eta(self):
        return self.eta.max(axis=0)

    @property
    def max_eps(self):
        return float(self.eps.max()) if len(self.eps) else 0.0

    def violating(self, tol: Tolerances):
        """Boolean mask of intervals breaking either tolerance."""
        eta_tol = tol.eta_for(self.eta.shape[1])
        return np.any(self.eta > eta_tol[None, :], axis=1) | (self.eps > tol.eps)

    def compliant(self, tol: Tolerances):
        return not self.violating(tol).any()


def _rate_targets(vs):
    """``(kind, index, lo, hi)`` for every rate-bounded variable of ``vs``."""
    out = [("state", j, lo, hi) for j, lo, hi in vs.state_rate]
    out += [("input", j, lo, hi) for j, lo, hi in vs.input_rate]
    for slot, state in vs.promoted:
        out.append(("state", state, vs.u_lb[slot], vs.u_ub[slot]))
    return out


def _integrate(traj, atol, samples):
    """Re-integrate every interval at once from its reconstructed left state."""
    vs = traj.spec
    nx = traj.nx
    b = traj.breaks
    left, h = b[:-1], np.diff(b)
    K = len(h)
    ks = np.arange(K)
    x_left = traj.state(left, ks)

    def rhs(s, y):
        t = left + s * h
        u = traj.input(t, ks)
        f = vs.dynamics.value(y.reshape(K, nx), u, t, traj.p)
        return (f * h[:, None]).ravel()

    sol = solve_ivp(rhs, (0.0, 1.0), x_left.ravel(), method="DOP853", t_eval=samples,
                    atol=atol, rtol=max(atol, 1e-12))
    if sol.status != 0:
        raise IntegrationFailure(f"re-integration failed: {sol.message}")
    return sol.y.reshape(K, nx, len(samples)).transpose(0, 2, 1)  # (K, S, nx)


def estimate_error(traj: Trajectory, tol: Tolerances | None = None, samples=10,
                   integration_atol=None) -> ErrorEstimate:
    """Local state error and constraint violation of ``traj``.

    The dynamics are integrated over each interval from the interpolated
    left state with an adaptive Runge-Kutta method at absolute tolerance
    ``0.01 * min(eta_tol)``; ``eta`` is the largest deviation from the
    interpolant over ``samples`` uniform points.  Constraint violation is
    sampled at the same points plus the interior grid points and includes
    the rate of the interpolants for rate-bounded variables.
    """
    tol = tol or Tolerances()
    vs = traj.spec
    if integration_atol is None:
        integration_atol = 1e-2 * float(np.min(tol.eta_for(traj.nx)))
    s = np.linspace(0.0, 1.0, samples)
    b = traj.breaks
    h = np.diff(b)
    K = len(h)
    ref = _integrate(traj, integration_atol, s)
    t_uni = b[:-1, None] + s[None, :] * h[:, None]
    k_uni = np.repeat(np.arange(K), samples)
    x_uni = traj.state(t_uni.ravel(), k_uni).reshape(K, samples, traj.nx)
    eta = np.abs(ref - x_uni).max(axis=1)

    # violation samples: uniform points plus interior grid points
    grid_k = traj.mesh.grid.interval
    t_s = np.concatenate([t_uni.ravel(), traj.grid_t])
    k_s = np.concatenate([k_uni, grid_k])
    viol_path = np.zeros(len(t_s))
    if vs.path is not None:
        xs, us = traj.state(t_s, k_s), traj.input(t_s, k_s)
        c = vs.path.value(xs, us, t_s, traj.p)
        lb, ub = np.asarray(vs.path_lb), np.asarray(vs.path_ub)
        with np.errstate(invalid="ignore"):
            v = np.maximum(np.maximum(lb[None, :] - c, c - ub[None, :]), 0.0)
        viol_path = np.nan_to_num(v, nan=np.inf).max(axis=1)
    viol_rate = np.zeros(len(t_s))
    targets = _rate_targets(vs)
    if targets:
        dx = traj.state_rate(t_s, k_s)
        du = traj.input_rate(t_s, k_s) if vs.input_rate else None
        for kind, j, lo, hi in targets:
            r = dx[:, j] if kind == "state" else du[:, j]
            viol_rate = np.maximum(viol_rate, np.maximum(np.maximum(lo - r, r - hi), 0.0))
    eps_path = np.zeros(K)
    eps_rate = np.zeros(K)
    np.maximum.at(eps_path, k_s, viol_path)
    np.maximum.at(eps_rate, k_s, viol_rate)
    return ErrorEstimate(eta=eta, eps_path=eps_path, eps_rate=eps_rate, t_samples=t_s,
                         eps_samples=np.maximum(viol_path, viol_rate))


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def refine(mesh: Mesh, errors: ErrorEstimate, tol: Tolerances) -> Mesh:
    """Bisect (or raise the LGR order of) every interval that breaks a tolerance.

    Compliant intervals are kept as they are; when nothing violates, ``mesh``
    itself is returned.

    Raises
    ------
    MeshBudgetExceeded
        If the refined mesh has more than ``tol.max_mesh_size`` collocation points.
    """
    bad = errors.violating(tol)
    if len(bad) != mesh.n_intervals:
        raise ValueError("error estimate does not match the mesh")
    if not bad.any():
        return mesh
    fractions, orders = [], []
    for h, n, flag in zip(mesh.fractions, mesh.orders, bad):
        if not flag:
            fractions.append(h)
            orders.append(n)
        elif mesh.scheme is Scheme.LGR and n < tol.lgr_max_order:
            fractions.append(h)
            orders.append(n + 1)
        else:
            fractions += [h / 2, h / 2]
            orders += [n, n]
    total = sum(fractions)
    new = Mesh(mesh.scheme, tuple(f / total for f in fractions), tuple(orders))
    if new.size() > tol.max_mesh_size:
        raise MeshBudgetExceeded(
            f"refined mesh needs {new.size()} collocation points (budget {tol.max_mesh_size})")
    return new


@dataclass
class RoundRecord:
    """One refinement round, serialisable with :func:`dataclasses.asdict`."""

    round: int
    n_intervals: int
    n_collocation: int
    n_variables: int
    n_constraints: int
    iterations: int
    solve_time: float
    objective: float
    max_eta: list
    max_eps: float
    compliant: bool
    n_flagged: int


@dataclass(eq=False)
class RefinementResult:
    solution: object
    trajectory: Trajectory
    problem: object
    errors: ErrorEstimate
    history: list

    def history_dicts(self):
        return [asdict(r) for r in self.history]


def _warm_start(problem, traj: Trajectory):
    """Sample ``traj`` on the grid of ``problem``."""
    grid = problem.mesh.grid
    span = traj.tf - traj.t0
    t = traj.t0 + grid.tau * span
    X = traj.state(t)
    tc = t[grid.colloc]
    # collocation points on a break belong to the interval to their right
    U = traj.input(tc)
    return problem.pack(X, U, traj.p, traj.t0, traj.tf)


def solve_with_refinement(spec, mesh: Mesh, tol: Tolerances | None = None,
                          mode=RateMode.ON_MESH, options: SolverOptions | None = None,
                          include_lgr_endpoint=False, samples=10) -> RefinementResult:
    """Solve, estimate and refine until ``tol`` holds.

    Round 0 starts from the problem's straight-line guess; later rounds
    start from the previous trajectory sampled on the new grid.

    Raises
    ------
    MeshBudgetExceeded
        When ``tol.max_rounds`` rounds pass without compliance or the mesh
        outgrows its budget; ``history`` holds the completed rounds and
        ``result`` the last (non-compliant) round.
    SolverError
        From the failing round, with ``round`` and ``history`` attached.
    """
    tol = tol or Tolerances()
    options = options or SolverOptions()
    history = []
    traj = None
    for rnd in range(tol.max_rounds):
        problem = transcribe(spec, mesh, mode, include_lgr_endpoint=include_lgr_endpoint)
        guess = problem.initial_guess() if traj is None else _warm_start(problem, traj)
        start = time.perf_counter()
        try:
            solution = solve(problem, guess, options)
        except SolverError as exc:
            err = type(exc)(f"round {rnd}: {exc}", solution=exc.solution)
            err.round = rnd
            err.history = history
            raise err from exc
        elapsed = time.perf_counter() - start
        traj = interpolate(problem, solution)
        errors = estimate_error(traj, tol, samples=samples)
        flagged = errors.violating(tol)
        history.append(RoundRecord(
            round=rnd, n_intervals=mesh.n_intervals, n_collocation=mesh.size(),
            n_variables=problem.n, n_constraints=problem.m, iterations=solution.iterations,
            solve_time=elapsed, objective=solution.objective,
            max_eta=errors.max_eta.tolist(), max_eps=errors.max_eps,
            compliant=not flagged.any(), n_flagged=int(flagged.sum())))
        log.info("round %d: K=%d iterations=%d max eta=%.3g max eps=%.3g flagged=%d", rnd,
                 mesh.n_intervals, solution.iterations, errors.max_eta.max(), errors.max_eps,
                 flagged.sum())
        result = RefinementResult(solution, traj, problem, errors, history)
        if not flagged.any():
            return result
        try:
            mesh = refine(mesh, errors, tol)
        except MeshBudgetExceeded as exc:
            err = MeshBudgetExceeded(str(exc), history=history)
            err.result = result
            raise err from None
    err = MeshBudgetExceeded(f"tolerances not met after {tol.max_rounds} rounds", history=history)
    err.result = result
    raise err
