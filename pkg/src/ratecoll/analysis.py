"""Singular-arc diagnostics, regularisation sweeps and cross-mode benchmarks."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .collocation import Mesh, Scheme, lagrange_eval, lgr_points
from .errors import EmptyWindow, MissingMultipliers, NotAddStateMode, RatecollError
from .ocp import RateMode, apply_regularization, augment_add_state
from .refine import Trajectory, interpolate
from .solver import SolverOptions, solve
from .transcription import transcribe

__all__ = [
    "Costates",
    "Window",
    "ArcReport",
    "estimate_costates",
    "switching_report",
    "singular_windows",
    "inactive_rate_windows",
    "singular_arc_deviation",
    "total_variation",
    "interpolant_tv",
    "rate_samples",
    "BenchCell",
    "BenchReport",
    "benchmark",
    "SweepReport",
    "dense_reference",
    "regularization_sweep",
]

log = logging.getLogger(__name__)


def total_variation(values):
    """Discrete total variation ``sum |v[i+1] - v[i]|``."""
    v = np.asarray(values, dtype=float)
    return float(np.abs(np.diff(v)).sum()) if v.size > 1 else 0.0


# ---------------------------------------------------------------------------
# costates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Costates:
    """Costate estimates ``lam`` (``(P, nx)``) at the grid times ``t``."""

    t: np.ndarray
    lam: np.ndarray


def _extrapolate_ends(tm, vals, t_nodes):
    """Linear interpolation of interval values to nodes, extrapolating at the ends."""
    if len(tm) == 1:
        return np.repeat(vals, len(t_nodes), axis=0)
    out = np.empty((len(t_nodes), vals.shape[1]))
    for j in range(vals.shape[1]):
        out[:, j] = np.interp(t_nodes, tm, vals[:, j])
    for idx, (a, b) in ((0, (0, 1)), (-1, (-2, -1))):
        slope = (vals[b] - vals[a]) / (tm[b] - tm[a])
        out[idx] = vals[a] + slope * (t_nodes[idx] - tm[a])
    return out


def estimate_costates(problem, solution) -> Costates:
    """Costates from the defect multipliers.

    With the Lagrangian ``f + y^T g`` and defects written as integrated
    residuals ``x_{k+1} - x_k - int f``, the multiplier of an h-scheme defect
    row is minus the costate, so no weight scaling is needed.  Trapezoidal
    interval values sit at interval midpoints and are interpolated to the
    nodes.  Hermite-Simpson takes ``-y_S`` at the midpoint and
    ``-y_S -+ 3/4 y_H`` at the left and right node (``y_H`` is a first-order
    estimate of the costate slope times two thirds of the interval length),
    averaging the two values at shared nodes.  LGR uses the Radau mapping
    ``lam_i = -y_i / w_i`` with the reference-interval weights and
    extrapolates to the final point.  The sign makes ``lam' = -dH/dx``.

    Raises
    ------
    MissingMultipliers
        If the solution carries no defect multipliers.
    """
    y = None if solution.multipliers is None else solution.multipliers.get("defect")
    if y is None or len(y) == 0:
        raise MissingMultipliers("solution has no defect multipliers")
    mesh = problem.mesh
    grid = mesh.grid
    nx = problem.spec.nx
    Y = np.asarray(y, dtype=float).reshape(-1, nx)
    _, _, _, t0, tf = problem.unpack(solution.x)
    t = t0 + grid.tau * (tf - t0)
    b = t0 + mesh.breakpoints * (tf - t0)
    K = mesh.n_intervals
    if mesh.scheme is Scheme.TRAPEZOIDAL:
        tm = 0.5 * (b[:-1] + b[1:])
        lam = _extrapolate_ends(tm, -Y, t)
    elif mesh.scheme is Scheme.HERMITE_SIMPSON:
        ys, yh = Y[0::2], Y[1::2]
        lam = np.empty((grid.n_points, nx))
        lam[1::2] = -ys
        left = -ys - 0.75 * yh
        right = -ys + 0.75 * yh
        nodes = np.empty((K + 1, nx))
        nodes[0] = left[0]
        nodes[-1] = right[-1]
        nodes[1:-1] = 0.5 * (right[:-1] + left[1:])
        lam[0::2] = nodes
    else:
        h = np.asarray(mesh.fractions)
        w_ref = grid.weights * 2.0 / h[grid.interval[grid.colloc]]
        lam_c = -Y / w_ref[:, None]
        lam = np.empty((grid.n_points, nx))
        lam[grid.colloc] = lam_c
        s = grid.starts[K - 1]
        nodes, _ = lgr_points(mesh.orders[-1])
        lam[-1] = lagrange_eval(nodes, lam_c[s:], [1.0])[0]
    return Costates(t=t, lam=lam)


# ---------------------------------------------------------------------------
# switching function report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    """A run of consecutive grid points ``start .. stop - 1``."""

    t_start: float
    t_end: float
    start: int
    stop: int

    @property
    def n_points(self):
        return self.stop - self.start

    def contains(self, t):
        t = np.asarray(t)
        return (t >= self.t_start) & (t <= self.t_end)


def singular_windows(flags, t, min_points=2):
    """Maximal runs of ``True`` in ``flags`` with at least ``min_points`` entries."""
    flags = np.asarray(flags, dtype=bool)
    out = []
    i, n = 0, len(flags)
    while i < n:
        if flags[i]:
            j = i
            while j < n and flags[j]:
                j += 1
            if j - i >= min_points:
                out.append(Window(float(t[i]), float(t[j - 1]), i, j))
            i = j
        else:
            i += 1
    return out


UPPER, LOWER, SINGULAR = "upper", "lower", "singular"


@dataclass
class ArcReport:
    """Switching-function classification of the add-state rate inputs.

    For a rate input ``nu`` entering the Hamiltonian as ``lam_u * nu`` the
    minimising value is the upper bound where ``lam_u < 0``, the lower bound
    where ``lam_u > 0`` and undetermined (singular) where ``lam_u`` vanishes.
    """

    t: np.ndarray
    costates: np.ndarray
    switching: dict
    classification: dict
    band: dict
    windows: dict
    tv: dict
    tv_interpolant: dict
    n_switches: dict

    def to_dict(self):
        return {
            "t": self.t.tolist(),
            "inputs": {
                name: {
                    "band": self.band[name],
                    "switching": self.switching[name].tolist(),
                    "classification": list(self.classification[name]),
                    "n_switches": self.n_switches[name],
                    "windows": [asdict(w) for w in self.windows[name]],
                    "tv": self.tv[name],
                    "tv_interpolant": self.tv_interpolant[name],
                }
                for name in self.switching
            },
        }


def _count_switches(labels):
    bangs = [c for c in labels if c != SINGULAR]
    return int(sum(a != b for a, b in zip(bangs, bangs[1:])))


def rate_samples(traj: Trajectory, j=0):
    """Rate of original input ``j`` at the collocation times.

    For an add-state solution this is the rate input itself; otherwise the
    derivative of the input interpolant, taken from the interval to the
    right of a mesh node.
    """
    grid = traj.mesh.grid
    return traj.original_input_rate(traj.colloc_t, j, grid.interval[grid.colloc])


def interpolant_tv(traj: Trajectory, window=None, j=0, samples=21):
    """Total variation of the interpolated rate of input ``j``, sampled densely per interval."""
    t, k = traj.sample_times(samples)
    r = traj.original_input_rate(t, j, k)
    keep = np.ones(len(t), bool) if window is None else window.contains(t)
    return total_variation(r[keep])


def switching_report(problem, solution, band=None, traj=None) -> ArcReport:
    """Classify every grid point by the sign of each rate input's switching function.

    Parameters
    ----------
    band : float, optional
        Zero band for the singular class; defaults to ``1e-3 * max |lam_u|``.

    Raises
    ------
    NotAddStateMode
        If ``problem`` has no add-state rate inputs.
    """
    vs = problem.spec
    if not vs.promoted:
        raise NotAddStateMode("switching analysis needs an add-state solution")
    cs = estimate_costates(problem, solution)
    traj = traj or interpolate(problem, solution, allow_unconverged=True)
    tc = traj.colloc_t
    out = {k: {} for k in ("switching", "classification", "band", "windows", "tv", "tvi", "ns")}
    for slot, state in vs.promoted:
        name = vs.input_names[slot]
        lam_u = cs.lam[:, state]
        bnd = 1e-3 * float(np.max(np.abs(lam_u))) if band is None else float(band)
        labels = np.where(lam_u > bnd, LOWER, np.where(lam_u < -bnd, UPPER, SINGULAR))
        wins = singular_windows(labels == SINGULAR, cs.t)
        nu = traj.U[:, slot]
        tv = [total_variation(nu[w.contains(tc)]) for w in wins]
        tvi = [interpolant_tv(traj, w, slot) for w in wins]
        for key, val in (("switching", lam_u), ("classification", labels), ("band", bnd),
                         ("windows", wins), ("tv", tv), ("tvi", tvi),
                         ("ns", _count_switches(labels))):
            out[key][name] = val
    return ArcReport(t=cs.t, costates=cs.lam, switching=out["switching"],
                     classification=out["classification"], band=out["band"],
                     windows=out["windows"], tv=out["tv"], tv_interpolant=out["tvi"],
                     n_switches=out["ns"])


def inactive_rate_windows(problem, solution, target=0, band=None, min_points=2):
    """Windows where the on-mesh rate rows of ``target`` are inactive.

    Rows whose multiplier magnitude stays within ``band`` (default
    ``1e-3`` of the largest) leave the rate free; for a rate-limited
    singular problem these runs are the singular arcs.
    """
    blk = problem.rate_block
    if blk is None:
        raise NotAddStateMode("problem has no on-mesh rate rows")
    y = np.asarray(solution.multipliers["rate_linear"], dtype=float)
    rows = [r for r, prov in enumerate(blk.provenance) if prov[2] == target]
    if not rows:
        raise ValueError(f"no rate rows for target {target}")
    ya = np.abs(y[rows])
    bnd = 1e-3 * float(ya.max()) if band is None else float(band)
    P = problem.mesh.grid.n_points
    active = np.zeros(P, dtype=bool)
    covered = np.zeros(P, dtype=bool)
    for r, v in zip(rows, ya):
        pt = blk.provenance[r][1]
        covered[pt] = True
        active[pt] |= v > bnd
    _, _, _, t0, tf = problem.unpack(solution.x)
    t = t0 + problem.mesh.grid.tau * (tf - t0)
    # points without rows inherit their predecessor's state
    free = ~active
    for i in range(1, P):
        if not covered[i]:
            free[i] = free[i - 1]
    return singular_windows(free, t, min_points=min_points)


def singular_arc_deviation(traj: Trajectory, window, arc=None, samples=10, junction_margin=1):
    """Largest violation of a singular-arc condition over ``window``.

    ``arc(traj, t, k)`` returns the residual of the condition at times
    ``t`` in intervals ``k``; the default is the regulator condition that
    the rate of input 0 equals state 0.  Sampled at ``samples`` points in
    every mesh interval inside the window.  The optimal rate jumps at a
    bang-singular junction, which a discretisation can only resolve to
    within an interval, so ``junction_margin`` intervals are dropped at each
    window end that is not an end of the horizon.

    Raises
    ------
    EmptyWindow
        If ``window`` is missing or no interval remains inside it.
    """
    if window is None or window.t_end <= window.t_start:
        raise EmptyWindow("singular window is empty")
    if arc is None:
        def arc(tr, t, k):
            return tr.original_input_rate(t, 0, k) - tr.state(t, k)[:, 0]
    b = traj.breaks
    tol = 1e-12 * max(1.0, abs(b[-1]))
    inside = np.flatnonzero((b[:-1] >= window.t_start - tol) & (b[1:] <= window.t_end + tol))
    if len(inside) and window.t_start > b[0] + tol:
        inside = inside[junction_margin:]
    if len(inside) and window.t_end < b[-1] - tol:
        inside = inside[:len(inside) - junction_margin]
    if not len(inside):
        raise EmptyWindow("no mesh interval lies inside the window")
    t, k = traj.sample_times(samples)
    keep = np.isin(k, inside)
    return float(np.max(np.abs(arc(traj, t[keep], k[keep]))))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

PHASES = ("eval", "kkt", "other", "total")


@dataclass
class BenchCell:
    """Timing of one (mode, mesh) pair over all repeats."""

    mode: str
    scheme: str
    n_nodes: int
    n_collocation: int
    n_variables: int = 0
    n_constraints: int = 0
    jacobian_nnz: int = 0
    hessian_nnz: int = 0
    iterations: int = 0
    per_iteration: dict = field(default_factory=dict)  # phase -> {"mean", "min"}
    solve_time: dict = field(default_factory=dict)
    objective: float = float("nan")
    status: str = "not run"
    error: str = ""

    @property
    def ok(self):
        return self.status == "success"


@dataclass
class BenchReport:
    problem: str
    repeats: int
    config_hash: str
    config: dict
    cells: list

    def cell(self, mode, n_nodes):
        for c in self.cells:
            if c.mode == mode and c.n_nodes == n_nodes:
                return c
        raise KeyError((mode, n_nodes))

    def reduction(self, mode, baseline, n_nodes, phase="total"):
        """Relative per-iteration time saving of ``mode`` over ``baseline``."""
        a = self.cell(mode, n_nodes).per_iteration[phase]["mean"]
        b = self.cell(baseline, n_nodes).per_iteration[phase]["mean"]
        return 1.0 - a / b

    def to_dict(self):
        return {"problem": self.problem, "repeats": self.repeats,
                "config_hash": self.config_hash, "config": self.config,
                "cells": [asdict(c) for c in self.cells]}

    def table(self):
        head = f"{'mode':<10}{'nodes':>7}{'n':>8}{'m':>8}{'iter':>6}" \
               f"{'ms/iter':>10}{'min':>9}{'kkt ms':>9}{'objective':>14}  status"
        lines = [head, "-" * len(head)]
        for c in self.cells:
            if c.per_iteration:
                pt = c.per_iteration["total"]
                timing = f"{pt['mean'] * 1e3:>10.3f}{pt['min'] * 1e3:>9.3f}" \
                         f"{c.per_iteration['kkt']['mean'] * 1e3:>9.3f}"
            else:
                timing = f"{'-':>10}{'-':>9}{'-':>9}"
            lines.append(f"{c.mode:<10}{c.n_nodes:>7}{c.n_variables:>8}{c.n_constraints:>8}"
                         f"{c.iterations:>6}{timing}{c.objective:>14.8g}  {c.status}")
        return "\n".join(lines)


def _config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _as_mesh(m, scheme, order):
    return m if isinstance(m, Mesh) else Mesh.uniform(scheme, int(m), order)


def benchmark(spec, modes, meshes, repeats=1, options: SolverOptions | None = None,
              scheme="hs", order=4) -> BenchReport:
    """Time every (mode, mesh) pair from the same cold start.

    Only solver iterations are timed; transcription and reporting are not.
    Solver failures are recorded in their cell.  ``meshes`` holds
    :class:`Mesh` objects or node counts for uniform ``scheme`` meshes.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    options = options or SolverOptions()
    meshes = [_as_mesh(m, scheme, order) for m in meshes]
    modes = [RateMode.parse(m) if isinstance(m, str) else m for m in modes]
    config = {
        "problem": spec.name,
        "meshes": [{"scheme": m.scheme.value, "fractions": list(m.fractions),
                    "orders": list(m.orders)} for m in meshes],
        "options": asdict(options),
        "guess": [list(kv) for kv in spec.guess],
        "repeats": repeats,
    }
    cells = []
    for mesh in meshes:
        for mode in modes:
            cell = BenchCell(mode=mode.value, scheme=mesh.scheme.value,
                             n_nodes=mesh.n_nodes, n_collocation=mesh.size())
            cells.append(cell)
            try:
                problem = transcribe(spec, mesh, mode)
            except RatecollError as exc:
                cell.status, cell.error = "error", f"{type(exc).__name__}: {exc}"
                continue
            cell.n_variables, cell.n_constraints = problem.n, problem.m
            cell.jacobian_nnz = int(problem.jacobian_structure().nnz)
            cell.hessian_nnz = int(problem.hessian_pattern.nnz)
            guess = problem.initial_guess()
            per_rep = {ph: [] for ph in PHASES}
            totals = []
            try:
                for _ in range(repeats):
                    start = time.perf_counter()
                    sol = solve(problem, guess, options)
                    totals.append(time.perf_counter() - start)
                    for ph in PHASES:
                        per_rep[ph].append(sol.mean_iteration_time(ph))
            except RatecollError as exc:
                cell.status, cell.error = "error", f"{type(exc).__name__}: {exc}"
                continue
            cell.iterations = sol.iterations
            cell.objective = float(sol.objective)
            cell.status = sol.status
            cell.per_iteration = {ph: {"mean": float(np.mean(v)), "min": float(np.min(v))}
                                  for ph, v in per_rep.items()}
            cell.solve_time = {"mean": float(np.mean(totals)), "min": float(np.min(totals))}
            log.info("%s %d nodes: %d iterations, %.3f ms/iter", cell.mode, cell.n_nodes,
                     cell.iterations, 1e3 * cell.per_iteration["total"]["mean"])
    return BenchReport(problem=spec.name, repeats=repeats, config_hash=_config_hash(config),
                       config=config, cells=cells)


# ---------------------------------------------------------------------------
# regularisation sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    problem: str
    norm: str
    n_nodes: int
    scheme: str
    rows: list
    baseline: dict

    def to_dict(self):
        return asdict(self)

    def table(self):
        lines = [f"{'rho':>10}{'|rate - ref|':>15}{'TV':>12}{'objective':>14}{'base obj':>14}"]
        for r in self.rows:
            lines.append(f"{r['rho']:>10.3g}{r['rate_error']:>15.6g}{r['tv']:>12.6g}"
                         f"{r['objective']:>14.8g}{r['base_objective']:>14.8g}")
        b = self.baseline
        lines.append(f"{'on-mesh':>10}{b['rate_error']:>15.6g}{b['tv']:>12.6g}"
                     f"{b['objective']:>14.8g}{b['objective']:>14.8g}")
        return "\n".join(lines)


def _rate_error(traj, reference, j=0, points=10):
    """``L2`` distance between the rate of input ``j`` and the reference rate.

    Integrated with ``points``-point Gauss-Legendre quadrature on every
    interval of the solve mesh, so a rate jump shared by both trajectories
    contributes only through its displacement.
    """
    s, w = np.polynomial.legendre.leggauss(points)
    b = traj.breaks
    h = np.diff(b)
    t = (b[:-1, None] + 0.5 * (s[None, :] + 1.0) * h[:, None]).ravel()
    k = np.repeat(np.arange(len(h)), points)
    wt = (0.5 * w[None, :] * h[:, None]).ravel()
    diff = traj.original_input_rate(t, j, k) - reference.original_input_rate(t, j)
    return float(np.sqrt(np.sum(wt * diff ** 2)))


def _window_mask(traj, window):
    return np.ones(len(traj.colloc_t), bool) if window is None else window.contains(traj.colloc_t)


def dense_reference(spec, scheme="hs", nodes=400, options=None) -> Trajectory:
    """On-mesh solve on a dense uniform mesh, used as the reference rate."""
    problem = transcribe(spec, Mesh.uniform(scheme, nodes), RateMode.ON_MESH)
    return interpolate(problem, solve(problem, options=options))


def regularization_sweep(spec, rho_list, mesh: Mesh, reference: Trajectory, norm="L2sq",
                         options: SolverOptions | None = None, window=None,
                         input_index=0) -> SweepReport:
    """Solve the regularised add-state problem for every ``rho``.

    Each row reports the ``L2`` distance between the rate input and the
    reference rate, the discrete total variation of the rate input (over
    ``window`` when given), the regularised objective and the objective
    without the penalty.  ``baseline`` holds the same metrics for an
    on-mesh solve on ``mesh``.
    """
    rho_list = [float(r) for r in rho_list]
    if not rho_list:
        raise ValueError("empty rho list")
    options = options or SolverOptions()
    base = augment_add_state(spec)
    state_mode = RateMode.ON_MESH
    base_problem = transcribe(base, mesh, (RateMode.ADD_STATE, state_mode))
    slot = base.promoted[input_index][0]
    rows = []
    for rho in rho_list:
        reg = apply_regularization(base, rho, norm)
        problem = transcribe(reg, mesh, (RateMode.ADD_STATE, state_mode))
        sol = solve(problem, options=options)
        traj = interpolate(problem, sol)
        X, U, p, t0, tf = problem.unpack(sol.x)
        z_base = base_problem.pack(X, U[:, :base.nu], p, t0, tf)
        base_obj = base_problem.evaluate(z_base, derivatives=False).objective
        nu = traj.U[:, slot]
        mask = _window_mask(traj, window)
        rows.append({"rho": rho, "rate_error": _rate_error(traj, reference, input_index),
                     "tv": total_variation(nu[mask]), "objective": float(sol.objective),
                     "base_objective": float(base_obj), "iterations": sol.iterations,
                     "status": sol.status})
        log.info("rho=%g: rate error %.4g, TV %.4g", rho, rows[-1]["rate_error"], rows[-1]["tv"])
    problem = transcribe(spec, mesh, RateMode.ON_MESH)
    sol = solve(problem, options=options)
    traj = interpolate(problem, sol)
    rate = rate_samples(traj, input_index)
    mask = _window_mask(traj, window)
    baseline = {"rate_error": _rate_error(traj, reference, input_index),
                "tv": total_variation(rate[mask]), "objective": float(sol.objective),
                "iterations": sol.iterations, "status": sol.status}
    return SweepReport(problem=spec.name, norm=norm, n_nodes=mesh.n_nodes,
                       scheme=mesh.scheme.value, rows=rows, baseline=baseline)
