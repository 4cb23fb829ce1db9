"""Command-line front end: ``ratecoll solve | bench | sweep | list``.

Exit codes: 0 success, 1 solved but refinement tolerances not met,
2 solver failure, 3 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .analysis import (benchmark, dense_reference, estimate_costates, inactive_rate_windows,
                       rate_samples, regularization_sweep, singular_arc_deviation,
                       switching_report, total_variation)
from .collocation import Mesh, Scheme
from .errors import (EmptyWindow, IncompatibleMode, MeshBudgetExceeded, RatecollError, SolverError,
                     SpecError)
from .ocp import RateMode, validate
from .problems import REGISTRY, get_problem, problem_names, spec_from_json
from .refine import Tolerances, solve_with_refinement
from .solver import SolverOptions

__all__ = ["RunConfig", "main", "cmd_solve", "cmd_bench", "cmd_sweep", "build_parser"]

log = logging.getLogger("ratecoll")

EXIT_OK, EXIT_NONCOMPLIANT, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs; built from flags or a JSON file."""

    problem: str = "sosr"
    params: dict = field(default_factory=dict)
    problem_file: str | None = None
    scheme: str = "hs"
    mesh: list = field(default_factory=lambda: [100])
    breakpoints: list | None = None
    lgr_order: int = 4
    rate_mode: str = "onmesh"
    eta_tol: float = 1e-4
    eps_tol: float = 1e-5
    max_rounds: int = 8
    max_mesh_size: int = 4000
    rho: list = field(default_factory=list)
    norm: str = "L2sq"
    modes: list = field(default_factory=list)
    repeats: int = 1
    reference_nodes: int = 400
    out: str = "results"
    seed: int = 0
    exploit_linear: bool = True
    diagnostics: bool = False
    max_iterations: int = 500
    nlp_tol: float = 1e-8

    @classmethod
    def from_args(cls, args):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in vars(args).items() if k in names and v is not None})

    def problem_doc(self):
        if self.problem_file:
            try:
                return json.loads(Path(self.problem_file).read_text())
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read problem file: {exc}") from None
        return {"problem": self.problem, "params": self.params}

    def build_spec(self):
        try:
            return validate(spec_from_json(self.problem_doc()))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc).strip("'\"")) from None

    def entry(self):
        name = self.problem_doc().get("problem", self.problem)
        return REGISTRY.get(name)

    def scheme_enum(self):
        try:
            return Scheme.parse(self.scheme)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def build_mesh(self, nodes=None):
        scheme = self.scheme_enum()
        try:
            if nodes is None and self.breakpoints:
                return Mesh.from_breakpoints(scheme, self.breakpoints,
                                             (self.lgr_order,) * (len(self.breakpoints) - 1))
            n = int(nodes if nodes is not None else self.mesh[0])
            return Mesh.uniform(scheme, n, self.lgr_order)
        except (RatecollError, ValueError) as exc:
            raise ConfigError(f"bad mesh: {exc}") from None

    def mode(self, value=None):
        try:
            return RateMode.parse(value or self.rate_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def tolerances(self):
        try:
            return Tolerances(eta=self.eta_tol, eps=self.eps_tol, max_rounds=self.max_rounds,
                              max_mesh_size=self.max_mesh_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def options(self):
        return SolverOptions(max_iterations=self.max_iterations, tol=self.nlp_tol,
                             exploit_linear_rows=self.exploit_linear)

    def out_dir(self):
        path = Path(self.out)
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory: {exc}") from None
        return path

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _schema(name):
    text = resources.files("ratecoll").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def write_json(path, doc, schema):
    """Validate ``doc`` against a shipped schema and write it."""
    jsonschema.validate(doc, _schema(schema))
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def trajectory_table(vs, traj):
    """Header and rows of ``trajectory.csv`` at the grid times.

    Columns are time, the original states and inputs, then the rates of
    every rate-bounded variable.
    """
    grid = traj.mesh.grid
    t = traj.grid_t
    k = grid.interval
    header = ["t"] + list(vs.state_names) + list(vs.input_names)
    cols = [t, *traj.X[:, :vs.nx].T]
    cols += [traj.original_input(t, j, k) for j in range(vs.nu)]
    dx = traj.state_rate(t, k)
    for j, _, _ in vs.state_rate:
        header.append(f"d{vs.state_names[j]}/dt")
        cols.append(dx[:, j])
    for j, _, _ in vs.input_rate:
        header.append(f"d{vs.input_names[j]}/dt")
        cols.append(traj.original_input_rate(t, j, k))
    return header, np.column_stack(cols)


def write_trajectory(path, vs, traj):
    header, rows = trajectory_table(vs, traj)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.17g}" for v in row])


def arc_report(entry, result):
    """Costates, singular windows and arc-condition residual of a refinement result."""
    problem, solution, traj = result.problem, result.solution, result.trajectory
    cs = estimate_costates(problem, solution)
    doc = {"rate_mode": "/".join(m.value for m in problem.modes), "t": cs.t.tolist(),
           "costates": cs.lam.tolist(), "windows": [], "inputs": {}, "arc_deviation": None,
           "rate_tv": []}
    windows = []
    if problem.spec.promoted:
        rep = switching_report(problem, solution, traj=traj)
        doc["inputs"] = rep.to_dict()["inputs"]
        windows = next(iter(rep.windows.values()))
    elif problem.rate_block is not None:
        windows = inactive_rate_windows(problem, solution)
    doc["windows"] = [asdict(w) for w in windows]
    if windows and (problem.spec.promoted or problem.spec.input_rate):
        r = rate_samples(traj)
        doc["rate_tv"] = [total_variation(r[w.contains(traj.colloc_t)]) for w in windows]
    if entry is not None and entry.arc is not None and windows:
        devs = []
        for w in windows:
            try:
                devs.append(singular_arc_deviation(traj, w, entry.arc))
            except EmptyWindow:
                pass
        doc["arc_deviation"] = max(devs) if devs else None
    return doc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve(cfg: RunConfig) -> int:
    """Solve with refinement and write trajectory, solution and history files."""
    vs = cfg.build_spec()
    mesh = cfg.build_mesh()
    mode = cfg.mode()
    tol = cfg.tolerances()
    out = cfg.out_dir()
    np.random.seed(cfg.seed)
    compliant = True
    try:
        result = solve_with_refinement(vs, mesh, tol, mode, cfg.options())
    except MeshBudgetExceeded as exc:
        result = getattr(exc, "result", None)
        print(f"refinement budget exceeded: {exc}", file=sys.stderr)
        if result is None:
            return EXIT_SOLVER
        compliant = False
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    sol, problem = result.solution, result.problem
    write_trajectory(out / "trajectory.csv", vs, result.trajectory)
    history = result.history_dicts()
    write_json(out / "refinement_history.json", history, "history")
    stat, feas, comp = sol.kkt
    doc = {
        "problem": vs.name, "scheme": mesh.scheme.value, "rate_mode": mode.value,
        "status": sol.status, "compliant": compliant, "objective": float(sol.objective),
        "iterations": sol.iterations,
        "kkt": {"stationarity": stat, "feasibility": feas, "complementarity": comp},
        "mesh": {"n_intervals": problem.mesh.n_intervals, "n_nodes": problem.mesh.n_nodes,
                 "n_collocation": problem.mesh.size(), "breakpoints": problem.mesh.breakpoints.tolist()},
        "nlp": {"n_variables": problem.n, "n_constraints": problem.m,
                "partitions": problem.partition_counts()},
        "timing": {ph: sol.mean_iteration_time(ph) for ph in ("eval", "kkt", "other", "total")},
        "counters": {k: int(v) for k, v in sol.counters.items()},
        "history": history,
        "config": cfg.to_dict(),
    }
    write_json(out / "solution.json", doc, "solution")
    if cfg.diagnostics:
        write_json(out / "arc_report.json", arc_report(cfg.entry(), result), "arc_report")
    print(f"{vs.name} {mesh.scheme.value} {mode.value}: {sol.status}, objective "
          f"{sol.objective:.10g}, {len(history)} round(s), {problem.mesh.n_nodes} nodes"
          f"{'' if compliant else ', tolerances not met'}")
    return EXIT_OK if compliant else EXIT_NONCOMPLIANT


def _bench_meshes(cfg):
    counts = []
    for m in cfg.mesh:
        counts += [int(v) for v in str(m).split(",") if v.strip()]
    if not counts:
        raise ConfigError("no meshes given")
    return [cfg.build_mesh(n) for n in counts]


def cmd_bench(cfg: RunConfig) -> int:
    """Per-iteration timing across rate modes and meshes."""
    if cfg.repeats < 1:
        raise ConfigError("--repeats must be at least 1")
    modes = []
    for m in cfg.modes:
        modes += [cfg.mode(v) for v in str(m).split(",") if v.strip()]
    if len(modes) < 2:
        raise ConfigError("bench needs at least two rate modes")
    vs = cfg.build_spec()
    meshes = _bench_meshes(cfg)
    out = cfg.out_dir()
    np.random.seed(cfg.seed)
    report = benchmark(vs, modes, meshes, repeats=cfg.repeats, options=cfg.options())
    doc = report.to_dict()
    comparisons = []
    base = modes[0].value
    for mesh in meshes:
        for mode in modes[1:]:
            a = report.cell(mode.value, mesh.n_nodes)
            b = report.cell(base, mesh.n_nodes)
            if a.ok and b.ok:
                comparisons.append({"mode": mode.value, "baseline": base, "n_nodes": mesh.n_nodes,
                                    "per_iteration_reduction":
                                        report.reduction(mode.value, base, mesh.n_nodes)})
    doc["comparisons"] = comparisons
    write_json(out / "bench.json", doc, "bench")
    print(report.table())
    for c in comparisons:
        print(f"{c['mode']} vs {c['baseline']} at {c['n_nodes']} nodes: "
              f"{100 * c['per_iteration_reduction']:+.1f}% per-iteration time saved")
    if not any(c.ok for c in report.cells):
        print("every benchmark cell failed", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    """Regularisation sweep against a dense on-mesh reference."""
    rhos = [float(r) for r in cfg.rho]
    if not rhos:
        raise ConfigError("sweep needs at least one --rho")
    if any(r < 0 for r in rhos):
        raise ConfigError("--rho values must be non-negative")
    vs = cfg.build_spec()
    if not vs.input_rate:
        raise ConfigError(f"{vs.name} has no input rate bounds; the add-state form does not apply")
    mesh = cfg.build_mesh()
    out = cfg.out_dir()
    np.random.seed(cfg.seed)
    try:
        reference = dense_reference(vs, mesh.scheme, cfg.reference_nodes, cfg.options())
    except SolverError as exc:
        print(f"reference solve failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    try:
        report = regularization_sweep(vs, rhos, mesh, reference, norm=cfg.norm,
                                      options=cfg.options())
    except SolverError as exc:
        print(f"sweep solve failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    doc = report.to_dict()
    doc["reference"] = {"scheme": mesh.scheme.value, "nodes": cfg.reference_nodes,
                        "mode": RateMode.ON_MESH.value}
    write_json(out / "sweep.json", doc, "sweep")
    print(report.table())
    return EXIT_OK


def cmd_list(cfg: RunConfig) -> int:
    for name in problem_names():
        e = REGISTRY[name]
        tag = " [invented]" if e.invented else ""
        print(f"{name:<14}{e.description}{tag}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "bench": cmd_bench, "sweep": cmd_sweep, "list": cmd_list}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Argument errors are configuration errors (exit 3)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", help="JSON file with run-configuration defaults")
    p.add_argument("--problem", help="registered problem name (see 'ratecoll list')")
    p.add_argument("--problem-file", help="JSON problem document overriding bounds/rates")
    p.add_argument("--scheme", choices=["trap", "hs", "lgr"])
    p.add_argument("--mesh", action="append", help="number of mesh nodes (bench: repeat or comma list)")
    p.add_argument("--breakpoints", type=lambda s: [float(v) for v in s.split(",")],
                   help="explicit mesh breakpoints, comma separated")
    p.add_argument("--lgr-order", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-exploit-linear", dest="exploit_linear", action="store_false", default=None,
                   help="recompute the constant rate-row Jacobian every iteration")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--nlp-tol", type=float)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="ratecoll", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    solve = sub.add_parser("solve", help="solve with mesh refinement")
    _add_common(solve)
    solve.add_argument("--rate-mode", choices=["addstate", "addpath", "onmesh"])
    solve.add_argument("--eta-tol", type=float)
    solve.add_argument("--eps-tol", type=float)
    solve.add_argument("--max-rounds", type=int)
    solve.add_argument("--max-mesh-size", type=int)
    solve.add_argument("--diagnostics", action="store_true", default=None,
                       help="also write arc_report.json")

    bench = sub.add_parser("bench", help="compare per-iteration time across rate modes")
    _add_common(bench)
    bench.add_argument("--modes", action="append", help="rate modes, repeat or comma list")
    bench.add_argument("--repeats", type=int)

    sweep = sub.add_parser("sweep", help="regularisation sweep of the add-state form")
    _add_common(sweep)
    sweep.add_argument("--rho", action="append", type=float)
    sweep.add_argument("--norm", choices=["L1", "L2sq"])
    sweep.add_argument("--reference-nodes", type=int)

    sub.add_parser("list", help="list registered problems")
    return parser


def _load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    names = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "mesh" in doc and not isinstance(doc["mesh"], list):
        doc["mesh"] = [doc["mesh"]]
    return doc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = _load_config(args.config) if getattr(args, "config", None) else {}
        cfg = RunConfig(**base)
        for k, v in vars(RunConfig.from_args(args)).items():
            if getattr(args, k, None) is not None:
                setattr(cfg, k, v)
        return COMMANDS[args.command](cfg)
    except (ConfigError, SpecError, IncompatibleMode) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
