import json

import numpy as np
import pytest

from ratecoll.analysis import (Window, benchmark, dense_reference, estimate_costates,
                               inactive_rate_windows, interpolant_tv, regularization_sweep,
                               singular_arc_deviation, singular_windows, switching_report,
                               total_variation)
from ratecoll.collocation import Mesh
from ratecoll.errors import EmptyWindow, MissingMultipliers, NotAddStateMode
from ratecoll.ocp import validate
from ratecoll.problems import get_problem, lin_switch_costate
from ratecoll.solver import SolverOptions


class TestTotalVariation:
    def test_values(self):
        assert total_variation([0, 1, -1, 2]) == 6.0
        assert total_variation([3.0]) == 0.0
        assert total_variation([]) == 0.0

    def test_monotone(self):
        assert total_variation(np.linspace(-2, 5, 40)) == pytest.approx(7.0)


class TestWindows:
    def test_runs(self):
        flags = np.array([0, 1, 1, 1, 0, 1, 0, 1, 1], bool)
        t = np.arange(9.0)
        wins = singular_windows(flags, t)
        assert [(w.start, w.stop) for w in wins] == [(1, 4), (7, 9)]
        assert wins[0].n_points == 3 and wins[0].t_start == 1.0 and wins[0].t_end == 3.0
        assert list(wins[0].contains(np.array([0.5, 1.0, 3.0, 3.5]))) == [False, True, True, False]

    def test_no_flags(self):
        assert singular_windows(np.zeros(5, bool), np.arange(5.0)) == []


class TestCostates:
    @pytest.mark.parametrize("scheme", ["trap", "hs", "lgr"])
    def test_linear_switching_function(self, solved, scheme):
        p, sol, _ = solved("lin-switch", scheme, 40, "addstate")
        cs = estimate_costates(p, sol)
        ref = lin_switch_costate(cs.t)
        assert np.max(np.abs(cs.lam[:, 1] - ref)) <= 2e-2 * np.max(np.abs(ref))

    def test_hs_regulator_conditions(self, solved):
        p, sol, traj = solved("sosr", "hs", 100, "addstate")
        cs = estimate_costates(p, sol)
        # transversality: both states are free at the final time
        assert np.all(np.abs(cs.lam[-1]) <= 5e-2)
        win = max(switching_report(p, sol, traj=traj).windows["dx2/dt"], key=lambda w: w.n_points)
        inner = slice(win.start + 4, win.stop - 4)
        # on the singular arc lam_2 vanishes and so does lam_1 + 2 x_2
        assert np.max(np.abs(cs.lam[inner, 1])) <= 1e-2
        assert np.max(np.abs(cs.lam[inner, 0] + 2 * traj.X[inner, 1])) <= 5e-2

    def test_missing_multipliers(self, solved):
        p, sol, _ = solved("sosr", "hs", 30, "addstate")

        class Bare:
            x = sol.x
            multipliers = None

        with pytest.raises(MissingMultipliers):
            estimate_costates(p, Bare())


class TestSwitchingReport:
    def test_requires_add_state(self, solved):
        p, sol, _ = solved("sosr", "hs", 30, "onmesh")
        with pytest.raises(NotAddStateMode):
            switching_report(p, sol)

    def test_regulator_has_singular_window(self, solved):
        p, sol, traj = solved("sosr", "hs", 100, "addstate")
        rep = switching_report(p, sol, traj=traj)
        wins = rep.windows["dx2/dt"]
        assert wins and max(w.t_end - w.t_start for w in wins) > 2.0
        json.dumps(rep.to_dict())

    def test_zero_band_is_empty(self, solved):
        p, sol, traj = solved("sosr", "hs", 100, "addstate")
        rep = switching_report(p, sol, band=0.0, traj=traj)
        assert rep.windows["dx2/dt"] == [] or \
            all(np.all(rep.switching["dx2/dt"][w.start:w.stop] == 0) for w in rep.windows["dx2/dt"])

    def test_band_monotone(self, solved):
        p, sol, traj = solved("sosr", "hs", 100, "addstate")

        def covered(band):
            rep = switching_report(p, sol, band=band, traj=traj)
            return sum(w.n_points for w in rep.windows["dx2/dt"])

        sizes = [covered(b) for b in (1e-1, 1e-2, 1e-3, 1e-5)]
        assert sizes == sorted(sizes, reverse=True)

    def test_linear_problem_is_bang_bang(self, solved):
        p, sol, traj = solved("lin-switch", "hs", 100, "addstate")
        rep = switching_report(p, sol, traj=traj)
        assert rep.n_switches["du/dt"] == 1
        assert rep.windows["du/dt"] == []


class TestArcDeviation:
    def test_empty_window(self, solved):
        _, _, traj = solved("sosr", "hs", 100, "onmesh")
        with pytest.raises(EmptyWindow):
            singular_arc_deviation(traj, None)
        with pytest.raises(EmptyWindow):
            singular_arc_deviation(traj, Window(2.0, 2.0, 0, 0))

    def test_trivial_arc(self, solved):
        _, _, traj = solved("sosr", "hs", 100, "onmesh")
        win = Window(traj.breaks[10], traj.breaks[40], 20, 81)
        dev = singular_arc_deviation(traj, win, arc=lambda tr, t, k: 0.0 * t)
        assert dev == 0.0

    def test_add_state_deviates_more(self, solved):
        p, sol, traj = solved("sosr", "hs", 100, "onmesh")
        win = max(inactive_rate_windows(p, sol), key=lambda w: w.n_points)
        pa, sa, ta = solved("sosr", "hs", 100, "addstate")
        on = singular_arc_deviation(traj, win)
        add = singular_arc_deviation(ta, win)
        assert on < 1e-2 < add

    def test_interpolant_tv(self, solved):
        _, _, on = solved("sosr", "hs", 100, "onmesh")
        _, _, add = solved("sosr", "hs", 100, "addstate")
        assert interpolant_tv(on) < interpolant_tv(add)


class TestBenchmark:
    def test_single_repeat(self):
        spec = validate(get_problem("sosr"))
        rep = benchmark(spec, ["onmesh", "addstate"], [10, 20], repeats=1)
        assert len(rep.cells) == 4 and all(c.ok for c in rep.cells)
        for c in rep.cells:
            for ph in ("eval", "kkt", "other", "total"):
                assert c.per_iteration[ph]["min"] == c.per_iteration[ph]["mean"]
        assert "onmesh" in rep.table()
        json.dumps(rep.to_dict())

    def test_config_hash(self):
        spec = validate(get_problem("sosr"))
        a = benchmark(spec, ["onmesh"], [8], repeats=1)
        b = benchmark(spec, ["onmesh"], [8], repeats=1)
        c = benchmark(spec, ["onmesh"], [8], repeats=1, options=SolverOptions(tol=1e-7))
        assert a.config_hash == b.config_hash != c.config_hash

    def test_errors_recorded(self):
        rep = benchmark(validate(get_problem("sosr")), ["addpath"], [8])
        assert rep.cells[0].status == "error" and "IncompatibleMode" in rep.cells[0].error

    def test_bad_repeats(self):
        with pytest.raises(ValueError):
            benchmark(validate(get_problem("sosr")), ["onmesh"], [8], repeats=0)


class TestSweep:
    def test_rows(self):
        spec = validate(get_problem("sosr"))
        ref = dense_reference(spec, nodes=80)
        rep = regularization_sweep(spec, [1e-3, 1e-2], Mesh.uniform("hs", 30), ref)
        assert [r["rho"] for r in rep.rows] == [1e-3, 1e-2]
        for r in rep.rows:
            assert r["status"] == "success" and r["objective"] >= r["base_objective"] - 1e-9
        assert rep.baseline["rate_error"] >= 0
        assert "on-mesh" in rep.table()

    def test_empty(self):
        spec = validate(get_problem("sosr"))
        with pytest.raises(ValueError):
            regularization_sweep(spec, [], Mesh.uniform("hs", 10), None)
