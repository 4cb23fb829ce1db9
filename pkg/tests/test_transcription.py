from dataclasses import replace

import numpy as np
import pytest

from helpers import fd_jacobian, full_hessian, lagrangian_gradient, random_point, rel_err
from ratecoll.collocation import Mesh
from ratecoll.errors import CallbackFailure, EmptyMesh, IncompatibleMode, NonFiniteValue
from ratecoll.ocp import OcpSpec, RateMode, validate
from ratecoll.problems import get_problem, problem_names
from ratecoll.solver import solve
from ratecoll.transcription import count_constraints, eval_all, transcribe

SCHEMES = ["trap", "hs", "lgr"]


def decay_spec():
    """x' = -x, x(0) = 1 with a dummy input pinned to zero."""
    return OcpSpec(n_states=1, n_inputs=1, dynamics=lambda x, u, t, p: -x + u,
                   lagrange_cost=lambda x, u, t, p: u[:, 0] ** 2,
                   x0_bounds=([1.0], [1.0]), u_bounds=([0.0], [0.0]), tf=2.0, name="decay")


class TestCounts:
    @pytest.mark.parametrize("n", [5, 10, 50])
    def test_table_formulas(self, n):
        trap, hs = Mesh.uniform("trap", n), Mesh.uniform("hs", n)
        assert count_constraints(trap, "onmesh", 1, "input") == 2 * n
        assert count_constraints(hs, "onmesh", 1, "input") == 4 * n - 4
        assert count_constraints(hs, "onmesh", 1, "state") == 6 * n - 6
        assert count_constraints(trap, "addstate", 1, "input") == n
        assert count_constraints(hs, "addstate", 1, "input") == 2 * n - 1
        assert count_constraints(trap, "addpath", 2, "state") == 4 * n
        assert count_constraints(hs, "addpath", 1, "state") == 4 * n - 2

    def test_worked_examples(self):
        assert count_constraints(Mesh.uniform("trap", 10), "onmesh", 1, "input") == 20
        assert count_constraints(Mesh.uniform("hs", 10), "onmesh", 1, "input") == 36
        assert count_constraints(Mesh.uniform("hs", 10), "onmesh", 1, "state") == 54

    def test_incompatible(self):
        with pytest.raises(IncompatibleMode):
            count_constraints(Mesh.uniform("hs", 10), "addpath", 1, "input")
        with pytest.raises(IncompatibleMode):
            count_constraints(Mesh.uniform("hs", 10), "addstate", 1, "state")


class TestTranscribe:
    def test_regulator_dimensions(self):
        p = transcribe(validate(get_problem("sosr")), Mesh.uniform("hs", 100), RateMode.ON_MESH)
        assert p.mesh.size() == 199
        counts = p.partition_counts()
        assert counts["defect"] == 2 * 99 * 1
        assert counts["rate_linear"] == 2 * 99
        assert sum(counts.values()) == p.m

    def test_partitions_disjoint(self):
        p = transcribe(validate(get_problem("sosr-rate")), Mesh.uniform("hs", 8), "onmesh")
        jac = p.jacobian_structure().tocsr()
        seen = set()
        for name, s in p.partitions.items():
            rows = set(range(s.start, s.stop))
            assert not rows & seen
            seen |= rows
        assert len(seen) == p.m == jac.shape[0]

    def test_incompatible_modes(self):
        with pytest.raises(IncompatibleMode):
            transcribe(validate(get_problem("sosr")), Mesh.uniform("hs", 5), "addpath")
        with pytest.raises(IncompatibleMode):
            transcribe(validate(get_problem("di-staterate")), Mesh.uniform("hs", 5), "addstate")

    def test_empty_mesh(self):
        with pytest.raises(EmptyMesh):
            transcribe(validate(get_problem("sosr")), None)

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_zero_dynamics_keeps_state_constant(self, scheme):
        spec = OcpSpec(n_states=2, n_inputs=1, dynamics=lambda x, u, t, p: 0 * x,
                       lagrange_cost=lambda x, u, t, p: u[:, 0] ** 2 + x[:, 1] ** 2,
                       x0_bounds=([0.5, -1.0], [0.5, -1.0]))
        p = transcribe(validate(spec), Mesh.uniform(scheme, 6, 3))
        sol = solve(p)
        X = p.unpack(sol.x)[0]
        assert np.allclose(X, [0.5, -1.0], atol=1e-8)

    def test_eval_purity(self):
        p = transcribe(validate(get_problem("nl-actuator")), Mesh.uniform("hs", 6))
        z = random_point(p, np.random.default_rng(0))
        y = np.random.default_rng(1).standard_normal(p.m)
        a, b = eval_all(p, z, y), eval_all(p, z, y)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])
        assert (a[2] != b[2]).nnz == 0 and (a[3] != b[3]).nnz == 0

    def test_callback_errors(self):
        state = {"fail": False}

        def dyn(x, u, t, p):
            if state["fail"]:
                raise ZeroDivisionError("bad")
            return -x + u

        def lag(x, u, t, p):
            return np.log(1.0 + u[:, 0] ** 2) if not state.get("nan") else np.full(len(t), np.nan)

        p = transcribe(validate(OcpSpec(1, 1, dyn, lagrange_cost=lag)), Mesh.uniform("trap", 4))
        z = p.initial_guess()
        state["fail"] = True
        with pytest.raises(CallbackFailure):
            eval_all(p, z)
        state["fail"], state["nan"] = False, True
        with pytest.raises(NonFiniteValue):
            eval_all(p, z)

    def test_point_length(self):
        p = transcribe(validate(get_problem("sosr")), Mesh.uniform("trap", 4))
        with pytest.raises(ValueError):
            eval_all(p, np.zeros(p.n + 1))


class TestStructure:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_onmesh_hessian_pattern_unchanged(self, scheme):
        mesh = Mesh.uniform(scheme, 7, 3)
        for name in ("sosr", "di-staterate", "nl-actuator"):
            spec = get_problem(name)
            plain = replace(spec, input_rate_bounds={}, state_rate_bounds={})
            a = transcribe(validate(spec), mesh, "onmesh").hessian_pattern
            b = transcribe(validate(plain), mesh, "onmesh").hessian_pattern
            assert a.shape == b.shape and (a != b).nnz == 0

    def test_addpath_rows_have_hessian(self):
        p = transcribe(validate(get_problem("di-staterate")), Mesh.uniform("hs", 6), "addpath")
        z = random_point(p, np.random.default_rng(3))
        y = np.zeros(p.m)
        y[p.partitions["path"]] = 1.0
        sigma = 0.0
        assert np.abs(p.hessian(z, y, sigma).toarray()).sum() > 0

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_rate_jacobian_constant(self, scheme):
        p = transcribe(validate(get_problem("sosr-rate")), Mesh.uniform(scheme, 6, 3), "onmesh")
        rows = p.partitions["rate_linear"]
        rng = np.random.default_rng(5)
        blocks = [p.evaluate(random_point(p, rng)).jacobian[rows] for _ in range(10)]
        for b in blocks[1:]:
            assert np.array_equal(b.data, blocks[0].data)
            assert np.array_equal(b.indices, blocks[0].indices)

    def test_rate_partition_count_matches_table(self):
        for scheme in SCHEMES:
            for n in (5, 10):
                mesh = Mesh.uniform(scheme, n, 3)
                p = transcribe(validate(get_problem("sosr")), mesh, "onmesh")
                assert 2 * p.partition_counts()["rate_linear"] == \
                    count_constraints(mesh, "onmesh", 1, "input")


class TestDerivatives:
    @pytest.mark.parametrize("name", problem_names())
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_jacobian_and_hessian(self, name, scheme):
        vs = validate(get_problem(name))
        mode = "onmesh"
        p = transcribe(vs, Mesh.uniform(scheme, 5, 3), mode)
        rng = np.random.default_rng(11)
        z = random_point(p, rng)
        y = rng.standard_normal(p.m)
        J = p.evaluate(z).jacobian.toarray()
        Jfd = fd_jacobian(lambda v: p.evaluate(v, derivatives=False).constraints, z)
        assert rel_err(J, Jfd) <= 1e-5
        H = full_hessian(p.hessian(z, y, 1.0))
        Hfd = fd_jacobian(lambda v: lagrangian_gradient(p, v, y), z)
        assert rel_err(H, 0.5 * (Hfd + Hfd.T)) <= 1e-5


class TestConvergence:
    def _final_error(self, scheme, n, order=3):
        p = transcribe(validate(decay_spec()), Mesh.uniform(scheme, n, order))
        sol = solve(p)
        X = p.unpack(sol.x)[0]
        return abs(X[-1, 0] - np.exp(-2.0))

    @pytest.mark.parametrize("scheme,rate", [("trap", 2), ("hs", 4)])
    def test_order(self, scheme, rate):
        e1, e2 = self._final_error(scheme, 9), self._final_error(scheme, 17)
        assert np.log2(e1 / e2) == pytest.approx(rate, abs=0.3)

    def test_lgr_spectral(self):
        e1, e2 = self._final_error("lgr", 2, 3), self._final_error("lgr", 2, 6)
        assert e1 / max(e2, 1e-300) >= 10 or e2 < 1e-12

    @pytest.mark.parametrize("scheme,rate", [("trap", 2), ("hs", 4)])
    def test_defect_residual_of_exact_solution(self, scheme, rate):
        res = []
        for n in (9, 17):
            p = transcribe(validate(decay_spec()), Mesh.uniform(scheme, n))
            t = p.mesh.grid.tau * 2.0
            z = p.pack(np.exp(-t)[:, None], np.zeros((p.mesh.grid.n_colloc, 1)))
            res.append(np.max(np.abs(p.evaluate(z).constraints[p.partitions["defect"]])))
        # local residuals vanish at least as fast as the global error
        assert np.log2(res[0] / res[1]) >= rate - 0.3
