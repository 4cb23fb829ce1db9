from types import SimpleNamespace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from ratecoll import _core
from ratecoll.collocation import Mesh
from ratecoll.errors import MaxIterations, SolverError
from ratecoll.ocp import validate
from ratecoll.problems import get_problem
from ratecoll.solver import KktSystem, SolverOptions, kkt_residuals, solve
from ratecoll.transcription import Evaluation, transcribe

KERNELS = sorted(_core.backends())


class DenseNlp:
    """Small dense NLP exposing the interface the solver consumes."""

    rate_block = None
    rate_linear_constant = False

    def __init__(self, f, grad, hess, g, jac, lg, ug, lx=None, ux=None, x0=None):
        self.f, self.grad, self.hess, self.g, self.jac = f, grad, hess, g, jac
        self.g_lower, self.g_upper = np.asarray(lg, float), np.asarray(ug, float)
        self.n = len(x0)
        self.m = len(self.g_lower)
        self.x_lower = np.full(self.n, -np.inf) if lx is None else np.asarray(lx, float)
        self.x_upper = np.full(self.n, np.inf) if ux is None else np.asarray(ux, float)
        self.x0 = np.asarray(x0, float)
        self.layout = SimpleNamespace(p_idx=[], t0_idx=-1, tf_idx=-1)
        self.hessian_pattern = sp.csr_matrix(np.triu(np.ones((self.n, self.n))))
        self._jp = sp.csr_matrix(np.ones((self.m, self.n)))

    def jacobian_structure(self):
        return self._jp

    def initial_guess(self):
        return self.x0.copy()

    def evaluate(self, x, derivatives=True, rate_jacobian=None):
        if not derivatives:
            return Evaluation(self.f(x), self.g(x))
        jac = sp.csr_matrix((np.asarray(self.jac(x), float).ravel(), self._jp.indices,
                             self._jp.indptr), shape=(self.m, self.n))
        return Evaluation(self.f(x), self.g(x), self.grad(x), jac)

    def hessian(self, x, y, sigma=1.0):
        h = np.triu(np.asarray(self.hess(x, y, sigma), float))
        return sp.csr_matrix((h[np.triu_indices(self.n)], self.hessian_pattern.indices,
                              self.hessian_pattern.indptr), shape=(self.n, self.n))

    def multipliers_by_partition(self, y):
        return {"path": y}


def qp_row():
    return DenseNlp(lambda x: x[0] ** 2, lambda x: 2 * x, lambda x, y, s: [[2 * s]],
                    lambda x: x.copy(), lambda x: [[1.0]], [1.0], [np.inf], x0=[3.0])


def qp_equality():
    return DenseNlp(lambda x: x @ x, lambda x: 2 * x, lambda x, y, s: 2 * s * np.eye(2),
                    lambda x: np.array([x.sum()]), lambda x: [[1.0, 1.0]], [1.0], [1.0],
                    x0=[0.3, -2.0])


class TestSmallProblems:
    @pytest.mark.parametrize("kernel", KERNELS)
    def test_inequality_row(self, kernel):
        sol = solve(qp_row(), options=SolverOptions(kernel=kernel))
        assert sol.success and sol.x[0] == pytest.approx(1.0, abs=1e-8)
        # lower bound active: y <= 0 under L = f + y g
        assert sol.y[0] == pytest.approx(-2.0, abs=1e-6)
        assert max(kkt_residuals(qp_row(), sol)) <= 1e-8

    def test_simple_bound(self):
        pb = DenseNlp(lambda x: x[0] ** 2, lambda x: 2 * x, lambda x, y, s: [[2 * s]],
                      lambda x: np.zeros(0), lambda x: np.zeros((0, 1)), [], [], lx=[1.0],
                      x0=[2.0])
        pb._jp = sp.csr_matrix((0, 1))
        sol = solve(pb)
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.z_lower[0] == pytest.approx(2.0, abs=1e-6)

    @pytest.mark.parametrize("kernel", KERNELS)
    def test_equality(self, kernel):
        sol = solve(qp_equality(), options=SolverOptions(kernel=kernel))
        assert np.allclose(sol.x, [0.5, 0.5], atol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 3))
    def test_projection_onto_halfplane(self, a, b, c):
        """min |x - (a, b)|^2 s.t. x1 + x2 <= c has a closed-form solution."""
        assume(abs(a + b - c) > 1e-2)  # weakly active rows converge only like sqrt(mu)
        target = np.array([a, b])
        pb = DenseNlp(lambda x: (x - target) @ (x - target), lambda x: 2 * (x - target),
                      lambda x, y, s: 2 * s * np.eye(2), lambda x: np.array([x.sum()]),
                      lambda x: [[1.0, 1.0]], [-np.inf], [c], x0=[0.0, 0.0])
        sol = solve(pb)
        shift = max(0.0, (a + b - c) / 2)
        assert np.allclose(sol.x, target - shift, atol=1e-6)
        assert sol.y[0] >= -1e-8

    def test_max_iterations(self):
        p = transcribe(validate(get_problem("sosr")), Mesh.uniform("hs", 20), "onmesh")
        with pytest.raises(MaxIterations) as exc:
            solve(p, options=SolverOptions(max_iterations=2))
        assert isinstance(exc.value, SolverError) and exc.value.solution is not None

    def test_options_validation(self):
        with pytest.raises(ValueError):
            SolverOptions(max_iterations=0)
        with pytest.raises(ValueError):
            SolverOptions(tol=0.0)


class TestKernels:
    @pytest.mark.parametrize("kernel", KERNELS)
    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_quasidefinite_solve(self, kernel, n, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n, n))
        w = sp.csr_matrix(np.triu(a @ a.T + n * np.eye(n)))
        jd = rng.standard_normal((m, n))
        jac = sp.csr_matrix(np.ones((m, n)))
        kkt = KktSystem(n, m, sp.csr_matrix(np.triu(np.ones((n, n)))), jac, kernel=kernel)
        diag_c = np.full(m, 1e-2)
        kkt.factor(w.toarray()[np.triu_indices(n)], jd.ravel(), np.zeros(n), diag_c)
        full = np.block([[w.toarray() + np.triu(w.toarray(), 1).T, jd.T], [jd, -np.diag(diag_c)]])
        rhs = rng.standard_normal(n + m)
        assert np.allclose(kkt.solve(rhs), np.linalg.solve(full, rhs), atol=1e-8, rtol=1e-8)

    def test_backends_agree_on_regulator(self):
        if len(KERNELS) < 2:
            pytest.skip("compiled kernel not built")
        p = transcribe(validate(get_problem("sosr")), Mesh.uniform("hs", 30), "onmesh")
        a = solve(p, options=SolverOptions(kernel="python"))
        b = solve(p, options=SolverOptions(kernel="cython"))
        assert a.iterations == b.iterations
        assert np.max(np.abs(a.x - b.x)) <= 1e-12

    def test_default_backend(self):
        assert _core.BACKEND in _core.backends()


class TestRegulator:
    def test_kkt_at_solution(self, solved):
        p, sol, _ = solved("sosr", "hs", 100, "onmesh")
        assert sol.success
        assert all(r <= 1e-8 for r in kkt_residuals(p, sol))
        assert set(sol.multipliers) == set(p.partitions)
        for k, s in p.partitions.items():
            assert len(sol.multipliers[k]) == s.stop - s.start

    def test_initial_guess_infeasible(self, solved):
        p, sol, _ = solved("sosr", "hs", 100, "onmesh")
        guess = SimpleNamespace(x=p.initial_guess(), y=np.zeros(p.m), z_lower=np.zeros(p.n),
                                z_upper=np.zeros(p.n))
        assert kkt_residuals(p, guess)[1] > 1e-8

    def test_perturbation_increases_stationarity(self, solved):
        p, sol, _ = solved("sosr", "hs", 100, "onmesh")
        rng = np.random.default_rng(2)
        d = rng.standard_normal(p.n)
        moved = SimpleNamespace(x=sol.x + 1e-3 * d / np.linalg.norm(d), y=sol.y,
                                z_lower=sol.z_lower, z_upper=sol.z_upper)
        assert kkt_residuals(p, moved)[0] > kkt_residuals(p, sol)[0]

    def test_multiplier_signs(self, solved):
        p, sol, _ = solved("sosr", "hs", 100, "onmesh")
        g = p.evaluate(sol.x, derivatives=False).constraints
        ineq = p.g_lower < p.g_upper
        at_upper = ineq & (np.abs(g - p.g_upper) < 1e-6) & (sol.y > 1e-6)
        at_lower = ineq & (np.abs(g - p.g_lower) < 1e-6) & (sol.y < -1e-6)
        assert at_upper.any() or at_lower.any()
        # a positive multiplier belongs to the upper bound, a negative one to the lower
        pos, neg = ineq & (sol.y > 1e-8), ineq & (sol.y < -1e-8)
        assert np.all(p.g_upper[pos] - g[pos] < g[pos] - p.g_lower[pos])
        assert np.all(g[neg] - p.g_lower[neg] < p.g_upper[neg] - g[neg])
        gap = np.minimum(p.g_upper - g, g - p.g_lower)
        assert np.all(np.abs(sol.y[ineq]) * gap[ineq] <= 1e-8)

    def test_deterministic(self):
        p = transcribe(validate(get_problem("nl-actuator")), Mesh.uniform("hs", 30), "onmesh")
        a, b = solve(p), solve(p)
        assert a.iterations == b.iterations and np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_fast_path_equivalence(self):
        p = transcribe(validate(get_problem("sosr")), Mesh.uniform("hs", 100), "onmesh")
        on = solve(p, options=SolverOptions(exploit_linear_rows=True))
        off = solve(p, options=SolverOptions(exploit_linear_rows=False))
        assert on.counters["rate_jacobian_evals"] == 0 and on.counters["rate_hessian_calls"] == 0
        assert off.counters["rate_jacobian_evals"] > 0
        diff = np.linalg.norm(np.concatenate([on.x - off.x, on.y - off.y]))
        assert diff <= 1e-8

    def test_timing_records(self, solved):
        _, sol, _ = solved("sosr", "hs", 100, "onmesh")
        assert len(sol.iteration_times) == sol.iterations
        for rec in sol.iteration_times:
            assert set(rec) == {"eval", "kkt", "other", "total"}
            assert rec["total"] >= rec["eval"] + rec["kkt"] - 1e-9
