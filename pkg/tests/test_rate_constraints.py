import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratecoll.collocation import Mesh, hs_diff, lgr_diff_matrix, lgr_points, trapezoidal_diff
from ratecoll.errors import EmptyTargets, FreeTimeBlock, NonpositiveStep
from ratecoll.rate import RateTarget, build_onmesh, lgr_endpoint_control, precomputed_jacobian

U = RateTarget("input", 0, -1.0, 1.0)
X = RateTarget("state", 0, -2.0, 2.0)


def random_mesh(scheme, raw, order=4):
    fr = np.array(raw) / sum(raw)
    fr[-1] = 1.0 - fr[:-1].sum()
    return Mesh(scheme, tuple(fr), (order,) * len(fr))


class TestRowCounts:
    def test_hs_input(self):
        blk = build_onmesh(Mesh.uniform("hs", 10), [U], dt=1.0)
        assert 2 * blk.n_rows == 36

    def test_hs_state(self):
        blk = build_onmesh(Mesh.uniform("hs", 10), [X], dt=1.0)
        assert 2 * blk.n_rows == 54

    def test_trap(self):
        assert build_onmesh(Mesh.uniform("trap", 10), [U, X], dt=1.0).n_rows == 20

    def test_lgr_endpoint_flag(self):
        mesh = Mesh.uniform("lgr", 4, 3)
        base = build_onmesh(mesh, [U, X], dt=1.0)
        full = build_onmesh(mesh, [U, X], dt=1.0, include_lgr_endpoint=True)
        assert base.n_rows == 2 * 9
        assert full.n_rows == base.n_rows + 2 * 3
        assert sum(p[3] == "end" for p in full.provenance) == 6

    def test_empty_targets(self):
        with pytest.raises(EmptyTargets):
            build_onmesh(Mesh.uniform("hs", 4), [], dt=1.0)

    def test_nonpositive_horizon(self):
        with pytest.raises(NonpositiveStep):
            build_onmesh(Mesh.uniform("hs", 4), [U], dt=0.0)


class TestValues:
    def test_linear_input_saturates(self):
        mesh = Mesh.uniform("trap", 11)
        blk = build_onmesh(mesh, [U], dt=1.0)
        r = blk.rates(mesh.grid.tau)
        assert np.allclose(r, 1.0, atol=1e-12)
        assert np.all(r <= blk.upper + 1e-12) and np.allclose(r, blk.upper)

    @settings(max_examples=30)
    @given(st.lists(st.floats(0.05, 1), min_size=1, max_size=8), st.floats(0.5, 5))
    def test_trap_matches_scalar_stencil(self, raw, dt):
        mesh = random_mesh("trap", raw)
        z = np.sin(3 * mesh.grid.tau)
        r = build_onmesh(mesh, [X], dt=dt).rates(z)
        h = np.asarray(mesh.fractions)
        ref = [trapezoidal_diff(z[k], z[k + 1], h[k], dt) for k in range(mesh.n_intervals)]
        assert np.allclose(r[:-1], ref, rtol=1e-12) and r[-1] == pytest.approx(ref[-1])

    @settings(max_examples=30)
    @given(st.lists(st.floats(0.05, 1), min_size=1, max_size=8), st.floats(0.5, 5))
    def test_hs_matches_scalar_stencil(self, raw, dt):
        mesh = random_mesh("hs", raw)
        z = np.cos(2 * mesh.grid.tau)
        r = build_onmesh(mesh, [X], dt=dt).rates(z).reshape(-1, 3)
        for k, h in enumerate(mesh.fractions):
            assert np.allclose(r[k], hs_diff(*z[2 * k:2 * k + 3], h, dt), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    def test_lgr_state_matches_diff_matrix(self, n):
        mesh = Mesh.from_breakpoints("lgr", [0.0, 0.4, 1.0], (n, n))
        dt = 2.5
        z = np.exp(mesh.grid.tau)
        r = build_onmesh(mesh, [X], dt=dt, include_lgr_endpoint=True).rates(z)
        for k, h in enumerate(mesh.fractions):
            s = mesh.grid.starts[k]
            ref = lgr_diff_matrix(n, dt=dt * h).apply(z[s:s + n + 1])
            assert np.allclose(r[k * (n + 1):(k + 1) * (n + 1)], ref, rtol=1e-12, atol=1e-10)

    def test_lgr_input_exact_for_polynomials(self):
        n = 4
        mesh = Mesh.uniform("lgr", 3, n)
        tau = mesh.grid.tau
        blk = build_onmesh(mesh, [U], dt=1.0, include_lgr_endpoint=True)
        # degree n - 1 in the last interval is reproduced by the extrapolated rows
        at = np.array([p[1] for p in blk.provenance])
        assert np.allclose(blk.rates(tau**3), 3 * tau[at] ** 2, atol=1e-9)

    @settings(max_examples=50)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 1))
    def test_hs_input_exemption_sound(self, a, b, c, h):
        """Quadratic rate is linear in time: endpoint feasibility implies midpoint feasibility."""
        t = np.array([0.0, h / 2, h])
        z = a + b * t + c * t**2
        left, mid, right = hs_diff(*z, h, 1.0)
        lo, hi = -1.0, 1.0
        if lo <= left <= hi and lo <= right <= hi:
            assert lo - 1e-9 <= mid <= hi + 1e-9


class TestEndpointControl:
    def test_constant(self):
        assert lgr_endpoint_control([2.5, 2.5, 2.5]) == pytest.approx(2.5)

    def test_linear(self):
        nodes, _ = lgr_points(3)
        assert abs(lgr_endpoint_control(nodes) - 1.0) < 1e-12

    def test_cubic_remainder(self):
        nodes, _ = lgr_points(3)
        err = 1.0 - lgr_endpoint_control(nodes**3)
        assert err == pytest.approx(np.prod(1.0 - nodes), rel=1e-10)

    def test_custom_nodes(self):
        assert lgr_endpoint_control([0.0, 1.0], nodes=[-1.0, 0.0]) == pytest.approx(2.0)


class TestConstantJacobian:
    def test_identical_handle(self):
        blk = build_onmesh(Mesh.uniform("hs", 10), [U], dt=2.0)
        a, b = precomputed_jacobian(blk), precomputed_jacobian(blk)
        assert a is b
        assert not a.matrix.data.flags.writeable

    def test_nnz(self):
        blk = build_onmesh(Mesh.uniform("hs", 10), [U], dt=2.0)
        assert blk.n_rows == 18 and precomputed_jacobian(blk).nnz == 3 * 18
        trap = build_onmesh(Mesh.uniform("trap", 10), [U], dt=2.0)
        assert precomputed_jacobian(trap).nnz == 2 * trap.n_rows

    def test_free_time(self):
        blk = build_onmesh(Mesh.uniform("hs", 5), [U], fixed_time=False)
        assert not blk.fixed_time
        with pytest.raises(FreeTimeBlock):
            precomputed_jacobian(blk)
        assert np.allclose(blk.rates(np.linspace(0, 1, 9), dt=4.0), 0.25)
