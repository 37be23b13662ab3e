import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmprox.hardcase import (
    TRACE_HEADER,
    EmptyNodeSetError,
    SpanTrace,
    a1,
    a2,
    count_index_bound,
    far_set,
    hard_instance,
    time_index_bound,
    local_only_trace,
    max_nonzero,
    span_trace_audit,
    traced_run,
)
from dmprox.topology import build_graph, laplacian


def path_instance(m=8, d=8, rho=None):
    g = build_graph("path", m)
    return hard_instance(1.0, 0.01, 1.0, d, g, [0], m - 1 if rho is None else rho)


class TestChains:
    def test_a1_a2_entries(self):
        np.testing.assert_array_equal(a1(4), [[1, 0, 0, 0], [0, 1, -2, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
        np.testing.assert_array_equal(a2(4), [[1, -2, 0, 0], [0, 1, 0, 0], [0, 0, 1, -2], [0, 0, 0, 1]])

    def test_average_gram_is_second_difference(self):
        d = 10
        A = 0.5 * (a1(d) + a2(d))
        G = 2 * np.eye(d) - np.eye(d, k=1) - np.eye(d, k=-1)
        G[0, 0] = 1.0
        np.testing.assert_array_equal(A.T @ A, G)
        # the other product has the corner at the opposite end
        assert (A @ A.T)[0, 0] == 2.0 and (A @ A.T)[-1, -1] == 1.0
        assert np.linalg.norm(A, 2) <= 2.0

    def test_each_chain_moves_one_coordinate(self):
        # A1 links 2k -> 2k+1 (1-based), A2 links 2k-1 -> 2k
        e = np.eye(8)
        assert max_nonzero(a2(8) @ e[1]) == 2
        assert max_nonzero(a1(8) @ e[1]) == 2
        assert max_nonzero(a1(8) @ e[2]) == 3
        assert max_nonzero(a2(8) @ e[2]) == 3

    @pytest.mark.parametrize("d", [3, 5, 2])
    def test_bad_dimension(self, d):
        with pytest.raises(ValueError):
            a1(d)


class TestInstance:
    def test_roles_and_sets(self):
        inst = path_instance(8)
        assert inst.B == [0] and inst.B_rho == [7]
        assert far_set(build_graph("path", 8), [0], 5) == [5, 6, 7]
        assert inst.role.tolist() == [2, 0, 0, 0, 0, 0, 0, 1]

    def test_mean_matches_closed_form_on_random_points(self):
        g = build_graph("cycle", 9)
        inst = hard_instance(2.0, 0.05, 1.5, 6, g, [0, 1], 3)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x, y = rng.normal(size=6), rng.normal(size=6)
            assert inst.mean_value(x, y) == pytest.approx(inst.mean_closed_form(x, y), rel=1e-12, abs=1e-12)

    def test_constants(self):
        inst = path_instance()
        assert inst.kappa == pytest.approx(16 * 0.01)
        assert inst.mu == pytest.approx(2 * inst.kappa)
        assert inst.coupling(0)[0] == pytest.approx(8 / 1 * 0.25)
        assert inst.linear_weight(0) == pytest.approx(8 / 0.01)
        assert inst.coupling(3) == (0.0, None) and inst.linear_weight(7) == 0.0

    def test_gradients_match_finite_differences(self):
        inst = path_instance()
        rng = np.random.default_rng(1)
        h = 1e-6
        for i in (0, 3, 7):
            x, y = rng.normal(size=8), rng.normal(size=8)
            gx, gy = inst.gradients(i, x, y)
            E = np.eye(8) * h
            fx = [(inst.value(i, x + e, y) - inst.value(i, x - e, y)) / (2 * h) for e in E]
            fy = [(inst.value(i, x, y + e) - inst.value(i, x, y - e)) / (2 * h) for e in E]
            np.testing.assert_allclose(gx, fx, rtol=1e-6, atol=1e-4)
            np.testing.assert_allclose(gy, fy, rtol=1e-6, atol=1e-4)

    def test_empty_far_set(self):
        with pytest.raises(EmptyNodeSetError):
            hard_instance(1.0, 0.1, 1.0, 4, build_graph("complete", 5), [0], 2)

    def test_input_validation(self):
        g = build_graph("path", 4)
        with pytest.raises(ValueError):
            hard_instance(1.0, 0.1, 1.0, 5, g, [0], 2)
        with pytest.raises(ValueError):
            hard_instance(0.0, 0.1, 1.0, 4, g, [0], 2)
        with pytest.raises(ValueError):
            hard_instance(1.0, 0.1, 1.0, 4, g, [], 2)

    def test_saddle_problem_constants(self):
        inst = path_instance()
        prob = inst.saddle_problem()
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.normal(size=8)
            x *= rng.uniform(0, 1) / np.linalg.norm(x)
            y = rng.normal(size=8)
            y *= rng.uniform(0, 1) / np.linalg.norm(y)
            for i in range(inst.m):
                gx, gy = inst.gradients(i, x, y)
                assert np.linalg.norm(gx) <= prob.M_x + 1e-9
                assert np.linalg.norm(gy) <= prob.M_y + 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), i=st.integers(0, 7))
def test_node_terms_convex_concave(seed, i):
    inst = path_instance()
    rng = np.random.default_rng(seed)
    x1, x2, y1, y2 = rng.normal(size=(4, 8))
    y = rng.normal(size=8)
    x = rng.normal(size=8)
    mid = inst.value(i, (x1 + x2) / 2, y)
    assert mid <= (inst.value(i, x1, y) + inst.value(i, x2, y)) / 2 + 1e-9
    mid = inst.value(i, x, (y1 + y2) / 2)
    assert mid >= (inst.value(i, x, y1) + inst.value(i, x, y2)) / 2 - 1e-9


class TestBounds:
    def test_time_bound_values(self):
        assert time_index_bound(2, 1, 1, 3) == 2
        assert time_index_bound(6, 1, 1, 3) == 3
        assert time_index_bound(10, 1, 1, 3) == 4

    def test_count_bound_values(self):
        assert count_index_bound(1, 0, 4) == 1
        assert count_index_bound(5, 0, 4) == 2
        assert count_index_bound(5, 8, 4) == 4
        assert count_index_bound(3, 80, 4) == 3

    def test_max_nonzero(self):
        assert max_nonzero([0, 0, 0]) == 0
        assert max_nonzero([1, 0, 2, 0]) == 3
        assert max_nonzero([1e-20, 0], tol=1e-12) == 0


class TestAudit:
    def test_path_run_respects_bounds(self):
        inst = path_instance(8, d=10)
        w = laplacian(inst.graph)
        trace = traced_run(inst, w, 40)
        res = span_trace_audit(trace, inst.rho)
        assert res.ok, res.violations
        # the index does grow, so the bound is not vacuous
        assert max(res.max_index) >= 3

    def test_local_steps_alone_reach_two(self):
        inst = path_instance()
        trace = local_only_trace(inst, 0, 20)
        assert max(trace.global_index()) == 2
        assert span_trace_audit(trace, inst.rho).ok

    def test_audit_flags_violation(self):
        trace = SpanTrace()
        z = np.zeros((1, 6))
        trace.record("local", z, z, 0, 0)
        v = z.copy()
        v[0, 4] = 1.0
        trace.record("local", v, z, 1, 0)
        res = span_trace_audit(trace, 3)
        assert not res.ok and "index 5" in res.violations[0]

    def test_trace_csv(self):
        inst = path_instance(4, d=4, rho=3)
        trace = traced_run(inst, laplacian(inst.graph), 2)
        lines = trace.to_csv().strip().split("\n")
        assert lines[0] == ",".join(TRACE_HEADER)
        # one initial event plus comm and local per stage, four nodes each
        assert len(lines) - 1 == 4 * (1 + 2 * 2 * 2)
        assert {ln.split(",")[2] for ln in lines[1:]} == {"local", "comm"}
