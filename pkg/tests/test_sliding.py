import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmprox.engine import NumericDivergence, bilinear_problem
from dmprox.hardcase import hard_instance
from dmprox.prox import EntropicSimplex, EuclideanBox, EuclideanUnconstrained
from dmprox.sliding import (
    B_EVALS_PER_INNER,
    SlidingConfig,
    SplitOperator,
    StackedSaddle,
    alpha_for,
    fbf_contraction,
    fbf_inner,
    gamma_for,
    inner_iterations,
    regularize_saddle,
    sliding_run,
)
from dmprox.topology import build_graph, laplacian


def quadratic_split(d, mu, L_A, L_B, seed=0):
    """``A = mu I + S`` (symmetric, ``||A|| = L_A``) minus ``b``; ``B`` skew with ``||B|| = L_B``."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    SA = Q @ np.diag(np.linspace(mu, L_A, d)) @ Q.T
    G = rng.normal(size=(d, d))
    K = G - G.T
    K *= L_B / np.linalg.norm(K, 2)
    b = rng.normal(size=d)
    star = np.linalg.solve(SA + K, b)
    return SplitOperator(lambda z: SA @ z - b, lambda z: K @ z, L_A, L_B, mu), star, K


class TestInnerSolver:
    @pytest.mark.parametrize("L_B", [1.0, 10.0, 100.0])
    def test_per_iteration_contraction(self, L_B):
        d, eta = 6, 0.3
        _, _, K = quadratic_split(d, 0.5, 2.0, L_B, seed=1)
        nu = np.arange(d, dtype=float)
        exact = np.linalg.solve(eta * K + np.eye(d), nu)
        rho = fbf_contraction(eta, L_B)
        theta = np.zeros(d)
        for _ in range(30):
            new = fbf_inner(lambda z: K @ z, eta, nu, T=1, L_B=L_B, start=theta)
            assert np.sum((new - exact) ** 2) <= rho * np.sum((theta - exact) ** 2) * (1 + 1e-12)
            theta = new

    def test_projected_solution_matches_long_run(self):
        d, eta = 4, 0.5
        _, _, K = quadratic_split(d, 0.5, 2.0, 3.0, seed=2)
        proj = lambda z: np.clip(z, -0.2, 0.2)
        nu = np.array([1.0, -1.0, 0.5, 0.0])
        theta = fbf_inner(lambda z: K @ z, eta, nu, proj, T=2000, L_B=3.0)
        # fixed point of the projected auxiliary map
        resid = theta - proj(theta - (eta * (K @ theta) + theta - nu))
        assert np.linalg.norm(resid) <= 1e-10

    @settings(max_examples=60, deadline=None)
    @given(eta=st.floats(1e-3, 10.0), L_B=st.floats(1e-3, 1e4), delta=st.floats(1e-9, 0.25))
    def test_inner_iterations_is_minimal(self, eta, L_B, delta):
        rho = fbf_contraction(eta, L_B)
        T = inner_iterations(eta, L_B, delta)
        assert 0 < rho < 1
        assert rho**T <= delta * (1 + 1e-9)
        if T > 1:
            assert rho ** (T - 1) > delta * (1 - 1e-9)

    def test_needs_step_information(self):
        with pytest.raises(ValueError):
            fbf_inner(lambda z: z, 1.0, np.zeros(2))
        with pytest.raises(ValueError):
            fbf_inner(lambda z: z, 1.0, np.zeros(2), L_B=1.0, T=0)


class TestConfig:
    def test_theory_constants(self):
        cfg = SlidingConfig.from_constants(2.0, 10.0, 0.5)
        assert cfg.eta == pytest.approx(0.25)
        assert cfg.delta == pytest.approx(1 / (64 / 0.125 + 64 * 0.25 * 100 / 0.5))
        assert cfg.inner_T == inner_iterations(0.25, 10.0, cfg.delta)
        assert cfg.outer_N == math.ceil(math.log(1e8) / 0.125)

    def test_delta_range(self):
        with pytest.raises(ValueError):
            SlidingConfig(eta=1.0, delta=0.3, inner_T=1, outer_N=1)
        with pytest.raises(ValueError):
            SlidingConfig(eta=1.0, delta=0.0, inner_T=1, outer_N=1)

    def test_balanced_regularization(self):
        # the balancing gamma makes the regularization weight equal mu
        for eps, mu, lam, M in [(1e-3, 0.5, 0.2, 3.0), (0.1, 2.0, 1.0, 1.0)]:
            g = gamma_for(eps, mu, lam, M)
            assert alpha_for(eps, g, lam, M) == pytest.approx(mu)
        assert alpha_for(0.1, 2.0, 0.5, 1.0) == pytest.approx(0.1 * 4 * 0.25 / 4)


class TestSlidingRun:
    def test_linear_convergence_and_counters(self):
        op, star, _ = quadratic_split(6, 0.5, 2.0, 10.0)
        cfg = SlidingConfig.from_constants(op.L_A, op.L_B, op.mu_g, eps=1e-8,
                                           dist0_sq=float(np.sum(star**2)))
        res = sliding_run(op, np.zeros(6), cfg, zeta_star=star)
        dist = np.array(res.dist_sq)
        # ratios below the rounding floor carry no information
        live = dist[:-1] > 1e-20 * dist[0]
        ratios = dist[1:][live] / dist[:-1][live]
        assert live.sum() > 50
        assert np.max(ratios) <= 1 - cfg.eta * op.mu_g
        assert res.dist_sq[-1] <= 1e-8 * res.dist_sq[0]
        assert res.n_A == 2 * cfg.outer_N
        assert res.n_B == B_EVALS_PER_INNER * cfg.inner_T * cfg.outer_N
        assert res.counters() == {"n_A": res.n_A, "n_B": res.n_B}

    def test_callback_and_divergence(self):
        op = SplitOperator(lambda z: np.full_like(z, np.inf), np.zeros_like, 1.0, 1.0, 0.5)
        seen = []
        cfg = SlidingConfig(eta=0.1, delta=0.25, inner_T=1, outer_N=3)
        with pytest.raises(NumericDivergence), np.errstate(invalid="ignore"):
            sliding_run(op, np.zeros(2), cfg, callback=lambda k, z: seen.append(k))
        assert seen == []
        op2, _, _ = quadratic_split(3, 0.5, 1.0, 1.0)
        sliding_run(op2, np.zeros(3), cfg, callback=lambda k, z: seen.append(k))
        assert seen == [1, 2, 3]


def euclidean_bilinear(m, d, seed=0):
    rng = np.random.default_rng(seed)
    maps = {"x": EuclideanBox(d, -1.0, 1.0), "p": EuclideanUnconstrained(0),
            "y": EuclideanBox(d, -1.0, 1.0), "q": EuclideanUnconstrained(0)}
    return bilinear_problem(rng.normal(size=(m, d, d)), rng.normal(size=(m, d)), rng.normal(size=(m, d)), maps)


class TestRegularizedSaddle:
    def test_rejects_entropic_and_weak_monotonicity(self):
        w = laplacian(build_graph("path", 2))
        maps = {"x": EntropicSimplex(2), "p": EuclideanUnconstrained(0),
                "y": EuclideanBox(2), "q": EuclideanUnconstrained(0)}
        ent = bilinear_problem(np.zeros((2, 2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), maps)
        with pytest.raises(ValueError, match="entropic"):
            regularize_saddle(ent, w, 1.0, 0.1, 0.5)
        with pytest.raises(ValueError, match="mu > 0"):
            regularize_saddle(euclidean_bilinear(2, 2), w, 1.0, 0.1, 0.0)

    def test_coupling_is_monotone_and_bounded(self):
        prob = euclidean_bilinear(4, 3, seed=1)
        w = laplacian(build_graph("cycle", 4))
        op, st_, _ = regularize_saddle(prob, w, 2.0, 0.3, 0.5)
        rng = np.random.default_rng(0)
        n = st_.size
        Bmat = np.column_stack([op.B(e) for e in np.eye(n)])
        assert np.linalg.norm(Bmat, 2) <= op.L_B + 1e-12
        for _ in range(20):
            u = rng.normal(size=n)
            s, z = st_.split(u)[2], st_.split(u)[5]
            assert u @ Bmat @ u >= 0.3 * (np.sum(s**2) + np.sum(z**2)) - 1e-10
        assert op.mu_g == 0.3

    def test_stacking_roundtrip(self):
        st_ = StackedSaddle(euclidean_bilinear(3, 2))
        v = np.arange(st_.size, dtype=float)
        np.testing.assert_array_equal(st_.join(st_.split(v)), v)
        assert st_.size == 3 * (2 + 0 + 2 + 2 + 0 + 2)

    def test_sliding_reaches_regularized_solution(self):
        graph = build_graph("path", 4)
        inst = hard_instance(1.0, 0.05, 1.0, 4, graph, [0], 3)
        prob = inst.saddle_problem()
        w = laplacian(graph)
        op, st_, proj = regularize_saddle(prob, w, gamma=1.0, alpha=inst.mu, mu=inst.mu)
        cfg = SlidingConfig.from_constants(op.L_A, op.L_B, op.mu_g, eps=1e-10, outer_N=400)
        res = sliding_run(op, np.zeros(st_.size), cfg, proj)
        z = res.zeta
        # natural residual of the projected variational inequality
        resid = z - proj(z - cfg.eta * op.field(z))
        assert np.linalg.norm(resid) <= 1e-8
