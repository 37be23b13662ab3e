import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmprox.prox import (
    DomainError,
    EntropicSimplex,
    EuclideanBall,
    EuclideanBox,
    EuclideanUnconstrained,
    NumericInputError,
    bregman,
    diameter_sq,
    mirror_step,
    softmax_step,
)


# ----------------------------------------------------------------------------
# grid oracle: argmin <g, s> + B(s, t) by nested grid refinement


def _lift(mmap, params):
    """Map grid parameters to points of the set plus a feasibility mask."""
    if mmap.kind == "entropic_simplex":
        last = 1.0 - params.sum(axis=1, keepdims=True)
        pts = np.concatenate([params, last], axis=1)
        return pts, np.all(pts >= 0, axis=1)
    if mmap.kind == "euclidean_ball" and mmap.dim > 1:
        # polar / spherical coordinates keep the curved boundary on the grid
        r = params[:, :1]
        if mmap.dim == 2:
            phi = params[:, 1:2]
            pts = r * np.hstack([np.cos(phi), np.sin(phi)])
        else:
            th, phi = params[:, 1:2], params[:, 2:3]
            pts = r * np.hstack([np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.cos(th)])
        return pts, np.ones(len(params), dtype=bool)
    return params, np.ones(len(params), dtype=bool)


def _bounds(mmap, t, g):
    d = mmap.dim
    if mmap.kind == "entropic_simplex":
        return np.zeros(d - 1), np.ones(d - 1)
    if mmap.kind == "euclidean_box":
        return np.full(d, mmap.lo), np.full(d, mmap.hi)
    if mmap.kind == "euclidean_ball":
        if d == 1:
            return np.array([-mmap.radius]), np.array([mmap.radius])
        # angle ranges span two periods so the zoom window never clips the optimum
        lo = [0.0, -2 * np.pi] if d == 2 else [0.0, 0.0, -2 * np.pi]
        hi = [mmap.radius, 2 * np.pi] if d == 2 else [mmap.radius, np.pi, 2 * np.pi]
        return np.array(lo), np.array(hi)
    # wide fixed window that does not depend on the answer
    span = 4.0 + np.max(np.abs(t)) + np.max(np.abs(g))
    return np.full(d, -span), np.full(d, span)


def grid_argmin(mmap, g, t, points=21, levels=80):
    lo, hi = _bounds(mmap, t, g)
    k = lo.size
    if k == 0:
        return np.ones(1)
    best = None
    for _ in range(levels):
        axes = [np.linspace(lo[i], hi[i], points) for i in range(k)]
        params = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
        pts, ok = _lift(mmap, params)
        pts, params = pts[ok], params[ok]
        vals = pts @ g + mmap.bregman(pts, t)
        j = int(np.argmin(vals))
        best = params[j].copy()
        if mmap.kind == "euclidean_ball" and mmap.dim > 1:
            # wrap the azimuth so the next window sits inside the two periods
            best[-1] = (best[-1] + np.pi) % (2 * np.pi) - np.pi
        cell = (hi - lo) / (points - 1)
        lo0, hi0 = _bounds(mmap, t, g)
        lo, hi = np.maximum(best - 5 * cell, lo0), np.minimum(best + 5 * cell, hi0)
        if np.max(cell) < 1e-9:
            break
    return _lift(mmap, best[None, :])[0][0]


def random_triple(rng):
    dim = int(rng.integers(1, 4))
    kind = rng.integers(4)
    if kind == 0:
        dim = max(dim, 2)
        mmap = EntropicSimplex(dim)
        t = rng.dirichlet(np.ones(dim)) * 0.9 + 0.1 / dim
    elif kind == 1:
        mmap = EuclideanBox(dim, -1.0, 1.5)
        t = rng.uniform(-1.0, 1.5, dim)
    elif kind == 2:
        mmap = EuclideanBall(dim, 1.3)
        t = rng.normal(size=dim)
        t *= rng.uniform(0, 1.3) / np.linalg.norm(t)
    else:
        mmap = EuclideanUnconstrained(dim)
        t = rng.normal(size=dim)
    return mmap, rng.uniform(-2, 2, dim), t


def test_closed_forms_match_grid_oracle_200_triples():
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(200):
        mmap, g, t = random_triple(rng)
        got = mirror_step(mmap, g, t)
        ref = grid_argmin(mmap, g, t)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    assert worst <= 1e-5


# ----------------------------------------------------------------------------
# worked values


class TestEntropic:
    def test_zero_gradient_fixed_point(self):
        np.testing.assert_allclose(mirror_step(EntropicSimplex(2), [0, 0], [0.5, 0.5]), [0.5, 0.5])

    def test_log2_gradient(self):
        got = mirror_step(EntropicSimplex(2), [math.log(2), 0], [0.5, 0.5])
        np.testing.assert_allclose(got, [1 / 3, 2 / 3], atol=1e-12)

    def test_kl_with_zero_coordinate(self):
        assert bregman(EntropicSimplex(2), [1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)

    def test_extreme_gradient_stays_positive(self):
        out = mirror_step(EntropicSimplex(3), [1e4, 0, -1e4], [1 / 3] * 3)
        assert np.all(out > 0) and out.sum() == pytest.approx(1.0)
        assert out[2] == pytest.approx(1.0)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericInputError):
            mirror_step(EntropicSimplex(2), [np.nan, 0], [0.5, 0.5])

    def test_zero_weight_rejected(self):
        with pytest.raises(DomainError):
            mirror_step(EntropicSimplex(2), [0, 0], [1.0, 0.0])

    def test_batched_rows_independent(self):
        mp = EntropicSimplex(3)
        g = np.array([[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]])
        t = np.array([[0.2, 0.3, 0.5], [1 / 3, 1 / 3, 1 / 3]])
        rows = np.stack([mp.step(g[i], t[i]) for i in range(2)])
        np.testing.assert_allclose(mp.step(g, t), rows)

    def test_softmax_floor(self):
        out = softmax_step(np.array([0.0, -1e6]))
        assert out[1] == 1e-300


class TestEuclidean:
    def test_box_clip(self):
        assert mirror_step(EuclideanBox(1), [-1.0], [0.5]).tolist() == [1.0]

    def test_ball_radial(self):
        out = mirror_step(EuclideanBall(2, 1.0), [-3.0, -4.0], [0.0, 0.0])
        np.testing.assert_allclose(out, [0.6, 0.8])

    def test_ball_inside_untouched(self):
        np.testing.assert_allclose(mirror_step(EuclideanBall(2, 1.0), [0.1, 0.0], [0.2, 0.0]), [0.1, 0.0])

    def test_unconstrained(self):
        np.testing.assert_allclose(mirror_step(EuclideanUnconstrained(2), [1, -1], [0, 0]), [-1, 1])

    def test_bregman_half_square(self):
        assert bregman(EuclideanUnconstrained(2), [1, 0], [0, 0]) == 0.5

    def test_non_finite(self):
        with pytest.raises(NumericInputError):
            mirror_step(EuclideanBox(2), [np.inf, 0], [0, 0])

    def test_invalid_sets(self):
        with pytest.raises(ValueError):
            EuclideanBox(2, 1.0, -1.0)
        with pytest.raises(ValueError):
            EuclideanBall(2, 0.0)


class TestDiameters:
    def test_simplex(self):
        assert diameter_sq(EntropicSimplex(5)) == pytest.approx(math.log(5))

    def test_unit_ball(self):
        assert diameter_sq(EuclideanBall(3, 1.0)) == 0.5

    def test_symmetric_box(self):
        assert diameter_sq(EuclideanBox(4, -1, 1)) == 2.0

    def test_unconstrained_infinite(self):
        assert diameter_sq(EuclideanUnconstrained(2)) == math.inf

    def test_simplex_diameter_attained_at_vertex(self):
        mp = EntropicSimplex(4)
        vertex = np.eye(4)[0]
        assert bregman(mp, vertex, mp.center()) == pytest.approx(mp.diameter_sq)

    def test_centers(self):
        np.testing.assert_allclose(EntropicSimplex(4).center(), 0.25)
        assert EuclideanBall(3).center(batch=2).shape == (2, 3)


# ----------------------------------------------------------------------------
# properties

simplex_points = st.integers(2, 6).flatmap(
    lambda d: st.tuples(
        st.lists(st.floats(0.01, 1.0), min_size=d, max_size=d),
        st.lists(st.floats(0.01, 1.0), min_size=d, max_size=d),
        st.lists(st.floats(-5, 5), min_size=d, max_size=d),
    )
)


@settings(max_examples=100, deadline=None)
@given(simplex_points)
def test_entropic_strong_convexity_and_feasibility(data):
    a, b, g = (np.array(v) for v in data)
    a, b = a / a.sum(), b / b.sum()
    mp = EntropicSimplex(a.size)
    # Pinsker: KL >= 0.5 * ||a - b||_1^2
    assert mp.bregman(a, b) >= 0.5 * mp.norm(a - b) ** 2 - 1e-12
    out = mp.step(g, b)
    assert mp.contains(out)


@settings(max_examples=100, deadline=None)
@given(simplex_points, st.integers(0, 2**31 - 1))
def test_entropic_step_variational_inequality(data, seed):
    _, t, g = (np.array(v) for v in data)
    t = t / t.sum()
    mp = EntropicSimplex(t.size)
    s = mp.step(g, t)
    u = np.random.default_rng(seed).dirichlet(np.ones(t.size))
    # <g + grad d(s) - grad d(t), u - s> >= 0
    assert np.dot(g + np.log(s) - np.log(t), u - s) >= -1e-9


vectors = st.integers(1, 5).flatmap(
    lambda d: st.tuples(st.lists(st.floats(-3, 3), min_size=d, max_size=d),
                        st.lists(st.floats(-3, 3), min_size=d, max_size=d))
)


@settings(max_examples=100, deadline=None)
@given(vectors, st.sampled_from(["box", "ball"]))
def test_euclidean_projection_properties(data, kind):
    g, t = (np.array(v) for v in data)
    mp = EuclideanBox(t.size, -1.0, 1.0) if kind == "box" else EuclideanBall(t.size, 1.0)
    t = mp.step(np.zeros_like(t), t)
    s = mp.step(g, t)
    assert mp.contains(s)
    # projection is nonexpansive in the step direction
    s2 = mp.step(g + 0.1, t)
    assert np.linalg.norm(s - s2) <= np.linalg.norm(np.full_like(g, 0.1)) + 1e-12
    assert mp.bregman(s, t) >= 0.5 * np.sum((s - t) ** 2) - 1e-12
