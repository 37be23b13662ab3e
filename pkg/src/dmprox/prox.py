"""Proximal setups and closed-form mirror steps.

Every map acts on the last axis, so a stacked ``(m, dim)`` array is treated
as ``m`` independent points of the product set.
"""

from __future__ import annotations

import math

import numpy as np

SIMPLEX_FLOOR = 1e-300


class NumericInputError(ValueError):
    """Non-finite input to a mirror step."""


class DomainError(ValueError):
    """Point outside the domain of the prox-function."""


def _check_finite(g):
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericInputError("non-finite entries in step direction")
    return g


class MirrorMap:
    """Base class: feasible set, prox-function ``d`` and its Bregman divergence."""

    kind = "abstract"
    norm_name = "l2"

    def __init__(self, dim: int):
        if dim < 0:
            raise ValueError("dim must be >= 0")
        self.dim = int(dim)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    def center(self, batch: int | None = None) -> np.ndarray:
        c = self._center()
        return c if batch is None else np.tile(c, (batch, 1))

    def step(self, g, t) -> np.ndarray:
        """``argmin_s <g, s> + B(s, t)`` over the set."""
        raise NotImplementedError

    def prox_fn(self, t) -> np.ndarray:
        raise NotImplementedError

    def grad_prox(self, t) -> np.ndarray:
        raise NotImplementedError

    def bregman(self, t, t_ref) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        t_ref = np.asarray(t_ref, dtype=float)
        return self.prox_fn(t) - self.prox_fn(t_ref) - np.sum(self.grad_prox(t_ref) * (t - t_ref), axis=-1)

    def norm(self, v) -> np.ndarray:
        return np.linalg.norm(np.asarray(v, dtype=float), axis=-1)

    def contains(self, t, tol: float = 1e-9) -> bool:
        raise NotImplementedError

    @property
    def diameter_sq(self) -> float:
        raise NotImplementedError


class EntropicSimplex(MirrorMap):
    """Probability simplex with negative entropy, strongly convex in l1."""

    kind = "entropic_simplex"
    norm_name = "l1"

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("simplex needs dim >= 1")
        super().__init__(dim)

    def _center(self):
        return np.full(self.dim, 1.0 / self.dim)

    def step(self, g, t):
        g = _check_finite(g)
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise DomainError("entropic step needs strictly positive t")
        return softmax_step(np.log(t) - g)

    def prox_fn(self, t):
        t = np.asarray(t, dtype=float)
        safe = np.where(t > 0, t, 1.0)
        return np.sum(np.where(t > 0, t * np.log(safe), 0.0), axis=-1)

    def grad_prox(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise DomainError("entropy gradient undefined at zero coordinates")
        return 1.0 + np.log(t)

    def bregman(self, t, t_ref):
        # KL divergence with 0 ln 0 := 0; both points on the simplex.
        t = np.asarray(t, dtype=float)
        t_ref = np.asarray(t_ref, dtype=float)
        if np.any(t_ref <= 0):
            raise DomainError("reference point must be strictly positive")
        safe = np.where(t > 0, t, 1.0)
        return np.sum(np.where(t > 0, t * (np.log(safe) - np.log(t_ref)), 0.0), axis=-1) \
            - np.sum(t, axis=-1) + np.sum(t_ref, axis=-1)

    def norm(self, v):
        return np.sum(np.abs(np.asarray(v, dtype=float)), axis=-1)

    def contains(self, t, tol=1e-9):
        t = np.asarray(t, dtype=float)
        return bool(np.all(t >= -tol) and np.all(np.abs(t.sum(axis=-1) - 1.0) <= tol))

    @property
    def diameter_sq(self):
        return math.log(self.dim)


def softmax_step(logits) -> np.ndarray:
    """Normalized ``exp`` of ``logits`` along the last axis, floored at 1e-300."""
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return np.maximum(e, SIMPLEX_FLOOR, out=e)


class _Euclidean(MirrorMap):
    def prox_fn(self, t):
        t = np.asarray(t, dtype=float)
        return 0.5 * np.sum(t * t, axis=-1)

    def grad_prox(self, t):
        return np.asarray(t, dtype=float)

    def bregman(self, t, t_ref):
        diff = np.asarray(t, dtype=float) - np.asarray(t_ref, dtype=float)
        return 0.5 * np.sum(diff * diff, axis=-1)


class EuclideanUnconstrained(_Euclidean):
    kind = "euclidean_unconstrained"

    def _center(self):
        return np.zeros(self.dim)

    def step(self, g, t):
        return np.asarray(t, dtype=float) - _check_finite(g)

    def contains(self, t, tol=1e-9):
        return bool(np.all(np.isfinite(t)))

    @property
    def diameter_sq(self):
        return math.inf


class EuclideanBox(_Euclidean):
    """Box ``[lo, hi]^dim`` with ``0.5 ||.||^2``."""

    kind = "euclidean_box"

    def __init__(self, dim: int, lo: float = -1.0, hi: float = 1.0):
        if not lo <= hi:
            raise ValueError("box needs lo <= hi")
        super().__init__(dim)
        self.lo, self.hi = float(lo), float(hi)

    def __repr__(self):
        return f"EuclideanBox(dim={self.dim}, lo={self.lo}, hi={self.hi})"

    def _center(self):
        return np.full(self.dim, min(max(0.0, self.lo), self.hi))

    def step(self, g, t):
        return np.clip(np.asarray(t, dtype=float) - _check_finite(g), self.lo, self.hi)

    def contains(self, t, tol=1e-9):
        t = np.asarray(t, dtype=float)
        return bool(np.all(t >= self.lo - tol) and np.all(t <= self.hi + tol))

    @property
    def diameter_sq(self):
        c = min(max(0.0, self.lo), self.hi)
        far = max(self.lo**2, self.hi**2)
        return 0.5 * self.dim * (far - c * c)


class EuclideanBall(_Euclidean):
    """Ball of given radius centred at the origin."""

    kind = "euclidean_ball"

    def __init__(self, dim: int, radius: float = 1.0):
        if radius <= 0:
            raise ValueError("radius must be positive")
        super().__init__(dim)
        self.radius = float(radius)

    def __repr__(self):
        return f"EuclideanBall(dim={self.dim}, radius={self.radius})"

    def _center(self):
        return np.zeros(self.dim)

    def step(self, g, t):
        y = np.asarray(t, dtype=float) - _check_finite(g)
        nrm = np.linalg.norm(y, axis=-1, keepdims=True)
        scale = np.where(nrm > self.radius, self.radius / np.where(nrm > 0, nrm, 1.0), 1.0)
        return y * scale

    def contains(self, t, tol=1e-9):
        return bool(np.all(np.linalg.norm(np.asarray(t, dtype=float), axis=-1) <= self.radius + tol))

    @property
    def diameter_sq(self):
        return 0.5 * self.radius**2


def mirror_step(mmap: MirrorMap, g, t) -> np.ndarray:
    return mmap.step(g, t)


def bregman(mmap: MirrorMap, t, t_ref):
    return mmap.bregman(t, t_ref)


def diameter_sq(mmap: MirrorMap) -> float:
    return mmap.diameter_sq
