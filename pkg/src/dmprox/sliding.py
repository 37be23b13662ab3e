"""Gradient sliding for strongly monotone variational inequalities.

The field ``g = A + B`` is split into an expensive part ``A`` (local
oracles) and a cheap part ``B`` (communication). Each outer step evaluates
``A`` twice and solves the auxiliary problem

    find theta in Q:  <eta B(theta) + theta - nu, zeta - theta> >= 0

approximately with Tseng's forward-backward-forward method, costing two
``B`` evaluations per inner iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import NumericDivergence, SaddleProblem

B_EVALS_PER_INNER = 2


@dataclass
class SplitOperator:
    """``A`` and ``B`` with Lipschitz constants and evaluation counters."""

    A: Callable[[np.ndarray], np.ndarray]
    B: Callable[[np.ndarray], np.ndarray]
    L_A: float
    L_B: float
    mu_g: float
    n_A: int = 0
    n_B: int = 0

    def eval_A(self, z):
        self.n_A += 1
        return self.A(z)

    def eval_B(self, z):
        self.n_B += 1
        return self.B(z)

    def field(self, z):
        return self.A(z) + self.B(z)


def _identity(z):
    return z


def fbf_contraction(eta: float, L_B: float) -> float:
    """Per-iteration squared-distance factor of the inner FBF run.

    The auxiliary operator is 1-strongly monotone and ``(1 + eta L_B)``
    Lipschitz; with step ``1 / (2 (1 + eta L_B))`` Tseng's inequality gives
    a contraction of ``1 - 3 / (8 (1 + eta L_B))``.
    """
    return 1.0 - 3.0 / (8.0 * (1.0 + eta * L_B))


def inner_iterations(eta: float, L_B: float, delta: float) -> int:
    """Smallest ``T`` with ``fbf_contraction ** T <= delta``."""
    rho = fbf_contraction(eta, L_B)
    return max(1, math.ceil(math.log(delta) / math.log(rho)))


def fbf_inner(B: Callable, eta: float, nu: np.ndarray, proj: Callable | None = None, T: int = 1,
              L_B: float | None = None, start: np.ndarray | None = None, step: float | None = None) -> np.ndarray:
    """Approximate the auxiliary solution with ``T`` FBF iterations.

    ``B`` may be a :class:`SplitOperator` (its ``eval_B`` is used so the
    counter moves) or a plain callable. Starts at ``nu`` unless ``start``
    is given.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    proj = _identity if proj is None else proj
    if isinstance(B, SplitOperator):
        L_B = B.L_B if L_B is None else L_B
        Bf = B.eval_B
    else:
        Bf = B
    if step is None:
        if L_B is None:
            raise ValueError("need L_B or an explicit step")
        step = 1.0 / (2.0 * (1.0 + eta * L_B))
    nu = np.asarray(nu, dtype=float)
    theta = nu.copy() if start is None else np.asarray(start, dtype=float).copy()
    for _ in range(T):
        g = eta * Bf(theta) + theta - nu
        half = proj(theta - step * g)
        g_half = eta * Bf(half) + half - nu
        theta = half - step * (g_half - g)
    return theta


@dataclass
class SlidingConfig:
    eta: float
    delta: float
    inner_T: int
    outer_N: int
    alpha: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.delta <= 0.25:
            raise ValueError("delta must lie in (0, 1/4]")

    @classmethod
    def from_constants(cls, L_A: float, L_B: float, mu_g: float, eps: float = 1e-8,
                       dist0_sq: float = 1.0, outer_N: int | None = None, **kw) -> "SlidingConfig":
        """Step, inner accuracy and iteration counts from the theory."""
        eta = min(1.0 / (2.0 * L_A), 1.0 / (6.0 * mu_g)) if L_A > 0 else 1.0 / (6.0 * mu_g)
        delta = min(0.25, 1.0 / (64.0 / (eta * mu_g) + 64.0 * eta * L_B**2 / mu_g))
        T = inner_iterations(eta, L_B, delta)
        if outer_N is None:
            outer_N = max(1, math.ceil(math.log(max(dist0_sq / eps, 1.0)) / (eta * mu_g)))
        return cls(eta=eta, delta=delta, inner_T=T, outer_N=outer_N, **kw)


@dataclass
class SlidingResult:
    zeta: np.ndarray
    n_A: int
    n_B: int
    dist_sq: list[float] = field(default_factory=list)

    def counters(self) -> dict[str, int]:
        return {"n_A": self.n_A, "n_B": self.n_B}


def sliding_run(op: SplitOperator, zeta0, config: SlidingConfig, proj: Callable | None = None,
                zeta_star=None, callback: Callable | None = None) -> SlidingResult:
    """Outer sliding loop; records ``||zeta^k - zeta*||^2`` when given.

    ``callback(k, zeta)`` runs after each outer step ``k = 1..N``.
    """
    proj = _identity if proj is None else proj
    z = np.asarray(zeta0, dtype=float).copy()
    star = None if zeta_star is None else np.asarray(zeta_star, dtype=float)
    hist = [] if star is None else [float(np.sum((z - star) ** 2))]
    eta = config.eta
    for k in range(config.outer_N):
        Az = op.eval_A(z)
        nu = z - eta * Az
        theta = fbf_inner(op, eta, nu, proj, config.inner_T, start=z)
        omega = theta + eta * (Az - op.eval_A(theta))
        z = proj(omega)
        if not np.all(np.isfinite(z)):
            raise NumericDivergence("non-finite sliding iterate", k)
        if star is not None:
            hist.append(float(np.sum((z - star) ** 2)))
        if callback is not None:
            callback(k + 1, z)
    return SlidingResult(z, op.n_A, op.n_B, hist)


def alpha_for(eps: float, gamma: float, lambda_min_pos: float, M: float) -> float:
    """Regularization weight ``eps gamma^2 lambda_min_pos^2 / (4 M^2)``."""
    return eps * gamma**2 * lambda_min_pos**2 / (4.0 * M**2)


def gamma_for(eps: float, mu: float, lambda_min_pos: float, M: float) -> float:
    """Balance ``gamma`` with ``gamma^2 = 4 M^2 mu / (eps lambda_min_pos^2)``."""
    return math.sqrt(4.0 * M**2 * mu / (eps * lambda_min_pos**2))


class StackedSaddle:
    """Flattening helper for ``(x, p, s, y, q, z)`` over ``m`` nodes."""

    def __init__(self, problem: SaddleProblem):
        self.problem = problem
        m = problem.m
        dims = [problem.dim("x"), problem.dim("p"), problem.dim("y"), problem.dim("y"),
                problem.dim("q"), problem.dim("x")]
        self.shapes = [(m, d) for d in dims]
        self.sizes = [m * d for d in dims]
        self.offsets = np.cumsum([0] + self.sizes)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def split(self, vec):
        return [vec[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i]) for i in range(6)]

    def join(self, blocks):
        return np.concatenate([np.asarray(b, dtype=float).ravel() for b in blocks])


def regularize_saddle(problem: SaddleProblem, w, gamma: float, alpha: float, mu: float,
                      L: float | None = None) -> tuple[SplitOperator, StackedSaddle, Callable]:
    """Split field of ``F + gamma<s,Wy> + gamma<z,Wx> + a/2|s|^2 - a/2|z|^2``.

    ``A`` carries the local gradients, ``B`` the coupling and regularizer.
    Returns the operator, the stacking helper and the Euclidean projection
    onto the feasible product set.
    """
    if not mu > 0:
        raise ValueError("sliding needs mu > 0; use the engine for merely convex-concave problems")
    for key in "xpyq":
        if problem.maps[key].kind == "entropic_simplex" and problem.maps[key].dim > 0:
            raise ValueError("sliding projections are Euclidean; entropic blocks are not supported")
    st = StackedSaddle(problem)
    maps = problem.maps

    def A(vec):
        x, p, s, y, q, z = st.split(vec)
        _, gx, gp, gy, gq = problem.evaluate(x, p, y, q)
        return st.join([gx, gp, np.zeros_like(s), -gy, -gq, np.zeros_like(z)])

    def B(vec):
        x, p, s, y, q, z = st.split(vec)
        return st.join([gamma * w.apply(z), np.zeros_like(p), gamma * w.apply(y) + alpha * s,
                        -gamma * w.apply(s), np.zeros_like(q), -gamma * w.apply(x) + alpha * z])

    def proj(vec):
        x, p, s, y, q, z = st.split(vec)
        out = [maps[k].step(np.zeros_like(v), v) for k, v in zip("xpyq", (x, p, y, q))]
        return st.join([out[0], out[1], s, out[2], out[3], z])

    L_A = max(problem.lipschitz) if L is None else L
    L_B = gamma * w.lambda_max + alpha
    return SplitOperator(A, B, L_A, L_B, min(mu, alpha)), st, proj
