"""Fixed-support Wasserstein barycenters.

The barycenter problem ``min_x (1/m) sum_i W(x, y_i)`` is posed as the
saddle problem with per-node terms

    f_i(x, p_i, q_i) = d^T p_i + 2 max(C) (q_i^T A p_i - b_i^T q_i),
    b_i = (x, y_i),  p_i in simplex(n^2),  q_i in [-1, 1]^(2n).

The penalty coefficient ``2 max(C)`` makes the l1 marginal penalty exact,
so ``min_p d^T p + 2 max(C) ||A p - b||_1`` equals the transport cost.
Plans are vectorized row-major: ``p[i*n + j] = pi[i, j]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .engine import EngineConfig, IterateBlock, NumericDivergence, RunReport, SaddleProblem
from .prox import EntropicSimplex, EuclideanBox, EuclideanUnconstrained, softmax_step

MARGINAL_TOL = 1e-9


@dataclass(frozen=True)
class WbInstance:
    cost: np.ndarray
    measures: np.ndarray

    def __post_init__(self):
        C = np.asarray(self.cost, dtype=float)
        Y = np.atleast_2d(np.asarray(self.measures, dtype=float))
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError("cost must be square")
        if np.any(C < 0):
            raise ValueError("cost must be nonnegative")
        if Y.shape[1] != C.shape[0]:
            raise ValueError("measures and cost disagree on n")
        if np.any(Y < 0) or np.any(np.abs(Y.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("measures must lie on the simplex")
        object.__setattr__(self, "cost", C)
        object.__setattr__(self, "measures", Y)

    @property
    def n(self) -> int:
        return self.cost.shape[0]

    @property
    def m(self) -> int:
        return self.measures.shape[0]

    @property
    def d(self) -> np.ndarray:
        return self.cost.reshape(-1)

    @property
    def max_cost(self) -> float:
        return float(self.cost.max())

    @property
    def A(self) -> np.ndarray:
        return incidence_matrix(self.n)


def incidence_matrix(n: int) -> np.ndarray:
    """``A`` with ``A p = (row sums, column sums)`` of the row-major plan."""
    if n < 1:
        raise ValueError("n must be >= 1")
    A = np.zeros((2 * n, n * n))
    for i in range(n):
        for j in range(n):
            A[i, i * n + j] = 1.0
            A[n + j, i * n + j] = 1.0
    return A


def marginals(p: np.ndarray, n: int) -> np.ndarray:
    """Fast ``A p`` on stacked plans ``(..., n^2) -> (..., 2n)``."""
    P = p.reshape(p.shape[:-1] + (n, n))
    return np.concatenate([P.sum(axis=-1), P.sum(axis=-2)], axis=-1)


def adjoint_marginals(q: np.ndarray, n: int) -> np.ndarray:
    """Fast ``A^T q`` on stacked duals ``(..., 2n) -> (..., n^2)``."""
    qr, qc = q[..., :n], q[..., n:]
    return (qr[..., :, None] + qc[..., None, :]).reshape(q.shape[:-1] + (n * n,))


# ----------------------------------------------------------------------------
# exact oracles


def ot_lp_oracle(C, p, q) -> tuple[float, np.ndarray]:
    """Exact transport cost between ``p`` and ``q`` by linear programming."""
    C = np.asarray(C, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = C.shape[0]
    if abs(p.sum() - q.sum()) > MARGINAL_TOL or np.any(p < -MARGINAL_TOL) or np.any(q < -MARGINAL_TOL):
        raise ValueError("marginals must be nonnegative with equal mass")
    A = incidence_matrix(n)
    res = linprog(C.reshape(-1), A_eq=A, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"OT linear program failed: {res.message}")
    plan = np.maximum(res.x, 0.0).reshape(n, n)
    return float(C.reshape(-1) @ plan.reshape(-1)), plan


def barycenter_objective(inst: WbInstance, x) -> float:
    """``(1/m) sum_i W(x, y_i)``."""
    return float(np.mean([ot_lp_oracle(inst.cost, x, y)[0] for y in inst.measures]))


def barycenter_lp(inst: WbInstance) -> tuple[float, np.ndarray]:
    """Joint LP over ``(x, p_1..p_m)``; returns the optimal mean cost and ``x``."""
    n, m = inst.n, inst.m
    n2 = n * n
    nv = n + m * n2
    c = np.concatenate([np.zeros(n), np.tile(inst.d, m)]) / m
    rows, rhs = [], []
    A = incidence_matrix(n)
    for i in range(m):
        off = n + i * n2
        for r in range(n):
            row = np.zeros(nv)
            row[off:off + n2] = A[r]
            row[r] = -1.0
            rows.append(row)
            rhs.append(0.0)
        for r in range(n):
            row = np.zeros(nv)
            row[off:off + n2] = A[n + r]
            rows.append(row)
            rhs.append(inst.measures[i, r])
    row = np.zeros(nv)
    row[:n] = 1.0
    rows.append(row)
    rhs.append(1.0)
    res = linprog(c, A_eq=np.array(rows), b_eq=np.array(rhs), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"barycenter LP failed: {res.message}")
    return float(res.fun), np.maximum(res.x[:n], 0.0)


def penalty_form(inst: WbInstance, x, p) -> float:
    """``sum_i d^T p_i + 2 max(C) ||A p_i - b_i(x)||_1``."""
    p = np.atleast_2d(p)
    b = np.concatenate([np.tile(x, (inst.m, 1)), inst.measures], axis=1)
    return float(np.sum(p @ inst.d) + 2 * inst.max_cost * np.sum(np.abs(marginals(p, inst.n) - b)))


def wb_gap(inst: WbInstance, x_av, p_hat, q_hat) -> float:
    """Exact duality gap of the summed saddle problem.

    The max side maximizes over the box in closed form; the min side is a
    linear program over simplices with a shared ``x``, solved by coordinate
    minima after grouping the ``q`` coefficients of ``x``.
    """
    x_av = np.asarray(x_av, dtype=float)
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    q_hat = np.atleast_2d(np.asarray(q_hat, dtype=float))
    n, m = inst.n, inst.m
    if p_hat.shape != (m, n * n) or q_hat.shape != (m, 2 * n) or x_av.shape != (n,):
        raise ValueError("inconsistent shapes in wb_gap")
    if (np.any(x_av < -MARGINAL_TOL) or abs(x_av.sum() - 1) > 1e-6 or np.any(p_hat < -MARGINAL_TOL)
            or np.any(np.abs(p_hat.sum(axis=1) - 1) > 1e-6) or np.any(np.abs(q_hat) > 1 + 1e-12)):
        raise ValueError("infeasible inputs to wb_gap")
    c = 2 * inst.max_cost
    hi = penalty_form(inst, x_av, p_hat)
    lin_p = inst.d[None, :] + c * adjoint_marginals(q_hat, n)
    lo = float(np.sum(lin_p.min(axis=1)) - c * np.sum(inst.measures * q_hat[:, n:])
               - c * np.max(q_hat[:, :n].sum(axis=0)))
    return hi - lo


# ----------------------------------------------------------------------------
# saddle problem for the generic engine


def build_wb_saddle(inst: WbInstance) -> SaddleProblem:
    """Per-node WB terms for :func:`decentralized_mirror_prox`.

    The oracle multiplies by the explicit incidence matrix; the specialized
    solver below uses reshaped sums instead.
    """
    n, m = inst.n, inst.m
    A = inst.A
    d = inst.d
    c = 2 * inst.max_cost
    Y = inst.measures

    def node(i, xi, pi, yi, qi):
        b = np.concatenate([xi, Y[i]])
        val = d @ pi + c * (qi @ (A @ pi) - b @ qi)
        return val, -c * qi[:n], d + c * (A.T @ qi), np.zeros(0), c * (A @ pi - b)

    def gap(xbar, p, ybar, q):
        return wb_gap(inst, xbar[0], p, q)

    maps = {"x": EntropicSimplex(n), "p": EntropicSimplex(n * n),
            "y": EuclideanUnconstrained(0), "q": EuclideanBox(2 * n, -1.0, 1.0)}
    # Euclidean coupling constant of q -> (grad_x, grad_p)
    coupling = np.vstack([-np.eye(n, 2 * n), A.T])
    L = c * float(np.linalg.norm(coupling, 2))
    return SaddleProblem(m=m, maps=maps, oracle=node, gap_fn=gap, M_x=c * math.sqrt(n), M_y=0.0,
                         lipschitz=(0.0, L, L, 0.0), name="wb")


def norm_radii(inst: WbInstance, w) -> dict[str, float]:
    """Squared radii of the WB norms (x, p weights 1/(m ln n), 1/(2 m ln n))."""
    n, m = inst.n, inst.m
    lam = w.lambda_min_pos
    return {"RX2": m * math.log(n), "RP2": 2 * m * math.log(n), "RY2": 0.0, "RQ2": float(m * n),
            "RS2": 0.0, "RZ2": 8 * m * n * inst.max_cost**2 / lam**2 if lam > 0 else 0.0}


def wb_lipschitz(inst: WbInstance, w) -> float:
    """``L_zeta = 16 m sqrt(2 n ln n) max(C) chi``."""
    n, m = inst.n, inst.m
    return 16 * m * math.sqrt(2 * n * math.log(n)) * inst.max_cost * w.chi


@dataclass
class WbSolverConfig:
    """Steps of the specialized solver.

    ``beta_x``, ``beta_p`` multiply the entropic updates, ``eta`` the box
    update and ``theta`` the dual update, in the scaled dual coordinate
    ``z / (2 max C)``. The ``literal`` preset (default) uses the closed-form
    steps ``beta = 6 a m ln n``, ``eta = a m n maxC^3 / lam^2`` and
    ``theta = 2 a m n maxC^2 / lam^2``. The ``weighted`` preset is the
    mirror step of the weighted WB norms, the geometry under which the
    rate bound is proven.
    """

    alpha: float
    N: int
    beta_x: float
    beta_p: float
    eta: float
    theta: float
    preset: str = "custom"
    L_zeta: float | None = None
    log_every: int | None = None
    log_at: tuple[int, ...] | None = None

    @classmethod
    def from_instance(cls, inst: WbInstance, w, N: int, preset: str = "literal", alpha: float | None = None,
                      **kw) -> "WbSolverConfig":
        n, m = inst.n, inst.m
        L = wb_lipschitz(inst, w)
        if alpha is None:
            alpha = 1.0 / L if L > 0 else 1.0
        lam = w.lambda_min_pos
        mc = inst.max_cost
        ln = math.log(n)
        if preset == "literal":
            beta = 6 * alpha * m * ln
            return cls(alpha, N, beta, beta, alpha * m * n * mc**3 / lam**2, 2 * alpha * m * n * mc**2 / lam**2,
                       preset, L, **kw)
        if preset == "weighted":
            r = norm_radii(inst, w)
            return cls(alpha, N, 2 * mc * alpha * r["RX2"], alpha * r["RP2"], 2 * mc * alpha * r["RQ2"],
                       alpha * r["RZ2"] / (2 * mc) if mc > 0 else 0.0, preset, L, **kw)
        raise ValueError(f"unknown preset {preset!r}")

    def engine_config(self, inst: WbInstance) -> EngineConfig:
        """Generic-engine config whose per-block steps equal these ones."""
        c = 2 * inst.max_cost
        if c == 0:
            raise ValueError("zero cost: the scaled dual coordinate is degenerate")
        a = self.alpha
        radii = {"RX2": self.beta_x / c / a, "RP2": self.beta_p / a, "RY2": 0.0, "RQ2": self.eta / c / a,
                 "RS2": 0.0, "RZ2": c * self.theta / a}
        return EngineConfig(alpha=a, N=self.N, radii=radii, log_every=self.log_every, log_at=self.log_at,
                            L_zeta=self.L_zeta)

    def logging_iterations(self) -> set[int]:
        if self.log_at is not None:
            return set(int(k) for k in self.log_at)
        every = self.log_every or max(1, math.ceil(self.N / 100))
        out = set(range(every, self.N + 1, every))
        out.add(self.N)
        return out


def dmp_wb_run(inst: WbInstance, w, config: WbSolverConfig, observer=None):
    """Specialized decentralized Mirror-Prox for the barycenter problem.

    Returns the per-node barycenter estimates (averages of the half-step
    ``x``) and a report whose ``final`` block holds every averaged variable,
    with ``z`` in unscaled coordinates.
    """
    n, m = inst.n, inst.m
    d = inst.d
    c = 2 * inst.max_cost
    Y = inst.measures
    bx, bp, eta, th = config.beta_x, config.beta_p, config.eta, config.theta
    rounds = w.rounds_per_apply
    x = np.full((m, n), 1.0 / n)
    p = np.full((m, n * n), 1.0 / (n * n))
    q = np.zeros((m, 2 * n))
    z = np.zeros((m, n))
    acc = {k: np.zeros_like(v) for k, v in (("x", x), ("p", p), ("q", q), ("z", z))}
    log_iters = config.logging_iterations()
    report = RunReport()
    comm = calls = 0
    bpd = bp * d
    bpc = bp * c

    def box_step(base, plan, xs):
        # clip(base + eta * (A plan - (xs, Y))) without building A
        P = plan.reshape(m, n, n)
        out = np.empty((m, 2 * n))
        out[:, :n] = P.sum(axis=2)
        out[:, :n] -= xs
        out[:, n:] = P.sum(axis=1)
        out[:, n:] -= Y
        out *= eta
        out += base
        return np.clip(out, -1.0, 1.0, out=out)

    for k in range(config.N):
        Wz, Wx = w.apply(z), w.apply(x)
        comm += rounds
        calls += m
        lp, lx = np.log(p), np.log(x)
        u = softmax_step(lp - bpd - bpc * adjoint_marginals(q, n))
        s = softmax_step(lx + bx * (q[:, :n] - Wz))
        v = box_step(q, p, x)
        lam = z + th * Wx
        Wl, Ws = w.apply(lam), w.apply(s)
        comm += rounds
        calls += m
        p = softmax_step(lp - bpd - bpc * adjoint_marginals(v, n))
        x = softmax_step(lx + bx * (v[:, :n] - Wl))
        q = box_step(q, u, s)
        z = z + th * Ws
        if not (np.isfinite(x.sum()) and np.isfinite(z.sum())):
            raise NumericDivergence("non-finite WB iterate", k)
        acc["x"] += s
        acc["p"] += u
        acc["q"] += v
        acc["z"] += lam
        if observer is not None:
            observer(k, {"x": x, "p": p, "q": q, "z": z, "s": s, "u": u, "v": v, "lam": lam})
        it = k + 1
        Wxh = w.apply(acc["x"] / it)
        cx = math.sqrt(float((Wxh * Wxh).sum()))
        gap = None
        if it in log_iters:
            gap = wb_gap(inst, (acc["x"] / it).mean(axis=0), acc["p"] / it, acc["q"] / it)
        report.rows.append((it, gap, cx, 0.0, comm, calls))
    N = config.N
    empty = np.zeros((m, 0))
    report.final = IterateBlock(acc["x"] / N, acc["p"] / N, empty, empty, acc["q"] / N, c * acc["z"] / N)
    report.last = IterateBlock(x, p, empty, empty, q, c * z)
    return report.final.x, report


# ----------------------------------------------------------------------------
# entropic baseline


@dataclass
class IbpResult:
    barycenter: np.ndarray
    trace: list[float]
    events: list[tuple[int, str]] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return bool(self.events)


def ibp_baseline(inst: WbInstance, gamma_reg: float, iterations: int) -> IbpResult:
    """Iterative Bregman projections for the entropic barycenter.

    Divergence events are recorded instead of raised: kernel entries that
    underflow to zero although their cost is finite, all-zero kernel rows,
    and non-finite or zero scalings during the iterations. The trace holds
    the mean transport cost of the current plans.
    """
    if not gamma_reg > 0:
        raise ValueError("gamma_reg must be positive")
    C, Y = inst.cost, inst.measures
    m, n = inst.m, inst.n
    events: list[tuple[int, str]] = []
    with np.errstate(all="ignore"):
        K = np.exp(-C / gamma_reg)
    under = int(np.sum((K == 0.0) & np.isfinite(C)))
    if under:
        events.append((0, f"kernel underflow: {under} of {K.size} entries are exactly zero"))
    if np.any(K.sum(axis=1) == 0) or np.any(K.sum(axis=0) == 0):
        events.append((0, "kernel has an all-zero row or column"))
    u = np.ones((m, n))
    v = np.ones((m, n))
    bary = np.full(n, 1.0 / n)
    trace: list[float] = []
    with np.errstate(all="ignore"):
        for it in range(1, iterations + 1):
            v = Y / (u @ K)
            Kv = v @ K.T
            bary = np.exp(np.mean(np.log(u * Kv), axis=0))
            u = bary[None, :] / Kv
            plans = u[:, :, None] * K[None] * v[:, None, :]
            cost = float(np.mean(np.sum(plans * C[None], axis=(1, 2))))
            trace.append(cost)
            bad = not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(np.isfinite(bary)))
            if bad or not math.isfinite(cost):
                events.append((it, "non-finite scaling or objective"))
                break
            if np.any(Kv == 0):
                events.append((it, "zero denominator in scaling update"))
                break
    return IbpResult(bary, trace, events)


# ----------------------------------------------------------------------------
# instances and files


def grid_support(n: int, lo: float = -10.0, hi: float = 10.0) -> np.ndarray:
    return np.linspace(lo, hi, n)


def discretized_gaussian(grid: np.ndarray, mean: float, var: float) -> np.ndarray:
    w = np.exp(-((grid - mean) ** 2) / (2 * var))
    return w / w.sum()


def gaussian_histograms(m: int, n: int, support_lo: float = -10.0, support_hi: float = 10.0,
                        mean_range=(-5.0, 5.0), var_range=(0.8, 1.8), seed: int = 0) -> np.ndarray:
    """Seeded discretized Gaussians on a uniform grid, one per row."""
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    grid = grid_support(n, support_lo, support_hi)
    means = rng.uniform(*mean_range, size=m)
    vars_ = rng.uniform(*var_range, size=m)
    return np.stack([discretized_gaussian(grid, mu, s2) for mu, s2 in zip(means, vars_)])


def squared_distance_cost(grid: np.ndarray, normalize: bool = True) -> np.ndarray:
    C = (grid[:, None] - grid[None, :]) ** 2
    return C / C.max() if normalize and C.max() > 0 else C


def random_instance(m: int, n: int, seed: int = 0, cost: str = "squared") -> WbInstance:
    """Gaussian measures on ``[-10, 10]`` with a normalized cost (max 1)."""
    Y = gaussian_histograms(m, n, seed=seed)
    grid = grid_support(n)
    if cost == "squared":
        C = squared_distance_cost(grid)
    elif cost == "absolute":
        C = np.abs(grid[:, None] - grid[None, :])
        C = C / C.max()
    else:
        raise ValueError(f"unknown cost {cost!r}")
    return WbInstance(C, Y)


def write_matrix(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Path(path).write_text("\n".join(",".join(repr(float(v)) for v in row) for row in M) + "\n")


def read_matrix(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([[float(v) for v in ln.split(",")] for ln in rows])


def load_instance(measures_path, cost_path) -> WbInstance:
    Y = read_matrix(measures_path)
    Y = Y / Y.sum(axis=1, keepdims=True)
    return WbInstance(read_matrix(cost_path), Y)
