"""Lower-bound instance and span-growth audit.

Nodes in a set ``B`` far from a set ``B_rho`` hold complementary bilinear
chains, so every new nonzero coordinate must travel between the two sets.
The audit tracks the largest nonzero index of each node's ``x`` and ``y``
through a run and checks it against the count of local steps and
communication rounds spent so far.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import SaddleProblem, auto_config, decentralized_mirror_prox
from .prox import EuclideanBall, EuclideanUnconstrained
from .topology import Graph

TRACE_HEADER = ("event", "node", "step_type", "max_nonzero_x", "max_nonzero_y")


class EmptyNodeSetError(ValueError):
    """No node lies at the requested distance from ``B``."""


def chain_matrix(d: int, odd_rows: bool) -> np.ndarray:
    """Identity plus ``-2`` on alternating superdiagonal entries.

    With ``odd_rows`` the ``-2`` sits on 1-based odd rows (``A_2``); without,
    on 1-based even rows (``A_1``).
    """
    if d < 4 or d % 2:
        raise ValueError("dimension must be even and >= 4")
    A = np.eye(d)
    start = 0 if odd_rows else 1
    for i in range(start, d - 1, 2):
        A[i, i + 1] = -2.0
    return A


def a1(d: int) -> np.ndarray:
    return chain_matrix(d, odd_rows=False)


def a2(d: int) -> np.ndarray:
    return chain_matrix(d, odd_rows=True)


def far_set(graph: Graph, B, rho: int) -> list[int]:
    """Nodes at graph distance at least ``rho`` from every node of ``B``."""
    dist = graph.distances_from(list(B))
    return [int(i) for i in np.flatnonzero(dist >= rho)]


def max_nonzero(v, tol: float = 0.0) -> int:
    """1-based index of the last entry with ``|v| > tol``; 0 if none."""
    nz = np.flatnonzero(np.abs(np.asarray(v)) > tol)
    return int(nz[-1]) + 1 if nz.size else 0


@dataclass
class HardInstance:
    L: float
    eps: float
    R: float
    d: int
    graph: Graph
    B: list[int]
    B_rho: list[int]
    rho: int
    role: np.ndarray = field(repr=False)  # 1 on B_rho, 2 on B, 0 elsewhere

    @property
    def m(self) -> int:
        return self.graph.node_count

    @property
    def kappa(self) -> float:
        return 16.0 * self.eps / self.R**2

    @property
    def mu(self) -> float:
        # strong convexity of each f_i in x (concavity in y)
        return 2.0 * self.kappa

    def coupling(self, i: int) -> tuple[float, np.ndarray | None]:
        """Weight and matrix of the bilinear term at node ``i``."""
        r = self.role[i]
        if r == 1:
            return self.m / len(self.B_rho) * self.L / 4.0, a1(self.d)
        if r == 2:
            return self.m / len(self.B) * self.L / 4.0, a2(self.d)
        return 0.0, None

    def linear_weight(self, i: int) -> float:
        if self.role[i] == 2:
            return self.m / len(self.B) * self.L**2 * self.R**2 / self.eps
        return 0.0

    def value(self, i: int, x, y) -> float:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c, A = self.coupling(i)
        out = self.kappa * (x @ x - y @ y) - self.linear_weight(i) * y[0]
        if A is not None:
            out += c * x @ A @ y
        return float(out)

    def gradients(self, i: int, x, y) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c, A = self.coupling(i)
        gx = 2.0 * self.kappa * x
        gy = -2.0 * self.kappa * y
        gy[0] -= self.linear_weight(i)
        if A is not None:
            gx = gx + c * (A @ y)
            gy = gy + c * (A.T @ x)
        return gx, gy

    def mean_value(self, x, y) -> float:
        return float(np.mean([self.value(i, x, y) for i in range(self.m)]))

    def mean_closed_form(self, x, y) -> float:
        """``(L/2) x^T A y + kappa (|x|^2 - |y|^2) - (L^2 R^2 / eps) y_1``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        A = 0.5 * (a1(self.d) + a2(self.d))
        return float(0.5 * self.L * x @ A @ y + self.kappa * (x @ x - y @ y)
                     - self.L**2 * self.R**2 / self.eps * y[0])

    def saddle_problem(self) -> SaddleProblem:
        d, R = self.d, self.R
        maps = {"x": EuclideanBall(d, R), "p": EuclideanUnconstrained(0),
                "y": EuclideanBall(d, R), "q": EuclideanUnconstrained(0)}
        empty = np.zeros(0)

        def node(i, xi, pi, yi, qi):
            gx, gy = self.gradients(i, xi, yi)
            return self.value(i, xi, yi), gx, empty, gy, empty

        cs = [self.coupling(i)[0] for i in range(self.m)]
        norms = [0.0 if A is None else float(np.linalg.norm(A, 2)) for _, A in map(self.coupling, range(self.m))]
        L_xy = max(c * nrm for c, nrm in zip(cs, norms))
        lin = max(self.linear_weight(i) for i in range(self.m))
        M = L_xy * R + 2.0 * self.kappa * R
        return SaddleProblem(m=self.m, maps=maps, oracle=node, M_x=M, M_y=M + lin,
                             lipschitz=(2.0 * self.kappa, L_xy, L_xy, 2.0 * self.kappa), name="hardcase")


def hard_instance(L: float, eps: float, R: float, d: int, graph: Graph, B, rho: int) -> HardInstance:
    """Build the instance; ``B_rho`` is every node at distance ``>= rho`` from ``B``."""
    if d < 4 or d % 2:
        raise ValueError("dimension must be even and >= 4")
    if not (L > 0 and eps > 0 and R > 0):
        raise ValueError("L, eps and R must be positive")
    B = sorted({int(b) for b in B})
    if not B:
        raise ValueError("B must be non-empty")
    B_rho = far_set(graph, B, rho)
    if not B_rho:
        raise EmptyNodeSetError(f"no node at distance >= {rho} from B")
    role = np.zeros(graph.node_count, dtype=int)
    role[B_rho] = 1
    role[B] = 2
    return HardInstance(L, eps, R, d, graph, B, B_rho, int(rho), role)


# ----------------------------------------------------------------------------
# span audit


def time_index_bound(T: float, t: float, tau: float, rho: int) -> int:
    """``floor((T - 2t) / (t + rho tau)) + 2``."""
    return math.floor((T - 2.0 * t) / (t + rho * tau)) + 2


def count_index_bound(n_local: int, n_comm: int, rho: int) -> int:
    """Count form: each new coordinate costs a local step, and every one
    past the second needs a ``rho``-round crossing between the two sets."""
    return min(n_local, n_comm // rho + 2)


@dataclass
class SpanTrace:
    rows: list[tuple[int, int, str, int, int]] = field(default_factory=list)
    # (event, n_local, n_comm) per event
    counts: list[tuple[int, int, int]] = field(default_factory=list)

    def record(self, step_type: str, x, y, n_local: int, n_comm: int):
        ev = len(self.counts)
        self.counts.append((ev, n_local, n_comm))
        for i in range(x.shape[0]):
            self.rows.append((ev, i, step_type, max_nonzero(x[i]), max_nonzero(y[i])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()

    def global_index(self) -> list[int]:
        """Largest nonzero index over all nodes after each event."""
        out = [0] * len(self.counts)
        for ev, _, _, kx, ky in self.rows:
            out[ev] = max(out[ev], kx, ky)
        return out


def traced_run(inst: HardInstance, w, N: int, alpha: float | None = None) -> SpanTrace:
    """Decentralized run from zero, logging a comm event and a local event
    per stage (each stage exchanges once, then updates once)."""
    prob = inst.saddle_problem()
    cfg = auto_config(prob, w, N, log_at=())
    if alpha is not None:
        cfg.alpha = alpha
    trace = SpanTrace()
    zeros = np.zeros((inst.m, inst.d))
    trace.record("local", zeros, zeros, 0, 0)
    state = {"local": 0, "comm": 0, "prev": (zeros, zeros)}

    def obs(stage, k, blk):
        # the exchange moves no primal coordinate, so it logs the old point
        state["comm"] += w.rounds_per_apply
        trace.record("comm", *state["prev"], state["local"], state["comm"])
        state["local"] += 1
        state["prev"] = (blk.x.copy(), blk.y.copy())
        trace.record("local", blk.x, blk.y, state["local"], state["comm"])

    decentralized_mirror_prox(prob, w, cfg, observer=obs)
    return trace


def local_only_trace(inst: HardInstance, node: int, steps: int, alpha: float = 0.1) -> SpanTrace:
    """Extragradient on ``f_node`` alone from zero, with no communication."""
    d = inst.d
    mp = EuclideanBall(d, inst.R)
    x = np.zeros(d)
    y = np.zeros(d)
    trace = SpanTrace()
    hx, hy = x, y
    for k in range(steps):
        if k % 2 == 0:
            gx, gy = inst.gradients(node, x, y)
            hx, hy = mp.step(alpha * gx, x), mp.step(-alpha * gy, y)
            cur = (hx, hy)
        else:
            gx, gy = inst.gradients(node, hx, hy)
            x, y = mp.step(alpha * gx, x), mp.step(-alpha * gy, y)
            cur = (x, y)
        trace.record("local", cur[0][None, :], cur[1][None, :], k + 1, 0)
    return trace


@dataclass
class AuditResult:
    ok: bool
    violations: list[str]
    max_index: list[int]
    bounds: list[int]


def span_trace_audit(trace: SpanTrace, rho: int, t: float = 1.0, tau: float = 1.0) -> AuditResult:
    """Check each event's global max index against both bounds."""
    got = trace.global_index()
    bounds, bad = [], []
    for (ev, n_local, n_comm), k in zip(trace.counts, got):
        T = n_local * t + n_comm * tau
        bound = 0
        if n_local:
            bound = min(time_index_bound(T, t, tau, rho), count_index_bound(n_local, n_comm, rho))
        bounds.append(bound)
        if k > bound:
            bad.append(f"event {ev}: index {k} > bound {bound} (local={n_local}, comm={n_comm})")
    return AuditResult(not bad, bad, got, bounds)
