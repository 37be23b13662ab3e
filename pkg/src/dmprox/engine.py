"""Mirror-Prox and its decentralized driver over a simulated gossip network.

The decentralized method runs the generic two-step Mirror-Prox on the
stacked variable ``zeta = (x, p, s | y, q, z)`` of the Lagrangian

    S(u, v) = sum_i f_i(x_i, p_i, y_i, q_i) + <s, W_y y> + <z, W_x x>,

so every ``W`` application in the operator is a round of neighbour
exchanges. Per-block steps are ``alpha * R_T^2``, which is the mirror step
of the weighted prox-function ``sum_T d_T / R_T^2``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .prox import EuclideanUnconstrained, MirrorMap
from .topology import ChebyshevMixer, GossipMatrix, TopologyError

BLOCKS = ("x", "p", "s", "y", "q", "z")
CSV_HEADER = ("iter", "gap", "consensus_x", "consensus_y", "comm_rounds", "oracle_calls")


class NumericDivergence(RuntimeError):
    """Non-finite state met during an iteration."""

    def __init__(self, msg: str, iteration: int):
        super().__init__(f"{msg} (iteration {iteration})")
        self.iteration = iteration


class UnsupportedProblemClass(TypeError):
    """No exact duality-gap evaluator for this problem."""


class InvalidMatrix(ValueError):
    """Mixing matrix without a positive eigenvalue."""


# ----------------------------------------------------------------------------
# problem and iterate types


@dataclass
class SaddleProblem:
    """Sum-type saddle problem with per-node blocks.

    ``oracle(i, x_i, p_i, y_i, q_i)`` returns ``(value, gx, gp, gy, gq)``.
    ``batch_oracle(x, p, y, q)`` is optional and must agree with stacking
    per-node calls; it only exists for speed.
    ``gap_fn(x_bar, p, y_bar, q)`` evaluates the exact gap where a closed form
    exists. ``lipschitz`` holds ``(L_xpxp, L_xpyq, L_yqxp, L_yqyq)``.
    """

    m: int
    maps: dict[str, MirrorMap]
    oracle: Callable
    M_x: float
    M_y: float
    lipschitz: tuple[float, float, float, float]
    batch_oracle: Callable | None = None
    gap_fn: Callable | None = None
    name: str = "custom"

    def dim(self, key: str) -> int:
        return self.maps[key].dim

    def evaluate(self, x, p, y, q):
        """Stacked values and gradients for all nodes."""
        if self.batch_oracle is not None:
            return self.batch_oracle(x, p, y, q)
        outs = [self.oracle(i, x[i], p[i], y[i], q[i]) for i in range(self.m)]
        vals = np.array([o[0] for o in outs], dtype=float)
        grads = [np.stack([np.asarray(o[k], dtype=float).reshape(-1) for o in outs]) for k in range(1, 5)]
        return (vals, *grads)


@dataclass
class IterateBlock:
    """Stacked per-node variables, each of shape ``(m, dim)``."""

    x: np.ndarray
    p: np.ndarray
    s: np.ndarray
    y: np.ndarray
    q: np.ndarray
    z: np.ndarray

    def blocks(self) -> list[np.ndarray]:
        return [getattr(self, b) for b in BLOCKS]

    @classmethod
    def from_blocks(cls, arrs: Sequence[np.ndarray]) -> "IterateBlock":
        return cls(*[np.asarray(a, dtype=float) for a in arrs])

    def copy(self) -> "IterateBlock":
        return IterateBlock.from_blocks([a.copy() for a in self.blocks()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.blocks()])

    def unflat(self, vec: np.ndarray) -> "IterateBlock":
        out, pos = [], 0
        for a in self.blocks():
            out.append(np.asarray(vec[pos:pos + a.size], dtype=float).reshape(a.shape))
            pos += a.size
        return IterateBlock.from_blocks(out)


def dual_maps(problem: SaddleProblem) -> dict[str, MirrorMap]:
    maps = dict(problem.maps)
    maps["s"] = EuclideanUnconstrained(problem.dim("y"))
    maps["z"] = EuclideanUnconstrained(problem.dim("x"))
    return maps


def initial_block(problem: SaddleProblem) -> IterateBlock:
    """Prox-centres for primal blocks, zero for the dual blocks."""
    maps = dual_maps(problem)
    return IterateBlock.from_blocks([maps[b].center(problem.m) for b in BLOCKS])


# ----------------------------------------------------------------------------
# constants


def dual_radii(M_x: float, M_y: float, w, m: int) -> tuple[float, float]:
    """``(R_Z, R_S)`` with ``R_Z^2 = 2 m M_x^2 / lambda_min_pos^2``."""
    if M_x < 0 or M_y < 0:
        raise ValueError("gradient bounds must be >= 0")
    lam = w.lambda_min_pos
    if not lam > 0:
        raise InvalidMatrix("lambda_min_pos is zero; graph disconnected or single node")
    return math.sqrt(2 * m) * M_x / lam, math.sqrt(2 * m) * M_y / lam


def combine_lipschitz(L_uu: float, L_uv: float, L_vu: float, L_vv: float) -> float:
    vals = (L_uu, L_uv, L_vu, L_vv)
    if any(v < 0 for v in vals):
        raise ValueError("Lipschitz constants must be >= 0")
    return 2.0 * max(vals)


def block_smoothness(lipschitz, radii: dict[str, float], w_x, w_y=None):
    """The four block constants of the aggregated ``(u, v)`` split.

    ``radii`` holds squared radii ``RX2, RP2, RY2, RQ2, RS2, RZ2``. Operator
    norms of the mixing matrices are bounded by their spectral norm.
    """
    w_y = w_x if w_y is None else w_y
    L_xx, L_xy, L_yx, L_yy = lipschitz
    ru = radii["RX2"] + radii["RP2"]
    rv = radii["RY2"] + radii["RQ2"]
    nx, ny = w_x.spectral_norm, w_y.spectral_norm
    cross = math.sqrt(radii["RX2"] * radii["RZ2"]) * nx + math.sqrt(radii["RY2"] * radii["RS2"]) * ny
    L_uu = L_xx * ru
    L_vv = L_yy * rv
    L_uv = math.sqrt(2.0) * (L_xy * math.sqrt(ru * rv) + cross)
    L_vu = math.sqrt(2.0) * (L_yx * math.sqrt(ru * rv) + cross)
    return L_uu, L_uv, L_vu, L_vv


@dataclass
class EngineConfig:
    """Step, iteration count and squared radii of the combined norm."""

    alpha: float
    N: int
    radii: dict[str, float]
    chebyshev_degree: int | None = None
    log_every: int | None = None
    log_at: tuple[int, ...] | None = None
    L_zeta: float | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        missing = {"RX2", "RP2", "RY2", "RQ2", "RS2", "RZ2"} - set(self.radii)
        if missing:
            raise ValueError(f"missing radii {sorted(missing)}")

    def step_scales(self) -> dict[str, float]:
        r = self.radii
        return {"x": r["RX2"], "p": r["RP2"], "s": r["RS2"], "y": r["RY2"], "q": r["RQ2"], "z": r["RZ2"]}

    def logging_iterations(self) -> set[int]:
        if self.log_at is not None:
            return set(int(k) for k in self.log_at)
        every = self.log_every or max(1, math.ceil(self.N / 100))
        out = set(range(every, self.N + 1, every))
        out.add(self.N)
        return out


def primal_radii(problem: SaddleProblem) -> dict[str, float]:
    """``m`` times the single-node ``R^2`` of each primal block (0 if empty)."""
    out = {}
    for key, name in (("x", "RX2"), ("p", "RP2"), ("y", "RY2"), ("q", "RQ2")):
        mp = problem.maps[key]
        r2 = 0.0 if mp.dim == 0 else problem.m * mp.diameter_sq
        if not math.isfinite(r2):
            raise ValueError(f"block {key} has an unbounded set; supply radii explicitly")
        out[name] = r2
    return out


def auto_config(problem: SaddleProblem, w_x, N: int, w_y=None, **kw) -> EngineConfig:
    """Radii from set diameters and dual bounds, ``alpha = 1 / L_zeta``."""
    w_y = w_x if w_y is None else w_y
    radii = primal_radii(problem)
    R_Z, _ = dual_radii(problem.M_x, 0.0, w_x, problem.m)
    _, R_S = dual_radii(0.0, problem.M_y, w_y, problem.m)
    radii["RZ2"] = R_Z**2
    radii["RS2"] = R_S**2
    L = combine_lipschitz(*block_smoothness(problem.lipschitz, radii, w_x, w_y))
    return EngineConfig(alpha=1.0 / L, N=N, radii=radii, L_zeta=L, **kw)


# ----------------------------------------------------------------------------
# network substrate


class Network:
    """Synchronous gossip substrate.

    Each call to :meth:`exchange` is one communication step in which every
    node sends its current slices to neighbours; it costs ``rounds_per_apply``
    rounds (``K`` for a Chebyshev mixer). The base matrix is audited against
    the graph so that node ``i`` only ever reads neighbour values.
    """

    def __init__(self, w_x, w_y=None):
        self.w_x = w_x
        self.w_y = w_x if w_y is None else w_y
        for w in (self.w_x, self.w_y):
            base = w.base if isinstance(w, ChebyshevMixer) else w
            if base.graph is not None:
                m = base.node_count
                allowed = base.graph.adjacency() + np.eye(m)
                bad = np.argwhere((allowed == 0) & (base.entries != 0))
                if bad.size:
                    i, j = bad[0]
                    raise TopologyError(f"topology violation at W[{i},{j}]")
        self.rounds = 0

    def exchange(self, x, s, y, z):
        """Return ``(W_x x, W_y s, W_y y, W_x z)``."""
        self.rounds += max(self.w_x.rounds_per_apply, self.w_y.rounds_per_apply)
        return self.w_x.apply(x), self.w_y.apply(s), self.w_y.apply(y), self.w_x.apply(z)


def saddle_value(problem: SaddleProblem, w_x, w_y, blk: IterateBlock) -> float:
    vals = problem.evaluate(blk.x, blk.p, blk.y, blk.q)[0]
    return float(np.sum(vals) + np.sum(blk.s * w_y.apply(blk.y)) + np.sum(blk.z * w_x.apply(blk.x)))


def operator_from_mixed(problem, blk, mixed):
    wx_x, wy_s, wy_y, wx_z = mixed
    _, gx, gp, gy, gq = problem.evaluate(blk.x, blk.p, blk.y, blk.q)
    return IterateBlock(gx + wx_z, gp, wy_y, -gy - wy_s, -gq, -wx_x)


def saddle_operator(problem: SaddleProblem, w_x, w_y, blk: IterateBlock) -> IterateBlock:
    """``g = (grad_u S, -grad_v S)`` at ``blk``."""
    mixed = (w_x.apply(blk.x), w_y.apply(blk.s), w_y.apply(blk.y), w_x.apply(blk.z))
    return operator_from_mixed(problem, blk, mixed)


# ----------------------------------------------------------------------------
# metrics and report


def consensus_residual(blk: IterateBlock, w_x, w_y=None) -> tuple[float, float]:
    w_y = w_x if w_y is None else w_y
    return float(np.linalg.norm(w_x.apply(blk.x))), float(np.linalg.norm(w_y.apply(blk.y)))


def consensus_deviation(v: np.ndarray) -> float:
    """Root mean squared distance of node slices to their average."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return 0.0
    dev = v - v.mean(axis=0, keepdims=True)
    return float(np.sqrt(np.mean(np.sum(dev * dev, axis=-1))))


def consensus_average(v: np.ndarray) -> np.ndarray:
    """The ``(1/m)(1 1^T (x) I)`` projection, keeping the stacked shape."""
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v.mean(axis=0, keepdims=True), v.shape).copy()


def duality_gap_bilinear(problem: SaddleProblem, blk: IterateBlock) -> float:
    """Exact gap at consensus-projected averages for supported classes."""
    if problem.gap_fn is None:
        raise UnsupportedProblemClass(f"no closed-form gap for problem class {problem.name!r}")
    return float(problem.gap_fn(consensus_average(blk.x), blk.p, consensus_average(blk.y), blk.q))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class RunReport:
    """Per-iteration metrics and the final ergodic averages."""

    rows: list[tuple] = field(default_factory=list)
    final: object = None
    last: object = None
    events: list[str] = field(default_factory=list)

    @property
    def comm_rounds(self) -> int:
        return self.rows[-1][4] if self.rows else 0

    @property
    def oracle_calls(self) -> int:
        return self.rows[-1][5] if self.rows else 0

    def gaps(self) -> dict[int, float]:
        return {r[0]: r[1] for r in self.rows if r[1] is not None}

    def column(self, name: str) -> list:
        k = CSV_HEADER.index(name)
        return [r[k] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in self.rows:
            wr.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "RunReport":
        rd = csv.reader(io.StringIO(text))
        header = tuple(next(rd))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = []
        for rec in rd:
            it, gap, cx, cy, comm, orc = rec
            rows.append((int(it), float(gap) if gap else None, float(cx), float(cy), int(comm), int(orc)))
        return cls(rows=rows)

    def summary(self) -> dict:
        gaps = self.gaps()
        last = self.rows[-1] if self.rows else (0, None, 0.0, 0.0, 0, 0)
        return {
            "iterations": last[0],
            "final_gap": gaps[max(gaps)] if gaps else None,
            "final_consensus_x": last[2],
            "final_consensus_y": last[3],
            "comm_rounds": last[4],
            "oracle_calls": last[5],
        }


# ----------------------------------------------------------------------------
# solvers


def mirror_prox(operator: Callable, maps: Sequence[MirrorMap], zeta0: Sequence[np.ndarray], alpha: float,
                N: int, scales: Sequence[float] | None = None, callback: Callable | None = None):
    """Generic Mirror-Prox on a block-separable set.

    ``operator(blocks) -> blocks`` is the monotone field. Block ``b`` moves
    with step ``alpha * scales[b]``. Returns the average of the half-steps
    and the last full iterate. ``callback(k, avg, half, full)`` runs after
    each iteration with the running average.
    """
    nb = len(maps)
    scales = [1.0] * nb if scales is None else list(scales)
    cur = [np.asarray(z, dtype=float).copy() for z in zeta0]
    acc = [np.zeros_like(z) for z in cur]
    for k in range(N):
        g = operator(cur)
        _check(g, k)
        half = [maps[b].step(alpha * scales[b] * g[b], cur[b]) for b in range(nb)]
        g2 = operator(half)
        _check(g2, k)
        cur = [maps[b].step(alpha * scales[b] * g2[b], cur[b]) for b in range(nb)]
        for b in range(nb):
            acc[b] += half[b]
        if callback is not None:
            callback(k + 1, [a / (k + 1) for a in acc], half, cur)
    return [a / N for a in acc], cur


def _check(blocks, k):
    for b in blocks:
        if not np.all(np.isfinite(b)):
            raise NumericDivergence("non-finite operator output", k)


def decentralized_mirror_prox(problem: SaddleProblem, w_x, config: EngineConfig, w_y=None,
                              observer: Callable | None = None, start: IterateBlock | None = None):
    """Run the decentralized method and log metrics.

    Each iteration makes two exchanges (before the half-step and before the
    full step) and two oracle calls per node. ``observer(stage, k, blk)`` is
    called after every exchange-plus-update stage with ``stage`` in
    ``{"half", "full"}``.
    """
    w_y = w_x if w_y is None else w_y
    net = Network(w_x, w_y)
    maps = dual_maps(problem)
    maps_list = [maps[b] for b in BLOCKS]
    sc = config.step_scales()
    scales = [sc[b] for b in BLOCKS]
    alpha = config.alpha
    log_iters = config.logging_iterations()
    report = RunReport()
    calls = [0]

    def op(blk):
        mixed = net.exchange(blk.x, blk.s, blk.y, blk.z)
        calls[0] += problem.m
        return operator_from_mixed(problem, blk, mixed)

    cur = (initial_block(problem) if start is None else start).copy()
    acc = [np.zeros_like(a) for a in cur.blocks()]
    for k in range(config.N):
        g = op(cur)
        _check(g.blocks(), k)
        half = IterateBlock.from_blocks([maps_list[b].step(alpha * scales[b] * gb, cb)
                                         for b, (gb, cb) in enumerate(zip(g.blocks(), cur.blocks()))])
        if observer is not None:
            observer("half", k, half)
        g2 = op(half)
        _check(g2.blocks(), k)
        cur = IterateBlock.from_blocks([maps_list[b].step(alpha * scales[b] * gb, cb)
                                        for b, (gb, cb) in enumerate(zip(g2.blocks(), cur.blocks()))])
        if observer is not None:
            observer("full", k, cur)
        for a, h in zip(acc, half.blocks()):
            a += h
        it = k + 1
        avg = IterateBlock.from_blocks([a / it for a in acc])
        cx, cy = consensus_residual(avg, w_x, w_y)
        gap = None
        if it in log_iters and problem.gap_fn is not None:
            gap = duality_gap_bilinear(problem, avg)
        report.rows.append((it, gap, cx, cy, net.rounds, calls[0]))
    report.final = IterateBlock.from_blocks([a / config.N for a in acc])
    report.last = cur
    return report.final, report


# ----------------------------------------------------------------------------
# linear-over-simple-sets problem class


def _lin_max(mp: MirrorMap, c: np.ndarray) -> float:
    """``max_{t in set} <c, t>`` in closed form."""
    c = np.asarray(c, dtype=float)
    if mp.dim == 0:
        return 0.0
    kind = mp.kind
    if kind == "entropic_simplex":
        return float(np.max(c))
    if kind == "euclidean_box":
        return float(np.sum(np.maximum(c * mp.lo, c * mp.hi)))
    if kind == "euclidean_ball":
        return float(mp.radius * np.linalg.norm(c))
    raise UnsupportedProblemClass(f"no closed-form linear maximum over {mp!r}")


def _max_l2(mp: MirrorMap) -> float:
    if mp.dim == 0:
        return 0.0
    if mp.kind == "entropic_simplex":
        return 1.0
    if mp.kind == "euclidean_box":
        return math.sqrt(mp.dim) * max(abs(mp.lo), abs(mp.hi))
    if mp.kind == "euclidean_ball":
        return mp.radius
    return math.inf


def bilinear_problem(K, a, b, maps: dict[str, MirrorMap], name: str = "bilinear") -> SaddleProblem:
    """``f_i = u_i^T K_i v_i + a_i^T u_i + b_i^T v_i`` with ``u=(x,p)``, ``v=(y,q)``.

    ``K`` has shape ``(m, dx+dp, dy+dq)``; the exact gap is available since
    every inner problem is a linear program over a simple set.
    """
    K = np.asarray(K, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = K.shape[0]
    dx, dp, dy, dq = (maps[k].dim for k in "xpyq")
    if K.shape != (m, dx + dp, dy + dq) or a.shape != (m, dx + dp) or b.shape != (m, dy + dq):
        raise ValueError("inconsistent shapes for bilinear problem")

    def batch(x, p, y, q):
        u = np.concatenate([x, p], axis=1)
        v = np.concatenate([y, q], axis=1)
        Kv = np.einsum("iab,ib->ia", K, v)
        Ku = np.einsum("iab,ia->ib", K, u)
        vals = np.sum(u * Kv, axis=1) + np.sum(a * u, axis=1) + np.sum(b * v, axis=1)
        gu = Kv + a
        gv = Ku + b
        return vals, gu[:, :dx], gu[:, dx:], gv[:, :dy], gv[:, dy:]

    def node(i, xi, pi, yi, qi):
        u = np.concatenate([xi, pi])
        v = np.concatenate([yi, qi])
        Kv, Ku = K[i] @ v, u @ K[i]
        gu, gv = Kv + a[i], Ku + b[i]
        return float(u @ Kv + a[i] @ u + b[i] @ v), gu[:dx], gu[dx:], gv[:dy], gv[dy:]

    def gap(xbar, p, ybar, q):
        u = np.concatenate([xbar, p], axis=1)
        v = np.concatenate([ybar, q], axis=1)
        cv = np.einsum("iab,ia->ib", K, u) + b
        cu = np.einsum("iab,ib->ia", K, v) + a
        const_max = float(np.sum(a * u))
        const_min = float(np.sum(b * v))
        hi = const_max + _lin_max(maps["y"], cv[:, :dy].sum(axis=0)) \
            + sum(_lin_max(maps["q"], cv[i, dy:]) for i in range(m))
        lo = const_min - _lin_max(maps["x"], -cu[:, :dx].sum(axis=0)) \
            - sum(_lin_max(maps["p"], -cu[i, dx:]) for i in range(m))
        return hi - lo

    norms = [np.linalg.norm(K[i], 2) if K[i].size else 0.0 for i in range(m)]
    L = max(norms) if norms else 0.0
    ru = math.hypot(_max_l2(maps["y"]), _max_l2(maps["q"]))
    rx = math.hypot(_max_l2(maps["x"]), _max_l2(maps["p"]))
    Mx = max(np.linalg.norm(K[i, :dx, :], 2) * ru + np.linalg.norm(a[i, :dx]) for i in range(m)) if dx else 0.0
    My = max(np.linalg.norm(K[i, :, :dy], 2) * rx + np.linalg.norm(b[i, :dy]) for i in range(m)) if dy else 0.0
    return SaddleProblem(m=m, maps=dict(maps), oracle=node, batch_oracle=batch, gap_fn=gap,
                         M_x=float(Mx), M_y=float(My), lipschitz=(0.0, L, L, 0.0), name=name)


def with_oracle_only(problem: SaddleProblem) -> SaddleProblem:
    """Copy of ``problem`` that forces per-node oracle calls."""
    return replace(problem, batch_oracle=None)
