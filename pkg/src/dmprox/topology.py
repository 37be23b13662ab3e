"""Communication graphs, Laplacian gossip matrices and Chebyshev mixing.

A gossip matrix acts on stacked per-node vectors of shape ``(m, d)`` by
left multiplication, which is the ``W (x) I_d`` Kronecker lift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ZERO_EIG_RTOL = 1e-9
ER_RETRIES = 1000

GRAPH_KINDS = ("complete", "star", "cycle", "path", "erdos_renyi")


class TopologyError(ValueError):
    """Invalid graph or gossip-matrix construction."""


class GenerationFailure(TopologyError):
    """Random graph generation exhausted its retry budget."""


class DisconnectedGraphError(TopologyError):
    """The Laplacian kernel has dimension larger than one."""


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``0..node_count-1``."""

    node_count: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.node_count < 1:
            raise TopologyError("node_count must be >= 1")
        clean = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise TopologyError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise TopologyError(f"edge ({i}, {j}) out of range")
            clean.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(clean))

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def neighbors(self, i: int) -> list[int]:
        out = [b for a, b in self.edges if a == i] + [a for a, b in self.edges if b == i]
        return sorted(out)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.node_count, self.node_count))
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = 1.0
        return adj

    def is_connected(self) -> bool:
        if self.node_count == 1:
            return True
        n_comp, _ = connected_components(csr_matrix(self.adjacency()), directed=False)
        return n_comp == 1

    def distances_from(self, sources) -> np.ndarray:
        """Hop distance from the nearest node in ``sources`` (BFS)."""
        dist = np.full(self.node_count, -1, dtype=int)
        frontier = sorted(set(int(s) for s in sources))
        for s in frontier:
            dist[s] = 0
        nbrs = [self.neighbors(i) for i in range(self.node_count)]
        level = 0
        while frontier:
            level += 1
            nxt = []
            for u in frontier:
                for v in nbrs[u]:
                    if dist[v] < 0:
                        dist[v] = level
                        nxt.append(v)
            frontier = sorted(nxt)
        return dist


def build_graph(kind: str, m: int, p: float | None = None, seed: int | None = None) -> Graph:
    """Build a connected graph of ``m`` nodes.

    ``kind`` is one of complete, star (hub 0), cycle, path or erdos_renyi.
    Erdos-Renyi draws are rejected until connected, each retry using the
    sub-seed sequence ``(seed, attempt)``.
    """
    if m < 1:
        raise TopologyError("m must be >= 1")
    if kind == "complete":
        edges = {(i, j) for i in range(m) for j in range(i + 1, m)}
    elif kind == "star":
        edges = {(0, j) for j in range(1, m)}
    elif kind == "path":
        edges = {(i, i + 1) for i in range(m - 1)}
    elif kind == "cycle":
        edges = {(i, i + 1) for i in range(m - 1)}
        if m >= 3:
            edges.add((0, m - 1))
    elif kind == "erdos_renyi":
        if p is None or not (0.0 < p <= 1.0):
            raise TopologyError("erdos_renyi needs 0 < p <= 1")
        base = 0 if seed is None else int(seed)
        iu, ju = np.triu_indices(m, k=1)
        for attempt in range(ER_RETRIES):
            rng = np.random.default_rng([base, attempt])
            keep = rng.random(iu.size) < p
            g = Graph(m, frozenset(zip(iu[keep].tolist(), ju[keep].tolist())))
            if g.is_connected():
                return g
        raise GenerationFailure(f"no connected G({m}, {p}) in {ER_RETRIES} draws")
    else:
        raise TopologyError(f"unknown graph kind {kind!r}")
    return Graph(m, frozenset(edges))


def parse_topology(spec: str, m: int, seed: int | None = None) -> Graph:
    """Parse ``complete``, ``star``, ``cycle``, ``path`` or ``erdos:<p>``."""
    spec = spec.strip()
    if spec.startswith("erdos"):
        _, _, prob = spec.partition(":")
        try:
            p = float(prob)
        except ValueError as exc:
            raise TopologyError(f"bad erdos spec {spec!r}") from exc
        return build_graph("erdos_renyi", m, p=p, seed=seed)
    return build_graph(spec, m)


@dataclass(frozen=True)
class GossipMatrix:
    """Symmetric PSD mixing matrix with a cached spectral summary.

    For a single node there is no positive eigenvalue; by convention
    ``lambda_min_pos = 0`` and ``chi = 1``.
    """

    entries: np.ndarray
    lambda_max: float
    lambda_min_pos: float
    chi: float
    eigenvalues: np.ndarray
    graph: Graph | None = None
    rounds_per_apply: int = 1

    @property
    def node_count(self) -> int:
        return self.entries.shape[0]

    @property
    def spectral_norm(self) -> float:
        return self.lambda_max

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Return ``W v`` for ``v`` of shape ``(m,)`` or ``(m, d)``."""
        return self.entries @ v

    def matrix(self) -> np.ndarray:
        return self.entries


def spectral_summary(entries: np.ndarray) -> tuple[np.ndarray, float, float, float]:
    eig = np.linalg.eigvalsh(entries)
    lam_max = float(max(eig[-1], 0.0))
    tol = ZERO_EIG_RTOL * lam_max
    pos = eig[eig > tol]
    if pos.size == 0:
        return eig, lam_max, 0.0, 1.0
    lam_min = float(pos[0])
    return eig, lam_max, lam_min, lam_max / lam_min


def gossip_matrix(entries, graph: Graph | None = None) -> GossipMatrix:
    """Validate a user-supplied mixing matrix and summarize its spectrum.

    Checks symmetry, PSD, constant-vector kernel and, when ``graph`` is
    given, zero entries off the edge set.
    """
    w = np.array(entries, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise TopologyError("mixing matrix must be square")
    if not np.array_equal(w, w.T):
        raise TopologyError("mixing matrix must be symmetric")
    m = w.shape[0]
    if graph is not None:
        if graph.node_count != m:
            raise TopologyError("graph size does not match matrix")
        allowed = graph.adjacency() + np.eye(m)
        bad = np.argwhere((allowed == 0) & (w != 0))
        if bad.size:
            i, j = bad[0]
            raise TopologyError(f"topology violation: W[{i},{j}] != 0 but ({i},{j}) is not an edge")
    eig, lam_max, lam_min, chi = spectral_summary(w)
    if eig[0] < -ZERO_EIG_RTOL * max(lam_max, 1.0):
        raise TopologyError(f"mixing matrix not PSD (min eigenvalue {eig[0]:.3e})")
    if m > 1:
        n_zero = int(np.sum(eig <= ZERO_EIG_RTOL * lam_max))
        if n_zero != 1:
            raise DisconnectedGraphError(f"kernel dimension {n_zero}, expected 1")
        if np.max(np.abs(w @ np.ones(m))) > 1e-12 * max(lam_max, 1.0):
            raise TopologyError("constant vector is not in the kernel")
    return GossipMatrix(w, lam_max, lam_min, chi, eig, graph)


def laplacian(g: Graph) -> GossipMatrix:
    """Graph Laplacian: degree on the diagonal, -1 on edges."""
    if not g.is_connected():
        raise DisconnectedGraphError("graph is disconnected; Laplacian kernel dimension > 1")
    adj = g.adjacency()
    w = np.diag(adj.sum(axis=1)) - adj
    return gossip_matrix(w, g)


def chebyshev_T(k: int, beta):
    """Chebyshev polynomial of the first kind via the three-term recurrence."""
    beta = np.asarray(beta, dtype=float)
    t_prev, t_cur = np.ones_like(beta), beta.copy()
    if k == 0:
        return t_prev
    for _ in range(k - 1):
        t_prev, t_cur = t_cur, 2.0 * beta * t_cur - t_prev
    return t_cur


def spectrum_delta(c1: float, K: int) -> float:
    """Half-width of the interval around 1 holding the transformed spectrum."""
    return 2.0 * c1**K / (1.0 + c1 ** (2 * K))


@dataclass(frozen=True)
class ChebyshevMixer:
    """Operator ``P_K(c3 W)`` with ``P_K(b) = 1 - T_K(c2 (1 - b)) / T_K(c2)``.

    Each application costs exactly ``K`` multiplications by the base matrix.
    When the base spectrum is flat (``chi == 1``) the polynomial is
    undefined and the mixer falls back to ``K = 1``, i.e. ``c3 W``.
    """

    base: GossipMatrix
    K: int
    c1: float
    c2: float
    c3: float
    note: str = ""
    _eigs: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def rounds_per_apply(self) -> int:
        return self.K

    @property
    def node_count(self) -> int:
        return self.base.node_count

    @property
    def graph(self) -> Graph | None:
        return self.base.graph

    def poly(self, beta):
        """Evaluate ``P_K`` at points ``beta`` (already scaled by ``c3``)."""
        beta = np.asarray(beta, dtype=float)
        if self.note:
            return beta
        return 1.0 - chebyshev_T(self.K, self.c2 * (1.0 - beta)) / chebyshev_T(self.K, self.c2)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.sort(self.poly(self.c3 * self.base.eigenvalues))

    def _positive(self) -> np.ndarray:
        tol = ZERO_EIG_RTOL * self.base.lambda_max
        return self.poly(self.c3 * self.base.eigenvalues[self.base.eigenvalues > tol])

    @property
    def lambda_max(self) -> float:
        return float(np.max(self._positive())) if self.base.node_count > 1 else 0.0

    @property
    def lambda_min_pos(self) -> float:
        return float(np.min(self._positive())) if self.base.node_count > 1 else 0.0

    @property
    def effective_chi(self) -> float:
        if self.base.node_count == 1:
            return 1.0
        return self.lambda_max / self.lambda_min_pos

    chi = effective_chi

    @property
    def spectral_norm(self) -> float:
        return self.lambda_max

    @property
    def delta(self) -> float:
        return spectrum_delta(self.c1, self.K)

    @property
    def chi_bound(self) -> float:
        d = self.delta
        return (1.0 + d) / (1.0 - d)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Apply the polynomial with ``K`` base multiplications."""
        v = np.asarray(v, dtype=float)
        if self.note:
            return self.c3 * self.base.apply(v)
        c2, c3 = self.c2, self.c3

        def M(u):
            return c2 * (u - c3 * self.base.apply(u))

        t_prev, t_cur = v, M(v)
        for _ in range(self.K - 1):
            t_prev, t_cur = t_cur, 2.0 * M(t_cur) - t_prev
        return v - t_cur / float(chebyshev_T(self.K, c2))

    def matrix(self) -> np.ndarray:
        """Assemble the polynomial matrix explicitly (for checks)."""
        return self.apply(np.eye(self.node_count))


def default_degree(w: GossipMatrix) -> int:
    return max(1, int(math.floor(math.sqrt(w.chi))))


def chebyshev_mixer(w: GossipMatrix, K: int | None = None) -> ChebyshevMixer:
    """Chebyshev-accelerated mixer of degree ``K`` (default ``floor(sqrt(chi))``)."""
    if K is None:
        K = default_degree(w)
    if K < 1:
        raise TopologyError("K must be >= 1")
    if w.node_count == 1 or w.lambda_min_pos == 0.0:
        return ChebyshevMixer(w, 1, 0.0, math.inf, 1.0, note="single node: zero operator")
    chi = w.chi
    c3 = 2.0 / (w.lambda_max + w.lambda_min_pos)
    if chi <= 1.0 + 1e-12:
        return ChebyshevMixer(w, 1, 0.0, math.inf, c3, note="chi == 1: polynomial undefined, using c3*W")
    sq = math.sqrt(chi)
    c1 = (sq - 1.0) / (sq + 1.0)
    c2 = (chi + 1.0) / (chi - 1.0)
    return ChebyshevMixer(w, int(K), c1, c2, c3)


def write_edge_list(g: Graph, path) -> None:
    lines = [f"m={g.node_count}"] + [f"{i} {j}" for i, j in g.sorted_edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> Graph:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("m="):
        raise TopologyError("edge list must start with 'm=<count>'")
    m = int(lines[0][2:])
    edges = set()
    for ln in lines[1:]:
        a, b = ln.split()
        edges.add((int(a), int(b)))
    return Graph(m, frozenset(edges))
