"""Gossip matrices, time-varying graph sequences and their spectra."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

RANK_RTOL = 1e-9
SYM_TOL = 1e-10
BISECT_TOL = 1e-8
BISECT_MAXITER = 200
# relative slack when comparing a target ratio with gamma_n (cos(pi/3) is inexact)
GAMMA_RTOL = 1e-12


class GraphError(ValueError):
    pass


class RankZeroError(ValueError):
    """Raised when a spectrum has no positive eigenvalue."""


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected weighted graph with each pair stored once.

    Weights are positive, except for edges explicitly reweighted into
    ``[0, 1]`` by :func:`reweighted_line_graph`, which may reach zero.
    """

    node_count: int
    edges: tuple = ()

    def __post_init__(self):
        if self.node_count < 1:
            raise GraphError("graph needs at least one node")
        seen = set()
        clean = []
        for e in self.edges:
            i, j, w = int(e[0]), int(e[1]), float(e[2])
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise GraphError(f"edge ({i}, {j}) out of range")
            if w < 0 or not math.isfinite(w):
                raise GraphError(f"invalid weight {w} on edge ({i}, {j})")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
            clean.append((i, j, w))
        object.__setattr__(self, "edges", tuple(clean))

    @classmethod
    def from_pairs(cls, n, pairs, weight=1.0):
        return cls(n, tuple((i, j, weight) for i, j in pairs))

    def adjacency(self):
        """Neighbour lists over edges of strictly positive weight."""
        adj = [[] for _ in range(self.node_count)]
        for i, j, w in self.edges:
            if w > 0:
                adj[i].append(j)
                adj[j].append(i)
        return adj

    def degrees(self):
        return [len(a) for a in self.adjacency()]

    def distances_from(self, sources: Iterable[int]):
        """Breadth-first hop distances from a set of nodes (``inf`` if unreachable)."""
        adj = self.adjacency()
        dist = [math.inf] * self.node_count
        frontier = list(sources)
        for s in frontier:
            dist[s] = 0
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if dist[v] == math.inf:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        return dist

    def set_distance(self, a: Iterable[int], b: Iterable[int]):
        dist = self.distances_from(a)
        return min(dist[v] for v in b)

    def is_connected(self):
        return all(d < math.inf for d in self.distances_from([0]))

    def to_json(self):
        return json.dumps({"n": self.node_count, "edges": [list(e) for e in self.edges]})

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(int(doc["n"]), tuple(tuple(e) for e in doc["edges"]))


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    lam_max: float
    lam_min_plus: float | None  # None when the matrix has rank zero

    @property
    def rank(self):
        return int(np.sum(self.eigenvalues > RANK_RTOL * self.lam_max)) if self.lam_max > 0 else 0

    @property
    def condition(self):
        if self.lam_min_plus is None:
            raise RankZeroError("condition number of a rank-zero matrix")
        return self.lam_max / self.lam_min_plus


def spectrum(m) -> Spectrum:
    """Full symmetric eigendecomposition with a relative rank cut.

    ``lam_min_plus`` is the smallest eigenvalue above ``1e-9 * lam_max``;
    it is ``None`` for the zero matrix.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("spectrum needs a square matrix")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    ev = np.linalg.eigvalsh(0.5 * (m + m.T))
    lam_max = float(ev[-1]) if ev.size else 0.0
    if lam_max <= 0:
        return Spectrum(ev, max(lam_max, 0.0), None)
    pos = ev[ev > RANK_RTOL * lam_max]
    return Spectrum(ev, lam_max, float(pos[0]))


@dataclass(frozen=True, eq=False)
class GossipMatrix:
    """Symmetric PSD matrix compatible with a graph whose kernel holds ``1``."""

    matrix: np.ndarray
    graph: WeightedGraph | None = None

    @cached_property
    def spectrum(self):
        return spectrum(self.matrix)

    @property
    def lam_max(self):
        return self.spectrum.lam_max

    @property
    def lam_min_plus(self):
        return self.spectrum.lam_min_plus

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def kernel_dim(self):
        return self.n - self.spectrum.rank

    @property
    def connected(self):
        return self.kernel_dim == 1

    def check(self, atol=1e-10):
        """Assert the gossip axioms; returns ``self`` for chaining."""
        w = self.matrix
        norm = max(1.0, float(np.linalg.norm(w)))
        assert np.allclose(w, w.T, atol=atol * norm, rtol=0), "not symmetric"
        assert self.spectrum.eigenvalues[0] >= -atol * norm, "not PSD"
        assert np.linalg.norm(w @ np.ones(self.n)) <= atol * norm, "ones not in kernel"
        if self.graph is not None:
            allowed = np.eye(self.n, dtype=bool)
            for i, j, wt in self.graph.edges:
                allowed[i, j] = allowed[j, i] = True
            assert not np.any((w != 0) & ~allowed), "entry outside graph pattern"
        return self

    def to_csv(self):
        return "\n".join(",".join(f"{v:.17g}" for v in row) for row in self.matrix) + "\n"

    @classmethod
    def from_csv(cls, text, graph=None):
        rows = [[float(v) for v in line.split(",")] for line in text.strip().splitlines()]
        return cls(np.array(rows), graph)


def laplacian(g: WeightedGraph) -> GossipMatrix:
    """Weighted Laplacian: ``-w_ij`` off the diagonal, row weight sums on it.

    Disconnected graphs are accepted; check ``.connected`` on the result.
    """
    w = np.zeros((g.node_count, g.node_count))
    for i, j, wt in g.edges:
        w[i, j] -= wt
        w[j, i] -= wt
        w[i, i] += wt
        w[j, j] += wt
    return GossipMatrix(w, g)


def metropolis_gossip(g: WeightedGraph) -> GossipMatrix:
    """Return ``I - M`` for the Metropolis weight matrix ``M`` of ``g``.

    Edge weights are ignored; degrees count positive-weight neighbours.
    The eigenvalues of ``I - M`` lie in ``[0, 2)``; they are bounded by 1
    only for some graphs (K_n, a single edge), so callers that need
    ``lam_max <= 1`` should rescale, see :class:`ScaledSource`.
    """
    if not g.is_connected():
        raise GraphError("Metropolis gossip requires a connected graph")
    deg = g.degrees()
    n = g.node_count
    m = np.zeros((n, n))
    for i, j, wt in g.edges:
        if wt > 0:
            m[i, j] = m[j, i] = 1.0 / (1 + max(deg[i], deg[j]))
    m[np.diag_indices(n)] = 1.0 - m.sum(axis=1)
    return GossipMatrix(np.eye(n) - m, g)


def ring_graph(order) -> WeightedGraph:
    """Ring visiting the nodes in the given order."""
    order = list(order)
    k = len(order)
    return WeightedGraph.from_pairs(k, [(order[a], order[(a + 1) % k]) for a in range(k)])


def star_graph(n, center) -> WeightedGraph:
    return WeightedGraph.from_pairs(n, [(center, v) for v in range(n) if v != center])


def path_graph(n, weights=None) -> WeightedGraph:
    weights = [1.0] * (n - 1) if weights is None else list(weights)
    return WeightedGraph(n, tuple((i, i + 1, weights[i]) for i in range(n - 1)))


def ratio_gamma(w) -> float:
    """``lam_2 / lam_max`` of a Laplacian; 0 when disconnected (continuous in weights)."""
    ev = np.linalg.eigvalsh(np.asarray(w, dtype=float))
    return float(ev[1] / ev[-1]) if ev[-1] > 0 and len(ev) > 1 else 0.0


# ---------------------------------------------------------------------------
# time-varying sources


class GossipSource:
    """Deterministic random-access sequence ``k -> W(k)`` with certified bounds.

    Subclasses implement :meth:`matrix`; ``lam_min_plus`` and ``lam_max``
    must bound the spectrum of every emitted matrix.
    """

    n: int
    lam_min_plus: float
    lam_max: float
    rounds_per_step: int = 1
    tag: str = "static"

    def matrix(self, k: int) -> np.ndarray:
        raise NotImplementedError

    def emit(self, k: int) -> GossipMatrix:
        return GossipMatrix(self.matrix(k), self.graph(k))

    def graph(self, k: int) -> WeightedGraph | None:
        return None

    @property
    def chi(self):
        return self.lam_max / self.lam_min_plus


@dataclass(eq=False)
class StaticSource(GossipSource):
    w: GossipMatrix
    tag: str = "static"

    def __post_init__(self):
        self.n = self.w.n
        if not self.w.connected:
            raise GraphError("static source needs a connected graph")
        self.lam_min_plus = self.w.lam_min_plus
        self.lam_max = self.w.lam_max

    def matrix(self, k):
        return self.w.matrix

    def graph(self, k):
        return self.w.graph


@dataclass(eq=False)
class RingSource(GossipSource):
    """Laplacians of rings over a fresh random permutation at every step."""

    n: int
    seed: int = 0
    tag: str = "ring"

    def __post_init__(self):
        if self.n < 3:
            raise GraphError("a ring needs at least 3 nodes")
        # all ring Laplacians are permutation-similar, so these bounds are exact
        self.lam_min_plus = 2 - 2 * math.cos(2 * math.pi / self.n)
        self.lam_max = 2 - 2 * math.cos(2 * math.pi * (self.n // 2) / self.n)

    def permutation(self, k):
        return np.random.default_rng([self.seed, k]).permutation(self.n)

    def graph(self, k):
        return ring_graph(self.permutation(k))

    def matrix(self, k):
        perm = self.permutation(k)
        w = 2.0 * np.eye(self.n)
        nxt = np.roll(perm, -1)
        w[perm, nxt] -= 1.0
        w[nxt, perm] -= 1.0
        return w


def random_ring_source(n, seed=0) -> RingSource:
    return RingSource(n, seed)


@dataclass(eq=False)
class StarSource(GossipSource):
    """Stars whose centre cycles through the middle third of the nodes."""

    n: int
    tag: str = "star"

    def __post_init__(self):
        if self.n < 3 or self.n % 3:
            raise GraphError("star source needs a node count divisible by 3")
        self.lam_min_plus = 1.0
        self.lam_max = float(self.n)

    @property
    def thirds(self):
        t = self.n // 3
        return (list(range(t)), list(range(t, 2 * t)), list(range(2 * t, self.n)))

    def center(self, k):
        v2 = self.thirds[1]
        return v2[k % len(v2)]

    def graph(self, k):
        return star_graph(self.n, self.center(k))

    def matrix(self, k):
        c = self.center(k)
        w = np.eye(self.n)
        w[c, :] = -1.0
        w[:, c] = -1.0
        w[c, c] = self.n - 1.0
        return w


def star_source(n) -> StarSource:
    return StarSource(n)


@dataclass(eq=False)
class ScaledSource(GossipSource):
    """``W(k) / scale``; with ``scale = lam_max`` the family has ``lam_max = 1``."""

    base: GossipSource
    scale: float | None = None

    def __post_init__(self):
        if self.scale is None:
            self.scale = self.base.lam_max
        self.n = self.base.n
        self.tag = f"{self.base.tag}/scaled"
        self.lam_min_plus = self.base.lam_min_plus / self.scale
        self.lam_max = self.base.lam_max / self.scale

    def matrix(self, k):
        return self.base.matrix(k) / self.scale

    def graph(self, k):
        return self.base.graph(k)


# ---------------------------------------------------------------------------
# lifting


class LiftedGossip:
    """Applies ``W kron I_d`` to stacked vectors without forming the product."""

    def __init__(self, w, d):
        if d < 1:
            raise ValueError("block dimension must be positive")
        self.w = w.matrix if isinstance(w, GossipMatrix) else np.asarray(w, dtype=float)
        self.d = d
        self.shape = (self.w.shape[0] * d,) * 2

    def __matmul__(self, x):
        return self.apply(x)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        n = self.w.shape[0]
        if x.shape[0] != n * self.d:
            raise ValueError(f"expected length {n * self.d}, got {x.shape[0]}")
        return (self.w @ x.reshape(n, self.d)).reshape(x.shape)


def lift(w, d) -> LiftedGossip:
    return LiftedGossip(w, d)


# ---------------------------------------------------------------------------
# condition-targeted line graphs


def gamma_n(n: int) -> float:
    """Spectral ratio ``lam_2/lam_max`` of the unweighted path on ``n`` nodes."""
    if n < 2:
        raise ValueError("gamma_n needs n >= 2")
    c = math.cos(math.pi / n)
    return (1 - c) / (1 + c)


def select_size(gamma: float) -> int:
    """The unique ``n >= 2`` with ``gamma_n(n) >= gamma > gamma_n(n + 1)``."""
    if not 0 < gamma <= 1:
        raise ValueError("target ratio must lie in (0, 1]")
    n = 2
    while gamma_n(n + 1) >= gamma * (1 - GAMMA_RTOL):
        n += 1
    return n


def _bisect(fn, target, lo, hi, tol=BISECT_TOL, maxiter=BISECT_MAXITER):
    """Find ``a`` in ``[lo, hi]`` with ``|fn(a) - target| <= tol``.

    Requires ``fn(lo) - target`` and ``fn(hi) - target`` of opposite sign.
    """
    flo, fhi = fn(lo) - target, fn(hi) - target
    if abs(flo) <= tol:
        return lo
    if abs(fhi) <= tol:
        return hi
    if flo * fhi > 0:
        raise GraphError("bisection endpoints do not bracket the target")
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        fm = fn(mid) - target
        if abs(fm) <= tol:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    raise GraphError("bisection did not converge")


def _line_weights(n, a):
    return path_graph(n, [1.0 - a] + [1.0] * (n - 2))


def _triangle(a):
    return WeightedGraph(3, ((0, 1, 1.0), (1, 2, 1.0), (0, 2, a)))


def reweighted_line_graph(target_gamma: float):
    """Build a graph whose Laplacian has ``lam_2/lam_max == target_gamma``.

    Returns ``(graph, n, a)``. For ``n >= 3`` the graph is the path on
    ``n`` nodes with the first edge weighted ``1 - a``. For ``n == 2`` it
    is the triangle with edge (0, 2) weighted ``a``, so the graph has
    three nodes while ``n`` stays 2.
    """
    if not 0 < target_gamma <= 1:
        raise ValueError("target ratio must lie in (0, 1]")
    n = select_size(target_gamma)
    if n >= 3:
        build = lambda a: _line_weights(n, a)
    else:
        build = _triangle
    fn = lambda a: ratio_gamma(laplacian(build(a)).matrix)
    a = _bisect(fn, target_gamma, 0.0, 1.0)
    return build(a), n, a
