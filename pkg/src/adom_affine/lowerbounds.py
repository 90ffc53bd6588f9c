"""Worst-case two-level instances for equality-constrained decentralized problems.

A node ``i`` of the outer network hosts ``m`` subnodes connected by an inner
graph ``G'``; the constraint ``A = sqrt(W' kron I_dim)`` forces consensus
among subnodes. Nesterov's chain function is split across three groups of
subnodes so that every three new nonzero coordinates require a trip
``S1 -> S2`` through ``G'`` and ``S2 -> S3`` through the outer graph.

Sets and coordinates are 0-based in code.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg

from .graphs import (
    GossipSource,
    StaticSource,
    WeightedGraph,
    gamma_n,
    laplacian,
    reweighted_line_graph,
    select_size,
    star_source,
)
from .problems import QuadraticProblem

__all__ = [
    "WorstCaseInstance",
    "SpanBudget",
    "SpanResult",
    "SearchTooLarge",
    "gamma_n",
    "select_size",
    "build_static_instance",
    "build_tv_instance",
    "nesterov_ratio",
    "nesterov_solution",
    "nesterov_residual",
    "span_progress",
    "compute_rule",
    "AdomSpanTracker",
]

MAX_SEARCH_DIM = 12
MAX_SEARCH_SUBNODES = 30


class SearchTooLarge(ValueError):
    pass


# ---------------------------------------------------------------------------
# Nesterov chain


def nesterov_ratio(kappa_g):
    r = math.sqrt(kappa_g)
    return (r - 1) / (r + 1)


def nesterov_solution(kappa_g, k):
    """Coordinate ``k`` (1-based) of the infinite-dimensional minimiser."""
    return nesterov_ratio(kappa_g) ** k


def nesterov_residual(kappa_g, N):
    """Closed-form tail ``sum_{k >= N+2} q^{2k} = q^{2(N+2)} / (1 - q^2)``."""
    if N < 0:
        raise ValueError("N must be >= 0")
    if kappa_g <= 1:
        return 0.0
    q = nesterov_ratio(kappa_g)
    return q ** (2 * (N + 2)) / (1 - q * q)


def _pairs(role, dim):
    """Coupled coordinate pairs (0-based) of ``M_role``, clipped to ``dim``."""
    start = {1: 2, 2: 0, 3: 1}[role]
    return [(c, c + 1) for c in range(start, dim - 1, 3)]


def split_matrix(role, dim):
    """Leading ``dim x dim`` block of ``M_1``, ``M_2`` or ``M_3``."""
    m = np.zeros((dim, dim))
    start = {1: 2, 2: 0, 3: 1}[role]
    for c in range(start, dim, 3):
        m[c, c] += 1.0
        if c + 1 < dim:
            m[c + 1, c + 1] += 1.0
            m[c, c + 1] -= 1.0
            m[c + 1, c] -= 1.0
    if role == 1:
        m[0, 0] += 1.0
    return m


def compute_rule(role, p, dim):
    """Prefix after one local computation at a subnode of the given role."""
    if role == 1:
        if p == 0:
            return min(1, dim)
        if p >= 3 and p % 3 == 0 and p < dim:
            return p + 1
    elif role == 2:
        if p % 3 == 1 and p < dim:
            return p + 1
    elif role == 3:
        if p % 3 == 2 and p < dim:
            return p + 1
    return p


# ---------------------------------------------------------------------------
# instances


def _ceil_div(a, b):
    return -(-a // b)


def _outer_sets(n):
    """``(S_2G, S_3G, Delta_W)`` for a reweighted line graph of nominal size ``n``."""
    if n == 2:
        return [0], [1], 1.0
    head = _ceil_div(n, 32)
    delta = (1 - 1 / 16) * n - 1
    start = head + math.ceil(delta)
    return list(range(head)), list(range(start - 1, n)), delta


@dataclass
class WorstCaseInstance:
    """Two-level network with Nesterov's function split over three subnode sets."""

    kind: str
    n: int
    m: int
    dim: int
    mu_F: float
    L_F: float
    inner: WeightedGraph
    S1: list
    S2: list
    S3: list
    alpha_nb: float
    beta_nb: float
    Delta_A: float
    Delta_W: float
    Delta_A_bfs: int
    Delta_W_bfs: int
    outer: WeightedGraph | None = None
    source: GossipSource | None = field(default=None, repr=False)
    a_outer: float | None = None
    a_inner: float | None = None
    n_nominal: int | None = None
    m_nominal: int | None = None

    def __post_init__(self):
        self._roles = {}
        for role, s in ((1, self.S1), (2, self.S2), (3, self.S3)):
            for ij in s:
                if ij in self._roles:
                    raise ValueError(f"subnode {ij} assigned to two sets")
                self._roles[tuple(ij)] = role

    @property
    def kappa_g(self):
        return self.beta_nb / self.alpha_nb

    def role(self, i, j):
        return self._roles.get((i, j), 0)

    def set_size(self, role):
        return len((self.S1, self.S2, self.S3)[role - 1])

    # local functions
    def hessian(self, i, j):
        h = self.alpha_nb / (self.m * self.n) * np.eye(self.dim)
        r = self.role(i, j)
        if r:
            h = h + (self.beta_nb - self.alpha_nb) / (4 * self.set_size(r)) * split_matrix(r, self.dim)
        return h

    def linear(self, i, j):
        v = np.zeros(self.dim)
        if self.role(i, j) == 1:
            v[0] = -(self.beta_nb - self.alpha_nb) / (4 * self.set_size(1))
        return v

    def node_hessian(self, i):
        """Hessian of ``f_i = sum_j f_ij`` restricted to subnode consensus."""
        return sum(self.hessian(i, j) for j in range(self.m))

    def global_hessian(self):
        return sum(self.node_hessian(i) for i in range(self.n))

    def global_linear(self):
        return sum(self.linear(i, j) for i in range(self.n) for j in range(self.m))

    def solution(self):
        """Minimiser of ``sum_ij f_ij`` in the truncated dimension."""
        return np.linalg.solve(self.global_hessian(), -self.global_linear())

    def inner_gossip(self):
        return laplacian(self.inner).matrix

    def outer_matrix(self, k=0):
        return self.source.matrix(k)

    def constraint_matrix(self):
        """``sqrt(W' kron I_dim)`` via the eigendecomposition of ``W'``."""
        lam, u = np.linalg.eigh(self.inner_gossip())
        # the consensus eigenvalue is zero up to rounding; keep it exactly zero
        lam = np.where(lam > 1e-12 * lam.max(), lam, 0.0)
        root = (u * np.sqrt(lam)) @ u.T
        return np.kron(root, np.eye(self.dim))

    def to_quadratic_problem(self):
        """Lifted problem: node ``i`` stacks its ``m`` subnode copies."""
        C = np.stack([scipy.linalg.block_diag(*(self.hessian(i, j) for j in range(self.m))) for i in range(self.n)])
        lin = np.stack([np.concatenate([self.linear(i, j) for j in range(self.m)]) for i in range(self.n)])
        ev = np.concatenate([np.linalg.eigvalsh(c) for c in C])
        A = self.constraint_matrix()
        return QuadraticProblem(C, lin, A, np.zeros(A.shape[0]), float(ev.min()), float(ev.max()))

    def lifted_solution(self):
        return np.tile(self.solution(), self.m)

    def to_json(self):
        doc = {
            "kind": self.kind,
            "n": self.n,
            "m": self.m,
            "dim": self.dim,
            "mu_F": self.mu_F,
            "L_F": self.L_F,
            "inner": json.loads(self.inner.to_json()),
            "outer": json.loads(self.outer.to_json()) if self.outer is not None else None,
            "S1": [list(x) for x in self.S1],
            "S2": [list(x) for x in self.S2],
            "S3": [list(x) for x in self.S3],
            "alpha": self.alpha_nb,
            "beta": self.beta_nb,
            "kappa_g": self.kappa_g,
            "Delta_A": self.Delta_A,
            "Delta_W": self.Delta_W,
            "Delta_A_bfs": self.Delta_A_bfs,
            "Delta_W_bfs": self.Delta_W_bfs,
        }
        return json.dumps(doc)


def _inner_level(chi_A):
    graph, m_nom, a = reweighted_line_graph(1.0 / chi_A)
    low, high, delta = _outer_sets(m_nom)
    # the bottom block plays S_2G', the far block S_1G'
    return graph, m_nom, a, high, low, delta


def _check_args(L_F, mu_F, chi_W, chi_A, dim):
    if not 0 < mu_F <= L_F:
        raise ValueError("need 0 < mu_F <= L_F")
    if chi_W < 1 or chi_A < 1:
        raise ValueError("condition numbers must be >= 1")
    if dim < 4:
        raise ValueError("dim must be >= 4")


def _finish(kind, L_F, mu_F, dim, n, inner, m, s1, s2, s3, d_a, d_w, d_a_bfs, d_w_bfs, **extra):
    alpha = mu_F * n
    beta = 2 * len(s2) * (L_F - mu_F) / m + mu_F * n
    return WorstCaseInstance(
        kind=kind,
        n=n,
        m=m,
        dim=dim,
        mu_F=mu_F,
        L_F=L_F,
        inner=inner,
        S1=s1,
        S2=s2,
        S3=s3,
        alpha_nb=alpha,
        beta_nb=beta,
        Delta_A=d_a,
        Delta_W=d_w,
        Delta_A_bfs=d_a_bfs,
        Delta_W_bfs=d_w_bfs,
        **extra,
    )


def build_static_instance(L_F, mu_F, chi_W, chi_A, dim):
    """Static two-level instance with reweighted line graphs at both levels."""
    _check_args(L_F, mu_F, chi_W, chi_A, dim)
    outer, n_nom, a_out = reweighted_line_graph(1.0 / chi_W)
    s2g, s3g, d_w = _outer_sets(n_nom)
    inner, m_nom, a_in, s1g_, s2g_, d_a = _inner_level(chi_A)
    n, m = outer.node_count, inner.node_count
    s1 = [(i, j) for i in s2g for j in s1g_]
    s2 = [(i, j) for i in s2g for j in s2g_]
    s3 = [(i, j) for i in s3g for j in s2g_]
    return _finish(
        "static",
        L_F,
        mu_F,
        dim,
        n,
        inner,
        m,
        s1,
        s2,
        s3,
        d_a,
        d_w,
        inner.set_distance(s1g_, s2g_),
        outer.set_distance(s2g, s3g),
        outer=outer,
        source=StaticSource(laplacian(outer)),
        a_outer=a_out,
        a_inner=a_in,
        n_nominal=n_nom,
        m_nominal=m_nom,
    )


def star_transfer_rounds(n):
    """Rounds for information to travel ``V_1 -> V_3`` under the cycling star sequence."""
    src = star_source(n)
    v1, _, v3 = src.thirds
    have = np.zeros(n, dtype=bool)
    have[v1] = True
    k = 0
    while not have[v3].all():
        have = _gossip_or(src.matrix(k), have)
        k += 1
        if k > 4 * n:
            raise RuntimeError("star sequence does not connect V1 to V3")
    return k


def _gossip_or(w, have):
    adj = np.abs(w) > 0
    return (adj & have[None, :]).any(axis=1) | have


def build_tv_instance(L_F, mu_F, chi_W, chi_A, dim):
    """Time-varying instance: cycling star outer sequence over ``3 floor(chi_W/3)`` nodes."""
    if chi_W < 3:
        raise ValueError("time-varying construction needs chi_W >= 3")
    _check_args(L_F, mu_F, chi_W, chi_A, dim)
    n = 3 * int(math.floor(chi_W / 3))
    src = star_source(n)
    v1, _, v3 = src.thirds
    inner, m_nom, a_in, s1g_, s2g_, d_a = _inner_level(chi_A)
    m = inner.node_count
    incident = sorted({e[0] for e in inner.edges if e[2] > 0} | {e[1] for e in inner.edges if e[2] > 0})
    s1 = [(i, j) for i in v1 for j in s1g_]
    s2 = [(i, j) for i in v1 for j in s2g_]
    s3 = [(i, j) for i in v3 for j in incident]
    rounds = star_transfer_rounds(n)
    return _finish(
        "tv",
        L_F,
        mu_F,
        dim,
        n,
        inner,
        m,
        s1,
        s2,
        s3,
        d_a,
        float(rounds),
        inner.set_distance(s1g_, s2g_),
        rounds,
        source=src,
        a_inner=a_in,
        m_nominal=m_nom,
    )


# ---------------------------------------------------------------------------
# span propagation


@dataclass(frozen=True)
class SpanBudget:
    computes: int = 0
    comms: int = 0
    mults: int = 0

    def __post_init__(self):
        if min(self.computes, self.comms, self.mults) < 0:
            raise ValueError("budgets must be non-negative")

    def reduced(self, name):
        return SpanBudget(**{**self.as_dict(), name: getattr(self, name) - 1})

    def as_dict(self):
        return {"computes": self.computes, "comms": self.comms, "mults": self.mults}


@dataclass
class SpanResult:
    budget: SpanBudget
    prefix: int
    certified_bound: float

    def to_json(self):
        return json.dumps(
            {"budget": self.budget.as_dict(), "prefix": self.prefix, "certified_bound": self.certified_bound}
        )


def _neighbourhoods(w):
    adj = (np.abs(w) > 0) | np.eye(w.shape[0], dtype=bool)
    return [tuple(np.flatnonzero(row)) for row in adj]


class _SpanModel:
    """Synchronous action semantics on the flat ``(node, subnode)`` prefix vector."""

    def __init__(self, inst: WorstCaseInstance):
        self.inst = inst
        self.n, self.m, self.dim = inst.n, inst.m, inst.dim
        self.roles = tuple(inst.role(i, j) for i in range(self.n) for j in range(self.m))
        self.inner_nb = _neighbourhoods(laplacian(inst.inner).matrix)
        if isinstance(inst.source, StaticSource):
            self.period = 1
        else:
            self.period = len(inst.source.thirds[1])
        self.outer_nb = [_neighbourhoods(inst.source.matrix(k)) for k in range(self.period)]

    def compute(self, s):
        return tuple(compute_rule(r, p, self.dim) for r, p in zip(self.roles, s))

    def comm(self, s, phase):
        nb = self.outer_nb[phase % self.period]
        m = self.m
        return tuple(max(s[i2 * m + j] for i2 in nb[i]) for i in range(self.n) for j in range(m))

    def mult(self, s):
        m = self.m
        return tuple(max(s[i * m + j2] for j2 in self.inner_nb[j]) for i in range(self.n) for j in range(m))


def span_progress(inst: WorstCaseInstance, budget, return_result=False):
    """Largest reachable nonzero prefix over all subnodes within ``budget``.

    Exhaustive search over every ordering of the allowed actions, with
    memoisation on ``(prefix state, remaining budget, outer phase)``.
    """
    if not isinstance(budget, SpanBudget):
        budget = SpanBudget(**budget)
    if inst.dim > MAX_SEARCH_DIM or inst.n * inst.m > MAX_SEARCH_SUBNODES:
        raise SearchTooLarge(
            f"exhaustive search limited to dim <= {MAX_SEARCH_DIM} and n*m <= {MAX_SEARCH_SUBNODES}"
            f" (got dim={inst.dim}, n*m={inst.n * inst.m})"
        )
    model = _SpanModel(inst)
    dim = inst.dim

    @lru_cache(maxsize=None)
    def best(s, c, w, a, phase):
        top = max(s)
        if top >= dim:
            return dim
        if c:
            nxt = model.compute(s)
            if nxt != s:
                top = max(top, best(nxt, c - 1, w, a, phase))
        if w:
            nxt = model.comm(s, phase)
            if nxt != s or model.period > 1:
                top = max(top, best(nxt, c, w - 1, a, (phase + 1) % model.period))
        if a:
            nxt = model.mult(s)
            if nxt != s:
                top = max(top, best(nxt, c, w, a - 1, phase))
        return top

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10 * (budget.computes + budget.comms + budget.mults) + 1000))
    try:
        prefix = best((0,) * (inst.n * inst.m), budget.computes, budget.comms, budget.mults, 0)
    finally:
        sys.setrecursionlimit(limit)
    if not return_result:
        return prefix
    bound = nesterov_residual(inst.kappa_g, max(prefix - 1, 0)) if prefix >= 1 else nesterov_residual(inst.kappa_g, 0)
    return SpanResult(budget, prefix, bound)


# ---------------------------------------------------------------------------
# structural span of ADOM iterates


class AdomSpanTracker:
    """Upper bound on the nonzero prefix of every ADOM iterate on a worst-case instance.

    Mirrors one iteration of the dual method on prefix arrays of shape
    ``(n, m)``: linear combinations take maxima, a product with ``A`` or
    ``A^T`` merges the whole inner component, gossip merges outer
    neighbourhoods and the primal oracle applies :func:`compute_rule`.
    """

    def __init__(self, inst: WorstCaseInstance, inner_steps=None):
        self.inst = inst
        self.inner_steps = inner_steps
        self.roles = np.array([[inst.role(i, j) for j in range(inst.m)] for i in range(inst.n)])
        shape = (inst.n, inst.m)
        zero = np.zeros(shape, dtype=int)
        self.z = (zero.copy(), zero.copy())
        self.z_f = (zero.copy(), zero.copy())
        self.m = (zero.copy(), zero.copy())
        self.g = zero.copy()
        self.k = 0

    def _A(self, x):
        # A = sqrt(W' kron I) is generically dense on a connected inner graph
        return np.repeat(x.max(axis=1, keepdims=True), self.inst.m, axis=1)

    def _W(self, x, k):
        adj = (np.abs(self.inst.source.matrix(k)) > 0) | np.eye(self.inst.n, dtype=bool)
        return np.array([x[adj[i]].max(axis=0) for i in range(self.inst.n)])

    def _oracle(self, y):
        rule = np.vectorize(lambda r, p: compute_rule(int(r), int(p), self.inst.dim))
        if self.inner_steps is None:
            return rule(self.roles, y)
        g = self.g
        for _ in range(self.inner_steps):
            g = rule(self.roles, np.maximum(g, y))
        return g

    @staticmethod
    def _mx(*xs):
        return tuple(np.maximum.reduce([x[b] for x in xs]) for b in range(2))

    def advance(self):
        """Advance one iteration and return the prefix bound of the new primal estimate."""
        k = self.k
        z_g = self._mx(self.z, self.z_f)
        y = np.maximum(self._A(z_g[0]), z_g[1])
        self.g = self._oracle(y)
        grad = (self._A(self.g), self.g)
        t = self._mx(self.m, grad)
        delta = (t[0], self._W(t[1], k))
        wgrad = (grad[0], self._W(grad[1], k))
        self.m = self._mx(t, delta)
        self.z = self._mx(self.z, z_g, delta)
        self.z_f = self._mx(z_g, wgrad)
        self.k += 1
        return int(self.g.max())
