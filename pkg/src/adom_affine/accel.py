"""Spectral acceleration: Chebyshev preconditioning of ``A^T A`` and multi-consensus gossip."""

from __future__ import annotations

import math

import numpy as np

from .graphs import GossipSource, RankZeroError, spectrum
from .problems import CostCounter, InfeasibleProblem, QuadraticProblem

__all__ = [
    "ChebyshevOperator",
    "ChebyshevConstraint",
    "MultiConsensusSource",
    "MultiConsensusOperator",
    "CostCounter",
    "chebyshev_apply",
    "chebyshev_for",
    "transform_constraints",
    "transformed_problem",
    "multi_consensus_apply",
    "multi_consensus_rounds",
    "condition_of",
    "nonconsensus_spectrum",
]

DEGENERATE_RTOL = 1e-12


def _positive_bounds(A):
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    if not s.size or s[0] == 0:
        raise RankZeroError("A has rank zero")
    pos = s[s > 1e-9 * s[0]]
    return float(pos[-1] ** 2), float(pos[0] ** 2)


class ChebyshevOperator:
    """``P(M) = I - T_K(-nu I + c M) / T_K(-nu)`` for ``M = A^T A``, ``c = 2/(hi - lo)``.

    Degree ``K = floor(sqrt(hi/lo))``. With ``hi == lo`` the map reduces to
    ``P(x) = x / hi``.
    """

    def __init__(self, A, lam_lo=None, lam_hi=None):
        self.A = np.asarray(A, dtype=float)
        if lam_lo is None or lam_hi is None:
            lo, hi = _positive_bounds(self.A)
            lam_lo = lo if lam_lo is None else lam_lo
            lam_hi = hi if lam_hi is None else lam_hi
        if not 0 < lam_lo <= lam_hi:
            raise ValueError("need 0 < lam_lo <= lam_hi")
        self.lam_lo = float(lam_lo)
        self.lam_hi = float(lam_hi)
        self.degenerate = (lam_hi - lam_lo) <= DEGENERATE_RTOL * lam_hi
        if self.degenerate:
            self.K = 1
            self.nu_cheb = math.inf
            self.scale = 0.0
            self.t_shift = 1.0
        else:
            chi = lam_hi / lam_lo
            # guard against chi landing a hair below a perfect square
            self.K = max(1, math.floor(math.sqrt(chi) * (1 + 1e-12)))
            self.nu_cheb = (chi + 1) / (chi - 1)
            self.scale = 2.0 / (lam_hi - lam_lo)
            self.t_shift = _cheb_value(self.K, -self.nu_cheb)

    @property
    def chi(self):
        return self.lam_hi / self.lam_lo

    def base(self, X, counter=None):
        """``M`` applied to each row of ``X``."""
        if counter is not None:
            counter.mults += 1
        return (X @ self.A.T) @ self.A

    def _mapped(self, X, counter):
        return -self.nu_cheb * X + self.scale * self.base(X, counter)

    def apply(self, X, counter=None):
        X = np.asarray(X, dtype=float)
        if self.degenerate:
            return self.base(X, counter) / self.lam_hi
        prev, cur = X, self._mapped(X, counter)
        for _ in range(1, self.K):
            prev, cur = cur, 2 * self._mapped(cur, counter) - prev
        return X - cur / self.t_shift

    def apply_quotient(self, U, counter=None):
        """``P'(M) U`` with ``P'(x) = P(x)/x``, by the divided-difference recurrence.

        ``(T_k(y) - T_k(y0)) / (y - y0) = D_k(y)`` obeys
        ``D_{k+1} = 2 y D_k + 2 T_k(y0) - D_{k-1}``, ``D_0 = 0``, ``D_1 = 1``.
        """
        U = np.asarray(U, dtype=float)
        if self.degenerate:
            return U / self.lam_hi
        y0 = -self.nu_cheb
        t_prev, t_cur = 1.0, y0
        d_prev, d_cur = np.zeros_like(U), U
        for _ in range(1, self.K):
            d_next = 2 * self._mapped(d_cur, counter) + 2 * t_cur * U - d_prev
            d_prev, d_cur = d_cur, d_next
            t_prev, t_cur = t_cur, 2 * y0 * t_cur - t_prev
        return -self.scale * d_cur / self.t_shift

    def scalar(self, x):
        """``P`` evaluated on scalars / arrays of eigenvalues."""
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            return x / self.lam_hi
        y = -self.nu_cheb + self.scale * x
        return 1.0 - _cheb_value(self.K, y) / self.t_shift

    def dense(self):
        return self.apply(np.eye(self.A.shape[1]))


def _cheb_value(K, y):
    """``T_K(y)`` by the three-term recurrence (valid outside ``[-1, 1]`` too)."""
    y = np.asarray(y, dtype=float)
    prev, cur = np.ones_like(y), y
    if K == 0:
        return prev
    for _ in range(1, K):
        prev, cur = cur, 2 * y * cur - prev
    return cur if cur.ndim else float(cur)


def chebyshev_apply(op: ChebyshevOperator, x, counter=None):
    return op.apply(x, counter)


def chebyshev_for(A):
    return ChebyshevOperator(A)


class ChebyshevConstraint:
    """Constraint operator ``x -> P(A^T A) x`` (square, symmetric) for the dual problem."""

    def __init__(self, op: ChebyshevOperator):
        self.op = op
        self.rows = self.cols = op.A.shape[1]
        self.mults_per_apply = op.K
        self._dense = None

    def forward(self, X, counter=None):
        return self.op.apply(X, counter)

    def adjoint(self, Y, counter=None):
        return self.op.apply(Y, counter)

    def dense(self):
        if self._dense is None:
            m = self.op.dense()
            self._dense = 0.5 * (m + m.T)
        return self._dense

    def singular_values(self):
        return np.linalg.svd(self.dense(), compute_uv=False)


def transform_constraints(A, b, bounds=None):
    """Replace ``A x = b`` by ``P(A^T A) x = P'(A^T A) A^T b``.

    Returns ``(ChebyshevConstraint, b_new)``. ``bounds = (lo, hi)`` defaults to
    the positive spectrum of ``A^T A``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    x_ls = np.linalg.lstsq(A, b, rcond=None)[0]
    if np.linalg.norm(A @ x_ls - b) > 1e-8 * max(1.0, np.linalg.norm(b)):
        raise InfeasibleProblem("b is not in the image of A")
    op = ChebyshevOperator(A, *(bounds or (None, None)))
    b_new = op.apply_quotient(A.T @ b)
    return ChebyshevConstraint(op), b_new


def transformed_problem(prob: QuadraticProblem):
    """The same problem with the Chebyshev-transformed constraint, densified."""
    cons, b_new = transform_constraints(prob.A, prob.b)
    return (
        QuadraticProblem(
            prob.C, prob.lin, cons.dense(), b_new, prob.mu_F, prob.L_F, seed=prob.seed, chi_A=prob.chi_A
        ),
        cons,
        b_new,
    )


# ---------------------------------------------------------------------------
# multi-consensus


def multi_consensus_rounds(chi):
    return max(1, math.ceil(chi * math.log(2)))


class MultiConsensusSource(GossipSource):
    """Emits ``D(W(k)) = I - (I - W(k))^K`` with ``K = ceil(chi ln 2)``.

    The base source must already be normalised to ``lam_max <= 1``; wrap a
    raw Laplacian family in :class:`~adom_affine.graphs.ScaledSource` first.
    One emitted matrix costs ``K`` gossip rounds.
    """

    def __init__(self, base: GossipSource):
        if base.lam_max > 1 + 1e-9:
            raise ValueError(f"base source not normalised: lam_max={base.lam_max} > 1")
        self.base = base
        self.K = multi_consensus_rounds(base.lam_max / base.lam_min_plus)
        lo, hi = base.lam_min_plus, base.lam_max
        vals = [self._poly(lo), self._poly(hi)]
        if lo <= 1 <= hi:
            vals.append(1.0)
        self.n = base.n
        self.lam_min_plus = min(vals)
        self.lam_max = max(vals)
        self.rounds_per_step = self.K * base.rounds_per_step
        self.tag = f"mc{self.K}:{base.tag}"

    def _poly(self, lam):
        return 1.0 - (1.0 - lam) ** self.K

    def matrix(self, k):
        w = self.base.matrix(k)
        r = np.eye(self.n)
        step = np.eye(self.n) - w
        for _ in range(self.K):
            r = r @ step
        d = np.eye(self.n) - r
        return 0.5 * (d + d.T)

    def graph(self, k):
        return self.base.graph(k)


MultiConsensusOperator = MultiConsensusSource


def multi_consensus_apply(mc: MultiConsensusSource, k, x, counter=None):
    """``D(W(k)) x`` by ``K`` applications of ``I - W(k)``; one comm each."""
    w = mc.base.matrix(k)
    x = np.asarray(x, dtype=float)
    y = x
    for _ in range(mc.K):
        y = y - w @ y
        if counter is not None:
            counter.comms += mc.base.rounds_per_step
    return x - y


# ---------------------------------------------------------------------------
# certification


def condition_of(M):
    """``lam_max / lam_min^+`` of a symmetric PSD matrix (or an object with ``dense()``)."""
    if hasattr(M, "dense"):
        M = M.dense()
    M = np.asarray(M, dtype=float)
    return spectrum(0.5 * (M + M.T)).condition


def nonconsensus_spectrum(M):
    """Eigenvalues of ``M`` restricted to the complement of the all-ones vector."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    u, s, _ = np.linalg.svd(np.eye(n) - np.ones((n, n)) / n)
    basis = u[:, : n - 1]
    r = basis.T @ M @ basis
    return np.linalg.eigvalsh(0.5 * (r + r.T))
