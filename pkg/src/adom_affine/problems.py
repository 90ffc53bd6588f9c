"""Quadratic test problems with affine constraints and their dual reformulation.

The dual variable is stored flat as ``z = (p, s)`` where ``p`` holds one
constraint multiplier of length ``rows`` per node and ``s`` one consensus
multiplier of length ``d`` per node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .graphs import GossipSource, spectrum

_TAG_QUAD = 101
_TAG_CONSTR = 202


class InfeasibleProblem(ValueError):
    pass


class DegenerateInstance(ValueError):
    pass


@dataclass
class CostCounter:
    """Per-run action counts: gossip rounds, ``A^T A`` products, local oracle calls."""

    comms: int = 0
    mults: int = 0
    computes: int = 0


def _orthogonal(rng, k):
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def generate_quadratic(n, d, mu_F, L_F, seed):
    """Seeded per-node quadratics ``C_i = Q_i diag(lam) Q_i^T`` and linear terms.

    Eigenvalues are uniform in ``[mu_F, L_F]``; node 0 carries both
    endpoints (node 1 carries ``L_F`` when ``d == 1``), so the family is
    tight on both sides. The uniforms are drawn independently of
    ``mu_F, L_F`` so changing ``L_F`` rescales the same instance.
    """
    if mu_F <= 0 or mu_F > L_F:
        raise ValueError("need 0 < mu_F <= L_F")
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = np.random.default_rng([seed, _TAG_QUAD])
    C = np.empty((n, d, d))
    for i in range(n):
        u = rng.uniform(size=d)
        if i == 0:
            u[0] = 0.0
            if d > 1:
                u[-1] = 1.0
        elif i == 1 and d == 1:
            u[0] = 1.0
        q = _orthogonal(rng, d)
        if mu_F == L_F:
            C[i] = mu_F * np.eye(d)
        else:
            C[i] = (q * (mu_F + (L_F - mu_F) * u)) @ q.T
            C[i] = 0.5 * (C[i] + C[i].T)
    lin = rng.standard_normal((n, d))
    return C, lin


def generate_constraints(p, d, chi_A, seed):
    """Seeded ``A = U diag(s) V^T`` (p x d) with ``s`` log-uniform in ``[1, sqrt(chi_A)]``.

    Returns ``(A, b)`` with ``b = A x0`` for a Gaussian ``x0``.
    """
    if chi_A < 1:
        raise ValueError("chi_A must be >= 1")
    if not 1 <= p <= d:
        raise ValueError("need 1 <= p <= d")
    if p == 1 and chi_A != 1:
        raise ValueError("a single row cannot realise chi_A > 1")
    rng = np.random.default_rng([seed, _TAG_CONSTR])
    top = 0.5 * np.log(chi_A)
    s = np.exp(rng.uniform(0.0, top, size=p))
    s[0] = 1.0
    s[-1] = np.exp(top)
    u = _orthogonal(rng, p)
    v, r = np.linalg.qr(rng.standard_normal((d, p)))
    v = v * np.sign(np.diag(r))
    A = (u * s) @ v.T
    x0 = rng.standard_normal(d)
    return A, A @ x0


@dataclass
class QuadraticProblem:
    """``min sum_i 1/2 x^T C_i x + lin_i^T x`` s.t. ``A x = b`` (A shared by all nodes)."""

    C: np.ndarray
    lin: np.ndarray
    A: np.ndarray
    b: np.ndarray
    mu_F: float
    L_F: float
    seed: int | None = None
    chi_A: float | None = None

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        self.lin = np.asarray(self.lin, dtype=float)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, self.C.shape[-1])
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.validate()

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def d(self):
        return self.C.shape[1]

    @property
    def p(self):
        return self.A.shape[0]

    def validate(self):
        if not 0 < self.mu_F <= self.L_F:
            raise ValueError("need 0 < mu_F <= L_F")
        if self.C.shape != (self.n, self.d, self.d) or self.lin.shape != (self.n, self.d):
            raise ValueError("inconsistent C / lin shapes")
        if self.b.shape != (self.p,):
            raise ValueError("b has the wrong length")
        tol = 1e-8 * max(1.0, self.L_F)
        for i, c in enumerate(self.C):
            ev = np.linalg.eigvalsh(c)
            if ev[0] < self.mu_F - tol or ev[-1] > self.L_F + tol:
                raise ValueError(f"C_{i} spectrum [{ev[0]}, {ev[-1]}] outside [mu_F, L_F]")
        if self.p:
            res = self.b - self.A @ np.linalg.lstsq(self.A, self.b, rcond=None)[0]
            if np.linalg.norm(res) > 1e-8 * max(1.0, np.linalg.norm(self.b)):
                raise InfeasibleProblem("b is not in the image of A")

    def objective(self, x):
        return 0.5 * np.einsum("i,nij,j->", x, self.C, x) + self.lin.sum(axis=0) @ x

    def to_json(self):
        return json.dumps(
            {
                "n": self.n,
                "d": self.d,
                "p": self.p,
                "mu_F": self.mu_F,
                "L_F": self.L_F,
                "seed": self.seed,
                "chi_A": self.chi_A,
                "A": self.A.tolist(),
                "b": self.b.tolist(),
                "C": self.C.tolist(),
                "lin": self.lin.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        prob = cls(
            C=np.array(doc["C"]),
            lin=np.array(doc["lin"]),
            A=np.array(doc["A"]).reshape(int(doc["p"]), int(doc["d"])),
            b=np.array(doc["b"]),
            mu_F=float(doc["mu_F"]),
            L_F=float(doc["L_F"]),
            seed=doc.get("seed"),
            chi_A=doc.get("chi_A"),
        )
        if prob.n != int(doc["n"]):
            raise ValueError("node count mismatch")
        return prob


def make_problem(n, d, p, mu_F, L_F, chi_A, seed):
    C, lin = generate_quadratic(n, d, mu_F, L_F, seed)
    A, b = generate_constraints(p, d, chi_A, seed)
    return QuadraticProblem(C, lin, A, b, mu_F, L_F, seed=seed, chi_A=chi_A)


def kkt_solve(prob: QuadraticProblem):
    """Reference solution of the centralised problem via the dense KKT system.

    Redundant constraint rows are dropped first (orthonormal basis of the
    row space), then the symmetric KKT matrix is LU-factorised.
    """
    H = prob.C.sum(axis=0)
    g = prob.lin.sum(axis=0)
    if prob.p == 0:
        return np.linalg.solve(H, -g)
    u, s, _ = np.linalg.svd(prob.A, full_matrices=False)
    r = int(np.sum(s > 1e-9 * s[0])) if s.size and s[0] > 0 else 0
    if r == 0:
        return np.linalg.solve(H, -g)
    Ar = u[:, :r].T @ prob.A
    br = u[:, :r].T @ prob.b
    if np.linalg.norm(prob.b - u[:, :r] @ br) > 1e-8 * max(1.0, np.linalg.norm(prob.b)):
        raise InfeasibleProblem("b is not in the image of A")
    d = prob.d
    K = np.zeros((d + r, d + r))
    K[:d, :d] = H
    K[:d, d:] = Ar.T
    K[d:, :d] = Ar
    lu, piv = scipy.linalg.lu_factor(K)
    if np.min(np.abs(np.diag(lu))) < 1e-13 * np.max(np.abs(np.diag(lu))):
        raise DegenerateInstance("KKT system is numerically singular")
    x = scipy.linalg.lu_solve((lu, piv), np.concatenate([-g, br]))[:d]
    return x


# ---------------------------------------------------------------------------
# constraint operators


class DenseConstraint:
    """Row-wise application of a dense constraint matrix to per-node blocks."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)
        self.rows, self.cols = self.A.shape
        self.mults_per_apply = 1

    def forward(self, X, counter=None):
        """``X (n, d) -> X A^T (n, rows)``."""
        if counter is not None:
            counter.mults += self.mults_per_apply
        return X @ self.A.T

    def adjoint(self, Y, counter=None):
        if counter is not None:
            counter.mults += self.mults_per_apply
        return Y @ self.A

    def dense(self):
        return self.A

    def singular_values(self):
        return np.linalg.svd(self.dense(), compute_uv=False)


# ---------------------------------------------------------------------------
# dual problem


@dataclass(eq=False)
class DualProblem:
    """Dual reformulation ``min_{z in im P} H(z) = F*(B^T z) - <z, q>``.

    ``mu_H`` follows the closed form ``(1 + sigma_min^+(A)^2) / L_F`` used by
    the parameter schedule. ``mu_H_certified`` is the provable curvature
    bound of ``H`` on ``im(PB)``, ``lam_min^+(B^T P B) / L_F``, which can be
    smaller.
    """

    base: QuadraticProblem
    source: GossipSource
    constraint: DenseConstraint
    x_star: np.ndarray
    mu_H: float
    mu_H_certified: float
    L_H: float
    lam_min_plus: float
    lam_max: float
    q: np.ndarray = field(repr=False)
    C_inv: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.base.n

    @property
    def d(self):
        return self.base.d

    @property
    def rows(self):
        return self.constraint.rows

    @property
    def dim(self):
        return self.n * (self.rows + self.d)

    # layout helpers
    def split(self, z):
        k = self.n * self.rows
        return z[:k].reshape(self.n, self.rows), z[k:].reshape(self.n, self.d)

    def join(self, pblock, sblock):
        return np.concatenate([np.ravel(pblock), np.ravel(sblock)])

    def zeros(self):
        return np.zeros(self.dim)

    # block operators
    def Bt(self, z, counter=None):
        pb, sb = self.split(z)
        return self.constraint.adjoint(pb, counter) + sb

    def B(self, X, counter=None):
        return self.join(self.constraint.forward(X, counter), X)

    def P(self, z):
        pb, sb = self.split(z)
        return self.join(pb, sb - sb.mean(axis=0))

    def W(self, k, z, counter=None, w=None):
        """Block gossip ``diag(I, W(k) kron I_d)``; pass ``w`` to reuse an emitted matrix."""
        if w is None:
            w = self.source.matrix(k)
        if counter is not None:
            counter.comms += self.source.rounds_per_step
        pb, sb = self.split(z)
        return self.join(pb, w @ sb)

    def pnorm2(self, v):
        pv = self.P(v)
        return float(pv @ pv)

    # dual function
    def Fstar(self, Y):
        r = Y - self.base.lin
        return 0.5 * float(np.einsum("ni,nij,nj->", r, self.C_inv, r))

    def primal_of(self, Y):
        """Exact ``grad F*(Y)`` blockwise: ``C_i^{-1} (y_i - lin_i)``."""
        return np.einsum("nij,nj->ni", self.C_inv, Y - self.base.lin)

    def H(self, z):
        return self.Fstar(self.Bt(z)) - float(z @ self.q)

    def grad_from_primal(self, X, counter=None):
        return self.B(X, counter) - self.q

    def lifted_x_star(self):
        return np.broadcast_to(self.x_star, (self.n, self.d))

    # dense forms for desk-scale verification
    def dense_B(self):
        A = self.constraint.dense()
        return np.vstack([np.kron(np.eye(self.n), A), np.eye(self.n * self.d)])

    def dense_P(self):
        k = self.n * self.rows
        m = np.eye(self.dim)
        m[k:, k:] -= np.kron(np.ones((self.n, self.n)) / self.n, np.eye(self.d))
        return m

    def dense_W(self, k):
        nr = self.n * self.rows
        m = np.eye(self.dim)
        m[nr:, nr:] = np.kron(self.source.matrix(k), np.eye(self.d))
        return m

    def dense_C_inv(self):
        return scipy.linalg.block_diag(*self.C_inv)

    def dense_hessian(self):
        B = self.dense_B()
        return B @ self.dense_C_inv() @ B.T

    def image_PB_basis(self):
        """Orthonormal basis of ``im(P B)`` (dense; desk scale only)."""
        if self.dim > 4000:
            raise ValueError("dual space too large for dense verification")
        u, s, _ = np.linalg.svd(self.dense_P() @ self.dense_B(), full_matrices=False)
        r = int(np.sum(s > 1e-9 * s[0]))
        return u[:, :r]


def _block_bounds(source):
    # the constraint-dual block of W(k) is the identity
    return min(1.0, source.lam_min_plus), max(1.0, source.lam_max)


def certified_mu_factor(sv, d, n):
    """``lam_min^+`` of ``B^T P P B`` from the singular values of the shared ``A``.

    On the consensus subspace the operator acts as ``A^T A``; on its
    complement as ``I + A^T A``.
    """
    sv = np.asarray(sv, dtype=float)
    pos = sv[sv > 1e-9 * sv.max()] if sv.size and sv.max() > 0 else sv[:0]
    cands = list(pos**2)
    if n > 1:
        cands += list(1.0 + pos**2)
        if pos.size < d:
            cands.append(1.0)
    return min(cands)


def build_dual(prob: QuadraticProblem, source: GossipSource, constraint=None, x_star=None, b=None):
    """Assemble the dual of ``prob`` over ``source``.

    ``constraint`` replaces the plain ``A`` (for example by a preconditioned
    operator), in which case ``b`` must be its matching right-hand side.
    """
    if source.n != prob.n:
        raise ValueError("gossip source and problem disagree on node count")
    constraint = DenseConstraint(prob.A) if constraint is None else constraint
    sv = constraint.singular_values()
    pos = sv[sv > 1e-9 * sv.max()] if sv.size and sv.max() > 0 else sv[:0]
    smin = float(pos.min()) if pos.size else 0.0
    smax = float(pos.max()) if pos.size else 0.0
    lam_lo, lam_hi = _block_bounds(source)
    C_inv = np.linalg.inv(prob.C)
    C_inv = 0.5 * (C_inv + np.swapaxes(C_inv, 1, 2))
    if x_star is None:
        x_star = kkt_solve(prob)
    b_rows = prob.b if b is None else np.asarray(b, dtype=float).reshape(-1)
    if b_rows.shape != (constraint.rows,):
        raise ValueError("constraint operator rows do not match b")
    q = np.concatenate([np.tile(b_rows, prob.n), np.zeros(prob.n * prob.d)])
    return DualProblem(
        base=prob,
        source=source,
        constraint=constraint,
        x_star=np.asarray(x_star, dtype=float),
        mu_H=(1 + smin**2) / prob.L_F,
        mu_H_certified=certified_mu_factor(sv, prob.d, prob.n) / prob.L_F,
        L_H=(1 + smax**2) / prob.mu_F,
        lam_min_plus=lam_lo,
        lam_max=lam_hi,
        q=q,
        C_inv=C_inv,
    )


# ---------------------------------------------------------------------------
# dual gradient oracles


class ExactOracle:
    mode = "exact"

    def __call__(self, dp: DualProblem, Y, counter=None):
        if counter is not None:
            counter.computes += 1
        return dp.primal_of(Y)

    def reset(self):
        pass


class InexactOracle:
    """Warm-started primal recursion ``g <- g - (grad F(g) - y) / L_F``.

    The estimate is carried across calls; one instance belongs to one run.
    """

    mode = "inexact"

    def __init__(self, T_inner=10):
        if T_inner < 1:
            raise ValueError("T_inner must be positive")
        self.T_inner = int(T_inner)
        self.g = None

    def reset(self):
        self.g = None

    def __call__(self, dp: DualProblem, Y, counter=None):
        prob = dp.base
        g = np.zeros_like(Y) if self.g is None else self.g
        step = 1.0 / prob.L_F
        for _ in range(self.T_inner):
            g = g - step * (np.einsum("nij,nj->ni", prob.C, g) + prob.lin - Y)
        if counter is not None:
            counter.computes += self.T_inner
        self.g = g
        return g


def make_oracle(spec):
    """``"exact"`` or ``"inexact:<T>"`` (``"inexact"`` alone means T=10)."""
    if isinstance(spec, (ExactOracle, InexactOracle)):
        return spec
    spec = str(spec)
    if spec == "exact":
        return ExactOracle()
    if spec.startswith("inexact"):
        _, _, t = spec.partition(":")
        return InexactOracle(int(t) if t else 10)
    raise ValueError(f"unknown oracle {spec!r}")


def grad_H(dp: DualProblem, z, oracle=None, counter=None):
    """Return ``(grad H(z), g)`` where ``g`` approximates ``grad F*(B^T z)``."""
    oracle = ExactOracle() if oracle is None else oracle
    Y = dp.Bt(z, counter)
    g = oracle(dp, Y, counter)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("dual oracle produced non-finite values")
    return dp.grad_from_primal(g, counter), g


def dual_solution(dp: DualProblem):
    """Minimiser of ``H`` on ``im(PB)`` from the dense normal equations."""
    Q = dp.image_PB_basis()
    B = dp.dense_B()
    Ci = dp.dense_C_inv()
    Hs = Q.T @ (B @ Ci @ B.T) @ Q
    rhs = Q.T @ (dp.q + B @ Ci @ dp.base.lin.ravel())
    w = scipy.linalg.solve(Hs, rhs, assume_a="pos")
    return Q @ w
