"""ADOM iteration for equality-constrained problems over gossip sequences.

The state machine follows the accelerated dual scheme with error feedback:
an extrapolated point ``z_g``, a compressed gossip step ``Delta`` and a
memory ``m`` that re-injects what gossip did not transmit.
"""

from __future__ import annotations

import csv
import io
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .problems import CostCounter, DualProblem, ExactOracle, grad_H

LEMMA_SLACK = 1e-9
DIVERGENCE_ERR = 1e12


class ParameterError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdomParams:
    alpha: float
    eta: float
    theta: float
    sigma: float
    tau: float

    def __post_init__(self):
        for name in ("alpha", "eta", "theta", "sigma"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 < self.tau < 1:
            raise ParameterError("tau must lie in (0, 1)")

    def check(self, L_H, lam_max):
        """Reject parameters outside the descent and error-feedback hypotheses."""
        if self.theta > (1 + 1e-12) / (L_H * lam_max):
            raise ParameterError(f"theta={self.theta} exceeds 1/(L_H lam_max)={1 / (L_H * lam_max)}")
        if self.sigma > (1 + 1e-12) / lam_max:
            raise ParameterError(f"sigma={self.sigma} exceeds 1/lam_max={1 / lam_max}")
        return self


def contraction_rate(mu_H, L_H, lam_min_plus, lam_max):
    return lam_min_plus / (7 * lam_max) * math.sqrt(mu_H / L_H)


def default_params(mu_H, L_H, lam_min_plus, lam_max):
    """Default schedule: ``alpha = mu_H/2``, ``tau = rho``, ``theta = 1/(L_H lam_max)`` etc."""
    if not 0 < mu_H <= L_H:
        raise ParameterError("need 0 < mu_H <= L_H")
    if not 0 < lam_min_plus <= lam_max:
        raise ParameterError("need 0 < lam_min_plus <= lam_max")
    return AdomParams(
        alpha=mu_H / 2,
        eta=2 * lam_min_plus / (7 * lam_max * math.sqrt(mu_H * L_H)),
        theta=1 / (L_H * lam_max),
        sigma=1 / lam_max,
        tau=contraction_rate(mu_H, L_H, lam_min_plus, lam_max),
    )


def params_for(dp: DualProblem):
    return default_params(dp.mu_H, dp.L_H, dp.lam_min_plus, dp.lam_max)


@dataclass
class AdomState:
    k: int
    z: np.ndarray
    z_f: np.ndarray
    m: np.ndarray
    g: np.ndarray | None = None

    @classmethod
    def zero(cls, dp: DualProblem):
        return cls(0, dp.zeros(), dp.zeros(), dp.zeros(), None)


@dataclass
class StepInfo:
    z_g: np.ndarray
    grad: np.ndarray
    g: np.ndarray


def step(s: AdomState, dp: DualProblem, p: AdomParams, oracle=None, counter=None, w=None):
    """One iteration; returns ``(new_state, StepInfo)``.

    ``w`` overrides the gossip matrix drawn from ``dp.source`` at index ``s.k``.
    """
    oracle = ExactOracle() if oracle is None else oracle
    if w is None:
        w = dp.source.matrix(s.k)
    z_g = p.tau * s.z + (1 - p.tau) * s.z_f
    grad, g = grad_H(dp, z_g, oracle, counter)
    delta = p.sigma * dp.W(s.k, s.m - p.eta * grad, counter, w=w)
    m = s.m - p.eta * grad - delta
    z = s.z + p.eta * p.alpha * (z_g - s.z) + delta
    z_f = z_g - p.theta * dp.W(s.k, grad, counter, w=w)
    for v in (z, z_f, m):
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite iterate at step {s.k}")
    return AdomState(s.k + 1, z, z_f, m, g), StepInfo(z_g, grad, g)


# ---------------------------------------------------------------------------
# Lyapunov bookkeeping


@dataclass
class LyapunovContext:
    """Precomputed reference data for evaluating Psi on one dual problem."""

    z_star: np.ndarray
    H_star: float
    basis: np.ndarray | None = None

    @classmethod
    def build(cls, dp: DualProblem, z_star=None, project=True):
        from .problems import dual_solution

        z_star = dual_solution(dp) if z_star is None else z_star
        basis = dp.image_PB_basis() if project else None
        return cls(z_star, dp.H(z_star), basis)


def lyapunov(s: AdomState, z_star, p: AdomParams, dp: DualProblem, H_star=None, basis=None):
    """``Psi = |zhat - z*|^2 + 2 eta (1 - eta alpha)/tau (H(z_f) - H*) + 6 |m|_P^2``.

    ``zhat = z + P m``. When ``basis`` (orthonormal, spanning ``im(PB)``) is
    given, the distance term is measured after projecting onto that space.
    """
    H_star = dp.H(z_star) if H_star is None else H_star
    diff = s.z + dp.P(s.m) - z_star
    if basis is not None:
        c = basis.T @ diff
        dist = float(c @ c)
    else:
        dist = float(diff @ diff)
    gap = dp.H(s.z_f) - H_star
    return dist + 2 * p.eta * (1 - p.eta * p.alpha) / p.tau * gap + 6 * dp.pnorm2(s.m)


def _excess(lhs, rhs):
    return (lhs - rhs) / (1.0 + abs(lhs) + abs(rhs))


@dataclass
class LemmaReport:
    """Worst normalised excess ``(lhs - rhs)/(1 + |lhs| + |rhs|)`` per inequality."""

    descent: float = -math.inf
    error: float = -math.inf
    main: float = -math.inf
    first_violation: dict = field(default_factory=dict)
    checked: int = 0

    def record(self, name, k, lhs, rhs):
        e = _excess(lhs, rhs)
        if e > getattr(self, name):
            setattr(self, name, e)
        if e > LEMMA_SLACK and name not in self.first_violation:
            self.first_violation[name] = {"k": k, "lhs": lhs, "rhs": rhs}

    @property
    def ok(self):
        return not self.first_violation

    def as_dict(self):
        return {
            "descent": self.descent,
            "error": self.error,
            "main": self.main,
            "checked": self.checked,
            "violations": self.first_violation,
            "pass": self.ok,
        }


# ---------------------------------------------------------------------------
# traces


@dataclass
class TraceRecord:
    k: int
    err: float
    psi: float | None = None
    wall_ns: int | None = None
    comms: int = 0
    mults: int = 0


@dataclass
class Trace:
    records: list = field(default_factory=list)
    psi0: float | None = None
    lemmas: LemmaReport | None = None
    final_state: AdomState | None = None

    def __len__(self):
        return len(self.records)

    @property
    def k(self):
        return np.array([r.k for r in self.records])

    @property
    def err(self):
        return np.array([r.err for r in self.records])

    @property
    def psi(self):
        return np.array([np.nan if r.psi is None else r.psi for r in self.records])

    def to_csv(self):
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["k", "err", "psi", "wall_ns", "comms", "mults"])
        for r in self.records:
            out.writerow(
                [
                    r.k,
                    f"{r.err:.17g}",
                    "" if r.psi is None else f"{r.psi:.17g}",
                    "" if r.wall_ns is None else r.wall_ns,
                    r.comms,
                    r.mults,
                ]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = []
        for row in rows:
            recs.append(
                TraceRecord(
                    k=int(row["k"]),
                    err=float(row["err"]),
                    psi=float(row["psi"]) if row.get("psi") else None,
                    wall_ns=int(row["wall_ns"]) if row.get("wall_ns") else None,
                    comms=int(row.get("comms") or 0),
                    mults=int(row.get("mults") or 0),
                )
            )
        return cls(recs)


def run(
    dp: DualProblem,
    p: AdomParams,
    oracle=None,
    N=100,
    track_lyapunov=False,
    lyap: LyapunovContext | None = None,
    counter: CostCounter | None = None,
    timing=False,
    callback=None,
):
    """Run ``N`` iterations from ``z = z_f = m = 0``.

    With ``track_lyapunov`` the trace carries ``Psi`` per iteration and a
    :class:`LemmaReport` for the descent, error-feedback and contraction
    inequalities. These hypotheses need the exact oracle; under the inexact
    one the violations are reported as warnings only.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    oracle = ExactOracle() if oracle is None else oracle
    oracle.reset()
    p.check(dp.L_H, dp.lam_max)
    counter = CostCounter() if counter is None else counter
    x_star = dp.lifted_x_star()
    s = AdomState.zero(dp)
    trace = Trace()
    if track_lyapunov:
        lyap = LyapunovContext.build(dp) if lyap is None else lyap
        psi = lyapunov(s, lyap.z_star, p, dp, lyap.H_star, lyap.basis)
        trace.psi0 = psi
        trace.lemmas = LemmaReport()
        rho = contraction_rate(dp.mu_H, dp.L_H, dp.lam_min_plus, dp.lam_max)
        lam = dp.lam_min_plus
    t0 = time.perf_counter_ns() if timing else 0
    for _ in range(N):
        prev = s
        s, info = step(s, dp, p, oracle, counter)
        err = float(np.linalg.norm(info.g - x_star))
        if not math.isfinite(err) or err > DIVERGENCE_ERR:
            raise DivergenceError(f"err={err} at step {s.k}")
        rec = TraceRecord(
            k=s.k,
            err=err,
            wall_ns=(time.perf_counter_ns() - t0) if timing else None,
            comms=counter.comms,
            mults=counter.mults,
        )
        if track_lyapunov:
            rep = trace.lemmas
            gp2 = dp.pnorm2(info.grad)
            rep.record("descent", prev.k, dp.H(s.z_f), dp.H(info.z_g) - p.theta * lam / 2 * gp2)
            rep.record(
                "error",
                prev.k,
                dp.pnorm2(s.m),
                (1 - p.sigma * lam / 2) * dp.pnorm2(prev.m) + 2 * p.eta**2 / (p.sigma * lam) * gp2,
            )
            new_psi = lyapunov(s, lyap.z_star, p, dp, lyap.H_star, lyap.basis)
            rep.record("main", prev.k, new_psi, (1 - rho) * psi * (1 + LEMMA_SLACK))
            rep.checked += 1
            psi = new_psi
            rec.psi = psi
        trace.records.append(rec)
        if callback is not None:
            callback(s, info)
    if track_lyapunov and oracle.mode != "exact" and not trace.lemmas.ok:
        warnings.warn("lemma inequalities violated under the inexact oracle (hypotheses not met)")
    trace.final_state = s
    return trace


def with_params(p: AdomParams, **changes):
    """Copy of ``p`` with fields replaced (re-validated)."""
    return replace(p, **changes)
