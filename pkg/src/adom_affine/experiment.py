"""Experiment orchestration: convergence sweeps, rate fits and verification suites."""

from __future__ import annotations

import json
import math
import os
import re
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import stats

from . import accel
from .adom import (
    DivergenceError,
    LyapunovContext,
    Trace,
    contraction_rate,
    params_for,
    run,
    with_params,
)
from .graphs import (
    GossipMatrix,
    ScaledSource,
    StaticSource,
    WeightedGraph,
    laplacian,
    random_ring_source,
    reweighted_line_graph,
    star_source,
)
from .lowerbounds import AdomSpanTracker, build_static_instance, build_tv_instance, nesterov_residual
from .problems import InexactOracle, build_dual, generate_constraints, kkt_solve, make_oracle, make_problem

DEFAULT_GRID = (2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0)


class ConfigError(ValueError):
    pass


class ConvergedBelowFloor(ValueError):
    pass


@dataclass
class ExperimentConfig:
    d: int = 20
    p: int = 10
    n: int = 10
    chi_A: float = 20.0
    mu_F: float = 1.0
    lf_grid: tuple = DEFAULT_GRID
    N: int = 2500
    seed: int = 0
    oracle: str = "inexact:10"
    graph: str = "ring"
    chebyshev: bool = False
    multi_consensus: bool = False
    out: str | None = None
    timing: bool = False

    def __post_init__(self):
        self.lf_grid = tuple(float(x) for x in self.lf_grid)
        self.validate()

    def validate(self):
        if self.N < 4:
            raise ConfigError("N must be >= 4")
        if not self.lf_grid:
            raise ConfigError("L_F grid is empty")
        if any(lf < self.mu_F for lf in self.lf_grid):
            raise ConfigError("every L_F must be >= mu_F")
        if self.graph not in ("ring", "star"):
            raise ConfigError(f"unknown graph family {self.graph!r}")
        try:
            make_oracle(self.oracle)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 1 <= self.p <= self.d:
            raise ConfigError("need 1 <= p <= d")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        out = asdict(self)
        out["lf_grid"] = list(self.lf_grid)
        return out


@dataclass
class FitResult:
    slope: float
    intercept: float
    stderr_slope: float
    r_squared: float
    points: int = 0

    @property
    def rate(self):
        return -self.slope

    @property
    def nu(self):
        return abs(self.slope)


def _ols(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.ptp(y) == 0:
        return FitResult(0.0, float(y[0]), 0.0, float("nan"), len(y))
    res = stats.linregress(x, y)
    se = float(res.stderr) if len(y) > 2 else 0.0
    return FitResult(float(res.slope), float(res.intercept), se, float(res.rvalue**2), len(y))


def fit_rate(trace, floor=0.0):
    """Fit ``ln err = c - kappa k`` over the last half of a trace; ``rate`` is kappa.

    The window stops at the first record with ``err <= floor``.
    """
    if isinstance(trace, Trace):
        k, err = trace.k, trace.err
    else:
        err = np.asarray(trace, dtype=float)
        k = np.arange(1, len(err) + 1)
    if len(err) < 4:
        raise ValueError("need at least 4 records")
    start = len(err) - math.ceil(len(err) / 2)
    k, err = k[start:], err[start:]
    bad = np.flatnonzero(err <= floor)
    if bad.size:
        k, err = k[: bad[0]], err[: bad[0]]
    if len(err) < 2:
        raise ConvergedBelowFloor("fewer than 2 records above the error floor")
    return _ols(k, np.log(err))


def fit_exponent(pairs):
    """Fit ``ln kappa`` against ``ln(L_F/mu_F)``; ``nu`` is the absolute slope."""
    clean = [(r, kap) for r, kap in pairs if r > 0 and kap > 0]
    if len(clean) < len(pairs):
        warnings.warn(f"dropped {len(pairs) - len(clean)} non-positive pairs")
    if len(clean) < 3:
        raise ValueError("need at least 3 positive pairs")
    r, kap = np.array(clean).T
    return _ols(np.log(r), np.log(kap))


# ---------------------------------------------------------------------------
# single runs and sweeps


def build_source(cfg: ExperimentConfig):
    if cfg.graph == "ring":
        src = random_ring_source(cfg.n, cfg.seed)
    else:
        src = star_source(cfg.n)
    if cfg.multi_consensus:
        src = accel.MultiConsensusSource(ScaledSource(src))
    return src


def build_case(cfg: ExperimentConfig, L_F):
    """Seeded problem, dual and parameters for one grid point."""
    prob = make_problem(cfg.n, cfg.d, cfg.p, cfg.mu_F, L_F, cfg.chi_A, cfg.seed)
    src = build_source(cfg)
    if cfg.chebyshev:
        cons, b_new = accel.transform_constraints(prob.A, prob.b)
        dp = build_dual(prob, src, constraint=cons, b=b_new, x_star=kkt_solve(prob))
    else:
        dp = build_dual(prob, src)
    return prob, dp, params_for(dp)


def run_name(L_F, seed):
    return f"run_LF{L_F:g}_seed{seed}.csv"


def run_one(cfg: ExperimentConfig, L_F):
    _, dp, params = build_case(cfg, L_F)
    return run(dp, params, make_oracle(cfg.oracle), cfg.N, timing=cfg.timing)


def run_experiment(cfg: ExperimentConfig):
    """Sweep the ``L_F`` grid; returns the summary dict (also written to ``cfg.out``)."""
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
    runs, pairs = [], []
    for L_F in cfg.lf_grid:
        entry = {"L_F": L_F, "ratio": L_F / cfg.mu_F}
        try:
            trace = run_one(cfg, L_F)
            fit = fit_rate(trace)
            entry.update(
                kappa=fit.rate,
                kappa_stderr=fit.stderr_slope,
                r_squared=fit.r_squared,
                C=math.exp(fit.intercept),
                final_err=float(trace.err[-1]),
                comms=trace.records[-1].comms,
                mults=trace.records[-1].mults,
            )
            pairs.append((L_F / cfg.mu_F, fit.rate))
            if cfg.out:
                entry["csv"] = run_name(L_F, cfg.seed)
                with open(os.path.join(cfg.out, entry["csv"]), "w") as fh:
                    fh.write(trace.to_csv())
        except (DivergenceError, ConvergedBelowFloor, FloatingPointError, ValueError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        runs.append(entry)
    summary = {"config": cfg.to_dict(), "runs": runs, "nu": None, "nu_stderr": None, "nu_r_squared": None}
    try:
        fit = fit_exponent(pairs)
        summary.update(nu=fit.nu, nu_stderr=fit.stderr_slope, nu_r_squared=fit.r_squared)
    except ValueError as exc:
        summary["nu_unavailable"] = str(exc)
    if cfg.out:
        with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
    return summary


_RUN_RE = re.compile(r"run_LF(?P<lf>[0-9.eE+-]+)_seed(?P<seed>-?\d+)\.csv$")


def fit_directory(path, mu_F=1.0):
    """Re-fit every ``run_LF*_seed*.csv`` in ``path``."""
    runs, pairs = [], []
    for name in sorted(os.listdir(path)):
        m = _RUN_RE.match(name)
        if not m:
            continue
        with open(os.path.join(path, name)) as fh:
            trace = Trace.from_csv(fh.read())
        L_F = float(m["lf"])
        fit = fit_rate(trace)
        runs.append({"L_F": L_F, "kappa": fit.rate, "r_squared": fit.r_squared, "csv": name})
        pairs.append((L_F / mu_F, fit.rate))
    runs.sort(key=lambda r: r["L_F"])
    out = {"runs": runs, "nu": None, "nu_stderr": None}
    try:
        fit = fit_exponent(pairs)
        out.update(nu=fit.nu, nu_stderr=fit.stderr_slope, nu_r_squared=fit.r_squared)
    except ValueError as exc:
        out["nu_unavailable"] = str(exc)
    return out


# ---------------------------------------------------------------------------
# verification suites


@dataclass
class CertifyConfig:
    n: int = 5
    d: int = 4
    p: int = 2
    mu_F: float = 1.0
    L_F: float = 10.0
    chi_A: float = 20.0
    N: int = 500
    seed: int = 0
    theta_scale: float = 1.0
    tau_scale: float = 1.0


def lyapunov_certify(cfg: CertifyConfig | None = None):
    """Exact-oracle run with Lyapunov tracking; checks the three lemma inequalities.

    Raises :class:`~adom_affine.adom.ParameterError` when the scaled parameters leave the
    step-size hypotheses (before any iteration is run).
    """
    cfg = cfg or CertifyConfig()
    prob = make_problem(cfg.n, cfg.d, cfg.p, cfg.mu_F, cfg.L_F, cfg.chi_A, cfg.seed)
    dp = build_dual(prob, random_ring_source(cfg.n, cfg.seed))
    base = params_for(dp)
    params = with_params(base, theta=base.theta * cfg.theta_scale, tau=base.tau * cfg.tau_scale)
    params.check(dp.L_H, dp.lam_max)
    lyap = LyapunovContext.build(dp)
    trace = run(dp, params, N=cfg.N, track_lyapunov=True, lyap=lyap)
    rho = contraction_rate(dp.mu_H, dp.L_H, dp.lam_min_plus, dp.lam_max)
    psi = np.concatenate([[trace.psi0], trace.psi])
    ratios = psi[1:] / psi[:-1]
    report = trace.lemmas.as_dict()
    report.update(
        rho=rho,
        max_psi_ratio=float(ratios.max()),
        outside_hypotheses=cfg.theta_scale != 1.0 or cfg.tau_scale != 1.0,
        iterations=cfg.N,
    )
    return report, trace, dp


def cheb_check(chis=(4, 20, 100, 1000), seeds=20, p=10, d=20):
    """Worst ``condition_of(P(A^T A))`` per target ``chi_A`` over seeded constraints."""
    rows = []
    for chi in chis:
        worst = 0.0
        for s in range(seeds):
            A, _ = generate_constraints(p, d, chi, s)
            worst = max(worst, accel.condition_of(accel.ChebyshevOperator(A).dense()))
        rows.append({"chi_A": chi, "K": accel.ChebyshevOperator(A).K, "worst_condition": worst})
    return {"rows": rows, "pass": all(r["worst_condition"] <= 4.0 + 1e-9 for r in rows)}


def normalized_gossip_family(count=20, seed=0, chi_range=(2.0, 50.0)):
    """Seeded normalised (``lam_max = 1``) line-graph Laplacians with chi log-uniform in range."""
    rng = np.random.default_rng([seed, 606])
    out = []
    for chi in np.exp(rng.uniform(np.log(chi_range[0]), np.log(chi_range[1]), size=count)):
        g, _, _ = reweighted_line_graph(1.0 / chi)
        w = laplacian(g)
        out.append((float(chi), w.matrix / w.lam_max))
    return out


def multi_consensus_check(count=20, seed=0):
    """Non-consensus spectrum of ``D(W)`` for a seeded normalised family."""
    rows = []
    for chi, w in normalized_gossip_family(count, seed):
        src = accel.MultiConsensusSource(_static(w))
        ev = accel.nonconsensus_spectrum(src.matrix(0))
        rows.append({"chi": chi, "K": src.K, "min": float(ev.min()), "max": float(ev.max())})
    ok = all(r["min"] >= 0.5 - 1e-9 and r["max"] <= 1 + 1e-9 for r in rows)
    return {"rows": rows, "pass": ok}


def _static(w):
    n = w.shape[0]
    edges = tuple((i, j, -w[i, j]) for i in range(n) for j in range(i + 1, n) if w[i, j] != 0)
    return StaticSource(GossipMatrix(w, WeightedGraph(n, edges)))


def lower_bound_consistency(L_F=37.0, mu_F=1.0, chi_W=3.0, chi_A=3.0, dim=12, N=200, kind="static"):
    """Compare ADOM's squared error with the Nesterov tail implied by its span.

    Returns one record per iteration while the tracked prefix is below ``dim``.
    """
    build = build_static_instance if kind == "static" else build_tv_instance
    inst = build(L_F, mu_F, chi_W, chi_A, dim)
    prob = inst.to_quadratic_problem()
    dp = build_dual(prob, inst.source)
    tracker = AdomSpanTracker(inst)
    prefixes = []
    trace = run(dp, params_for(dp), N=N, callback=lambda s, info: prefixes.append(tracker.advance()))
    rows = []
    for rec, P in zip(trace.records, prefixes):
        if P >= dim:
            break
        bound = nesterov_residual(inst.kappa_g, max(P - 1, 0))
        rows.append(
            {
                "k": rec.k,
                "prefix": P,
                "err2": rec.err**2,
                "bound": bound,
                "ok": rec.err**2 >= bound * (1 - 1e-9),
                "comms": rec.comms,
                "mults": rec.mults,
            }
        )
    return inst, rows


def oracle_equivalence(N=1000, T_inner=200, cfg: CertifyConfig | None = None):
    cfg = cfg or CertifyConfig()
    prob = make_problem(cfg.n, cfg.d, cfg.p, cfg.mu_F, cfg.L_F, cfg.chi_A, cfg.seed)
    dp = build_dual(prob, random_ring_source(cfg.n, cfg.seed))
    params = params_for(dp)
    exact = run(dp, params, make_oracle("exact"), N)
    inexact = run(dp, params, InexactOracle(T_inner), N)
    e1, e2 = float(exact.err[-1]), float(inexact.err[-1])
    return {"exact": e1, "inexact": e2, "relative": abs(e1 - e2) / e1}


def transform_equivalence(count=10, n=4, d=8, p=5, chi_A=20.0, L_F=10.0):
    rows = []
    for s in range(count):
        prob = make_problem(n, d, p, 1.0, L_F, chi_A, s)
        tprob, _, _ = accel.transformed_problem(prob)
        rows.append(float(np.max(np.abs(kkt_solve(prob) - kkt_solve(tprob)))))
    return rows
