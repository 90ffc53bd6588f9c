"""Command-line entry point: ``adom-affine <command> [options]``.

Exit codes: 0 success, 1 failed check, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import experiment as ex
from .lowerbounds import SpanBudget, build_static_instance, build_tv_instance, span_progress

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on|off")
    return text == "on"


def _grid(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from exc


def build_parser():
    ap = argparse.ArgumentParser(prog="adom-affine", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="sweep L_F and fit the rate exponent")
    r.add_argument("--config", help="JSON config document")
    r.add_argument("--lf-grid", type=_grid)
    r.add_argument("--iters", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--oracle")
    r.add_argument("--chebyshev", type=_on_off)
    r.add_argument("--multi-consensus", type=_on_off)
    r.add_argument("--out")
    r.add_argument("--expect-nu", type=float, nargs=2, metavar=("LO", "HI"), help="fail unless nu lies in [LO, HI]")

    f = sub.add_parser("fit", help="re-fit a directory of run CSVs")
    f.add_argument("directory")
    f.add_argument("--mu-f", type=float, default=1.0)

    c = sub.add_parser("certify", help="Lyapunov and lemma checks on a small instance")
    c.add_argument("--iters", type=int, default=500)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--theta-scale", type=float, default=1.0)
    c.add_argument("--tau-scale", type=float, default=1.0)

    lb = sub.add_parser("lowerbound", help="build a worst-case instance and probe span progress")
    lb.add_argument("--kind", choices=("static", "tv"), default="static")
    lb.add_argument("--L-F", dest="L_F", type=float, default=37.0)
    lb.add_argument("--mu-F", dest="mu_F", type=float, default=1.0)
    lb.add_argument("--chi-W", dest="chi_W", type=float, default=6.0)
    lb.add_argument("--chi-A", dest="chi_A", type=float, default=3.0)
    lb.add_argument("--dim", type=int, default=9)
    lb.add_argument("--computes", type=int)
    lb.add_argument("--comms", type=int)
    lb.add_argument("--mults", type=int)

    ch = sub.add_parser("cheb-check", help="condition compression audit for P(A^T A)")
    ch.add_argument("--chi", type=float, nargs="+", default=[4, 20, 100, 1000])
    ch.add_argument("--seeds", type=int, default=20)
    return ap


def _config_from(args):
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    overrides = {
        "lf_grid": args.lf_grid,
        "N": args.iters,
        "seed": args.seed,
        "oracle": args.oracle,
        "chebyshev": args.chebyshev,
        "multi_consensus": args.multi_consensus,
        "out": args.out,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ex.ExperimentConfig.from_dict(doc)


def _emit(obj):
    print(json.dumps(obj, indent=2, default=str))


def cmd_run(args):
    cfg = _config_from(args)
    summary = ex.run_experiment(cfg)
    _emit({k: v for k, v in summary.items() if k != "config"})
    if any("error" in r for r in summary["runs"]):
        return EXIT_FAIL
    if args.expect_nu:
        lo, hi = args.expect_nu
        if summary["nu"] is None or not lo <= summary["nu"] <= hi:
            return EXIT_FAIL
    return EXIT_OK


def cmd_fit(args):
    _emit(ex.fit_directory(args.directory, args.mu_f))
    return EXIT_OK


def cmd_certify(args):
    cfg = ex.CertifyConfig(N=args.iters, seed=args.seed, theta_scale=args.theta_scale, tau_scale=args.tau_scale)
    report, _, _ = ex.lyapunov_certify(cfg)
    _emit(report)
    return EXIT_OK if report["pass"] else EXIT_FAIL


def cmd_lowerbound(args):
    build = build_static_instance if args.kind == "static" else build_tv_instance
    inst = build(args.L_F, args.mu_F, args.chi_W, args.chi_A, args.dim)
    budget = SpanBudget(
        computes=3 if args.computes is None else args.computes,
        comms=inst.Delta_W_bfs if args.comms is None else args.comms,
        mults=inst.Delta_A_bfs if args.mults is None else args.mults,
    )
    res = span_progress(inst, budget, return_result=True)
    _emit({"instance": json.loads(inst.to_json()), "span": json.loads(res.to_json())})
    return EXIT_OK


def cmd_cheb_check(args):
    report = ex.cheb_check(tuple(args.chi), args.seeds)
    _emit(report)
    return EXIT_OK if report["pass"] else EXIT_FAIL


COMMANDS = {
    "run": cmd_run,
    "fit": cmd_fit,
    "certify": cmd_certify,
    "lowerbound": cmd_lowerbound,
    "cheb-check": cmd_cheb_check,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        # ConfigError, ParameterError, SearchTooLarge and bad JSON are all ValueErrors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
