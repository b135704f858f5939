"""Command-line entry point: ``consensus-ot <command> ...``.

Exit status is 0 when the run converged (or the check passed), 2 when it
did not, and 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .dual import certify_optimality, check_equivalence, run_dual
from .errors import DivergenceError, InstanceError, NonFiniteStateError, OracleError, ParseError
from .formats import (emit_trace, generate_random_instance, parse_instance, parse_plan, parse_prices,
                      parse_script, plan_to_dict, prices_to_dict, serialize_instance)
from .model import LinearEqualityInstance
from .online import run_online
from .oracle import grid_search_oracle, solve_convex, solve_lp_centralized, solve_oracle
from .primal import StopRule, run_primal

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


def _positive(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consensus-ot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def stop_args(p):
        p.add_argument("--max-iter", type=int, default=20000)
        p.add_argument("--tol", type=_positive, default=1e-8, help="residual tolerance")
        p.add_argument("--consensus-tol", type=_positive, default=None,
                       help="tolerance on successive consensus change (default: --tol)")
        p.add_argument("--trace", help="CSV trace output path")
        p.add_argument("--oracle", action="store_true", help="add oracle gap columns to the trace")

    g = sub.add_parser("gen", help="write a seeded random instance")
    g.add_argument("--targets", type=int, required=True)
    g.add_argument("--sources", type=int, required=True)
    g.add_argument("--seed", type=_seed, required=True)
    g.add_argument("--family", choices=("linear", "quadratic", "mixed"), default="linear")
    g.add_argument("--mode", choices=("equality", "bounded"), default="equality")
    g.add_argument("--density", type=_positive, default=1.0)
    g.add_argument("-o", "--output", required=True)

    p = sub.add_parser("solve-primal", help="amount bargaining")
    p.add_argument("--instance", required=True)
    p.add_argument("--eta", type=_positive, default=1.0)
    p.add_argument("--plan-out")
    stop_args(p)

    d = sub.add_parser("solve-dual", help="price bargaining (balanced linear instances)")
    d.add_argument("--instance", required=True)
    d.add_argument("--eta-hat", type=_positive, default=1.0)
    d.add_argument("--plan-out")
    d.add_argument("--dual-out")
    stop_args(d)

    o = sub.add_parser("solve-online", help="amount bargaining under a mutation script")
    o.add_argument("--instance", required=True)
    o.add_argument("--script", required=True)
    o.add_argument("--eta", type=_positive, default=1.0)
    o.add_argument("--iterations", type=int, required=True)
    o.add_argument("--cold", action="store_true", help="reset the state at every event")
    o.add_argument("--trace")
    o.add_argument("--oracle", action="store_true")

    c = sub.add_parser("oracle", help="centralized reference solution")
    c.add_argument("--instance", required=True)
    c.add_argument("--method", choices=("auto", "lp", "grid", "conic"), default="auto")
    c.add_argument("--resolution", type=_positive, default=1e-4)
    c.add_argument("--plan-out")

    e = sub.add_parser("check-equivalence", help="compare amount and price bargaining step by step")
    e.add_argument("--instance", required=True)
    e.add_argument("--eta", type=_positive, default=1.0)
    e.add_argument("--eta-hat", type=_positive, default=None)
    e.add_argument("--iterations", type=int, default=500)
    e.add_argument("--tol", type=_positive, default=1e-9)

    r = sub.add_parser("certify", help="check a plan and a dual point for optimality")
    r.add_argument("--instance", required=True)
    r.add_argument("--plan", required=True)
    r.add_argument("--dual", required=True)
    r.add_argument("--tol", type=_positive, default=1e-6)
    return parser


def _stop(args) -> StopRule:
    return StopRule(args.max_iter, args.tol, args.consensus_tol or args.tol)


def _report(summary: dict):
    print(json.dumps(summary, indent=1, default=float))


def _write_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def cmd_gen(args):
    inst = generate_random_instance(args.targets, args.sources, args.seed, args.family, args.mode, args.density)
    serialize_instance(inst, args.output)
    _report({"targets": inst.n_targets, "sources": inst.n_sources, "edges": inst.n_edges, "path": args.output})
    return EXIT_OK


def cmd_solve_primal(args):
    inst = parse_instance(args.instance)
    oracle = solve_oracle(inst) if args.oracle else None
    res = run_primal(inst, args.eta, _stop(args), oracle=oracle)
    if args.trace:
        emit_trace(res.trace, args.trace)
    if args.plan_out:
        _write_json(plan_to_dict(res.plan), args.plan_out)
    summary = {"converged": res.converged, "iterations": res.trace.iterations, "objective": res.objective,
               "likely_infeasible": res.trace.likely_infeasible}
    if oracle is not None:
        summary["oracle_value"] = oracle.value
    _report(summary)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_solve_dual(args):
    lin = LinearEqualityInstance.from_problem(parse_instance(args.instance))
    oracle = solve_lp_centralized(lin) if args.oracle else None
    res = run_dual(lin, args.eta_hat, _stop(args), oracle=oracle)
    if args.trace:
        emit_trace(res.trace, args.trace)
    if args.plan_out:
        _write_json(plan_to_dict(res.plan), args.plan_out)
    if args.dual_out:
        _write_json(prices_to_dict(lin, res.prices.u, res.prices.v, res.prices.w), args.dual_out)
    summary = {"converged": res.converged, "iterations": res.trace.iterations, "objective": res.objective,
               "primal_value": lin.primal_value(res.amounts)}
    if oracle is not None:
        summary["oracle_value"] = oracle.value
    _report(summary)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_solve_online(args):
    inst = parse_instance(args.instance)
    script = parse_script(args.script)
    res = run_online(inst, script, args.eta, args.iterations, oracle=solve_oracle if args.oracle else None,
                     warm_start=not args.cold)
    if args.trace:
        emit_trace(res.trace, args.trace)
    phases = [{"start": ph.start, "end": ph.end, "objective": ph.final_value, "residual": ph.final_residual,
               "oracle_value": ph.oracle_value, "relative_gap": ph.relative_gap} for ph in res.phases]
    _report({"phases": phases})
    return EXIT_OK if res.phases[-1].final_residual <= 1e-8 else EXIT_NOT_CONVERGED


def cmd_oracle(args):
    inst = parse_instance(args.instance)
    if args.method == "lp":
        if inst.is_equality_form() and inst.is_complete() and inst.is_all_linear():
            result = solve_lp_centralized(LinearEqualityInstance.from_problem(inst))
        else:
            result = solve_lp_centralized(inst)
    elif args.method == "grid":
        result = grid_search_oracle(inst, args.resolution)
    elif args.method == "conic":
        result = solve_convex(inst)
    else:
        result = solve_oracle(inst, args.resolution)
    if args.plan_out:
        _write_json(plan_to_dict(inst.plan_dict(result.plan)), args.plan_out)
    summary = {"method": result.method, "value": result.value}
    if result.dual_value is not None:
        summary["dual_value"] = result.dual_value
    if result.error_bound is not None:
        summary["error_bound"] = result.error_bound
    _report(summary)
    return EXIT_OK


def cmd_check_equivalence(args):
    lin = LinearEqualityInstance.from_problem(parse_instance(args.instance))
    rep = check_equivalence(lin, args.eta, args.iterations, args.eta_hat, args.tol)
    _report({"ok": rep.ok, "max_deviation": rep.max_deviation, "first_failure": rep.first_failure})
    return EXIT_OK if rep.ok else EXIT_NOT_CONVERGED


def cmd_certify(args):
    inst = parse_instance(args.instance)
    lin = LinearEqualityInstance.from_problem(inst)
    plan = inst.plan_array(parse_plan(args.plan))
    u, v, w = parse_prices(args.dual, lin)
    cert = certify_optimality(lin, plan, u, v, w, args.tol)
    _report({"optimal": cert.optimal, "duality_gap": cert.duality_gap, "dual_violation": cert.dual_violation,
             "slackness_violation": cert.slackness_violation, "mass_residual": cert.mass_residual})
    return EXIT_OK if cert.optimal else EXIT_NOT_CONVERGED


COMMANDS = {
    "gen": cmd_gen,
    "solve-primal": cmd_solve_primal,
    "solve-dual": cmd_solve_dual,
    "solve-online": cmd_solve_online,
    "oracle": cmd_oracle,
    "check-equivalence": cmd_check_equivalence,
    "certify": cmd_certify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ParseError, InstanceError, OracleError, DivergenceError, NonFiniteStateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
