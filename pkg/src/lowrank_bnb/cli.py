"""Command-line front end: generate, presolve, relax, solve, experiment, summarize."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import conic
from .bnb import SolverConfig, solve
from .experiments import ExperimentConfig, run_experiment, summarize, write_summary
from .instance import (
    RATES,
    CompletionInstance,
    Mode,
    generate_instance,
    load_instance,
    num_observed_for_rate,
    objective_value,
    save_instance,
)
from .presolve import PresolveError, presolve
from .relaxations import ShorPolicy, build_lifted, build_mprt, build_slice_relaxation, select_minors

EXIT_OK, EXIT_SOLVER, EXIT_USAGE = 0, 1, 2
MODES = {"bp": Mode.BASIS_PURSUIT, "noisy": Mode.NOISY}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _instance_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("instance")
    g.add_argument("--instance", type=Path, help="load an instance JSON instead of generating one")
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--m", type=int, help="columns (defaults to --n)")
    g.add_argument("--rank", type=int, default=1)
    g.add_argument("--gamma", type=float, default=20.0)
    g.add_argument("--p", type=float, default=2.0)
    g.add_argument("--rate", choices=RATES, default="knlogn")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--mode", choices=sorted(MODES), default="noisy")
    g.add_argument("--seed", type=int, default=0)
    return p


def _solver_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("solver")
    g.add_argument("--disjunction", choices=["eig", "mccormick"], default="eig")
    g.add_argument("--order", choices=["best", "breadth", "depth"], default="best")
    g.add_argument("--pieces", type=int, choices=[2, 3, 4])
    g.add_argument("--shor", choices=[s.value for s in ShorPolicy], default="none")
    g.add_argument("--presolve", action=argparse.BooleanOptionalAction, default=False)
    g.add_argument("--node-altmin", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--time-limit-s", type=float, default=math.inf)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lowrank-bnb", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log one line per node")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    inst, solver = _instance_flags(), _solver_flags()

    g = sub.add_parser("generate", parents=[inst], help="write a random instance as JSON")
    g.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("presolve", parents=[inst], help="fill entries forced by minors")
    p.add_argument("--out", type=Path, help="write the presolved instance here")

    r = sub.add_parser("relax", parents=[inst], help="solve one root relaxation")
    r.add_argument("--relaxation", choices=["mprt", "lifted", "slice"], default="lifted")
    r.add_argument("--shor", choices=[s.value for s in ShorPolicy], default="none")
    r.add_argument("--out", type=Path)

    s = sub.add_parser("solve", parents=[inst, solver], help="run branch-and-bound")
    s.add_argument("--out", type=Path, help="write a JSON report here")

    e = sub.add_parser("experiment", help="run an experiment grid from a JSON config")
    e.add_argument("--config", type=Path, required=True)
    e.add_argument("--out", type=Path, help="CSV output (overrides the config)")

    m = sub.add_parser("summarize", help="geometric means per cell of an experiment CSV")
    m.add_argument("csv", type=Path)
    m.add_argument("--out", type=Path)
    return parser


def _load_or_generate(args) -> CompletionInstance:
    if args.instance is not None:
        return load_instance(args.instance)
    mode = MODES[args.mode]
    m = args.m or args.n
    gamma = 1.0 if mode is Mode.BASIS_PURSUIT else args.gamma
    noise = 0.0 if mode is Mode.BASIS_PURSUIT else args.noise
    num = num_observed_for_rate(args.n, args.rank, args.p, args.rate, m=m)
    return generate_instance(args.n, m, args.rank, gamma, noise, num, args.seed, mode=mode)


def _emit(payload: dict, out: Path | None) -> None:
    text = json.dumps(payload, indent=2, default=_json_default)
    if out is not None:
        out.write_text(text + "\n")
    print(text)


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _finite(x: float):
    return x if math.isfinite(x) else str(x)


def cmd_generate(args) -> int:
    inst = _load_or_generate(args)
    save_instance(inst, args.out)
    print(json.dumps({"out": str(args.out), "n": inst.n, "m": inst.m, "k": inst.k, "observed": len(inst.index)}))
    return EXIT_OK


def cmd_presolve(args) -> int:
    inst = _load_or_generate(args)
    try:
        res = presolve(inst)
    except PresolveError as exc:
        print(f"presolve failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.out is not None:
        save_instance(res.instance(inst), args.out)
    print(json.dumps(res.summary()))
    return EXIT_OK


def cmd_relax(args) -> int:
    inst = _load_or_generate(args)
    policy = ShorPolicy(args.shor)
    minors = select_minors(inst, policy, args.seed) if policy is not ShorPolicy.NONE else None
    if args.relaxation == "mprt":
        prog = build_mprt(inst)
    elif args.relaxation == "slice":
        prog = build_slice_relaxation(inst, shor=minors is not None, minors=minors)
    else:
        prog = build_lifted(inst, minors=minors)
    sol = conic.solve(prog)
    _emit({"relaxation": args.relaxation, "shor": policy.value, "status": sol.status.value,
           "objective": _finite(sol.objective)}, args.out)
    return EXIT_OK if sol.ok or sol.status is conic.Status.INFEASIBLE else EXIT_SOLVER


def cmd_solve(args) -> int:
    inst = _load_or_generate(args)
    config = SolverConfig(disjunction=args.disjunction, pieces=args.pieces, order=args.order, eps=args.eps,
                          time_limit_s=args.time_limit_s, use_node_altmin=args.node_altmin, shor=args.shor,
                          presolve=args.presolve, seed=args.seed)
    report = solve(inst, config)
    payload = {
        "termination": report.termination.value, "Z_lower": _finite(report.Z_lower),
        "Z_upper": _finite(report.Z_upper), "gap": _finite(report.gap), "nodes": report.nodes,
        "root_gap": _finite(report.root_gap), "root_time_s": report.root_time, "total_time_s": report.total_time,
        "failed_nodes": report.failed_nodes,
    }
    if report.incumbent is not None:
        payload["incumbent_objective"] = objective_value(inst, report.incumbent.X)
        payload["X"] = report.incumbent.X
    _emit(payload, args.out)
    failed = report.failed_nodes > 0 and report.incumbent is None
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_experiment(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    rows = run_experiment(config, args.out)
    errors = sum(row["termination"] == "error" for row in rows)
    print(json.dumps({"rows": len(rows), "errors": errors, "out": str(args.out or config.out_csv)}))
    return EXIT_SOLVER if errors else EXIT_OK


def cmd_summarize(args) -> int:
    table = summarize(args.csv)
    if args.out is not None:
        write_summary(table, args.out)
    print(json.dumps(table, indent=2, default=str))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "presolve": cmd_presolve, "relax": cmd_relax, "solve": cmd_solve,
            "experiment": cmd_experiment, "summarize": cmd_summarize}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
