"""Command-line front end (``mfgfem``).

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from ._io import write_json
from .config import ConfigError, load_problem, load_study
from .convergence import LevelError, run_heat_suite, run_mfg_convergence
from .solver import (HJBStepError, SingularLinearizationError, SolverError, default_q,
                     jacobian_check, solve_coupled, stability_margin)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2, 3
HEAT_LEVELS = [1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("mfgfem-out"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized probes")
    common.add_argument("--q", type=float, default=None, help="norm exponent override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mfgfem", description="P1/θ-scheme solver for Dirichlet mean field games")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    s = sub.add_parser("solve", parents=[common], help="solve the coupled system")
    s.add_argument("problem", type=Path)
    s.add_argument("--n", type=int, default=None, help="cells per axis (overrides the file)")
    c = sub.add_parser("converge", parents=[common], help="refinement study on a manufactured pair")
    c.add_argument("study", type=Path)
    h = sub.add_parser("heat-bench", parents=[common], help="heat benchmark battery")
    h.add_argument("--levels", type=int, default=5, help="number of levels starting at h = 1/8")
    h.add_argument("--T", type=float, default=0.5)
    st = sub.add_parser("stability", parents=[common], help="solve, then estimate the stability margin")
    st.add_argument("problem", type=Path)
    st.add_argument("--n", type=int, default=None)
    j = sub.add_parser("jacobian-check", parents=[common], help="finite-difference test of the Jacobian")
    j.add_argument("problem", type=Path)
    j.add_argument("--n", type=int, default=None)
    j.add_argument("--directions", type=int, default=20)
    j.add_argument("--delta", type=float, default=1e-5)
    j.add_argument("--tol", type=float, default=1e-5)
    return p


def _setup(args):
    pc = load_problem(args.problem)
    space, scheme = pc.discretization(args.n)
    cfg = pc.solver_config(**({"q": args.q} if args.q is not None else {}))
    return pc.problem(), space, scheme, cfg


def _solve(args):
    problem, space, scheme, cfg = _setup(args)
    u, m, report = solve_coupled(problem, space, scheme, cfg)
    return problem, space, scheme, cfg, u, m, report


def cmd_solve(args) -> int:
    try:
        *_, u, m, report = _solve(args)
    except SolverError as exc:
        write_json(args.out / "report.json", exc.report.to_dict())
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    u.write_csv(args.out / "u.csv")
    m.write_csv(args.out / "m.csv")
    write_json(args.out / "report.json", report.to_dict())
    print(f"converged in {report.outer_iterations} outer iterations, residual {report.final_residual:.3e}")
    return EXIT_OK


def cmd_converge(args) -> int:
    study = load_study(args.study)
    pc = study.problem_config
    q = args.q or study.q or default_q(pc.problem().domain.dim)
    overrides = {**study.raw.get("solver", {}), "q": q}
    cfg = pc.solver_config(**overrides)
    try:
        rep = run_mfg_convergence(pc.problem(), study.h, q=q, cfg=cfg, theta=study.theta,
                                  tau_rule=study.tau_rule, threads=args.threads)
    except LevelError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NONCONVERGED
    rep.write_csv(args.out / "convergence.csv")
    write_json(args.out / "convergence.json", rep.to_dict())
    print(rep.table())
    return EXIT_OK if all(rep.flags.values()) else EXIT_FAIL


def cmd_heat_bench(args) -> int:
    """Runs the whole battery; the exit code is decided by the primary benchmark."""
    if args.levels < 2:
        raise ConfigError("need ≥ 2 levels")
    hs = [2.0 ** -(3 + i) for i in range(args.levels)]
    suites = run_heat_suite(hs, q=args.q or 7.0, T=args.T)
    summary = []
    for pair in suites:
        for rep in pair:
            rep.write_csv(args.out / f"heat_{rep.name}.csv")
            print(rep.table())
            summary.append(rep.to_dict())
    gate = list(suites[0])
    ok = all(all(rep.flags.values()) for rep in gate)
    write_json(args.out / "heat_bench.json", {
        "reports": summary,
        "gate": [rep.name for rep in gate],
        "pass": ok,
        "battery_pass": all(all(rep.flags.values()) for pair in suites for rep in pair),
    })
    print(f"{' + '.join(rep.name for rep in gate)}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_stability(args) -> int:
    try:
        problem, space, scheme, cfg, u, m, report = _solve(args)
    except SolverError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    try:
        est = stability_margin(problem, space, scheme, cfg, u, m, seed=args.seed)
    except SingularLinearizationError as exc:
        write_json(args.out / "stability.json", {"margin": 0.0, "stable": False, "reason": str(exc)})
        print(f"unstable: {exc}")
        return EXIT_FAIL
    stable = est.value > 0 and math.isfinite(est.value)
    write_json(args.out / "stability.json", {
        "margin": est.value, "converged": est.converged, "iterations": est.iterations,
        "stable": stable, "solve": report.to_dict(),
    })
    flag = "" if est.converged else " (power iteration not settled)"
    print(f"stability margin {est.value:.6e}{flag}")
    return EXIT_OK if stable else EXIT_FAIL


def cmd_jacobian_check(args) -> int:
    problem, space, scheme, cfg = _setup(args)
    try:
        u, m, _ = solve_coupled(problem, space, scheme, cfg)
    except SolverError as exc:  # the check is meaningful at any iterate
        u, m = exc.u, exc.m
    errs = jacobian_check(problem, space, scheme, cfg, u, m, n_directions=args.directions,
                          delta=args.delta, seed=args.seed)
    ok = bool(errs.max() <= args.tol)
    write_json(args.out / "jacobian_check.json", {
        "relative_errors": errs.tolist(), "max": float(errs.max()), "tol": args.tol, "pass": ok,
    })
    print(f"max relative error {errs.max():.3e} over {len(errs)} directions: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "solve": cmd_solve,
    "converge": cmd_converge,
    "heat-bench": cmd_heat_bench,
    "stability": cmd_stability,
    "jacobian-check": cmd_jacobian_check,
}


def main(argv=None) -> int:
    parser = _parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HJBStepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
