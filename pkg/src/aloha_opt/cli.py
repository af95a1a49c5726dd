"""Command-line entry point: ``aloha-opt <command> ...``.

Exit codes: 0 success, 1 infeasible (or a failed validation), 2 invalid
input, 3 divergence of a distributed algorithm.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .mac_dist import StepParams, calibrate_step, run_mac_distributed
from .mac_opt import min_delay_constraint, solve_mac_centralized, solve_mac_suboptimal
from .numerics import BarrierParams
from .sim import SimConfig, compare, simulate, write_report
from .topology import TopologyError, gen_linear, gen_star
from .xlayer_dist import XStepParams, run_xlayer
from .xlayer_opt import solve_xlayer_centralized

EXIT_OK, EXIT_INFEASIBLE, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser, scenario=True):
    if scenario:
        p.add_argument("--scenario", default="canonical",
                       help="scenario JSON file, or 'canonical' for the shipped network (default)")
    p.add_argument("--out", help="output path")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--max-iter", type=int, help="iteration limit")
    p.add_argument("--tol", type=float, help="tolerance (KKT residual, or %% error for distributed runs)")


def _weights(p: argparse.ArgumentParser):
    p.add_argument("--lambda1", type=float, help="energy weight (overrides the scenario)")
    p.add_argument("--lambda2", type=float, help="rate-utility weight (overrides the scenario)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aloha-opt",
                                 description="Delay-constrained energy/rate optimization for slotted-Aloha networks")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mindc", help="minimum feasible link delay constraint")
    _common(p)

    p = sub.add_parser("mac-opt", help="MAC-layer problem with a per-link delay constraint")
    _common(p)
    _weights(p)
    p.add_argument("--solver", choices=harness.MAC_SOLVERS, default="centralized")
    p.add_argument("--Dc", type=float, help="link delay constraint in slots (default 4 x MinDc)")
    p.add_argument("--alpha", type=float, help="constant dual step of the distributed solver (default: calibrated)")

    p = sub.add_parser("xlayer-opt", help="cross-layer problem with end-to-end delay limits")
    _common(p)
    _weights(p)
    p.add_argument("--solver", choices=harness.XLAYER_SOLVERS, default="centralized")
    p.add_argument("--Ds", type=float, help="end-to-end delay limit for every session")
    p.add_argument("--alpha", type=float, default=320.0, help="link price step (distributed)")
    p.add_argument("--beta", type=float, default=1e-4, help="session price step (distributed)")
    p.add_argument("--phi", type=float, default=5e-4, help="probability step (distributed)")
    p.add_argument("--damping", type=float, default=2.0, help="secant step scale (newton)")
    p.add_argument("--max-gain", type=float, default=2.0,
                   help="largest allowed ratio of secant to gradient step (newton)")

    p = sub.add_parser("simulate", help="simulate the MAC optimum (or a given operating point)")
    _common(p)
    _weights(p)
    p.add_argument("--Dc", type=float)
    p.add_argument("--solution", help="JSON with 'probs' and 'rates' to simulate instead of solving")
    p.add_argument("--slots", type=int, default=1_000_000)
    p.add_argument("--no-dummy", action="store_true", help="empty queues stay silent")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("validate", help="simulate the MAC optimum and compare with the analytic delays")
    _common(p)
    _weights(p)
    p.add_argument("--Dc", type=float)
    p.add_argument("--slots", type=int, default=1_000_000)
    p.add_argument("--delay-tol", type=float, default=0.10)
    p.add_argument("--dummy-off", action="store_true", help="also run without dummy packets and report the change")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("sweep", help="parameter sweep, or a named figure preset")
    _common(p)
    p.add_argument("--preset", choices=harness.PRESETS)
    p.add_argument("--axis", choices=harness.AXES)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--solver", default="centralized")
    p.add_argument("--problem", choices=("mac", "xlayer"), default="mac")
    p.add_argument("--kind", choices=("star", "linear"), default="star")
    p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("gen", help="write a generated star or linear network as a scenario file")
    _common(p, scenario=False)
    p.add_argument("--kind", choices=("star", "linear"), required=True)
    p.add_argument("--n", type=int, required=True)
    return ap


def _scenario(args) -> harness.Scenario:
    sc = harness.load_scenario(args.scenario)
    kw = {}
    if getattr(args, "lambda1", None) is not None:
        kw["lam1"] = args.lambda1
    if getattr(args, "lambda2", None) is not None:
        kw["lam2"] = args.lambda2
    if getattr(args, "Dc", None) is not None:
        kw["Dc"] = args.Dc
    if getattr(args, "Ds", None) is not None:
        kw["Ds"] = args.Ds
    return replace(sc, **kw)


def _emit(doc: dict, out):
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _barrier(args) -> BarrierParams:
    kw = {}
    if args.max_iter:
        kw["max_iter"] = args.max_iter
    if args.tol:
        kw["kkt_tol"] = args.tol
    return BarrierParams(**kw)


def cmd_mindc(args) -> int:
    sc = _scenario(args)
    _emit({"scenario": sc.name, "min_delay_constraint": min_delay_constraint(sc.topology)}, args.out)
    return EXIT_OK


def cmd_mac_opt(args) -> int:
    sc = _scenario(args)
    ms = sc.mac()
    if args.solver == "centralized":
        sol = solve_mac_centralized(ms, _barrier(args))
    elif args.solver == "suboptimal":
        sol = solve_mac_suboptimal(ms)
    else:
        ref = solve_mac_centralized(ms)
        if ref.status == "infeasible":
            sol = ref
        else:
            alpha = args.alpha or calibrate_step(ms, ref)
            sol, trace = run_mac_distributed(ms, StepParams(alpha=alpha), max_iter=args.max_iter or 500,
                                             reference=ref, tol_pct=args.tol or 1.0, stop_at_tol=False)
            if args.out:
                trace.to_csv(Path(args.out).with_suffix(".trace.csv"))
    _emit({"solver": args.solver, "Dc": ms.Dc, **sol.to_dict(sc.topology)}, args.out)
    if sol.status == "diverged":
        return EXIT_DIVERGED
    return EXIT_OK if sol.feasible or sol.status == "converged" else EXIT_INFEASIBLE


def cmd_xlayer_opt(args) -> int:
    xs = _scenario(args).xlayer()
    if args.solver == "centralized":
        sol = solve_xlayer_centralized(xs, _barrier(args))
    else:
        ref = solve_xlayer_centralized(xs)
        if ref.status == "infeasible":
            sol = ref
        else:
            params = XStepParams(alpha=args.alpha, beta=args.beta, phi=args.phi, damping=args.damping,
                                  max_gain=args.max_gain)
            sol, trace = run_xlayer(xs, args.solver, params, max_iter=args.max_iter or 5000, reference=ref,
                                    tol_pct=args.tol or 1.0)
            if args.out:
                trace.to_csv(Path(args.out).with_suffix(".trace.csv"))
    _emit({"solver": args.solver, "Ds": xs.Ds.tolist(), **sol.to_dict(xs.topology)}, args.out)
    if sol.status == "diverged":
        return EXIT_DIVERGED
    return EXIT_OK if sol.feasible or sol.status == "converged" else EXIT_INFEASIBLE


def _operating_point(args, sc):
    if getattr(args, "solution", None):
        doc = json.loads(Path(args.solution).read_text())
        return np.asarray(doc["probs"], float), np.asarray(doc["rates"], float), None
    sol = solve_mac_centralized(sc.mac())
    return sol.probs, sol.link_rates, sol


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    p, r, sol = _operating_point(args, sc)
    if sol is not None and sol.status == "infeasible":
        print("operating point is infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    rep = simulate(SimConfig(sc.topology, p, link_rates=r, slots=args.slots, dummy_packets=not args.no_dummy,
                             seed=args.seed))
    rows = compare(rep, sc.topology, p, r)
    out = Path(args.out or "simulation.csv")
    write_report(rows, out)
    if not args.no_plot:
        from .plotting import plot_validation
        mode = "dummy_off" if args.no_dummy else "dummy_on"
        plot_validation([{"mode": mode, **row.__dict__} for row in rows], out.with_suffix(".png"))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = _scenario(args)
    sol = solve_mac_centralized(sc.mac())
    if sol.status == "infeasible":
        print("operating point is infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    res = harness.validate(sc, sol, {"slots": args.slots, "seed": args.seed}, args.delay_tol,
                           compare_dummy_off=args.dummy_off)
    rows = [{"mode": "dummy_on", **r.__dict__} for r in res.rows]
    rows += [{"mode": "dummy_off", **r.__dict__} for r in res.dummy_off_rows or []]
    out = Path(args.out or "validation.csv")
    harness.write_rows(rows, out)
    if not args.no_plot:
        from .plotting import plot_validation
        plot_validation(rows, out.with_suffix(".png"))
    print(f"{'PASS' if res.passed else 'FAIL'}: {len(res.reasons)} deviations beyond {args.delay_tol:.0%}")
    for reason in res.reasons:
        print("  " + reason)
    if res.dummy_delta is not None:
        print("dummy-off change of end-to-end delay per session: "
              + ", ".join(f"{d:+.1%}" for d in res.dummy_delta))
    return EXIT_OK if res.passed else EXIT_INFEASIBLE


def cmd_sweep(args) -> int:
    if args.preset:
        written = harness.run_preset(args.preset, args.out or f"{args.preset}_out", workers=args.workers,
                                     plot=not args.no_plot, seed=args.seed, max_iter=args.max_iter)
        for key, path in written.items():
            print(f"{key}: {path}")
        return EXIT_OK
    if not args.axis or not args.values:
        raise harness.ScenarioError("sweep needs --preset, or --axis with --values")
    spec = harness.SweepSpec(args.scenario, args.axis, tuple(args.values), args.solver, args.out or "sweep.csv",
                             args.problem, args.kind, max_iter=args.max_iter or 5000)
    rows = harness.sweep(spec, args.workers)
    if not args.no_plot:
        from . import plotting
        out = Path(spec.out).with_suffix(".png")
        if spec.axis == "network_size":
            plotting.plot_mindc({spec.kind: rows}, out)
        elif spec.axis == "lambda_ratio":
            plotting.plot_tradeoff({spec.solver: rows}, out)
        else:
            plotting.plot_ladder(rows, out)
    print(f"wrote {spec.out}")
    return EXIT_OK if all(r["status"] in ("optimal", "converged") for r in rows) else EXIT_INFEASIBLE


def cmd_gen(args) -> int:
    top = (gen_star if args.kind == "star" else gen_linear)(args.n)
    doc = {"name": f"{args.kind}-{args.n}", **top.to_dict()}
    doc.pop("sessions")
    _emit(doc, args.out)
    return EXIT_OK


COMMANDS = {
    "mindc": cmd_mindc,
    "mac-opt": cmd_mac_opt,
    "xlayer-opt": cmd_xlayer_opt,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "sweep": cmd_sweep,
    "gen": cmd_gen,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (harness.ScenarioError, TopologyError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
