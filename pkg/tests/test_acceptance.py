"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to get the lines in the terminal
summary, or ``python tests/test_acceptance.py`` to print them directly.
A criterion that fails here is reported as failing; the reasons for the
known misses are analysed in the project notes and the README.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import central_diff  # noqa: E402

from aloha_opt.delay_model import (link_delay, pollaczek_khinchin, service_stats,  # noqa: E402
                                   success_prob_jacobian, success_probs)
from aloha_opt.harness import canonical_scenario, pareto_violations, sweep, SweepSpec, validate  # noqa: E402
from aloha_opt.mac_dist import (StepParams, calibrate_step, mac_round, run_mac_distributed,  # noqa: E402
                                state_from_solution)
from aloha_opt.mac_opt import (MacScenario, assemble_mac_problem, boundary_rate_reduced_program,  # noqa: E402
                               maxmin_reduced_program, min_delay_constraint, solve_mac_centralized,
                               solve_mac_suboptimal)
from aloha_opt.numerics import grid_oracle  # noqa: E402
from aloha_opt.sim import SimConfig, simulate  # noqa: E402
from aloha_opt.topology import build, canonical, gen_linear, gen_star  # noqa: E402
from aloha_opt.xlayer_dist import XStepParams, run_xlayer, state_from_xsolution, xlayer_round  # noqa: E402
from aloha_opt.xlayer_opt import (XLayerScenario, assemble_xlayer_problem, solve_xlayer_centralized,  # noqa: E402
                                  used_links)

LADDER = (40.0, 100.0, 200.0, 400.0, 800.0, 1600.0)
LAMBDA_GRID = np.geomspace(0.01, 10, 10)
XSTEPS = dict(alpha=320.0, beta=1e-4, phi=5e-4)


def _line(n, ok, detail):
    return f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def _check(log, n, ok, detail):
    line = _line(n, ok, detail)
    if log is not None:
        log.append(line)
    print(line)
    assert ok, line


# --- 1 ----------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.uniform(1e-3, 1.0, 10_000)
    r = x * rng.uniform(0.0, 0.999, 10_000)
    worst = 0.0
    for a, b in zip(x, r):
        s = service_stats(a)
        comp = pollaczek_khinchin(s.mean, s.variance, b)
        worst = max(worst, abs(link_delay(a, b) - comp) / comp)
    dt = time.perf_counter() - t0
    return worst < 1e-12 and dt < 1.0, f"max rel err {worst:.2e} on 1e4 points, {dt:.2f} s"


# --- 2 ----------------------------------------------------------------------

def criterion_2():
    t0 = time.perf_counter()
    one = simulate(SimConfig(build(2, [(0, 1)]), [0.5], link_rates=[0.25], slots=1_000_000, seed=0))
    d = float(one.link_mean_delay[0])
    n = 1_000_000
    pair = simulate(SimConfig(build(2, [(0, 1), (1, 0)]), [0.5, 0.5], link_rates=[0.05, 0.05], slots=n,
                              warmup=0, seed=0))
    sigma = math.sqrt(0.25 * 0.75 / n)
    xdev = float(np.max(np.abs(pair.link_success_prob - 0.25)))
    dt = time.perf_counter() - t0
    ok = abs(d - 3.5) / 3.5 < 0.05 and xdev <= 3 * sigma and dt < 30
    return ok, f"delay {d:.4f} vs 3.5 ({abs(d - 3.5) / 3.5:.2%}), pair |x-0.25| = {xdev / sigma:.2f} sigma, {dt:.1f} s"


# --- 3 ----------------------------------------------------------------------

def criterion_3():
    sc = canonical_scenario()
    sol = solve_mac_centralized(sc.mac())
    res = validate(sc, sol, {"slots": 1_000_000, "seed": 0}, compare_dummy_off=True)
    worst = float(np.max(np.abs(res.dummy_delta)))
    detail = ", ".join(f"{d:+.1%}" for d in res.dummy_delta)
    return worst < 0.10, f"end-to-end delay change with dummies off per session: {detail}"


# --- 4 ----------------------------------------------------------------------

def criterion_4():
    t0 = time.perf_counter()
    cases = (("single", build(2, [(0, 1)]), 1.0, 1e-3),
             ("pair", build(2, [(0, 1), (1, 0)]), 4.0, 1e-3),
             ("star3", gen_star(3), 7.4641, 2e-2))
    parts, ok = [], True
    for name, top, expect, step in cases:
        refine = 0 if step < 1e-2 else 3
        m = min_delay_constraint(top)
        g = math.exp(grid_oracle(maxmin_reduced_program(top), step, refine=refine).objective)
        sc = MacScenario(top, 1.0, 1.0, 4 * m)
        sol = solve_mac_centralized(sc)
        orc = grid_oracle(boundary_rate_reduced_program(sc), step, refine=refine + 1)
        d_obj = abs(sol.objective - orc.objective)
        good = abs(m - g) < 1e-3 and abs(m - expect) < 1e-3 and d_obj < 1e-3
        ok &= good
        parts.append(f"{name} MinDc {m:.4f} (grid {g:.4f}), |obj-grid| {d_obj:.1e}")
    dt = time.perf_counter() - t0
    return ok and dt < 120, "; ".join(parts) + f"; {dt:.1f} s"


# --- 5 ----------------------------------------------------------------------

def criterion_5():
    t0 = time.perf_counter()
    n = np.arange(4, 13)
    star = np.array([min_delay_constraint(gen_star(k)) for k in n])
    lin = np.array([min_delay_constraint(gen_linear(k)) for k in n])
    coef = np.polyfit(n, star, 1)
    resid = star - np.polyval(coef, n)
    r2 = 1 - resid @ resid / np.sum((star - star.mean()) ** 2)
    ratio = lin.max() / lin.min()
    dt = time.perf_counter() - t0
    ok = bool(np.all(np.diff(star) > 0)) and r2 > 0.98 and ratio < 1.25 and dt < 300
    return ok, (f"star MinDc {star[0]:.2f}..{star[-1]:.2f}, R^2 {r2:.4f}; "
                f"linear MinDc {lin.min():.3f}..{lin.max():.3f}, ratio {ratio:.3f} (needs < 1.25)")


# --- 6 ----------------------------------------------------------------------

def criterion_6():
    top = canonical()
    sc = MacScenario(top, 1.0, 1.0, 4 * min_delay_constraint(top))
    ref = solve_mac_centralized(sc)
    alpha = calibrate_step(sc, ref)
    _, tr = run_mac_distributed(sc, StepParams(alpha=alpha), max_iter=1000, reference=ref, p0=0.1,
                                stop_at_tol=False)
    it = tr.converged_at
    ok = tr.status == "converged" and it is not None and it <= 100
    return ok, f"calibrated alpha {alpha:.3g}: all errors < 1% from round {it} through round {len(tr) - 1}"


# --- 7 ----------------------------------------------------------------------

def criterion_7():
    sc = XLayerScenario(canonical(), 0.005, 10.0, 100.0)
    ref = solve_xlayer_centralized(sc)
    _, g = run_xlayer(sc, "gradient", XStepParams(**XSTEPS), max_iter=3000, reference=ref)
    _, nt = run_xlayer(sc, "newton", XStepParams(**XSTEPS, damping=2.0, max_gain=2.0), max_iter=3000,
                       reference=ref)
    both = g.status == "converged" and nt.status == "converged"
    ratio = g.converged_at / nt.converged_at if both and nt.converged_at else float("nan")
    ok = both and ratio >= 3
    return ok, (f"gradient {g.status} at round {g.converged_at}, newton {nt.status} at round {nt.converged_at}, "
                f"ratio {ratio:.2f} (needs >= 3)")


# --- 8 ----------------------------------------------------------------------

def criterion_8():
    top = canonical()
    Dc = 4 * min_delay_constraint(top)
    worst, feasible = 0.0, True
    for lam in LAMBDA_GRID:
        sc = MacScenario(top, float(lam), 1.0, Dc)
        cen, sub = solve_mac_centralized(sc), solve_mac_suboptimal(sc)
        worst = max(worst, abs(sub.objective - cen.objective) / abs(cen.objective))
        x = success_probs(top, sub.probs)
        d = np.array([link_delay(a, b) for a, b in zip(x, sub.link_rates)])
        feasible &= bool(sub.feasible and np.all(d <= Dc + 1e-6))
    return worst < 0.10 and feasible, f"largest suboptimal gap {worst:.2%} over 10 weights, all feasible: {feasible}"


# --- 9 ----------------------------------------------------------------------

def criterion_9():
    mindc = min_delay_constraint(canonical())
    lam = sweep(SweepSpec("canonical", "lambda_ratio", LAMBDA_GRID, fixed={"lam2": 1.0, "Dc_multiplier": 4}))
    xlam = sweep(SweepSpec("canonical", "lambda_ratio", LAMBDA_GRID, problem="xlayer",
                           fixed={"lam2": 1.0, "Ds": 400.0}))
    dc = sweep(SweepSpec("canonical", "Dc", mindc * np.array([1.5, 2, 4, 8, 16, 32])))
    ds = sweep(SweepSpec("canonical", "Ds", LADDER))
    front = not pareto_violations(lam) and not pareto_violations(xlam)
    dc_obj = np.array([r["objective"] for r in dc])
    ds_obj = np.array([r["objective"] for r in ds])
    mono = bool(np.all(np.diff(dc_obj) <= 1e-6) and np.all(np.diff(ds_obj) <= 1e-6))
    flat = abs(ds_obj[-1] - ds_obj[-2]) / abs(ds_obj[-2])
    ok = front and mono and flat < 0.01
    return ok, f"non-dominated fronts: {front}; relaxation monotone: {mono}; Ds 800->1600 change {flat:.2%}"


# --- 10 ---------------------------------------------------------------------

def criterion_10():
    top = canonical()
    mindc = min_delay_constraint(top)
    kkt = []
    for lam in LAMBDA_GRID:
        kkt.append(solve_mac_centralized(MacScenario(top, float(lam), 1.0, 4 * mindc)).report.kkt_residual)
    xsols = [solve_xlayer_centralized(XLayerScenario(top, 1.0, 1.0, Ds)) for Ds in LADDER]
    kkt += [s.report.kkt_residual for s in xsols]
    max_kkt = float(np.max(kkt))

    ms = MacScenario(top, 1.0, 1.0, 4 * mindc)
    s = state_from_solution(solve_mac_centralized(ms))
    n1 = mac_round(s, ms, StepParams())
    fp_mac = max(np.max(np.abs(n1.probs - s.probs)), np.max(np.abs(n1.rates - s.rates)),
                 np.max(np.abs(n1.duals - s.duals)))
    xs = XLayerScenario(top, 0.005, 10.0, 100.0)
    xst = state_from_xsolution(solve_xlayer_centralized(xs))
    n2 = xlayer_round(xst, xs, XStepParams(**XSTEPS))
    u = used_links(top)
    rel = lambda a, b: float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)))
    fp_x = max(rel(n2.probs, xst.probs), rel(n2.session_rates, xst.session_rates),
               rel(n2.budgets[u], xst.budgets[u]), rel(n2.link_duals, xst.link_duals))

    rng = np.random.default_rng(0)
    mprog = assemble_mac_problem(ms)
    xprog = assemble_xlayer_problem(XLayerScenario(top, 1.0, 1.0, 100.0))
    fd_err = 0.0
    for _ in range(100):
        p = rng.uniform(0.02, 0.15, top.n_links)
        jac = success_prob_jacobian(top, p)
        fd = central_diff(lambda v: success_probs(top, v), p)
        fd_err = max(fd_err, float(np.max(np.abs(jac - fd) / np.maximum(np.abs(jac), 1e-3 * np.abs(jac).max()))))
        v = np.concatenate([p, rng.uniform(-8, -1, top.n_links)])
        jm = mprog.constraints(v)[1]
        fm = central_diff(lambda w: mprog.constraints(w)[0], v)
        fd_err = max(fd_err, float(np.max(np.abs(jm - fm) / np.maximum(np.abs(jm), 1e-2))))
        w = np.concatenate([p, rng.uniform(-9, -3, top.n_sessions), rng.uniform(2, 60, len(u))])
        jx = xprog.constraints(w)[1]
        fx = central_diff(lambda q: xprog.constraints(q)[0], w)
        fd_err = max(fd_err, float(np.max(np.abs(jx - fx) / np.maximum(np.abs(jx), 1e-2))))
    ok = max_kkt < 1e-6 and fp_mac < 1e-8 and fp_x < 1e-8 and fd_err < 1e-5
    return ok, (f"max KKT residual {max_kkt:.1e}; fixed-point drift MAC {fp_mac:.1e}, cross-layer {fp_x:.1e}; "
                f"max gradient rel err {fd_err:.1e}")


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


def test_criterion_01_delay_closed_form(acceptance_log):
    _check(acceptance_log, 1, *criterion_1())


def test_criterion_02_simulator_matches_model(acceptance_log):
    _check(acceptance_log, 2, *criterion_2())


def test_criterion_03_dummy_packets_do_not_matter(acceptance_log):
    _check(acceptance_log, 3, *criterion_3())


def test_criterion_04_grid_oracle_equivalence(acceptance_log):
    _check(acceptance_log, 4, *criterion_4())


def test_criterion_05_mindc_scaling(acceptance_log):
    _check(acceptance_log, 5, *criterion_5())


def test_criterion_06_distributed_mac_converges(acceptance_log):
    _check(acceptance_log, 6, *criterion_6())


def test_criterion_07_newton_speedup(acceptance_log):
    _check(acceptance_log, 7, *criterion_7())


def test_criterion_08_suboptimal_tightness(acceptance_log):
    _check(acceptance_log, 8, *criterion_8())


def test_criterion_09_pareto_and_relaxation(acceptance_log):
    _check(acceptance_log, 9, *criterion_9())


def test_criterion_10_fixed_points_kkt_gradients(acceptance_log):
    _check(acceptance_log, 10, *criterion_10())


if __name__ == "__main__":
    failed = 0
    for n, fn in CRITERIA.items():
        ok, detail = fn()
        print(_line(n, ok, detail), flush=True)
        failed += not ok
    sys.exit(1 if failed else 0)
