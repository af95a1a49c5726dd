"""Distributed dual-decomposition algorithm for the delay-constrained MAC problem.

Each round: every link sets its rate from its own price, every node solves a
scalar quadratic for its activity using only prices of links it can
disturb, then every link moves its price along the constraint violation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .delay_model import success_probs
from .mac_opt import MacScenario, MacSolution, make_solution, node_root, suboptimal_rates
from .topology import Topology


@dataclass
class StepParams:
    alpha: float = 0.05
    r_min: float = 1e-9
    r_max: float = 1.0 - 1e-6
    p_min: float = 1e-6
    p_max: float = 1.0 - 1e-6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.p_min < self.p_max < 1:
            raise ValueError("need 0 < p_min < p_max < 1")


@dataclass
class MacIterState:
    probs: np.ndarray
    rates: np.ndarray
    duals: np.ndarray
    iteration: int = 0
    flags: np.ndarray = None


@dataclass
class IterationTrace:
    columns: tuple
    rows: list = field(default_factory=list)
    status: str = "max_iter"
    converged_at: int | None = None

    def append(self, **row):
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.columns), extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        return path


def rate_update(mu, lam2: float, Dc: float, r_min: float = 1e-9, r_max: float = 1.0 - 1e-6):
    """Rate minimizing the link Lagrangian; saturates at ``r_max`` when mu <= lam2."""
    if not Dc > 0.5:
        raise ValueError("Dc must exceed 1/2")
    mu = np.asarray(mu, float)
    with np.errstate(divide="ignore"):
        r = np.where(mu > lam2, lam2 / ((mu - lam2) * (Dc - 0.5)), r_max)
    r = np.clip(r, r_min, r_max)
    return float(r) if r.ndim == 0 else r


def node_prob_update(out_duals, interference_duals, lam1: float, energy: float,
                     p_min: float = 1e-6, p_max: float = 1.0 - 1e-6):
    """Activity of one node and the split over its outgoing links.

    ``out_duals`` are the prices of the node's own links, ``interference_duals``
    the prices of links whose reception needs this node silent. Returns
    ``(P, p_out, ok)``; ``ok`` is False when the root had to be clamped.
    """
    out = np.asarray(out_duals, float)
    M = float(np.sum(out))
    Q = float(np.sum(interference_duals))
    if np.any(out < 0) or Q < 0:
        raise ValueError("duals must be nonnegative")
    P, ok = node_root(lam1 * energy, Q, M)
    if M <= 0:
        return len(out) * p_min, np.full(len(out), p_min), False
    P = min(P, p_max)
    ok = ok and P < p_max
    # p_ij = mu_ij / (lam1 e + Q/(1-P)) is proportional to mu_ij and sums to P
    p = np.clip(P * out / M, p_min, p_max)
    if p.sum() > p_max:
        p *= p_max / p.sum()
    return float(p.sum()), p, ok


def interference_links(topology: Topology) -> tuple[np.ndarray, ...]:
    """For each node i: links (k, l) with l in N_i or l == i, and k != i."""
    C = topology.silence_matrix
    return tuple(np.flatnonzero(C[:, i]) for i in range(topology.n_nodes))


def dual_update(state: MacIterState, scenario: MacScenario, alpha: float) -> np.ndarray:
    """Projected subgradient step on the link prices."""
    Dc = scenario.Dc
    x = success_probs(scenario.topology, state.probs)
    with np.errstate(divide="ignore"):
        viol = np.log((1.0 - 0.5 / Dc) * state.rates + 1.0 / Dc) - np.log(x)
    return np.maximum(0.0, state.duals + alpha * viol)


def primal_update(duals, scenario: MacScenario, params: StepParams):
    top = scenario.topology
    rates = rate_update(duals, scenario.lam2, scenario.Dc, params.r_min, params.r_max)
    probs = np.zeros(top.n_links)
    flags = np.ones(top.n_nodes, dtype=bool)
    inter = interference_links(top)
    for i, links in enumerate(top.out_links):
        if not links:
            continue
        idx = list(links)
        _, p, ok = node_prob_update(duals[idx], duals[inter[i]], scenario.lam1, top.energy[i],
                                    params.p_min, params.p_max)
        probs[idx] = p
        flags[i] = ok
    return np.atleast_1d(rates), probs, flags


def mac_round(state: MacIterState, scenario: MacScenario, params: StepParams) -> MacIterState:
    """One synchronous round: rates, probabilities, then prices."""
    rates, probs, flags = primal_update(state.duals, scenario, params)
    nxt = MacIterState(probs, rates, state.duals, state.iteration + 1, flags)
    nxt.duals = dual_update(nxt, scenario, params.alpha)
    return nxt


def initial_state(scenario: MacScenario, p0: float = 0.1) -> MacIterState:
    """Uniform start at persistence ``p0``; rates and prices chosen consistent with it.

    Rates start on the delay boundary of the starting throughput and prices
    are the ones that would produce those rates.
    """
    top = scenario.topology
    p = np.full(top.n_links, float(p0))
    for links in top.out_links:
        if links and p0 * len(links) >= 1:
            p[list(links)] = 0.5 / len(links)
    x = success_probs(top, p)
    r = np.maximum(suboptimal_rates(x, scenario.Dc), 1e-3 * x)
    mu = scenario.lam2 + scenario.lam2 / (r * (scenario.Dc - 0.5))
    return MacIterState(p, r, mu, 0)


def state_from_solution(sol: MacSolution) -> MacIterState:
    return MacIterState(sol.probs.copy(), sol.link_rates.copy(), np.asarray(sol.duals, float).copy(), 0)


def _err(v, ref):
    return 100.0 * abs(v - ref) / abs(ref)


def run_mac_distributed(scenario: MacScenario, params: StepParams | None = None, max_iter: int = 500,
                        reference: MacSolution | None = None, p0: float = 0.1, track_link: int = 0,
                        tol_pct: float = 1.0, init: MacIterState | None = None,
                        stop_at_tol: bool = True) -> tuple[MacSolution, IterationTrace]:
    """Iterate until the tracked errors vs ``reference`` all fall below ``tol_pct``.

    Tracked quantities: objective, and p and r of link ``track_link``. Without a
    reference the run goes to ``max_iter``.
    """
    params = params or StepParams()
    state = init if init is not None else initial_state(scenario, p0)
    trace = IterationTrace(("iteration", "objective", "objective_err_pct", "p_err_pct", "r_err_pct"))
    best_err = math.inf
    for it in range(max_iter + 1):
        sol = make_solution(scenario, state.probs, state.rates)
        row = {"iteration": it, "objective": sol.objective}
        if reference is not None:
            e_obj = _err(sol.objective, reference.objective)
            e_p = _err(state.probs[track_link], reference.probs[track_link])
            e_r = _err(state.rates[track_link], reference.link_rates[track_link])
            row.update(objective_err_pct=e_obj, p_err_pct=e_p, r_err_pct=e_r)
            trace.append(**row)
            if not all(map(math.isfinite, (e_obj, e_p, e_r))):
                trace.status = "diverged"
                break
            if max(e_obj, e_p, e_r) < tol_pct:
                if trace.converged_at is None:
                    trace.converged_at = it
                if stop_at_tol:
                    trace.status = "converged"
                    break
            elif trace.converged_at is not None and stop_at_tol is False:
                # left the tolerance band after entering it
                trace.converged_at = None
            best_err = min(best_err, e_obj)
            if e_obj > 10.0 * best_err and e_obj > 10.0 * tol_pct:
                trace.status = "diverged"
                break
        else:
            trace.append(**row)
        if it == max_iter:
            break
        state = mac_round(state, scenario, params)
    if trace.status == "max_iter" and trace.converged_at is not None:
        trace.status = "converged"
    out = make_solution(scenario, state.probs, state.rates, status=trace.status, duals=state.duals)
    return out, trace


def calibrate_step(scenario: MacScenario, reference: MacSolution, lo: float = 1e-2, hi: float = 10.0,
                   max_iter: int = 1000, points: int = 25, **kw) -> float:
    """Constant step on a log grid that settles fastest.

    A step qualifies when, after ``max_iter`` rounds, the tracked errors have
    stayed inside the 1% band since some round; among qualifying steps the
    one with the earliest such round wins (ties go to the smaller step).
    """
    best = None
    for alpha in np.geomspace(lo, hi, points):
        _, tr = run_mac_distributed(scenario, StepParams(alpha=float(alpha)), max_iter=max_iter,
                                    reference=reference, stop_at_tol=False, **kw)
        if tr.status == "converged" and (best is None or tr.converged_at < best[0]):
            best = (tr.converged_at, float(alpha))
    if best is None:
        raise RuntimeError(f"no stable step in [{lo}, {hi}]")
    return best[1]
