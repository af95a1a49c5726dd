"""Joint congestion and contention control with end-to-end delay constraints.

Each link used by a session gets an auxiliary delay budget ``D_ij``; the
per-link constraint ``(1 - r/2)/(x - r) <= D_ij`` is written in log form and
each session's budgets must sum to at most its delay limit. Session rates
enter through ``z_s = log y_s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .delay_model import node_probs, success_probs
from .mac_opt import (RATE_FLOOR, Z_FLOOR, _node_constraints, _stack, _start_probs, energy,
                      log_success_derivs, maxmin_probs)
from .numerics import BarrierParams, ConvexProgram, SolveReport, barrier_solve
from .topology import Topology

D_FLOOR = 1.0 + 1e-9


@dataclass(frozen=True)
class XLayerScenario:
    topology: Topology
    lam1: float
    lam2: float
    delay_limits: tuple = None

    def __post_init__(self):
        top = self.topology
        if self.lam1 < 0 or self.lam2 < 0 or (self.lam1 == 0 and self.lam2 == 0):
            raise ValueError("weights must be nonnegative and not both zero")
        if top.n_sessions == 0:
            raise ValueError("cross-layer problem needs at least one session")
        limits = self.delay_limits
        if limits is None:
            limits = tuple(s.delay_limit for s in top.sessions)
        elif np.ndim(limits) == 0:
            limits = (float(limits),) * top.n_sessions
        limits = tuple(float(d) if d is not None else np.nan for d in limits)
        if len(limits) != top.n_sessions or any(not d > 0 for d in limits):
            raise ValueError("every session needs a positive delay limit")
        object.__setattr__(self, "delay_limits", limits)

    @property
    def Ds(self) -> np.ndarray:
        return np.asarray(self.delay_limits, float)

    def with_limits(self, limits) -> "XLayerScenario":
        return XLayerScenario(self.topology, self.lam1, self.lam2, limits)


@dataclass
class XLayerSolution:
    probs: np.ndarray
    session_rates: np.ndarray
    link_rates: np.ndarray
    budgets: np.ndarray
    objective: float
    energy: float
    rate_utility: float
    feasible: bool
    success: np.ndarray
    delays: np.ndarray
    status: str = "optimal"
    link_duals: Optional[np.ndarray] = None
    session_duals: Optional[np.ndarray] = None
    report: Optional[SolveReport] = field(default=None, repr=False)
    node_probs: Optional[np.ndarray] = None

    def budget_sums(self, topology: Topology) -> np.ndarray:
        return topology.session_link_matrix.T @ np.nan_to_num(self.budgets)

    def path_delays(self, topology: Topology) -> np.ndarray:
        return topology.session_link_matrix.T @ np.where(np.isfinite(self.delays), self.delays, 0.0)

    def to_dict(self, topology: Topology) -> dict:
        sums = self.budget_sums(topology)
        return {
            "probs": self.probs.tolist(),
            "rates": self.link_rates.tolist(),
            "energy": self.energy,
            "rate_utility": self.rate_utility,
            "objective": self.objective,
            "feasible": bool(self.feasible),
            "status": self.status,
            "per_link": {
                f"{l.tx}->{l.rx}": {"x": float(x), "D": float(d), "budget": None if np.isnan(b) else float(b)}
                for l, x, d, b in zip(topology.links, self.success, self.delays, self.budgets)
            },
            "sessions": [
                {"id": s.id, "rate": float(y), "delay_budget_sum": float(b)}
                for s, y, b in zip(topology.sessions, self.session_rates, sums)
            ],
        }


def used_links(topology: Topology) -> np.ndarray:
    return np.flatnonzero(topology.session_link_matrix.sum(axis=1) > 0)


def make_xsolution(scenario: XLayerScenario, p, y, D, status="optimal", link_duals=None,
                   session_duals=None, report=None, tol: float = 1e-6) -> XLayerSolution:
    top = scenario.topology
    p = np.asarray(p, float)
    y = np.asarray(y, float)
    D = np.asarray(D, float)
    r = top.session_link_matrix @ y
    x = success_probs(top, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(r < x, (1.0 - 0.5 * r) / (x - r), np.inf)
    used = used_links(top)
    ok = bool(np.all(d[used] <= D[used] + tol))
    ok &= bool(np.all(top.session_link_matrix.T @ np.nan_to_num(D) <= scenario.Ds + tol))
    e = energy(top, p)
    u = float(np.sum(np.log(np.maximum(y, RATE_FLOOR))))
    return XLayerSolution(p, y, r, D, scenario.lam1 * e - scenario.lam2 * u, e, u,
                          ok and status == "optimal", x, d, status, link_duals, session_duals, report,
                          node_probs(top, p))


def assemble_xlayer_problem(scenario: XLayerScenario, x0_probs=None) -> ConvexProgram:
    """Convex program over ``[p (links), z (sessions), D (links used by sessions)]``."""
    top = scenario.topology
    L, S = top.n_links, top.n_sessions
    used = used_links(top)
    U = len(used)
    for s in top.sessions:
        if not s.route:
            raise ValueError(f"session {s.id} has an empty route")
    n = L + S + U
    ps, zs, ds = slice(0, L), slice(L, L + S), slice(L + S, n)
    R = top.session_link_matrix[used]          # (U, S)
    B = top.session_link_matrix[used].T        # (S, U): budget sums
    cost_p = scenario.lam1 * (top.energy @ top.node_link_matrix)
    Ds = scenario.Ds

    def objective(v):
        grad = np.zeros(n)
        grad[ps] = cost_p
        grad[zs] = -scenario.lam2
        return float(grad @ v), grad, np.zeros((n, n))

    def link_delay(v):
        p, z, D = v[ps], v[zs], v[ds]
        logx, jx, hx = log_success_derivs(top, p)
        logx, jx, hx = logx[used], jx[used], hx[used]
        ey = np.exp(z)
        rate = R @ ey
        c = 1.0 - 0.5 / D
        h = 1.0 / D + rate * c
        dh_dD = -(1.0 - 0.5 * rate) / D**2
        dh_dz = R * ey[None, :] * c[:, None]       # (U, S)
        g = np.log(h) - logx
        jac = np.zeros((U, n))
        jac[:, ps] = -jx
        jac[:, zs] = dh_dz / h[:, None]
        jac[np.arange(U), L + S + np.arange(U)] = dh_dD / h
        hess = np.zeros((U, n, n))
        hess[:, ps, ps] = -hx
        for k in range(U):
            gh = np.zeros(n)
            gh[zs] = dh_dz[k]
            gh[L + S + k] = dh_dD[k]
            hh = np.zeros((n, n))
            dk = L + S + k
            hh[zs, zs] = np.diag(dh_dz[k])
            hh[dk, dk] = 2.0 * (1.0 - 0.5 * rate[k]) / D[k] ** 3
            cross = R[k] * ey / (2.0 * D[k] ** 2)
            hh[zs, dk] = cross
            hh[dk, zs] = cross
            hess[k] += hh / h[k] - np.outer(gh, gh) / h[k] ** 2
        return g, jac, hess

    def session_budget(v):
        g = B @ v[ds] - Ds
        jac = np.zeros((S, n))
        jac[:, ds] = B
        return g, jac, np.zeros((S, n, n))

    lower = np.concatenate([np.zeros(L), np.full(S, Z_FLOOR), np.full(U, D_FLOOR)])
    upper = np.full(n, np.inf)
    if x0_probs is None:
        x0_probs = 0.99 * maxmin_probs(top) + 0.01 * _start_probs(top)
    p0 = np.asarray(x0_probs, float)
    x_used = success_probs(top, p0)[used]
    # budgets: each hop gets its share of the tightest session through it
    share = np.array([min(Ds[s] / top.sessions[s].hops for s in np.flatnonzero(R[k])) for k in range(U)])
    D0 = np.maximum(np.minimum(share, 2.0 / np.maximum(x_used, 1e-12)), D_FLOOR + 1e-3)
    x0 = np.concatenate([p0, np.full(S, Z_FLOOR + 1e-3), D0])
    return ConvexProgram(n, objective, _stack(link_delay, session_budget, _node_constraints(top, n, ps)),
                         lower, upper, x0=x0)


def split_solution(scenario: XLayerScenario, v):
    top = scenario.topology
    L, S = top.n_links, top.n_sessions
    used = used_links(top)
    D = np.full(L, np.nan)
    D[used] = v[L + S:]
    return v[:L], np.exp(v[L:L + S]), D


def solve_xlayer_centralized(scenario: XLayerScenario, params: BarrierParams | None = None) -> XLayerSolution:
    top = scenario.topology
    used = used_links(top)
    hops = np.array([s.hops for s in top.sessions])
    if np.any(scenario.Ds <= hops * D_FLOOR):
        # each hop takes at least one slot
        p0 = _start_probs(top)
        D = np.full(top.n_links, np.nan)
        D[used] = D_FLOOR
        return make_xsolution(scenario, p0, np.full(top.n_sessions, RATE_FLOOR), D, status="infeasible")
    prog = assemble_xlayer_problem(scenario)
    rep = barrier_solve(prog, params)
    p, y, D = split_solution(scenario, rep.x)
    U = len(used)
    link_duals = session_duals = None
    if rep.duals.size:
        link_duals = np.zeros(top.n_links)
        link_duals[used] = rep.duals[:U]
        session_duals = rep.duals[U:U + top.n_sessions].copy()
    return make_xsolution(scenario, p, y, D, status=rep.status, link_duals=link_duals,
                          session_duals=session_duals, report=rep)
