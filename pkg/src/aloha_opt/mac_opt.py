"""MAC-layer optimization with a per-link delay constraint.

Variables are the link persistence probabilities ``p`` and log link rates
``z = log r``. With the rate change of variables the delay constraint

    log(1/Dc + e^z (1 - 1/(2 Dc))) - log x(p) <= 0

is convex, the rate utility is linear and the energy term is linear in ``p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .delay_model import node_probs, success_probs
from .numerics import BarrierParams, ConvexProgram, SolveReport, barrier_solve
from .topology import Topology

RATE_FLOOR = 1e-9
Z_FLOOR = math.log(RATE_FLOOR)
FEASIBILITY_MARGIN = 1e-6
DEFAULT_DC_MULTIPLIER = 4.0


@dataclass(frozen=True)
class MacScenario:
    topology: Topology
    lam1: float
    lam2: float
    Dc: float

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0 or (self.lam1 == 0 and self.lam2 == 0):
            raise ValueError("weights must be nonnegative and not both zero")
        if not self.Dc > 1:
            raise ValueError(f"link delay constraint must exceed one slot, got {self.Dc}")
        if self.topology.n_links == 0:
            raise ValueError("topology has no links")


@dataclass
class MacSolution:
    probs: np.ndarray
    link_rates: np.ndarray
    objective: float
    energy: float
    rate_utility: float
    feasible: bool
    success: np.ndarray
    delays: np.ndarray
    link_ok: np.ndarray
    status: str = "optimal"
    duals: Optional[np.ndarray] = None
    report: Optional[SolveReport] = field(default=None, repr=False)
    node_probs: Optional[np.ndarray] = None

    def to_dict(self, topology: Topology) -> dict:
        return {
            "probs": self.probs.tolist(),
            "rates": self.link_rates.tolist(),
            "energy": self.energy,
            "rate_utility": self.rate_utility,
            "objective": self.objective,
            "feasible": bool(self.feasible),
            "status": self.status,
            "per_link": {
                f"{l.tx}->{l.rx}": {"x": float(x), "D": float(d), "ok": bool(ok)}
                for l, x, d, ok in zip(topology.links, self.success, self.delays, self.link_ok)
            },
        }


def energy(topology: Topology, p) -> float:
    return float(topology.energy @ node_probs(topology, p))


def rate_utility(rates) -> float:
    return float(np.sum(np.log(np.maximum(rates, RATE_FLOOR))))


def _delays(x, r):
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(r < x, (1.0 - 0.5 * r) / (x - r), np.inf)
    return d


def make_solution(scenario: MacScenario, p, r, status="optimal", duals=None, report=None,
                  tol: float = 1e-6) -> MacSolution:
    top = scenario.topology
    p = np.asarray(p, float)
    r = np.asarray(r, float)
    x = success_probs(top, p)
    d = _delays(x, r)
    ok = (r < x) & (d <= scenario.Dc + tol) & (r > 0)
    e = energy(top, p)
    u = rate_utility(r)
    sol = MacSolution(p, r, scenario.lam1 * e - scenario.lam2 * u, e, u, bool(np.all(ok)) and status == "optimal",
                      x, d, ok, status, duals, report, node_probs(top, p))
    return sol


def log_success_derivs(topology: Topology, p):
    """log x for every link, with its Jacobian and per-link Hessians in ``p``."""
    A = topology.node_link_matrix
    C = topology.silence_matrix
    used = C.any(axis=0)
    C, A = C[:, used], A[used]
    idle = 1.0 - A @ p
    logx = np.log(p) + C @ np.log(idle)
    # d/dp log(1 - P_m) = -A[m] / idle_m
    jac = np.diag(1.0 / p) - (C / idle) @ A
    L = topology.n_links
    hess = np.zeros((L, L, L))
    hess[np.arange(L), np.arange(L), np.arange(L)] = -1.0 / p**2
    w = C / idle**2  # (L, silent nodes)
    hess -= np.einsum("km,mi,mj->kij", w, A, A)
    return logx, jac, hess


def _node_constraints(topology: Topology, n_vars: int, p_slice: slice):
    """P_i - 1 <= 0 for every node that transmits."""
    A = topology.node_link_matrix
    rows = [i for i in range(topology.n_nodes) if topology.out_links[i]]
    Ar = A[rows]

    def fn(v):
        p = v[p_slice]
        g = Ar @ p - 1.0
        jac = np.zeros((len(rows), n_vars))
        jac[:, p_slice] = Ar
        return g, jac, np.zeros((len(rows), n_vars, n_vars))

    return fn


def _stack(*fns):
    def fn(v):
        parts = [f(v) for f in fns]
        return (np.concatenate([q[0] for q in parts]), np.vstack([q[1] for q in parts]),
                np.concatenate([q[2] for q in parts]))
    return fn


def _start_probs(topology: Topology, total: float = 0.5) -> np.ndarray:
    p = np.zeros(topology.n_links)
    for links in topology.out_links:
        for k in links:
            p[k] = total / len(links)
    return p


def assemble_mac_problem(scenario: MacScenario, x0_probs=None) -> ConvexProgram:
    """Convex form of the delay-constrained MAC problem over ``[p, z]``."""
    top = scenario.topology
    L = top.n_links
    n = 2 * L
    ps, zs = slice(0, L), slice(L, n)
    a = 1.0 / scenario.Dc
    b = 1.0 - 0.5 / scenario.Dc
    cost_p = scenario.lam1 * (top.energy @ top.node_link_matrix)

    def objective(v):
        grad = np.concatenate([cost_p, -scenario.lam2 * np.ones(L)])
        return float(grad @ v), grad, np.zeros((n, n))

    def delay(v):
        p, z = v[ps], v[zs]
        logx, jx, hx = log_success_derivs(top, p)
        ez = b * np.exp(z)
        q = a + ez
        g = np.log(q) - logx
        jac = np.zeros((L, n))
        jac[:, ps] = -jx
        jac[np.arange(L), L + np.arange(L)] = ez / q
        hess = np.zeros((L, n, n))
        hess[:, ps, ps] = -hx
        hess[np.arange(L), L + np.arange(L), L + np.arange(L)] = a * ez / q**2
        return g, jac, hess

    lower = np.concatenate([np.zeros(L), np.full(L, Z_FLOOR)])
    upper = np.full(n, np.inf)
    p0 = _start_probs(top) if x0_probs is None else np.asarray(x0_probs, float)
    x0 = np.concatenate([p0, np.full(L, Z_FLOOR + 1e-3)])
    return ConvexProgram(n, objective, _stack(delay, _node_constraints(top, n, ps)), lower, upper, x0=x0,
                         names=[f"p{l.tx}{l.rx}" for l in top.links] + [f"z{l.tx}{l.rx}" for l in top.links])


def solve_mac_centralized(scenario: MacScenario, params: BarrierParams | None = None) -> MacSolution:
    top = scenario.topology
    L = top.n_links
    mindc, p_star = _min_delay_constraint(top)
    if scenario.Dc < mindc * (1 + FEASIBILITY_MARGIN):
        return make_solution(scenario, p_star, np.full(L, RATE_FLOOR), status="infeasible")
    p0 = 0.99 * p_star + 0.01 * _start_probs(top)
    rep = barrier_solve(assemble_mac_problem(scenario, p0), params)
    p, z = rep.x[:L], rep.x[L:]
    duals = rep.duals[:L] if rep.duals.size else None
    return make_solution(scenario, p, np.exp(z), status=rep.status, duals=duals, report=rep)


def assemble_mindc_problem(topology: Topology) -> ConvexProgram:
    """max t s.t. t <= log x_ij, over ``[p, t]``."""
    L = topology.n_links
    n = L + 1
    ps = slice(0, L)

    def objective(v):
        grad = np.zeros(n)
        grad[-1] = -1.0
        return -v[-1], grad, np.zeros((n, n))

    def maxmin(v):
        logx, jx, hx = log_success_derivs(topology, v[ps])
        g = v[-1] - logx
        jac = np.zeros((L, n))
        jac[:, ps] = -jx
        jac[:, -1] = 1.0
        hess = np.zeros((L, n, n))
        hess[:, ps, ps] = -hx
        return g, jac, hess

    p0 = _start_probs(topology)
    with np.errstate(divide="ignore"):
        t0 = float(np.min(np.log(success_probs(topology, p0)))) - 1.0
    lower = np.concatenate([np.zeros(L), [-np.inf]])
    return ConvexProgram(n, objective, _stack(maxmin, _node_constraints(topology, n, ps)), lower,
                         np.full(n, np.inf), x0=np.append(p0, t0))


@lru_cache(maxsize=256)
def _min_delay_constraint(topology: Topology):
    rep = barrier_solve(assemble_mindc_problem(topology))
    if not rep.optimal:
        raise RuntimeError(f"max-min throughput solve failed: {rep.status}")
    p = rep.x[:-1].copy()
    return float(np.exp(-rep.x[-1])), p


def min_delay_constraint(topology: Topology) -> float:
    """Smallest feasible link delay constraint: 1 / (max-min success probability)."""
    if topology.n_links == 0:
        raise ValueError("topology has no links")
    return _min_delay_constraint(topology)[0]


def maxmin_probs(topology: Topology) -> np.ndarray:
    return _min_delay_constraint(topology)[1].copy()


def node_root(energy_w: float, interference: float, own: float) -> tuple[float, bool]:
    """Root in [0, 1] of ``E P^2 - (E + Q + M) P + M = 0``.

    Returns ``(P, ok)``; ``ok`` is False when the root sits on 0 or 1, which
    the callers must clamp.
    """
    E, Q, M = energy_w, interference, own
    bsum = E + Q + M
    if M <= 0:
        return 0.0, False
    disc = bsum * bsum - 4.0 * E * M
    P = 2.0 * M / (bsum + math.sqrt(max(disc, 0.0)))
    return P, 0.0 < P < 1.0


def solve_mac_unconstrained_closed_form(topology: Topology, lam1: float, lam2: float) -> np.ndarray:
    """Per-node closed form of the MAC problem without delay constraint (r = x).

    Each node splits its activity evenly over its links and picks P_i from a
    quadratic in its own energy weight, out-degree and the number of
    receptions its silence protects.
    """
    protects = topology.silence_matrix.sum(axis=0)
    p = np.zeros(topology.n_links)
    for i, links in enumerate(topology.out_links):
        if not links:
            continue
        P, _ = node_root(lam1 * topology.energy[i], lam2 * protects[i], lam2 * len(links))
        P = min(P, 1.0 - 1e-12) if protects[i] > 0 else P
        for k in links:
            p[k] = P / len(links)
    return p


def assemble_unconstrained_problem(topology: Topology, lam1: float, lam2: float) -> ConvexProgram:
    """MAC problem with the delay constraint replaced by r <= x (barrier form)."""
    L = topology.n_links
    n = 2 * L
    ps, zs = slice(0, L), slice(L, n)
    cost_p = lam1 * (topology.energy @ topology.node_link_matrix)

    def objective(v):
        grad = np.concatenate([cost_p, -lam2 * np.ones(L)])
        return float(grad @ v), grad, np.zeros((n, n))

    def rate(v):
        logx, jx, hx = log_success_derivs(topology, v[ps])
        g = v[zs] - logx
        jac = np.zeros((L, n))
        jac[:, ps] = -jx
        jac[np.arange(L), L + np.arange(L)] = 1.0
        hess = np.zeros((L, n, n))
        hess[:, ps, ps] = -hx
        return g, jac, hess

    p0 = _start_probs(topology)
    with np.errstate(divide="ignore"):
        z0 = np.log(success_probs(topology, p0)) - 1.0
    lower = np.concatenate([np.zeros(L), np.full(L, Z_FLOOR)])
    return ConvexProgram(n, objective, _stack(rate, _node_constraints(topology, n, ps)), lower,
                         np.full(n, np.inf), x0=np.concatenate([p0, np.maximum(z0, Z_FLOOR + 1e-3)]))


def suboptimal_rates(x, Dc: float) -> np.ndarray:
    """Rate that puts each link exactly on the delay boundary: (Dc x - 1)/(Dc - 1/2)."""
    return (Dc * np.asarray(x, float) - 1.0) / (Dc - 0.5)


def solve_mac_suboptimal(scenario: MacScenario) -> MacSolution:
    """Non-iterative algorithm: delay-free probabilities, then boundary rates.

    Links with ``Dc <= 1/x`` cannot meet the constraint; they are flagged and
    the whole solution is reported infeasible.
    """
    top = scenario.topology
    p = solve_mac_unconstrained_closed_form(top, scenario.lam1, scenario.lam2)
    x = success_probs(top, p)
    r = suboptimal_rates(x, scenario.Dc)
    bad = r <= 0
    r = np.where(bad, RATE_FLOOR, r)
    sol = make_solution(scenario, p, r)
    sol.link_ok &= ~bad
    sol.feasible = bool(np.all(sol.link_ok))
    sol.status = "optimal" if sol.feasible else "infeasible"
    return sol


# --- p-only reductions used by the grid oracle -------------------------------

def _batch_logx(topology: Topology, P):
    used = topology.silence_matrix.any(axis=0)
    A = topology.node_link_matrix[used]
    C = topology.silence_matrix[:, used]
    idle = 1.0 - P @ A.T
    return np.log(P) + np.log(idle) @ C.T, idle


def maxmin_reduced_program(topology: Topology) -> ConvexProgram:
    """minimize -min_k log x_k over p in [0, 1]^L with P_i <= 1 (value-only)."""
    L = topology.n_links
    A = topology.node_link_matrix

    def batch(P):
        logx, idle = _batch_logx(topology, P)
        return -np.min(logx, axis=1), (P @ A.T) - 1.0

    def objective(v):
        f, _ = batch(v[None, :])
        return float(f[0]), None, None

    def cons(v):
        return (A @ v) - 1.0, A, np.zeros((A.shape[0], L, L))

    return ConvexProgram(L, objective, cons, np.zeros(L), np.ones(L), batch_values=batch)


def boundary_rate_reduced_program(scenario: MacScenario) -> ConvexProgram:
    """MAC objective over p alone, with every rate set on its delay boundary."""
    top = scenario.topology
    L = top.n_links
    A = top.node_link_matrix
    Dc = scenario.Dc
    cost = top.energy @ A

    def batch(P):
        logx, idle = _batch_logx(top, P)
        x = np.exp(logx)
        r = (Dc * x - 1.0) / (Dc - 0.5)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = scenario.lam1 * (P @ cost) - scenario.lam2 * np.sum(np.log(r), axis=1)
        g = np.hstack([P @ A.T - 1.0, 1.0 - Dc * x])
        return f, g

    def objective(v):
        return float(batch(v[None, :])[0][0]), None, None

    def cons(v):
        return batch(v[None, :])[1][0], np.zeros((A.shape[0] + L, L)), None

    return ConvexProgram(L, objective, cons, np.zeros(L), np.ones(L), batch_values=batch)
