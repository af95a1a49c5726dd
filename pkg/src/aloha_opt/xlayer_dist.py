"""Distributed cross-layer algorithms.

Per round, every link sets its delay budget and every session its rate in
closed form, then link and session prices take a projected gradient step,
and finally every node moves its link probabilities along the price-weighted
sensitivity of the success probabilities.

The Newton-like variant rescales each coordinate's step by a secant estimate
of its own curvature, computed from the previous iterate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .delay_model import node_probs, success_prob_jacobian, success_probs
from .mac_dist import IterationTrace
from .topology import Topology
from .xlayer_opt import XLayerScenario, XLayerSolution, make_xsolution, used_links

Y_MIN = 1e-9
Y_MAX = 1.0 - 1e-6
P_MIN = 1e-6
P_MAX = 1.0 - 1e-6


@dataclass
class XStepParams:
    """Step sizes and secant guards.

    ``alpha``, ``beta`` and ``phi`` are the gradient steps for link prices,
    session prices and probabilities. The Newton-like step along a coordinate
    is ``damping * gradient / curvature``; it falls back to the plain gradient
    step when the secant is undefined (``|delta| < eps_d``), the curvature
    estimate is at or below ``curvature_floor``, or the secant step would be
    more than ``max_gain`` times the gradient step.
    """

    alpha: float = 0.05
    beta: float = 0.05
    phi: float = 0.01
    eps_d: float = 1e-12
    curvature_floor: float = 1e-9
    damping: float = 0.5
    max_gain: float = 100.0
    memory: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "phi", "damping", "max_gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class XIterState:
    probs: np.ndarray
    session_rates: np.ndarray
    budgets: np.ndarray
    link_duals: np.ndarray
    session_duals: np.ndarray
    iteration: int = 0
    prev: dict | None = None
    flags: dict = field(default_factory=dict)

    def copy(self) -> "XIterState":
        return replace(self, probs=self.probs.copy(), session_rates=self.session_rates.copy(),
                       budgets=self.budgets.copy(), link_duals=self.link_duals.copy(),
                       session_duals=self.session_duals.copy(),
                       prev=None if self.prev is None else copy.deepcopy(self.prev),
                       flags=dict(self.flags))


def budget_update(mu, sum_y, sum_v, x, cap=None):
    """Delay budget minimizing ``D*sum_v + mu*(1 - sum_y/2)/D`` over ``D >= 1/x``.

    Returns ``(D, flag)``. The flag is set when ``sum_v == 0``: the minimizer
    is then at infinity and the budget is parked at ``cap`` (the largest
    budget any session through the link allows), or at the floor ``1/x``
    when no cap is given.
    """
    mu, sum_y, sum_v, x = (np.asarray(a, float) for a in (mu, sum_y, sum_v, x))
    if np.any(sum_y >= 2):
        raise ValueError("link load must stay below 2")
    floor = 1.0 / x
    flag = sum_v <= 0
    park = floor if cap is None else np.maximum(np.asarray(cap, float), floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        D = np.sqrt(mu * (2.0 - sum_y) / (2.0 * sum_v))
    D = np.where(flag, park, np.maximum(D, floor))
    if D.ndim == 0:
        return float(D), bool(flag)
    return D, flag


def session_rate_update(lam2: float, mu, D, y_min: float = Y_MIN, y_max: float = Y_MAX):
    """Rate maximizing ``lam2*log y - y * sum mu (1 - 1/(2D))`` over the route.

    Returns ``(y, flag)``; flag is set when the price sum is zero.
    """
    denom = float(np.sum(np.asarray(mu, float) * (1.0 - 0.5 / np.asarray(D, float))))
    if denom <= 0:
        return y_max, True
    return float(np.clip(lam2 / denom, y_min, y_max)), False


def budget_caps(scenario: XLayerScenario) -> np.ndarray:
    """Per link, the smallest delay limit among sessions crossing it."""
    R = scenario.topology.session_link_matrix
    return np.where(R > 0, scenario.Ds[None, :], np.inf).min(axis=1)


def _link_loads(top: Topology, y):
    return top.session_link_matrix @ y


def dual_gradients(state: XIterState, scenario: XLayerScenario):
    """Link residuals h and session residuals g at the state's primal point."""
    top = scenario.topology
    used = used_links(top)
    x = success_probs(top, state.probs)[used]
    D = state.budgets[used]
    load = _link_loads(top, state.session_rates)[used]
    h = np.zeros(top.n_links)
    h[used] = (1.0 - 0.5 / D) * load + 1.0 / D - x
    g = top.session_link_matrix[used].T @ D - scenario.Ds
    return h, g


def prob_gradient(state: XIterState, scenario: XLayerScenario) -> np.ndarray:
    """f_ij = lam1 e_i - sum_st mu_st d x_st / d p_ij."""
    top = scenario.topology
    jac = success_prob_jacobian(top, state.probs)
    return scenario.lam1 * top.energy[top.tx] - jac.T @ state.link_duals


def _project_probs(top: Topology, p):
    p = np.clip(p, P_MIN, P_MAX)
    P = node_probs(top, p)
    over = P > 1.0
    if np.any(over):
        # shrink every link of an overloaded node by the same factor
        scale = np.where(over, (1.0 - 1e-6) / np.where(over, P, 1.0), 1.0)
        p = p * scale[top.tx]
    return p


def dual_gradient_step(state: XIterState, scenario: XLayerScenario, params: XStepParams):
    h, g = dual_gradients(state, scenario)
    mu = np.maximum(0.0, state.link_duals + params.alpha * h)
    v = np.maximum(0.0, state.session_duals + params.beta * g)
    return mu, v, h, g


def prob_gradient_step(state: XIterState, scenario: XLayerScenario, params: XStepParams):
    f = prob_gradient(state, scenario)
    return _project_probs(scenario.topology, state.probs - params.phi * f), f


def _secant(value, grad, prev_value, prev_grad, step, damping, eps_d, floor, ascent,
            max_gain=np.inf, memory=0.0, acc=None):
    """Per-coordinate secant-scaled step with gradient fallback.

    For ascent coordinates (prices) the curvature is ``-dgrad/dvalue``, which
    is positive for a concave dual; for descent coordinates it is
    ``dgrad/dvalue``. With ``memory > 0`` the estimate is a forgetting-factor
    least-squares fit ``sum rho^k dg dv / sum rho^k dv^2`` over past steps;
    ``memory = 0`` is the plain two-point ratio.

    Returns the new values, a mask of coordinates that fell back to the plain
    gradient step, and the updated accumulators.
    """
    sign = 1.0 if ascent else -1.0
    dv = value - prev_value
    dg = -sign * (grad - prev_grad)
    num, den = (np.zeros_like(value), np.zeros_like(value)) if acc is None else acc
    num = memory * num + dg * dv
    den = memory * den + dv * dv
    ok = (np.abs(dv) >= eps_d) & (den > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        curv = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    # a curvature estimate below damping/(max_gain*step) would blow the step up
    ok &= curv > max(floor, damping / (max_gain * step))
    newton = value + sign * damping * grad / np.where(ok, curv, 1.0)
    plain = value + sign * step * grad
    return np.where(ok, newton, plain), ~ok, (num, den)


def newton_like_step(state: XIterState, scenario: XLayerScenario, params: XStepParams):
    """Secant-scaled price and probability updates; needs ``state.prev``.

    Returns ``(mu, v, p, h, g, f, fallback_masks, accumulators)``.
    """
    if state.prev is None:
        raise ValueError("the Newton-like step needs a previous iterate")
    pr = state.prev
    acc = pr.get("acc") or {}
    kw = dict(damping=params.damping, eps_d=params.eps_d, floor=params.curvature_floor,
              max_gain=params.max_gain, memory=params.memory)
    h, g = dual_gradients(state, scenario)
    mu, fb_mu, a_mu = _secant(state.link_duals, h, pr["mu"], pr["h"], params.alpha, ascent=True,
                              acc=acc.get("mu"), **kw)
    v, fb_v, a_v = _secant(state.session_duals, g, pr["v"], pr["g"], params.beta, ascent=True,
                           acc=acc.get("v"), **kw)
    mu = np.maximum(0.0, mu)
    v = np.maximum(0.0, v)
    st = replace(state, link_duals=mu, session_duals=v)
    f = prob_gradient(st, scenario)
    p, fb_p, a_p = _secant(state.probs, f, pr["p"], pr["f"], params.phi, ascent=False,
                           acc=acc.get("p"), **kw)
    p = _project_probs(scenario.topology, p)
    return mu, v, p, h, g, f, {"mu": fb_mu, "v": fb_v, "p": fb_p}, {"mu": a_mu, "v": a_v, "p": a_p}


def primal_update(state: XIterState, scenario: XLayerScenario):
    """Closed-form budgets (from the previous rates) then session rates."""
    top = scenario.topology
    used = used_links(top)
    x = success_probs(top, state.probs)
    load = _link_loads(top, state.session_rates)
    sum_v = top.session_link_matrix @ state.session_duals
    D = np.full(top.n_links, np.nan)
    D[used], dflag = budget_update(state.link_duals[used], np.minimum(load[used], 2.0 - 1e-9),
                                   sum_v[used], x[used], cap=budget_caps(scenario)[used])
    y = np.empty(top.n_sessions)
    yflag = np.zeros(top.n_sessions, dtype=bool)
    for s, sess in enumerate(top.sessions):
        idx = [top.link_index[l] for l in sess.route]
        y[s], yflag[s] = session_rate_update(scenario.lam2, state.link_duals[idx], D[idx])
    return D, y, {"budget_floor": np.asarray(dflag), "rate_cap": yflag}


def _finish(state: XIterState, scenario: XLayerScenario, p):
    # keep budgets above the service time at the new probabilities
    top = scenario.topology
    used = used_links(top)
    floor = 1.0 / success_probs(top, p)[used]
    state.budgets[used] = np.maximum(state.budgets[used], floor)
    state.probs = p


def xlayer_round(state: XIterState, scenario: XLayerScenario, params: XStepParams,
                 method: str = "gradient") -> XIterState:
    """One synchronous round: (D, y) closed forms, then prices, then probabilities."""
    if method not in ("gradient", "newton"):
        raise ValueError(f"unknown method {method!r}")
    D, y, flags = primal_update(state, scenario)
    mid = replace(state, budgets=D, session_rates=y)
    if method == "newton" and state.prev is not None:
        mu, v, p, h, g, f, fb, acc = newton_like_step(mid, scenario, params)
        flags.update({f"fallback_{k}": m for k, m in fb.items()})
    else:
        acc = None
        mu, v, h, g = dual_gradient_step(mid, scenario, params)
        mid2 = replace(mid, link_duals=mu, session_duals=v)
        p, f = prob_gradient_step(mid2, scenario, params)
    prev = {"mu": state.link_duals.copy(), "v": state.session_duals.copy(), "p": state.probs.copy(),
            "h": h, "g": g, "f": f}
    if acc is not None:
        prev["acc"] = acc
    nxt = XIterState(state.probs, y, D, mu, v, state.iteration + 1, prev, flags)
    _finish(nxt, scenario, p)
    return nxt


def initial_xstate(scenario: XLayerScenario, p0: float = 0.1) -> XIterState:
    """Uniform start at persistence ``p0`` with consistent budgets, rates and prices.

    Each hop gets an equal share of its tightest session's delay limit; each
    session starts at the largest rate its bottleneck hop sustains under that
    budget, shared equally among the sessions there. Prices are then chosen to
    make those budgets and rates the closed-form responses.
    """
    top = scenario.topology
    p = np.full(top.n_links, float(p0))
    for links in top.out_links:
        if links and p0 * len(links) >= 1:
            p[list(links)] = 0.5 / len(links)
    R = top.session_link_matrix
    used = used_links(top)
    x = success_probs(top, p)
    hops = np.array([s.hops for s in top.sessions], float)
    share = np.where(R > 0, (scenario.Ds / hops)[None, :], np.inf).min(axis=1)
    D = np.full(top.n_links, np.nan)
    D[used] = np.maximum(share[used], 1.01 / x[used])
    n_on = R.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cap = np.where(n_on > 0, (D * x - 1.0) / (D - 0.5) / n_on, np.inf)
    y = np.clip(np.where(R > 0, cap[:, None], np.inf).min(axis=0), Y_MIN, Y_MAX)
    c = np.where(np.isfinite(D), 1.0 - 0.5 / D, 0.0)
    # equal price along each route, highest demand per link wins
    route_mu = scenario.lam2 / (y * (R.T @ c))
    mu = np.where(R > 0, route_mu[None, :], 0.0).max(axis=1)
    load = R @ y
    with np.errstate(divide="ignore", invalid="ignore"):
        per_link = np.where(n_on > 0, mu * (1.0 - 0.5 * load) / D**2 / n_on, 0.0)
    v = (R.T @ np.nan_to_num(per_link)) / hops
    return XIterState(p, y, D, mu, v)


def state_from_xsolution(sol: XLayerSolution) -> XIterState:
    """Distributed state at a centralized optimum.

    The centralized link multipliers price ``log h - log x``; near an active
    constraint that is ``(h - x)/x``, so the distributed prices are ``mu/x``.
    """
    mu = np.where(np.isfinite(sol.budgets), np.asarray(sol.link_duals, float) / sol.success, 0.0)
    return XIterState(sol.probs.copy(), sol.session_rates.copy(), sol.budgets.copy(), mu,
                       np.asarray(sol.session_duals, float).copy())


def _err(v, ref):
    return 100.0 * abs(v - ref) / abs(ref)


def run_xlayer(scenario: XLayerScenario, method: str = "gradient", params: XStepParams | None = None,
               max_iter: int = 5000, reference: XLayerSolution | None = None, track_link: int = 0,
               track_session: int = 0, tol_pct: float = 1.0, patience: int = 50,
               init: XIterState | None = None) -> tuple[XLayerSolution, IterationTrace]:
    """Run the distributed cross-layer algorithm.

    With a reference, the run stops once the errors of ``y[track_session]``,
    ``p[track_link]`` and the rate utility have all stayed below ``tol_pct``
    for ``patience`` consecutive rounds; ``trace.converged_at`` is the first
    round of that streak. Round 0 of the Newton-like method is a gradient
    round since there is no previous iterate yet.
    """
    params = params or XStepParams()
    state = init.copy() if init is not None else initial_xstate(scenario)
    trace = IterationTrace(("iteration", "y1_err_pct", "p_err_pct", "utility_err_pct", "method"))
    ref_u = None if reference is None else float(np.sum(np.log(reference.session_rates)))
    streak = 0
    best = math.inf
    for it in range(max_iter + 1):
        row = {"iteration": it, "method": method}
        if reference is not None:
            u = float(np.sum(np.log(np.maximum(state.session_rates, Y_MIN))))
            e_y = _err(state.session_rates[track_session], reference.session_rates[track_session])
            e_p = _err(state.probs[track_link], reference.probs[track_link])
            e_u = _err(u, ref_u)
            row.update(y1_err_pct=e_y, p_err_pct=e_p, utility_err_pct=e_u)
            trace.append(**row)
            errs = (e_y, e_p, e_u)
            finite = all(map(math.isfinite, errs)) and np.all(np.isfinite(state.link_duals))
            if not finite:
                trace.status = "diverged"
                break
            if max(errs) < tol_pct:
                streak += 1
                if streak == 1:
                    trace.converged_at = it
                if streak >= patience:
                    trace.status = "converged"
                    break
            else:
                streak = 0
                trace.converged_at = None
            best = min(best, e_u)
            if it > 10 and e_u > 10.0 * best and e_u > 10.0 * tol_pct and e_u > 100.0:
                trace.status = "diverged"
                break
        else:
            trace.append(**row)
        if it == max_iter:
            break
        with np.errstate(all="ignore"):
            state = xlayer_round(state, scenario, params, method)
    if trace.status == "max_iter" and trace.converged_at is not None:
        trace.status = "converged"
    sol = make_xsolution(scenario, state.probs, state.session_rates, state.budgets, status=trace.status,
                         link_duals=state.link_duals, session_duals=state.session_duals)
    return sol, trace
