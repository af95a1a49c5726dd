"""Shared numeric machinery: interval projection, a log-barrier interior-point
solver for small smooth convex programs, and an exhaustive grid oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

ObjectiveFn = Callable[[np.ndarray], tuple]
ConstraintFn = Callable[[np.ndarray], tuple]


class SolverError(RuntimeError):
    pass


def project_interval(v, lo, hi):
    """Clip ``v`` to ``[lo, hi]`` (works elementwise on arrays)."""
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError(f"empty interval: lo={lo} > hi={hi}")
    out = np.maximum(lo, np.minimum(v, hi))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ConvexProgram:
    """minimize f(v) subject to g_k(v) <= 0 and lower <= v <= upper.

    ``objective(v)`` returns ``(f, grad, hess)`` and ``constraints(v)`` returns
    ``(g, jac, hess)`` with shapes ``(m,)``, ``(m, n)``, ``(m, n, n)``. Either
    Hessian may be ``None``; it is then approximated from the gradients by
    central differences. ``batch_values(V)`` is an optional vectorized
    ``(N, n) -> (f (N,), g (N, m))`` used by :func:`grid_oracle`.
    """

    n: int
    objective: ObjectiveFn
    constraints: Optional[ConstraintFn] = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    x0: Optional[np.ndarray] = None
    batch_values: Optional[Callable] = None
    names: Optional[list] = None

    def __post_init__(self):
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bound vectors must have one entry per variable")
        if np.any(self.lower >= self.upper):
            raise ValueError("each box must have lower < upper")

    def eval_constraints(self, v):
        if self.constraints is None:
            return np.zeros(0), np.zeros((0, self.n)), np.zeros((0, self.n, self.n))
        g, jac, hess = self.constraints(v)
        g = np.atleast_1d(np.asarray(g, float))
        jac = np.asarray(jac, float).reshape(len(g), self.n)
        if hess is None:
            hess = _fd_hessians(lambda u: np.asarray(self.constraints(u)[1], float).reshape(len(g), self.n), v)
        return g, jac, np.asarray(hess, float)

    def eval_objective(self, v):
        f, grad, hess = self.objective(v)
        if hess is None:
            hess = _fd_hessians(lambda u: np.asarray(self.objective(u)[1], float)[None, :], v)[0]
        return float(f), np.asarray(grad, float), np.asarray(hess, float)


def _fd_hessians(grad_fn, v, h=1e-6):
    v = np.asarray(v, float)
    cols = []
    for i in range(v.size):
        step = h * max(1.0, abs(v[i]))
        e = np.zeros_like(v)
        e[i] = step
        cols.append((grad_fn(v + e) - grad_fn(v - e)) / (2 * step))
    hess = np.stack(cols, axis=-1)  # (m, n, n)
    return 0.5 * (hess + np.swapaxes(hess, 1, 2))


@dataclass
class BarrierParams:
    weight0: float = 1.0
    factor: float = 10.0
    weight_final: float = 1e-8
    armijo: float = 1e-4
    shrink: float = 0.5
    newton_tol: float = 1e-28
    grad_tol: float = 1e-11
    max_inner: int = 200
    max_iter: int = 5000
    feas_tol: float = 1e-8
    kkt_tol: float = 1e-6
    infeasible_slack: float = 1e-9
    polish: bool = True


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    max_violation: float
    kkt_residual: float
    iterations: int
    status: str
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    box_duals_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    box_duals_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _interior_start(prog: ConvexProgram) -> np.ndarray:
    lo, hi = prog.lower, prog.upper
    if prog.x0 is not None:
        x = np.array(prog.x0, float)
    else:
        x = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                     np.where(np.isfinite(lo), lo + 1.0, np.where(np.isfinite(hi), hi - 1.0, 0.0)))
    # pull strictly inside the box
    width = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    margin = 1e-3 * width
    x = np.where(x <= lo + margin, lo + margin, x)
    x = np.where(x >= hi - margin, hi - margin, x)
    return x


class _Barrier:
    """Barrier function f + w * (-sum log(-g) - sum log box slacks)."""

    def __init__(self, prog: ConvexProgram):
        self.prog = prog
        self.lo_mask = np.isfinite(prog.lower)
        self.hi_mask = np.isfinite(prog.upper)

    def strictly_feasible(self, v):
        p = self.prog
        if np.any(v[self.lo_mask] <= p.lower[self.lo_mask]) or np.any(v[self.hi_mask] >= p.upper[self.hi_mask]):
            return False
        with np.errstate(all="ignore"):
            g = p.eval_constraints(v)[0] if p.constraints is not None else np.zeros(0)
        return bool(np.all(np.isfinite(g)) and np.all(g < 0))

    def value(self, v, w):
        p = self.prog
        with np.errstate(all="ignore"):
            f = p.objective(v)[0]
            g = p.eval_constraints(v)[0] if p.constraints is not None else np.zeros(0)
        if not np.isfinite(f) or np.any(~np.isfinite(g)) or np.any(g >= 0):
            return np.inf
        dl = v[self.lo_mask] - p.lower[self.lo_mask]
        du = p.upper[self.hi_mask] - v[self.hi_mask]
        if np.any(dl <= 0) or np.any(du <= 0):
            return np.inf
        return f - w * (np.sum(np.log(-g)) + np.sum(np.log(dl)) + np.sum(np.log(du)))

    def derivatives(self, v, w):
        p = self.prog
        f, df, d2f = p.eval_objective(v)
        g, jac, hg = p.eval_constraints(v)
        s = -g
        grad = df + w * (jac.T @ (1.0 / s))
        hess = d2f + w * (jac.T @ (jac / s[:, None] ** 2) + np.tensordot(1.0 / s, hg, axes=1))
        dl = np.where(self.lo_mask, v - p.lower, np.inf)
        du = np.where(self.hi_mask, p.upper - v, np.inf)
        grad += w * (-1.0 / dl + 1.0 / du)
        hess[np.diag_indices(p.n)] += w * (1.0 / dl**2 + 1.0 / du**2)
        return f, grad, hess


def _newton_direction(hess, grad):
    n = len(grad)
    # symmetric diagonal scaling: variables can differ in curvature by many
    # orders of magnitude (delay budgets in the thousands next to probabilities)
    diag = np.abs(np.diag(hess))
    sd = np.sqrt(np.maximum(diag, 1e-300 + 1e-16 * max(diag.max(), 1e-300)))
    hs = hess / np.outer(sd, sd)
    gs = grad / sd
    shift = 0.0
    for _ in range(60):
        try:
            c = np.linalg.cholesky(hs + shift * np.eye(n))
            y = np.linalg.solve(c, -gs)
            return np.linalg.solve(c.T, y) / sd
        except np.linalg.LinAlgError:
            shift = max(1e-12, 10 * shift)
    return -grad / max(1e-12, diag.max())


def _center(bar: _Barrier, v, w, prm: BarrierParams, budget: int):
    """Damped Newton on the barrier function at weight w; returns (v, iters)."""
    its = 0
    phi = bar.value(v, w)
    while its < min(prm.max_inner, budget):
        _, grad, hess = bar.derivatives(v, w)
        d = _newton_direction(hess, grad)
        dec = -grad @ d
        its += 1
        # the decrement alone is not enough: it is tiny whenever the barrier
        # Hessian is huge, while the gradient (the KKT residual) may not be
        if np.max(np.abs(grad)) <= prm.grad_tol or dec / 2.0 <= prm.newton_tol or not np.isfinite(dec):
            break
        t = 1.0
        accepted = False
        while t > 1e-20:
            cand = v + t * d
            phic = bar.value(cand, w)
            if phic <= phi - prm.armijo * t * dec:
                accepted = True
                break
            t *= prm.shrink
        if not accepted:
            # no measurable descent: we are at round-off level
            break
        stalled = phi - phic <= 1e-15 * max(1.0, abs(phi))
        v, phi = cand, phic
        if stalled:
            break
    return v, its


def _kkt(prog: ConvexProgram, v, lam, lam_lo, lam_hi):
    _, df, _ = prog.eval_objective(v)
    g, jac, _ = prog.eval_constraints(v)
    stat = df + jac.T @ lam - lam_lo + lam_hi
    viol = max(0.0, float(np.max(g))) if len(g) else 0.0
    viol = max(viol, float(np.max(np.maximum(prog.lower - v, 0.0))), float(np.max(np.maximum(v - prog.upper, 0.0))))
    comp = 0.0
    if len(g):
        comp = float(np.max(np.abs(lam * g)))
    dl = np.where(np.isfinite(prog.lower), v - prog.lower, 0.0)
    du = np.where(np.isfinite(prog.upper), prog.upper - v, 0.0)
    comp = max(comp, float(np.max(np.abs(lam_lo * dl))), float(np.max(np.abs(lam_hi * du))))
    return max(float(np.max(np.abs(stat))), comp), viol


def _polish(prog: ConvexProgram, v, lam, lam_lo, lam_hi, base_kkt):
    """Newton on the KKT equations of the apparent active set.

    Only accepted if it keeps inactive constraints satisfied, multipliers
    nonnegative and lowers the KKT residual.
    """
    with np.errstate(all="ignore"):
        try:
            return _polish_inner(prog, v, lam, lam_lo, lam_hi, base_kkt)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return None


def _polish_inner(prog, v, lam, lam_lo, lam_hi, base_kkt):
    n = prog.n
    g, _, _ = prog.eval_constraints(v)
    scale = max(1.0, float(np.max(np.concatenate([lam, lam_lo, lam_hi, [0.0]]))))
    thr = 1e-5 * scale
    act = np.flatnonzero(lam > thr)
    act_lo = np.flatnonzero(lam_lo > thr)
    act_hi = np.flatnonzero(lam_hi > thr)
    if act_lo.size and act_hi.size and np.intersect1d(act_lo, act_hi).size:
        return None
    x = v.copy()
    mu = np.concatenate([lam[act], lam_lo[act_lo], lam_hi[act_hi]])
    na = mu.size
    for _ in range(8):
        _, df, d2f = prog.eval_objective(x)
        gg, jac, hg = prog.eval_constraints(x)
        ja = np.vstack([jac[act], -np.eye(n)[act_lo], np.eye(n)[act_hi]]) if na else np.zeros((0, n))
        ga = np.concatenate([gg[act], prog.lower[act_lo] - x[act_lo], x[act_hi] - prog.upper[act_hi]])
        lag_h = d2f + (np.tensordot(mu[: act.size], hg[act], axes=1) if act.size else 0.0)
        rhs = -np.concatenate([df + ja.T @ mu, ga])
        kkt_mat = np.block([[lag_h, ja.T], [ja, np.zeros((na, na))]])
        if not (np.all(np.isfinite(kkt_mat)) and np.all(np.isfinite(rhs))):
            return None
        step = np.linalg.lstsq(kkt_mat, rhs, rcond=None)[0]
        x = x + step[:n]
        mu = mu + step[n:]
        if np.max(np.abs(step)) < 1e-15:
            break
    if not np.all(np.isfinite(x)) or np.any(mu < 0):
        return None
    lam2 = np.zeros_like(lam)
    lam2[act] = mu[: act.size]
    lo2 = np.zeros(n)
    lo2[act_lo] = mu[act.size: act.size + act_lo.size]
    hi2 = np.zeros(n)
    hi2[act_hi] = mu[act.size + act_lo.size:]
    # pin active boxes exactly
    x[act_lo] = prog.lower[act_lo]
    x[act_hi] = prog.upper[act_hi]
    kkt, viol = _kkt(prog, x, lam2, lo2, hi2)
    if not np.isfinite(kkt) or viol > 1e-12 or kkt >= base_kkt:
        return None
    return x, lam2, lo2, hi2, kkt, viol


def _phase_one(prog: ConvexProgram, v0, prm: BarrierParams):
    """Find a strictly feasible point by minimizing the worst constraint slack."""
    n = prog.n

    def obj(u):
        e = np.zeros(n + 1)
        e[-1] = 1.0
        return u[-1], e, np.zeros((n + 1, n + 1))

    def cons(u):
        g, jac, hg = prog.eval_constraints(u[:-1])
        m = len(g)
        jac1 = np.hstack([jac, -np.ones((m, 1))])
        h1 = np.zeros((m, n + 1, n + 1))
        h1[:, :n, :n] = hg
        return g - u[-1], jac1, h1

    with np.errstate(all="ignore"):
        g0 = prog.eval_constraints(v0)[0]
    if not np.all(np.isfinite(g0)):
        raise SolverError("starting point is outside the constraint domain")
    s0 = float(np.max(g0)) + 1.0
    aux = ConvexProgram(n + 1, obj, cons, np.append(prog.lower, -np.inf), np.append(prog.upper, np.inf),
                        x0=np.append(v0, s0))
    bar = _Barrier(aux)
    u = np.append(v0, s0)
    w = prm.weight0
    total = 0
    while True:
        u, its = _center(bar, u, w, prm, prm.max_iter - total)
        total += its
        if u[-1] < -prm.infeasible_slack and _Barrier(prog).strictly_feasible(u[:-1]):
            return u[:-1], total, True
        if w <= prm.weight_final or total >= prm.max_iter:
            return u[:-1], total, False
        w /= prm.factor


def barrier_solve(prog: ConvexProgram, params: BarrierParams | None = None) -> SolveReport:
    """Solve a convex program with a sequence of log-barrier centering passes."""
    prm = params or BarrierParams()
    bar = _Barrier(prog)
    v = _interior_start(prog)
    total = 0
    m = len(prog.eval_constraints(v)[0]) if prog.constraints is not None else 0
    if not bar.strictly_feasible(v):
        v, total, ok = _phase_one(prog, v, prm)
        if not ok:
            with np.errstate(all="ignore"):
                g = prog.eval_constraints(v)[0]
            viol = float(np.max(g)) if len(g) else 0.0
            return SolveReport(v, float(prog.objective(v)[0]), viol, np.inf, total, "infeasible",
                               np.zeros(m), np.zeros(prog.n), np.zeros(prog.n))
    w = prm.weight0
    status = "optimal"
    while True:
        v, its = _center(bar, v, w, prm, prm.max_iter - total)
        total += its
        if total >= prm.max_iter:
            status = "max_iter"
            break
        if w <= prm.weight_final * (1 + 1e-12):
            break
        w = max(w / prm.factor, prm.weight_final)

    g, _, _ = prog.eval_constraints(v)
    lam = w / -g if len(g) else np.zeros(0)
    lam_lo = np.where(bar.lo_mask, w / np.where(bar.lo_mask, v - prog.lower, 1.0), 0.0)
    lam_hi = np.where(bar.hi_mask, w / np.where(bar.hi_mask, prog.upper - v, 1.0), 0.0)
    kkt, viol = _kkt(prog, v, lam, lam_lo, lam_hi)
    if prm.polish and status == "optimal":
        pol = _polish(prog, v, lam, lam_lo, lam_hi, kkt)
        if pol is not None:
            v, lam, lam_lo, lam_hi, kkt, viol = pol
    if status == "optimal" and (kkt > prm.kkt_tol or viol > prm.feas_tol):
        status = "max_iter"
    return SolveReport(v, float(prog.objective(v)[0]), viol, kkt, total, status, lam, lam_lo, lam_hi)


def grid_oracle(prog: ConvexProgram, resolution: float, refine: int = 0,
                max_points: int = 20_000_000, chunk: int = 1_000_000) -> SolveReport:
    """Best feasible point of a regular grid over the (finite) box.

    With ``refine > 0`` the search is repeated ``refine`` times on a grid ten
    times finer spanning two coarse cells either side of the incumbent. The
    wider window keeps non-smooth objectives (max-min ridges) from locking
    onto an aliased incumbent.
    """
    if prog.n > 4:
        raise ValueError(f"grid oracle supports at most 4 variables, got {prog.n}")
    if not (np.all(np.isfinite(prog.lower)) and np.all(np.isfinite(prog.upper))):
        raise ValueError("grid oracle needs finite bounds")
    lo, hi = prog.lower.copy(), prog.upper.copy()
    step = float(resolution)
    best = None
    for level in range(refine + 1):
        axes = [np.linspace(a, b, int(round((b - a) / step)) + 1) for a, b in zip(lo, hi)]
        npts = math.prod(len(a) for a in axes)
        if npts > max_points:
            raise ValueError(f"grid of {npts} points exceeds budget {max_points}")
        cand = _grid_search(prog, axes, chunk)
        if cand is not None and (best is None or cand[1] <= best[1]):
            best = cand
        if best is None:
            break
        lo = np.maximum(prog.lower, best[0] - 2 * step)
        hi = np.minimum(prog.upper, best[0] + 2 * step)
        step /= 10.0
    if best is None:
        mid = 0.5 * (prog.lower + prog.upper)
        return SolveReport(mid, np.inf, np.inf, np.inf, 0, "infeasible")
    x, f, viol = best
    return SolveReport(x, f, viol, np.nan, 0, "optimal")


def _grid_search(prog, axes, chunk):
    n = len(axes)
    shape = [len(a) for a in axes]
    total = math.prod(shape)
    best = None
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(total, start + chunk)), shape)
        pts = np.stack([axes[d][idx[d]] for d in range(n)], axis=1)
        with np.errstate(all="ignore"):
            if prog.batch_values is not None:
                f, g = prog.batch_values(pts)
                f = np.asarray(f, float)
                g = np.asarray(g, float).reshape(len(pts), -1)
            else:
                f = np.array([prog.objective(p)[0] for p in pts], float)
                g = np.array([prog.eval_constraints(p)[0] if prog.constraints is not None else []
                              for p in pts], float).reshape(len(pts), -1)
        gmax = np.max(g, axis=1) if g.shape[1] else np.zeros(len(pts))
        ok = np.isfinite(f) & np.isfinite(gmax) & (gmax <= 0)
        if not np.any(ok):
            continue
        fo = np.where(ok, f, np.inf)
        i = int(np.argmin(fo))
        if best is None or fo[i] < best[1]:
            best = (pts[i].copy(), float(fo[i]), max(0.0, float(gmax[i])))
    return best
