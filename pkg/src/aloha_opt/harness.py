"""Scenario files, parameter sweeps, figure presets and simulator validation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .delay_model import success_probs
from .mac_dist import StepParams, calibrate_step, run_mac_distributed
from .mac_opt import (DEFAULT_DC_MULTIPLIER, MacScenario, min_delay_constraint,
                      solve_mac_centralized, solve_mac_suboptimal)
from .sim import SimConfig, compare, simulate
from .topology import Topology, TopologyError, from_dict, gen_linear, gen_star
from .xlayer_dist import XStepParams, run_xlayer
from .xlayer_opt import XLayerScenario, XLayerSolution, solve_xlayer_centralized

AXES = ("lambda_ratio", "Dc", "Ds", "network_size")
MAC_SOLVERS = ("centralized", "distributed", "suboptimal")
XLAYER_SOLVERS = ("centralized", "gradient", "newton")


class ScenarioError(ValueError):
    """Unreadable or invalid scenario / sweep description."""


@dataclass(frozen=True)
class Scenario:
    topology: Topology
    lam1: float = 1.0
    lam2: float = 1.0
    Dc: float | None = None
    Ds: float | None = None
    name: str = "scenario"

    def mac(self, **kw) -> MacScenario:
        kw = {"lam1": self.lam1, "lam2": self.lam2, "Dc": self.Dc, **kw}
        return MacScenario(self.topology, kw["lam1"], kw["lam2"], kw["Dc"])

    def xlayer(self, **kw) -> XLayerScenario:
        kw = {"lam1": self.lam1, "lam2": self.lam2, "Ds": self.Ds, **kw}
        return XLayerScenario(self.topology, kw["lam1"], kw["lam2"], kw["Ds"])


def _number(doc, key, path, positive=True):
    if key not in doc or doc[key] is None:
        return None
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ScenarioError(f"{path}: field '{key}' must be a finite number, got {v!r}")
    if positive and not v > 0:
        raise ScenarioError(f"{path}: field '{key}' must be positive, got {v!r}")
    return float(v)


def scenario_from_dict(doc: dict, source: str = "<dict>") -> Scenario:
    """Validate a scenario document and apply defaults.

    Missing energies default to 1; a missing ``Dc`` becomes 4 x MinDc of the
    topology. ``Ds``, when given, overrides every session's delay limit.
    """
    if not isinstance(doc, dict):
        raise ScenarioError(f"{source}: top level must be an object")
    for key in ("nodes", "links"):
        if key not in doc:
            raise ScenarioError(f"{source}: missing field '{key}'")
    nodes = doc["nodes"]
    if isinstance(nodes, int):
        nodes = [{"id": i} for i in range(nodes)]
    for nd in nodes if isinstance(nodes, list) else ():
        if isinstance(nd, dict) and "energy" in nd:
            e = nd["energy"]
            if not isinstance(e, (int, float)) or not e > 0:
                raise ScenarioError(f"{source}: node {nd.get('id')}: energy must be positive, got {e!r}")
    try:
        top = from_dict({**doc, "nodes": nodes})
    except TopologyError as exc:
        raise ScenarioError(f"{source}: {exc}") from exc
    lam1 = _number(doc, "lambda1", source, positive=False)
    lam2 = _number(doc, "lambda2", source, positive=False)
    lam1 = 1.0 if lam1 is None else lam1
    lam2 = 1.0 if lam2 is None else lam2
    if lam1 < 0 or lam2 < 0 or lam1 + lam2 == 0:
        raise ScenarioError(f"{source}: lambda1/lambda2 must be nonnegative and not both zero")
    Dc = _number(doc, "Dc", source)
    if Dc is None and top.n_links:
        Dc = DEFAULT_DC_MULTIPLIER * min_delay_constraint(top)
    elif Dc is not None and not Dc > 1:
        raise ScenarioError(f"{source}: field 'Dc' must exceed one slot, got {Dc}")
    Ds = _number(doc, "Ds", source)
    return Scenario(top, lam1, lam2, Dc, Ds, str(doc.get("name", Path(source).stem)))


def parse_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc, str(path))


def canonical_scenario() -> Scenario:
    doc = json.loads((resources.files("aloha_opt") / "data" / "canonical.json").read_text())
    return scenario_from_dict(doc, "canonical")


def load_scenario(ref) -> Scenario:
    """A path, or the name ``canonical`` for the shipped network."""
    if isinstance(ref, Scenario):
        return ref
    if ref in (None, "canonical"):
        return canonical_scenario()
    return parse_scenario(ref)


# --- sweeps ------------------------------------------------------------------

@dataclass
class SweepSpec:
    """One sweep: a scenario, an axis with a strictly increasing grid, and a solver.

    ``fixed`` overrides scenario fields for every point (``lam1``, ``lam2``,
    ``Dc``, ``Ds``, ``Dc_multiplier``); ``kind`` selects star or linear
    networks for the ``network_size`` axis; ``problem`` picks the MAC or the
    cross-layer family when the axis does not imply it.
    """

    scenario: object
    axis: str
    values: tuple
    solver: str = "centralized"
    out: str | None = None
    problem: str = "mac"
    kind: str = "star"
    fixed: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)
    max_iter: int = 5000
    label: str = ""

    def __post_init__(self):
        self.values = tuple(float(v) for v in self.values)
        if self.axis not in AXES:
            raise ScenarioError(f"unknown axis {self.axis!r}; expected one of {AXES}")
        if not self.values:
            raise ScenarioError("sweep grid is empty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ScenarioError("sweep grid must be strictly increasing")
        if self.axis == "Ds":
            self.problem = "xlayer"
        elif self.axis == "Dc":
            self.problem = "mac"
        if self.problem not in ("mac", "xlayer"):
            raise ScenarioError(f"unknown problem family {self.problem!r}")
        if self.axis == "network_size":
            if self.kind not in ("star", "linear"):
                raise ScenarioError(f"network kind must be star or linear, got {self.kind!r}")
            if any(v < 2 or v != int(v) for v in self.values):
                raise ScenarioError("network sizes must be integers >= 2")
            return
        valid = MAC_SOLVERS if self.problem == "mac" else XLAYER_SOLVERS
        if self.solver not in valid:
            raise ScenarioError(f"solver {self.solver!r} is not valid for the {self.problem} problem; "
                                f"expected one of {valid}")

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "SweepSpec":
        doc = dict(doc)
        if "values" not in doc and "grid" in doc:
            g = doc.pop("grid")
            doc["values"] = (np.geomspace if g.get("log") else np.linspace)(g["start"], g["stop"], int(g["num"]))
        sc = doc.get("scenario", "canonical")
        if base is not None and sc not in (None, "canonical") and not Path(sc).is_absolute():
            sc = str(base / sc)
        doc["scenario"] = sc
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ScenarioError(f"bad sweep description: {exc}") from exc


SWEEP_FIELDS = ("index", "axis", "value", "solver", "status", "lam1", "lam2", "Dc", "Ds", "n_nodes",
                "min_delay_constraint", "objective", "energy", "rate_utility", "feasible", "max_delay_ratio",
                "iterations", "probs", "rates")


def _point_scenario(spec: SweepSpec, value: float):
    sc = load_scenario(spec.scenario)
    fx = dict(spec.fixed)
    lam1 = fx.get("lam1", sc.lam1)
    lam2 = fx.get("lam2", sc.lam2)
    if spec.axis == "lambda_ratio":
        lam1 = value * lam2
    Dc = fx.get("Dc", sc.Dc)
    if "Dc_multiplier" in fx:
        Dc = fx["Dc_multiplier"] * min_delay_constraint(sc.topology)
    if spec.axis == "Dc":
        Dc = value
    Ds = fx.get("Ds", sc.Ds)
    if spec.axis == "Ds":
        Ds = value
    return replace(sc, lam1=lam1, lam2=lam2, Dc=Dc, Ds=Ds)


def _fmt(a):
    return json.dumps([round(float(v), 12) for v in a])


def run_point(spec: SweepSpec, index: int) -> dict:
    """Solve one grid point; failures become a status, never an exception."""
    value = spec.values[index]
    row = dict.fromkeys(SWEEP_FIELDS, "")
    row.update(index=index, axis=spec.axis, value=value, solver=spec.solver)
    try:
        if spec.axis == "network_size":
            gen = gen_star if spec.kind == "star" else gen_linear
            top = gen(int(value))
            row.update(solver="mindc", n_nodes=int(value), min_delay_constraint=min_delay_constraint(top),
                       status="optimal")
            return row
        sc = _point_scenario(spec, value)
        row.update(lam1=sc.lam1, lam2=sc.lam2, n_nodes=sc.topology.n_nodes)
        if spec.problem == "mac":
            row.update(Dc=sc.Dc)
            sol, iters = _solve_mac(sc, spec)
            limit = sc.Dc
            delays = sol.delays
        else:
            xs = sc.xlayer()
            row.update(Ds=float(xs.Ds.max()))
            sol, iters = _solve_xlayer(xs, spec)
            limit = np.nan_to_num(sol.budgets, nan=np.inf)
            delays = np.where(np.isfinite(sol.budgets), sol.delays, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = float(np.max(delays / limit))
        row.update(status=sol.status, objective=sol.objective, energy=sol.energy, rate_utility=sol.rate_utility,
                   feasible=bool(sol.feasible), max_delay_ratio=ratio, iterations=iters,
                   probs=_fmt(sol.probs), rates=_fmt(sol.link_rates if spec.problem == "mac" else sol.session_rates))
    except Exception as exc:  # recorded per point
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def _solve_mac(sc: Scenario, spec: SweepSpec):
    ms = sc.mac()
    if spec.solver == "centralized":
        sol = solve_mac_centralized(ms)
        return sol, sol.report.iterations if sol.report is not None else ""
    if spec.solver == "suboptimal":
        return solve_mac_suboptimal(ms), 0
    ref = solve_mac_centralized(ms)
    params = StepParams(**spec.step) if spec.step else StepParams(alpha=calibrate_step(ms, ref))
    sol, trace = run_mac_distributed(ms, params, max_iter=spec.max_iter, reference=ref)
    return sol, trace.converged_at if trace.converged_at is not None else len(trace) - 1


def _solve_xlayer(xs: XLayerScenario, spec: SweepSpec):
    if spec.solver == "centralized":
        sol = solve_xlayer_centralized(xs)
        return sol, sol.report.iterations if sol.report is not None else ""
    ref = solve_xlayer_centralized(xs)
    sol, trace = run_xlayer(xs, spec.solver, XStepParams(**spec.step), max_iter=spec.max_iter, reference=ref)
    return sol, trace.converged_at if trace.converged_at is not None else len(trace) - 1


def _run_indexed(args):
    spec, i = args
    return run_point(spec, i)


def sweep(spec: SweepSpec, workers: int | None = None) -> list[dict]:
    """Run every grid point in a process pool; rows come back in grid order."""
    jobs = [(spec, i) for i in range(len(spec.values))]
    if workers == 1 or len(jobs) == 1:
        rows = [_run_indexed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_indexed, jobs))
    if spec.out:
        write_rows(rows, spec.out, SWEEP_FIELDS)
    return rows


def write_rows(rows, path, fields=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else ()))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def pareto_violations(rows, tol: float = 1e-6) -> list[tuple[int, int]]:
    """Pairs (a, b) where row a dominates row b: less energy and more utility, both beyond tol."""
    pts = [(int(r["index"]), float(r["energy"]), float(r["rate_utility"])) for r in rows
           if str(r["status"]) == "optimal"]
    bad = []
    for i, ea, ua in pts:
        for j, eb, ub in pts:
            if ea < eb - tol and ua > ub + tol:
                bad.append((i, j))
    return bad


# --- validation --------------------------------------------------------------

@dataclass
class ValidationResult:
    rows: list
    passed: bool
    unstable: bool = False
    dummy_off_rows: list | None = None
    dummy_delta: np.ndarray | None = None
    reasons: list = field(default_factory=list)


def validate(scenario: Scenario, solution, sim_overrides: dict | None = None, delay_tol: float = 0.10,
             compare_dummy_off: bool = False) -> ValidationResult:
    """Simulate at a solved operating point and compare with the analytic model.

    A MAC solution is simulated with its per-link rates; a cross-layer
    solution with its session rates forwarded hop by hop. Passes iff every
    link delay and success probability is within ``delay_tol`` relative
    deviation. With ``compare_dummy_off`` the run is repeated without dummy
    packets and the relative change of each session's end-to-end delay is
    reported.
    """
    top = scenario.topology
    opts = {"slots": 1_000_000, "seed": 0, **(sim_overrides or {})}
    x = success_probs(top, solution.probs)
    if np.any(solution.link_rates >= x):
        bad = np.flatnonzero(solution.link_rates >= x).tolist()
        return ValidationResult([], False, True, reasons=[f"links {bad} have r >= x"])
    if isinstance(solution, XLayerSolution):
        base = dict(session_rates=solution.session_rates)
    else:
        base = dict(link_rates=solution.link_rates)

    def run(dummy):
        cfg = SimConfig(top, solution.probs, dummy_packets=dummy, **base, **opts)
        return compare(simulate(cfg), top, solution.probs, solution.link_rates)

    rows = run(opts.pop("dummy_packets", True))
    reasons = [f"{r.scope} {r.id} {r.metric}: rel dev {r.rel_dev:.3g}" for r in rows
               if r.scope == "link" and not r.rel_dev <= delay_tol]
    res = ValidationResult(rows, not reasons, reasons=reasons)
    if compare_dummy_off:
        off = run(False)
        on_s = np.array([r.empirical for r in rows if r.scope == "session"])
        off_s = np.array([r.empirical for r in off if r.scope == "session"])
        res.dummy_off_rows = off
        res.dummy_delta = off_s / on_s - 1.0
    return res


# --- presets -----------------------------------------------------------------

PRESETS = ("fig2", "fig3", "fig4", "fig5", "fig6", "fig7")


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ScenarioError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return json.loads((resources.files("aloha_opt") / "presets" / f"{name}.json").read_text())


def run_preset(name: str, out_dir, workers: int | None = None, plot: bool = True, seed: int | None = None,
               max_iter: int | None = None) -> dict[str, Path]:
    """Execute every job of a preset, writing one CSV per job (plus a PNG when ``plot``)."""
    preset = load_preset(name)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for job in preset["jobs"]:
        kind = job["type"]
        path = out_dir / f"{name}_{job['id']}.csv"
        if kind == "sweep":
            doc = {k: v for k, v in job.items() if k not in ("type", "id")}
            if max_iter is not None:
                doc["max_iter"] = max_iter
            spec = SweepSpec.from_dict(doc)
            rows = sweep(spec, workers)
            write_rows(rows, path, SWEEP_FIELDS)
        elif kind == "mac_trace":
            rows = mac_trace(job, max_iter)
            write_rows(rows, path)
        elif kind == "xlayer_trace":
            rows = xlayer_trace(job, max_iter)
            write_rows(rows, path)
        elif kind == "validate":
            rows = validation_rows(job, seed)
            write_rows(rows, path)
        else:
            raise ScenarioError(f"preset {name}: unknown job type {kind!r}")
        written[job["id"]] = path
    if plot:
        from .plotting import plot_preset
        written.update(plot_preset(name, preset, written, out_dir))
    return written


def mac_trace(job: dict, max_iter: int | None = None) -> list[dict]:
    sc = load_scenario(job.get("scenario"))
    ms = replace(sc, lam1=job.get("lam1", sc.lam1), lam2=job.get("lam2", sc.lam2)).mac()
    if "Dc_multiplier" in job:
        ms = replace(ms, Dc=job["Dc_multiplier"] * min_delay_constraint(sc.topology))
    ref = solve_mac_centralized(ms)
    alpha = job.get("alpha") or calibrate_step(ms, ref, p0=job.get("p0", 0.1))
    _, trace = run_mac_distributed(ms, StepParams(alpha=alpha), max_iter=max_iter or job.get("max_iter", 200),
                                   reference=ref, p0=job.get("p0", 0.1), track_link=job.get("track_link", 0),
                                   stop_at_tol=False)
    return [{**r, "alpha": alpha, "status": trace.status} for r in trace.rows]


def xlayer_trace(job: dict, max_iter: int | None = None) -> list[dict]:
    sc = load_scenario(job.get("scenario"))
    xs = replace(sc, lam1=job.get("lam1", sc.lam1), lam2=job.get("lam2", sc.lam2),
                 Ds=job.get("Ds", sc.Ds)).xlayer()
    ref = solve_xlayer_centralized(xs)
    rows = []
    for method in ("gradient", "newton"):
        params = XStepParams(**job.get(method, {}))
        _, trace = run_xlayer(xs, method, params, max_iter=max_iter or job.get("max_iter", 3000), reference=ref,
                              track_link=job.get("track_link", 0), track_session=job.get("track_session", 0))
        rows += [{**r, "status": trace.status, "converged_at": trace.converged_at} for r in trace.rows]
    return rows


def validation_rows(job: dict, seed: int | None = None) -> list[dict]:
    sc = load_scenario(job.get("scenario"))
    sc = replace(sc, lam1=job.get("lam1", sc.lam1), lam2=job.get("lam2", sc.lam2))
    if "Dc_multiplier" in job:
        sc = replace(sc, Dc=job["Dc_multiplier"] * min_delay_constraint(sc.topology))
    sol = solve_mac_centralized(sc.mac())
    overrides = {"slots": job.get("slots", 1_000_000), "seed": job.get("seed", 0) if seed is None else seed}
    res = validate(sc, sol, overrides, job.get("delay_tol", 0.10), compare_dummy_off=True)
    out = []
    for mode, rows in (("dummy_on", res.rows), ("dummy_off", res.dummy_off_rows or [])):
        for r in rows:
            out.append({"mode": mode, **r.__dict__})
    return out
