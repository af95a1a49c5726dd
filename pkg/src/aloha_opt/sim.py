"""Slot-level slotted-Aloha simulator.

Every link holds an unbounded FIFO queue. Per slot, Poisson batches arrive
first, then every node makes one uniform draw that picks at most one of its
links (segment lengths ``p_ij``, remainder idle). A transmission on (i, j)
succeeds iff j and every other neighbor of j stay silent. The head-of-line
packet leaves on success and is retried otherwise.

Delays are counted in slots from arrival to the slot of successful
transmission, inclusive, so an uncontended packet has delay 1. With Poisson
batches arriving ahead of the transmission decision this makes the mean delay
of a dummy-fed queue equal ``(1 - r/2)/(x - r)`` exactly.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .delay_model import InstabilityError, link_delay, node_probs, success_probs
from .topology import Topology

N_BATCHES = 20
Z95 = 1.96


@dataclass
class SimConfig:
    """Simulation input.

    Give exactly one of ``link_rates`` (independent Poisson traffic per link)
    or ``session_rates`` (Poisson sources forwarded hop by hop along routes).
    ``warmup`` defaults to 10% of the horizon.
    """

    topology: Topology
    probs: np.ndarray
    link_rates: np.ndarray | None = None
    session_rates: np.ndarray | None = None
    slots: int = 1_000_000
    dummy_packets: bool = True
    seed: int = 0
    warmup: int | None = None

    def __post_init__(self):
        top = self.topology
        self.probs = np.asarray(self.probs, float)
        if self.probs.shape != (top.n_links,):
            raise ValueError(f"expected {top.n_links} link probabilities")
        if np.any(self.probs < 0) or np.any(node_probs(top, self.probs) > 1 + 1e-12):
            raise ValueError("probabilities must be nonnegative with node totals <= 1")
        if (self.link_rates is None) == (self.session_rates is None):
            raise ValueError("give exactly one of link_rates or session_rates")
        if self.link_rates is not None:
            self.link_rates = np.asarray(self.link_rates, float)
            if self.link_rates.shape != (top.n_links,):
                raise ValueError(f"expected {top.n_links} link rates")
        else:
            self.session_rates = np.asarray(self.session_rates, float)
            if self.session_rates.shape != (top.n_sessions,):
                raise ValueError(f"expected {top.n_sessions} session rates")
        if np.any(self.offered_load < 0):
            raise ValueError("rates must be nonnegative")
        if self.warmup is None:
            self.warmup = self.slots // 10
        if not self.slots > self.warmup >= 0:
            raise ValueError("need slots > warmup >= 0")
        if self.slots - self.warmup < N_BATCHES:
            raise ValueError(f"need at least {N_BATCHES} measured slots")
        x = success_probs(top, self.probs)
        if np.any(self.offered_load >= x):
            bad = np.flatnonzero(self.offered_load >= x).tolist()
            warnings.warn(f"links {bad} are offered at least their service rate", RuntimeWarning)

    @property
    def offered_load(self) -> np.ndarray:
        if self.link_rates is not None:
            return self.link_rates
        return self.topology.session_link_matrix @ self.session_rates


@dataclass
class SimReport:
    """Per-link, per-session and network statistics of one or more replications.

    Batch sums/counts (``N_BATCHES`` per replication) are kept so that
    replications can be pooled; means and CI half-widths derive from them.
    """

    measured_slots: int
    dummy_packets: bool
    link_attempts: np.ndarray
    link_successes: np.ndarray
    link_collisions: np.ndarray
    link_arrived: np.ndarray
    link_delivered: np.ndarray
    link_queue: np.ndarray
    link_batch_sum: np.ndarray
    link_batch_count: np.ndarray
    session_arrived: np.ndarray
    session_delivered: np.ndarray
    session_batch_sum: np.ndarray
    session_batch_count: np.ndarray
    energy_batch: np.ndarray
    batch_slots: np.ndarray
    seeds: tuple = field(default_factory=tuple)

    @property
    def link_mean_delay(self) -> np.ndarray:
        return _mean(self.link_batch_sum, self.link_batch_count)

    @property
    def link_delay_ci(self) -> np.ndarray:
        return _batch_ci(self.link_batch_sum, self.link_batch_count)

    @property
    def link_success_prob(self) -> np.ndarray:
        """Successful transmissions per slot (dummies included), the empirical x."""
        return self.link_successes / self.measured_slots

    @property
    def link_attempt_rate(self) -> np.ndarray:
        return self.link_attempts / self.measured_slots

    @property
    def link_delay_count(self) -> np.ndarray:
        return self.link_batch_count.sum(axis=1)

    @property
    def session_mean_delay(self) -> np.ndarray:
        return _mean(self.session_batch_sum, self.session_batch_count)

    @property
    def session_delay_ci(self) -> np.ndarray:
        return _batch_ci(self.session_batch_sum, self.session_batch_count)

    @property
    def energy_per_slot(self) -> float:
        return float(self.energy_batch.sum() / self.batch_slots.sum())

    @property
    def energy_ci(self) -> float:
        return float(_batch_ci(self.energy_batch[None, :], self.batch_slots[None, :].astype(float))[0])


def _mean(sums, counts):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts.sum(axis=1) > 0, sums.sum(axis=1) / counts.sum(axis=1), np.nan)


def _batch_ci(sums, counts):
    """1.96 * std of the batch means / sqrt(#batches), over nonempty batches."""
    out = np.full(sums.shape[0], np.nan)
    for k in range(sums.shape[0]):
        ok = counts[k] > 0
        if ok.sum() >= 2:
            means = sums[k, ok] / counts[k, ok]
            out[k] = Z95 * np.std(means, ddof=1) / math.sqrt(ok.sum())
    return out


@numba.njit(cache=True)
def _kernel(seed, slots, warmup, dummy, out_ptr, out_idx, out_p, sil_ptr, sil_idx, link_tx,
            energy, lam_link, lam_sess, route_ptr, route_idx, cap):
    n_nodes = len(out_ptr) - 1
    L = len(link_tx)
    S = len(lam_sess)
    nb = 20
    span = slots - warmup
    np.random.seed(seed)

    # packet pool: singly linked FIFO per link plus a free stack
    pk_next = np.full(cap, -1, np.int64)
    pk_tlink = np.zeros(cap, np.int64)
    pk_t0 = np.zeros(cap, np.int64)
    pk_sess = np.full(cap, -1, np.int64)
    pk_hop = np.zeros(cap, np.int64)
    free = np.arange(cap - 1, -1, -1).astype(np.int64)
    n_free = cap
    head = np.full(L, -1, np.int64)
    tail = np.full(L, -1, np.int64)
    qlen = np.zeros(L, np.int64)

    attempts = np.zeros(L, np.int64)
    successes = np.zeros(L, np.int64)
    arrived = np.zeros(L, np.int64)
    delivered = np.zeros(L, np.int64)
    l_bsum = np.zeros((L, nb))
    l_bcnt = np.zeros((L, nb))
    s_arr = np.zeros(S, np.int64)
    s_del = np.zeros(S, np.int64)
    s_bsum = np.zeros((S, nb))
    s_bcnt = np.zeros((S, nb))
    e_batch = np.zeros(nb)
    b_slots = np.zeros(nb)

    sending = np.zeros(n_nodes, np.int64)
    chosen = np.full(n_nodes, -1, np.int64)
    real = np.zeros(n_nodes, np.bool_)

    for t in range(slots):
        # arrivals
        for k in range(L):
            if lam_link[k] > 0.0:
                a = np.random.poisson(lam_link[k])
                for _ in range(a):
                    if n_free == 0:
                        return -1, attempts, successes, arrived, delivered, qlen, l_bsum, l_bcnt, \
                            s_arr, s_del, s_bsum, s_bcnt, e_batch, b_slots
                    n_free -= 1
                    q = free[n_free]
                    pk_tlink[q] = t
                    pk_t0[q] = t
                    pk_sess[q] = -1
                    pk_next[q] = -1
                    if tail[k] >= 0:
                        pk_next[tail[k]] = q
                    else:
                        head[k] = q
                    tail[k] = q
                    qlen[k] += 1
                    arrived[k] += 1
        for s in range(S):
            if lam_sess[s] > 0.0:
                a = np.random.poisson(lam_sess[s])
                k = route_idx[route_ptr[s]]
                for _ in range(a):
                    if n_free == 0:
                        return -1, attempts, successes, arrived, delivered, qlen, l_bsum, l_bcnt, \
                            s_arr, s_del, s_bsum, s_bcnt, e_batch, b_slots
                    n_free -= 1
                    q = free[n_free]
                    pk_tlink[q] = t
                    pk_t0[q] = t
                    pk_sess[q] = s
                    pk_hop[q] = 0
                    pk_next[q] = -1
                    if tail[k] >= 0:
                        pk_next[tail[k]] = q
                    else:
                        head[k] = q
                    tail[k] = q
                    qlen[k] += 1
                    arrived[k] += 1
                    s_arr[s] += 1

        # one draw per node picks at most one link
        for i in range(n_nodes):
            sending[i] = 0
            chosen[i] = -1
            real[i] = False
            u = np.random.random()
            acc = 0.0
            for j in range(out_ptr[i], out_ptr[i + 1]):
                acc += out_p[j]
                if u < acc:
                    k = out_idx[j]
                    if qlen[k] > 0 or dummy:
                        sending[i] += 1
                        chosen[i] = k
                        real[i] = qlen[k] > 0
                    break
            if sending[i] > 1:
                raise RuntimeError("node transmitted on two links in one slot")

        measured = t >= warmup
        bt = (t - warmup) * nb // span if measured else 0
        if measured:
            b_slots[bt] += 1.0
        for i in range(n_nodes):
            k = chosen[i]
            if k < 0:
                continue
            ok = True
            for j in range(sil_ptr[k], sil_ptr[k + 1]):
                if sending[sil_idx[j]] > 0:
                    ok = False
                    break
            if measured:
                attempts[k] += 1
                e_batch[bt] += energy[i]
                if ok:
                    successes[k] += 1
            if not (ok and real[i]):
                continue
            q = head[k]
            head[k] = pk_next[q]
            if head[k] < 0:
                tail[k] = -1
            qlen[k] -= 1
            delivered[k] += 1
            if pk_tlink[q] >= warmup:
                b = (pk_tlink[q] - warmup) * nb // span
                l_bsum[k, b] += t - pk_tlink[q] + 1
                l_bcnt[k, b] += 1.0
            s = pk_sess[q]
            if s >= 0 and route_ptr[s] + pk_hop[q] + 1 < route_ptr[s + 1]:
                # forward; usable from the next slot
                pk_hop[q] += 1
                nk = route_idx[route_ptr[s] + pk_hop[q]]
                pk_tlink[q] = t + 1
                pk_next[q] = -1
                if tail[nk] >= 0:
                    pk_next[tail[nk]] = q
                else:
                    head[nk] = q
                tail[nk] = q
                qlen[nk] += 1
                arrived[nk] += 1
                continue
            if s >= 0:
                s_del[s] += 1
                if pk_t0[q] >= warmup:
                    b = (pk_t0[q] - warmup) * nb // span
                    s_bsum[s, b] += t - pk_t0[q] + 1
                    s_bcnt[s, b] += 1.0
            free[n_free] = q
            n_free += 1
    return 0, attempts, successes, arrived, delivered, qlen, l_bsum, l_bcnt, s_arr, s_del, s_bsum, \
        s_bcnt, e_batch, b_slots


def _csr(groups):
    ptr = np.zeros(len(groups) + 1, np.int64)
    ptr[1:] = np.cumsum([len(g) for g in groups])
    idx = np.array([v for g in groups for v in g], np.int64)
    return ptr, idx


def _seed32(seed: int) -> int:
    return int(np.random.SeedSequence(int(seed)).generate_state(1)[0])


def simulate(config: SimConfig) -> SimReport:
    """Run one replication; identical config and seed give identical reports."""
    top = config.topology
    out_ptr, out_idx = _csr(top.out_links)
    out_p = config.probs[out_idx] if len(out_idx) else np.zeros(0)
    sil_ptr, sil_idx = _csr(top.silent_nodes)
    if config.link_rates is not None:
        lam_link = config.link_rates.astype(float)
        lam_sess = np.zeros(top.n_sessions)
    else:
        lam_link = np.zeros(top.n_links)
        lam_sess = config.session_rates.astype(float)
    route_ptr, route_idx = _csr([[top.link_index[l] for l in s.route] for s in top.sessions])
    cap = 1 << 14
    while True:
        res = _kernel(_seed32(config.seed), int(config.slots), int(config.warmup), bool(config.dummy_packets),
                      out_ptr, out_idx, out_p, sil_ptr, sil_idx, top.tx, top.energy, lam_link, lam_sess,
                      route_ptr, route_idx, cap)
        if res[0] == 0:
            break
        # pool exhausted (heavy backlog): rerun from the same seed with more room
        cap *= 4
        if cap > 1 << 28:
            raise MemoryError("packet backlog exceeds the simulator's pool")
    _, att, succ, arr, dlv, q, lbs, lbc, sa, sd, sbs, sbc, eb, bs = res
    return SimReport(int(config.slots - config.warmup), bool(config.dummy_packets), att, succ, att - succ,
                     arr, dlv, q, lbs, lbc, sa, sd, sbs, sbc, eb, bs, (int(config.seed),))


def pool_reports(reports) -> SimReport:
    """Merge independent replications: counts add, batches concatenate."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to pool")
    if len({r.dummy_packets for r in reports}) > 1:
        raise ValueError("cannot pool runs with and without dummy packets")
    cat = lambda name: np.concatenate([getattr(r, name) for r in reports], axis=-1)
    add = lambda name: sum(getattr(r, name) for r in reports)
    return SimReport(
        sum(r.measured_slots for r in reports), reports[0].dummy_packets,
        add("link_attempts"), add("link_successes"), add("link_collisions"), add("link_arrived"),
        add("link_delivered"), add("link_queue"), cat("link_batch_sum"), cat("link_batch_count"),
        add("session_arrived"), add("session_delivered"), cat("session_batch_sum"), cat("session_batch_count"),
        cat("energy_batch"), cat("batch_slots"), tuple(s for r in reports for s in r.seeds),
    )


def _run_seed(args):
    config, seed = args
    cfg = SimConfig(config.topology, config.probs, config.link_rates, config.session_rates, config.slots,
                    config.dummy_packets, seed, config.warmup)
    return simulate(cfg)


def simulate_replications(config: SimConfig, seeds, workers: int | None = None) -> SimReport:
    """Independent replications (one per seed), run in a process pool and pooled in seed order."""
    seeds = list(seeds)
    jobs = [(config, s) for s in seeds]
    if workers == 1 or len(seeds) == 1:
        reports = list(map(_run_seed, jobs))
    else:
        with warnings.catch_warnings(), ProcessPoolExecutor(max_workers=workers) as ex:
            warnings.simplefilter("ignore", RuntimeWarning)
            reports = list(ex.map(_run_seed, jobs))
    return pool_reports(reports)


@dataclass
class Deviation:
    scope: str
    id: str
    metric: str
    analytic: float
    empirical: float
    ci_halfwidth: float
    rel_dev: float
    ci_overlap: bool


def _analytic_delays(x, r):
    out = np.empty(len(x))
    for k, (xk, rk) in enumerate(zip(x, r)):
        try:
            out[k] = link_delay(xk, rk) if xk > 0 else math.inf
        except InstabilityError:
            out[k] = math.inf
    return out


def _row(scope, ident, metric, analytic, empirical, ci):
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = abs(empirical - analytic) / abs(analytic) if analytic not in (0, math.inf) else math.nan
    overlap = bool(math.isfinite(ci) and abs(empirical - analytic) <= ci)
    return Deviation(scope, str(ident), metric, float(analytic), float(empirical), float(ci), float(rel), overlap)


def compare(report: SimReport, topology: Topology, probs, rates) -> list[Deviation]:
    """Analytic vs simulated values per link, per session and for the network.

    ``rates`` are per-link arrival rates. A link that delivered no packets is
    compared through its probe service time ``attempts/successes`` against
    the zero-load delay ``1/x``.
    """
    probs = np.asarray(probs, float)
    rates = np.asarray(rates, float)
    if probs.shape != (topology.n_links,) or rates.shape != (topology.n_links,):
        raise ValueError("probs and rates must have one entry per link")
    if report.link_attempts.shape != (topology.n_links,):
        raise ValueError("report does not match the topology")
    x = success_probs(topology, probs)
    d = _analytic_delays(x, rates)
    emp_d = report.link_mean_delay
    ci_d = report.link_delay_ci
    xs = report.link_success_prob
    rows = []
    for k, link in enumerate(topology.links):
        name = f"{link.tx}->{link.rx}"
        if report.link_delay_count[k] > 0:
            rows.append(_row("link", name, "delay", d[k], emp_d[k], ci_d[k]))
        else:
            probe = 1.0 / xs[k] if xs[k] > 0 else math.nan
            rows.append(_row("link", name, "delay", 1.0 / x[k] if x[k] > 0 else math.inf, probe, math.nan))
        sigma = math.sqrt(x[k] * (1 - x[k]) / report.measured_slots)
        rows.append(_row("link", name, "success_prob", x[k], xs[k], 3.0 * sigma))
    R = topology.session_link_matrix
    if report.session_batch_count.size and report.session_batch_count.sum() > 0:
        emp_s = report.session_mean_delay
        ci_s = report.session_delay_ci
        for s, sess in enumerate(topology.sessions):
            an = float(np.sum(d[R[:, s] > 0]))
            rows.append(_row("session", sess.id, "e2e_delay", an, emp_s[s], ci_s[s]))
    else:
        # link-level traffic: end-to-end delay as the route sum of link delays
        for s, sess in enumerate(topology.sessions):
            on = R[:, s] > 0
            ci = float(np.sqrt(np.sum(ci_d[on] ** 2)))
            rows.append(_row("session", sess.id, "path_delay", float(np.sum(d[on])), float(np.sum(emp_d[on])), ci))
    e = float(topology.energy @ node_probs(topology, probs))
    rows.append(_row("network", "all", "energy_per_slot", e, report.energy_per_slot, report.energy_ci))
    return rows


REPORT_FIELDS = ("scope", "id", "metric", "analytic", "empirical", "ci_halfwidth", "rel_dev")


def write_report(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in rows:
            w.writerow([getattr(r, f) for f in REPORT_FIELDS])
    return path
