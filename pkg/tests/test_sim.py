import math
import warnings

import numpy as np
import pytest

from aloha_opt.delay_model import link_delay, node_probs, success_probs
from aloha_opt.sim import (REPORT_FIELDS, SimConfig, compare, pool_reports, simulate,
                           simulate_replications, write_report)
from aloha_opt.topology import build, canonical

SINGLE = build(2, [(0, 1)])
PAIR = build(2, [(0, 1), (1, 0)])


def _binomial_3sigma(p, n):
    return 3.0 * math.sqrt(p * (1 - p) / n)


def test_unit_service_without_contention():
    rep = simulate(SimConfig(SINGLE, [1.0], link_rates=[0.01], slots=1_000_000))
    # 1.00 to two places; the residual is same-slot batch arrivals queueing behind each other
    assert round(rep.link_mean_delay[0], 2) == 1.0
    assert abs(rep.link_mean_delay[0] - link_delay(1.0, 0.01)) <= rep.link_delay_ci[0]
    assert rep.link_success_prob[0] == 1.0


@pytest.mark.slow
def test_isolated_link_matches_queue_formula():
    rep = simulate(SimConfig(SINGLE, [0.5], link_rates=[0.25], slots=1_000_000, seed=1))
    assert rep.link_mean_delay[0] == pytest.approx(link_delay(0.5, 0.25), rel=0.05)
    assert link_delay(0.5, 0.25) == pytest.approx(3.5)


def test_pair_success_probability():
    n = 400_000
    rep = simulate(SimConfig(PAIR, [0.5, 0.5], link_rates=[0.05, 0.05], slots=n, warmup=0, seed=2))
    for k in range(2):
        assert abs(rep.link_success_prob[k] - 0.25) <= _binomial_3sigma(0.25, n)


def test_attempt_rate_and_energy_with_dummies():
    top = canonical()
    p = np.full(top.n_links, 0.12)
    x = success_probs(top, p)
    n = 300_000
    rep = simulate(SimConfig(top, p, link_rates=0.4 * x, slots=n, warmup=0, seed=3))
    for k in range(top.n_links):
        assert abs(rep.link_attempt_rate[k] - p[k]) <= _binomial_3sigma(p[k], n)
        assert abs(rep.link_success_prob[k] - x[k]) <= _binomial_3sigma(x[k], n)
    e = float(top.energy @ node_probs(top, p))
    # per-slot energy is a sum of independent node Bernoullis
    var = float(np.sum(top.energy**2 * node_probs(top, p) * (1 - node_probs(top, p))))
    assert abs(rep.energy_per_slot - e) <= 3 * math.sqrt(var / n)


def test_conservation_and_report_invariants():
    top = canonical()
    p = np.full(top.n_links, 0.15)
    x = success_probs(top, p)
    for dummy in (True, False):
        rep = simulate(SimConfig(top, p, link_rates=0.5 * x, slots=100_000, dummy_packets=dummy, seed=4))
        np.testing.assert_array_equal(rep.link_arrived, rep.link_delivered + rep.link_queue)
        assert np.all(rep.link_delivered <= rep.link_arrived)
        assert np.all((rep.link_success_prob >= 0) & (rep.link_success_prob <= 1))
        assert rep.energy_per_slot >= 0
        np.testing.assert_array_equal(rep.link_collisions, rep.link_attempts - rep.link_successes)


def test_silent_queues_attempt_less_without_dummies():
    top = canonical()
    p = np.full(top.n_links, 0.15)
    x = success_probs(top, p)
    cfg = dict(link_rates=0.3 * x, slots=100_000, seed=5)
    on = simulate(SimConfig(top, p, dummy_packets=True, **cfg))
    off = simulate(SimConfig(top, p, dummy_packets=False, **cfg))
    assert np.all(off.link_attempts < on.link_attempts)
    assert off.energy_per_slot < on.energy_per_slot


def test_deterministic():
    top = canonical()
    p = np.full(top.n_links, 0.1)
    cfg = SimConfig(top, p, session_rates=np.full(top.n_sessions, 0.005), slots=50_000, seed=9)
    a, b = simulate(cfg), simulate(cfg)
    for name in ("link_attempts", "link_successes", "link_batch_sum", "session_batch_sum", "energy_batch"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = simulate(SimConfig(top, p, session_rates=np.full(top.n_sessions, 0.005), slots=50_000, seed=10))
    assert not np.array_equal(a.link_attempts, c.link_attempts)


def test_session_mode():
    top = canonical()
    p = np.full(top.n_links, 0.15)
    x = success_probs(top, p)
    R = top.session_link_matrix
    y = np.full(top.n_sessions, 0.3 * x.min())
    rep = simulate(SimConfig(top, p, session_rates=y, slots=200_000, seed=6))
    assert np.all(rep.session_delivered <= rep.session_arrived)
    assert np.all(rep.session_delivered > 0)
    hops = R.sum(axis=0)
    assert np.all(rep.session_mean_delay >= hops)
    rows = compare(rep, top, p, R @ y)
    e2e = [r for r in rows if r.metric == "e2e_delay"]
    assert len(e2e) == top.n_sessions
    # light load: each end-to-end delay within 15% of the sum of link delays
    assert all(r.rel_dev < 0.15 for r in e2e)


def test_pooling():
    top = canonical()
    p = np.full(top.n_links, 0.1)
    x = success_probs(top, p)
    cfg = SimConfig(top, p, link_rates=0.3 * x, slots=30_000, seed=0)
    reps = [simulate(SimConfig(top, p, link_rates=0.3 * x, slots=30_000, seed=s)) for s in (0, 1)]
    pooled = pool_reports(reps)
    np.testing.assert_array_equal(pooled.link_attempts, reps[0].link_attempts + reps[1].link_attempts)
    assert pooled.link_batch_sum.shape[1] == 2 * reps[0].link_batch_sum.shape[1]
    assert pooled.measured_slots == 2 * reps[0].measured_slots
    par = simulate_replications(cfg, [0, 1], workers=2)
    np.testing.assert_array_equal(par.link_batch_sum, pooled.link_batch_sum)
    with pytest.raises(ValueError):
        pool_reports([])


def test_zero_traffic_probe():
    top = canonical()
    p = np.full(top.n_links, 0.12)
    x = success_probs(top, p)
    rep = simulate(SimConfig(top, p, link_rates=np.zeros(top.n_links), slots=200_000, seed=7))
    rows = [r for r in compare(rep, top, p, np.zeros(top.n_links)) if r.metric == "delay"]
    for r, xk in zip(rows, x):
        assert r.analytic == pytest.approx(1 / xk)
        assert r.rel_dev < 0.05


def test_compare_rows_and_csv(tmp_path):
    top = canonical()
    p = np.full(top.n_links, 0.12)
    x = success_probs(top, p)
    rep = simulate(SimConfig(top, p, link_rates=0.3 * x, slots=50_000, seed=8))
    rows = compare(rep, top, p, 0.3 * x)
    scopes = {r.scope for r in rows}
    assert scopes == {"link", "session", "network"}
    assert sum(r.metric == "path_delay" for r in rows) == top.n_sessions
    path = write_report(rows, tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(REPORT_FIELDS)
    assert len(lines) == len(rows) + 1


def test_dimension_errors():
    top = canonical()
    p = np.full(top.n_links, 0.1)
    with pytest.raises(ValueError):
        SimConfig(top, p[:-1], link_rates=np.zeros(top.n_links))
    with pytest.raises(ValueError):
        SimConfig(top, p, link_rates=np.zeros(3))
    with pytest.raises(ValueError):
        SimConfig(top, p)
    with pytest.raises(ValueError):
        SimConfig(top, p, link_rates=np.zeros(top.n_links), session_rates=np.zeros(top.n_sessions))
    with pytest.raises(ValueError):
        SimConfig(top, np.full(top.n_links, 0.9), link_rates=np.zeros(top.n_links))
    rep = simulate(SimConfig(top, p, link_rates=np.zeros(top.n_links), slots=1000))
    with pytest.raises(ValueError):
        compare(rep, top, p, np.zeros(3))


def test_overload_warns():
    with pytest.warns(RuntimeWarning):
        SimConfig(SINGLE, [0.5], link_rates=[0.6], slots=1000)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        SimConfig(SINGLE, [0.5], link_rates=[0.1], slots=1000)
