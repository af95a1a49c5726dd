"""Closed-form slotted-Aloha queueing analytics.

Each link is an M/G/1 queue whose service time is geometric in the per-slot
success probability ``x``. All delays are in slots.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .topology import Link, Session, Topology, TopologyError


class InstabilityError(ArithmeticError):
    """Arrival rate at or above the service rate: the queue has no finite delay."""


class ServiceStats(NamedTuple):
    mean: float
    variance: float
    success_prob: float


def service_stats(x: float) -> ServiceStats:
    """Mean and variance of a geometric service time with success prob ``x``."""
    if not 0.0 < x <= 1.0:
        raise ValueError(f"success probability must be in (0, 1], got {x}")
    return ServiceStats(1.0 / x, (1.0 - x) / x**2, x)


def pollaczek_khinchin(mean_service: float, var_service: float, r: float) -> float:
    """M/G/1 sojourn time from the first two service moments."""
    rho = r * mean_service
    if rho >= 1.0:
        raise InstabilityError(f"utilization {rho} >= 1")
    second_moment = var_service + mean_service**2
    return mean_service + r * second_moment / (2.0 * (1.0 - rho))


def link_delay(x: float, r: float) -> float:
    """Mean link delay ``(1 - r/2) / (x - r)``; raises if ``r >= x``."""
    if not 0.0 < x <= 1.0:
        raise ValueError(f"success probability must be in (0, 1], got {x}")
    if r < 0:
        raise ValueError(f"arrival rate must be nonnegative, got {r}")
    if r >= x:
        raise InstabilityError(f"arrival rate {r} >= service rate {x}")
    return (1.0 - 0.5 * r) / (x - r)


def node_probs(topology: Topology, p) -> np.ndarray:
    """Node activity P_i = sum of the node's outgoing link probabilities."""
    return topology.node_link_matrix @ np.asarray(p, dtype=float)


def check_probs(topology: Topology, p, atol: float = 1e-12) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (topology.n_links,):
        raise ValueError(f"expected {topology.n_links} link probabilities, got shape {p.shape}")
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError("link probabilities must lie in [0, 1]")
    if np.any(node_probs(topology, p) > 1 + atol):
        raise ValueError("node transmission probabilities must not exceed 1")
    return p


def success_probs(topology: Topology, p) -> np.ndarray:
    """Per-link success probabilities for all links at once.

    x_ij = p_ij (1 - P_j) prod_{l in N_j minus i} (1 - P_l)
    """
    p = np.asarray(p, dtype=float)
    idle = 1.0 - node_probs(topology, p)
    x = p.copy()
    for k, nodes in enumerate(topology.silent_nodes):
        for m in nodes:
            x[k] *= idle[m]
    return x


def success_prob(topology: Topology, p, link: Link | tuple[int, int]) -> float:
    link = Link(*link)
    k = topology.link_index.get(link)
    if k is None:
        raise TopologyError(f"unknown link {tuple(link)}")
    p = check_probs(topology, p)
    idle = 1.0 - node_probs(topology, p)
    x = p[k]
    for m in topology.silent_nodes[k]:
        x *= idle[m]
    return float(x)


def success_prob_jacobian(topology: Topology, p) -> np.ndarray:
    """d x_st / d p_ij as an (n_links, n_links) matrix, rows indexed by (s, t).

    Nonzero entries: the diagonal (x/p) and, for links (i, j) leaving a node
    that must stay silent for (s, t), ``-x_st / (1 - P_i)``.
    """
    p = np.asarray(p, dtype=float)
    idle = 1.0 - node_probs(topology, p)
    jac = np.zeros((topology.n_links, topology.n_links))
    out = topology.out_links
    for st, nodes in enumerate(topology.silent_nodes):
        # products taken directly rather than as x/p or x/(1-P) so zeros are safe
        jac[st, st] = np.prod(idle[list(nodes)])
        for m in nodes:
            others = np.prod([idle[q] for q in nodes if q != m])
            for ij in out[m]:
                jac[st, ij] = -p[st] * others
    return jac


def link_delays(topology: Topology, p, rates) -> np.ndarray:
    x = success_probs(topology, p)
    return np.array([link_delay(xi, ri) for xi, ri in zip(x, np.asarray(rates, dtype=float))])


def path_delay(topology: Topology, p, link_rates, session: Session | int) -> float:
    """End-to-end delay: sum of hop delays along the session's route."""
    if isinstance(session, int):
        session = topology.sessions[session]
    p = check_probs(topology, p)
    rates = np.asarray(link_rates, dtype=float)
    x = success_probs(topology, p)
    total = 0.0
    for hop in session.route:
        k = topology.link_index[hop]
        total += link_delay(x[k], rates[k])
    return total
