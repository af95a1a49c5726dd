"""Multihop network description: nodes, directed links, sessions with fixed routes.

Node ids are dense integers starting at 0. Neighborhoods are induced by the
link set alone, so any directed link (i, j) makes i and j mutual neighbors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class TopologyError(ValueError):
    """Raised when a network description violates a structural invariant."""


class NodeSpec(NamedTuple):
    id: int
    energy_per_packet: float = 1.0


class Link(NamedTuple):
    tx: int
    rx: int


@dataclass(frozen=True)
class Session:
    id: int
    route: tuple[Link, ...]
    delay_limit: float | None = None

    @property
    def hops(self) -> int:
        return len(self.route)


@dataclass(frozen=True, eq=False)
class Topology:
    nodes: tuple[NodeSpec, ...]
    links: tuple[Link, ...]
    sessions: tuple[Session, ...] = ()
    neighbors: tuple[frozenset, ...] = field(init=False, repr=False)
    out_nodes: tuple[frozenset, ...] = field(init=False, repr=False)
    in_nodes: tuple[frozenset, ...] = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.nodes)
        nb = [set() for _ in range(n)]
        out = [set() for _ in range(n)]
        inn = [set() for _ in range(n)]
        for tx, rx in self.links:
            out[tx].add(rx)
            inn[rx].add(tx)
            nb[tx].add(rx)
            nb[rx].add(tx)
        object.__setattr__(self, "neighbors", tuple(frozenset(s) for s in nb))
        object.__setattr__(self, "out_nodes", tuple(frozenset(s) for s in out))
        object.__setattr__(self, "in_nodes", tuple(frozenset(s) for s in inn))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    @cached_property
    def link_index(self) -> dict[Link, int]:
        return {link: k for k, link in enumerate(self.links)}

    @cached_property
    def energy(self) -> np.ndarray:
        return np.array([nd.energy_per_packet for nd in self.nodes], dtype=float)

    @cached_property
    def tx(self) -> np.ndarray:
        return np.array([l.tx for l in self.links], dtype=np.int64)

    @cached_property
    def rx(self) -> np.ndarray:
        return np.array([l.rx for l in self.links], dtype=np.int64)

    @cached_property
    def out_links(self) -> tuple[tuple[int, ...], ...]:
        """Indices of the links leaving each node."""
        res = [[] for _ in self.nodes]
        for k, (tx, _) in enumerate(self.links):
            res[tx].append(k)
        return tuple(tuple(r) for r in res)

    @cached_property
    def node_link_matrix(self) -> np.ndarray:
        """(n_nodes, n_links) 0/1 matrix with P = A @ p."""
        a = np.zeros((self.n_nodes, self.n_links))
        a[self.tx, np.arange(self.n_links)] = 1.0
        return a

    @cached_property
    def silent_nodes(self) -> tuple[tuple[int, ...], ...]:
        """For link (i, j): the receiver j plus every neighbor of j except i.

        Reception on (i, j) succeeds only if all of these nodes are silent.
        """
        res = []
        for tx, rx in self.links:
            res.append(tuple(sorted({rx} | (self.neighbors[rx] - {tx}))))
        return tuple(res)

    @cached_property
    def silence_matrix(self) -> np.ndarray:
        """(n_links, n_nodes) 0/1 matrix C with log x = log p + C @ log(1 - P)."""
        c = np.zeros((self.n_links, self.n_nodes))
        for k, nodes in enumerate(self.silent_nodes):
            c[k, list(nodes)] = 1.0
        return c

    @cached_property
    def session_link_matrix(self) -> np.ndarray:
        """(n_links, n_sessions) 0/1 matrix with r = R @ y."""
        m = np.zeros((self.n_links, self.n_sessions))
        for s, sess in enumerate(self.sessions):
            for link in sess.route:
                m[self.link_index[link], s] = 1.0
        return m

    def sessions_on_link(self, link: Link | tuple[int, int]) -> frozenset[int]:
        link = Link(*link)
        if link not in self.link_index:
            raise TopologyError(f"unknown link {tuple(link)}")
        return frozenset(s.id for s in self.sessions if link in s.route)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": nd.id, "energy": nd.energy_per_packet} for nd in self.nodes],
            "links": [{"tx": l.tx, "rx": l.rx} for l in self.links],
            "sessions": [
                {
                    "id": s.id,
                    "route": [[l.tx, l.rx] for l in s.route],
                    "delay_limit": s.delay_limit,
                }
                for s in self.sessions
            ],
        }


def build(
    nodes: Iterable[NodeSpec | tuple | int] | int,
    links: Iterable[tuple[int, int]],
    sessions: Iterable[Session | tuple] = (),
) -> Topology:
    """Validate a network description and compute derived sets.

    ``nodes`` may be a node count (unit energy each), or a sequence of
    :class:`NodeSpec` / ``(id, energy)`` tuples.
    """
    if isinstance(nodes, int):
        node_specs = [NodeSpec(i, 1.0) for i in range(nodes)]
    else:
        node_specs = [nd if isinstance(nd, NodeSpec) else NodeSpec(*nd) for nd in nodes]
    ids = [nd.id for nd in node_specs]
    if ids != list(range(len(ids))):
        raise TopologyError("node ids must be unique and contiguous from 0, in order")
    for nd in node_specs:
        if not nd.energy_per_packet > 0:
            raise TopologyError(f"node {nd.id}: energy must be positive, got {nd.energy_per_packet}")

    n = len(node_specs)
    link_list: list[Link] = []
    seen = set()
    for l in links:
        l = Link(int(l[0]), int(l[1]))
        if not (0 <= l.tx < n and 0 <= l.rx < n):
            raise TopologyError(f"link {tuple(l)} references a missing node")
        if l.tx == l.rx:
            raise TopologyError(f"link {tuple(l)} is a self-loop")
        if l in seen:
            raise TopologyError(f"duplicate link {tuple(l)}")
        seen.add(l)
        link_list.append(l)

    sess_list = []
    sess_ids = set()
    for s in sessions:
        if not isinstance(s, Session):
            s = Session(*s)
        route = tuple(Link(int(a), int(b)) for a, b in s.route)
        _check_route(s.id, route, seen)
        if s.delay_limit is not None and not s.delay_limit > 0:
            raise TopologyError(f"session {s.id}: delay_limit must be positive")
        if s.id in sess_ids:
            raise TopologyError(f"duplicate session id {s.id}")
        sess_ids.add(s.id)
        sess_list.append(Session(s.id, route, s.delay_limit))
    if [s.id for s in sess_list] != list(range(len(sess_list))):
        raise TopologyError("session ids must be contiguous from 0, in order")

    return Topology(tuple(node_specs), tuple(link_list), tuple(sess_list))


def _check_route(sid, route: Sequence[Link], links: set) -> None:
    if not route:
        raise TopologyError(f"session {sid}: empty route")
    for l in route:
        if l not in links:
            raise TopologyError(f"session {sid}: route uses missing link {tuple(l)}")
    for a, b in zip(route, route[1:]):
        if a.rx != b.tx:
            raise TopologyError(f"session {sid}: route discontinuity between {tuple(a)} and {tuple(b)}")
    visited = [route[0].tx] + [l.rx for l in route]
    if len(set(visited)) != len(visited):
        raise TopologyError(f"session {sid}: route contains a loop")


def gen_linear(n: int, energy: float = 1.0) -> Topology:
    """n nodes in a line, both directions between adjacent nodes."""
    if n < 2:
        raise TopologyError("linear network needs n >= 2")
    links = []
    for i in range(n - 1):
        links += [(i, i + 1), (i + 1, i)]
    return build([NodeSpec(i, energy) for i in range(n)], links)


def gen_star(n: int, energy: float = 1.0) -> Topology:
    """Node 0 at the center, linked both ways to each of the n-1 outer nodes."""
    if n < 2:
        raise TopologyError("star network needs n >= 2")
    links = []
    for i in range(1, n):
        links += [(0, i), (i, 0)]
    return build([NodeSpec(i, energy) for i in range(n)], links)


def from_dict(doc: dict) -> Topology:
    try:
        nodes = [NodeSpec(int(nd["id"]), float(nd.get("energy", 1.0))) for nd in doc["nodes"]]
        links = [(int(l["tx"]), int(l["rx"])) for l in doc["links"]]
        sessions = [
            Session(
                int(s["id"]),
                tuple(tuple(hop) for hop in s["route"]),
                None if s.get("delay_limit") is None else float(s["delay_limit"]),
            )
            for s in doc.get("sessions", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"malformed scenario: {exc!r}") from exc
    return build(nodes, links, sessions)


def canonical() -> Topology:
    """10-node / 12-link / 4-session reference network shipped with the package."""
    path = Path(__file__).parent / "data" / "canonical.json"
    return from_dict(json.loads(path.read_text()))
