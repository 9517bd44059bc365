"""Static topology and hop-count routing."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

DEFAULT_SHARES = {"EF": 0.30, "AF": 0.50, "BE": 0.20}
DEFAULT_QUEUE_BYTES = 64_000

FWD = "fwd"
REV = "rev"


def opposite(direction: str) -> str:
    return REV if direction == FWD else FWD


class TopologyError(ValueError):
    pass


class NoRoute(TopologyError):
    pass


@dataclass(frozen=True)
class Link:
    link_id: str
    src: str
    dst: str
    capacity_bps: float
    propagation_delay_ms: float = 0.0
    capacity_bps_rev: Optional[float] = None
    queue_capacity_bytes: int = DEFAULT_QUEUE_BYTES
    segment: str = "core"
    shares: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SHARES))

    def __post_init__(self) -> None:
        if self.capacity_bps <= 0 or (self.capacity_bps_rev is not None and self.capacity_bps_rev <= 0):
            raise TopologyError(f"link {self.link_id}: capacity must be positive")
        if self.propagation_delay_ms < 0:
            raise TopologyError(f"link {self.link_id}: negative propagation delay")
        if sum(self.shares.values()) > 1.0 + 1e-12:
            raise TopologyError(f"link {self.link_id}: class shares sum above 1")

    def capacity(self, direction: str) -> float:
        if direction == REV and self.capacity_bps_rev is not None:
            return self.capacity_bps_rev
        return self.capacity_bps

    def head(self, direction: str) -> str:
        """Node a packet reaches after crossing the link in ``direction``."""
        return self.dst if direction == FWD else self.src

    def tail(self, direction: str) -> str:
        return self.src if direction == FWD else self.dst


Hop = tuple[str, str]  # (link_id, direction)


class Topology:
    def __init__(self, nodes: Iterable[str], links: Iterable[Link]) -> None:
        self.nodes = list(nodes)
        self.links: dict[str, Link] = {}
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise TopologyError("duplicate node id")
        for link in links:
            if link.link_id in self.links:
                raise TopologyError(f"duplicate link id {link.link_id}")
            if link.src not in node_set or link.dst not in node_set:
                raise TopologyError(f"link {link.link_id} references unknown node")
            self.links[link.link_id] = link
        self._adj: dict[str, list[tuple[str, str, str]]] = {n: [] for n in self.nodes}
        for link in self.links.values():
            self._adj[link.src].append((link.dst, link.link_id, FWD))
            self._adj[link.dst].append((link.src, link.link_id, REV))
        for n in self._adj:
            self._adj[n].sort()
        self._routes: dict[tuple[str, str], list[Hop]] = {}

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        return len(self._distances(self.nodes[0])) == len(self.nodes)

    def _distances(self, target: str) -> dict[str, int]:
        dist = {target: 0}
        todo = deque([target])
        while todo:
            n = todo.popleft()
            for m, _, _ in self._adj[n]:
                if m not in dist:
                    dist[m] = dist[n] + 1
                    todo.append(m)
        return dist

    def route(self, src: str, dst: str) -> list[Hop]:
        """Shortest path by hop count, ties broken by the lexicographically
        smallest node sequence (then smallest link id for parallel links).

        Routes are symmetric: ``route(b, a)`` is ``route(a, b)`` reversed.
        """
        key = (src, dst)
        if key in self._routes:
            return list(self._routes[key])
        if src not in self._adj or dst not in self._adj:
            raise NoRoute(f"{src} -> {dst}: unknown node")
        if dst < src:
            hops = self.reverse(self.route(dst, src))
            self._routes[key] = hops
            return list(hops)
        dist = self._distances(dst)
        if src not in dist:
            raise NoRoute(f"{src} -> {dst}")
        hops: list[Hop] = []
        here = src
        while here != dst:
            # adjacency is sorted by (neighbour, link_id) so the first hit wins
            for nxt, link_id, direction in self._adj[here]:
                if dist.get(nxt) == dist[here] - 1:
                    hops.append((link_id, direction))
                    here = nxt
                    break
        self._routes[key] = hops
        return list(hops)

    def link_ids(self, hops: Iterable[Hop]) -> list[str]:
        return [link_id for link_id, _ in hops]

    def reverse(self, hops: list[Hop]) -> list[Hop]:
        return [(link_id, opposite(d)) for link_id, d in reversed(hops)]
