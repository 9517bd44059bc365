"""Per-direction output port: DiffServ queues and the link scheduler.

Service order on every port:

* EF is strict priority. Arrivals are metered against the link's EF share
  and anything beyond it is dropped, so EF can never starve the rest.
* AF1..AF4 split what EF leaves by deficit round robin, weights 4:3:2:1.
* BestEffort and BetterBestEffort share one FIFO that only gets the
  residual. Above 80 % occupancy plain BestEffort arrivals are dropped so
  BetterBestEffort survives congestion longer.

AF drop precedence uses fixed thresholds: precedence 3 is refused above
50 % queue occupancy, precedence 2 above 75 %.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..model import ClassKind, TrafficClass
from .enforcement import MAX_PACKET_BYTES, TokenBucket
from .events import EventLog, EventLoop
from .topology import Link

AF_WEIGHTS = {"AF1": 4, "AF2": 3, "AF3": 2, "AF4": 1}
AF_QUEUES = tuple(AF_WEIGHTS)
QUEUES = ("EF",) + AF_QUEUES + ("BE",)
DRR_QUANTUM_BYTES = MAX_PACKET_BYTES

AF_DROP_THRESHOLDS = {3: 0.50, 2: 0.75}
BE_PROTECT_THRESHOLD = 0.80

EF_CAP_MIN_BURST = 2 * MAX_PACKET_BYTES
EF_CAP_WINDOW_MS = 10.0


def queue_for(tc: TrafficClass) -> str:
    if tc.kind is ClassKind.EF:
        return "EF"
    if tc.kind.is_af:
        return tc.kind.value
    return "BE"


def ef_cap_burst(rate_bps: float) -> float:
    return max(float(EF_CAP_MIN_BURST), EF_CAP_WINDOW_MS / 1000.0 * rate_bps / 8.0)


@dataclass
class Packet:
    flow_id: str
    seq: int
    size: int
    codepoint: int
    created_at: float
    src: str
    dst: str
    media: Optional[str] = None
    route: tuple = ()
    hop: int = 0
    traffic_class: Optional[TrafficClass] = None
    enqueued_at: float = 0.0
    delivered_at: Optional[float] = None
    dropped: bool = False
    drop_reason: str = ""

    @property
    def in_flight(self) -> bool:
        return self.delivered_at is None and not self.dropped


@dataclass
class QueueStats:
    enqueued: int = 0
    dropped: int = 0
    transmitted: int = 0
    transmitted_bytes: int = 0
    drops_by_reason: dict = field(default_factory=dict)


class Port:
    """One transmission direction of a link."""

    def __init__(
        self,
        link: Link,
        direction: str,
        loop: EventLoop,
        log: EventLog,
        on_departure: Callable[[Packet], None],
        on_drop: Callable[[Packet, str, Port], None],
    ) -> None:
        self.link = link
        self.direction = direction
        self.loop = loop
        self.log = log
        self.capacity = link.capacity(direction)
        self.queue_capacity = link.queue_capacity_bytes
        self._on_departure = on_departure
        self._on_drop = on_drop
        self.queues: dict[str, deque[Packet]] = {q: deque() for q in QUEUES}
        self.bytes: dict[str, int] = {q: 0 for q in QUEUES}
        self.stats: dict[str, QueueStats] = {q: QueueStats() for q in QUEUES}
        ef_rate = link.shares.get("EF", 0.0) * self.capacity
        self.ef_cap = TokenBucket(ef_rate, ef_cap_burst(ef_rate))
        self.ef_bound_ms = (self.ef_cap.burst_bytes + MAX_PACKET_BYTES) * 8.0 / self.capacity * 1000.0
        self.ef_max_queueing_ms = 0.0
        self.ef_violations = 0
        self._active: deque[str] = deque()
        self._deficit: dict[str, float] = {q: 0.0 for q in AF_QUEUES}
        self._fresh_turn = True
        self.busy = False
        self._kick_pending = False

    @property
    def name(self) -> str:
        return f"{self.link.link_id}/{self.direction}"

    def occupancy(self, queue: str) -> float:
        return self.bytes[queue] / self.queue_capacity

    def backlog(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def tx_time_ms(self, size: int) -> float:
        return size * 8.0 / self.capacity * 1000.0

    def _refuse(self, packet: Packet, queue: str, reason: str) -> bool:
        st = self.stats[queue]
        st.dropped += 1
        st.drops_by_reason[reason] = st.drops_by_reason.get(reason, 0) + 1
        self._on_drop(packet, reason, self)
        return False

    def enqueue(self, packet: Packet, tc: TrafficClass) -> bool:
        """Admit ``packet`` into its class queue, or drop it. Returns admission."""
        now = self.loop.now
        queue = queue_for(tc)
        if queue == "EF":
            if not self.ef_cap.conforms(packet.size, now):
                return self._refuse(packet, queue, "ef_cap")
        elif queue in AF_WEIGHTS:
            limit = AF_DROP_THRESHOLDS.get(tc.drop_precedence or 1)
            if limit is not None and self.occupancy(queue) > limit:
                return self._refuse(packet, queue, f"af_prec{tc.drop_precedence}")
        elif tc.kind is ClassKind.BEST_EFFORT and self.occupancy(queue) > BE_PROTECT_THRESHOLD:
            return self._refuse(packet, queue, "be_protect")
        if self.bytes[queue] + packet.size > self.queue_capacity:
            return self._refuse(packet, queue, "overflow")

        packet.traffic_class = tc
        packet.enqueued_at = now
        if queue in AF_WEIGHTS and not self.queues[queue]:
            self._active.append(queue)
        self.queues[queue].append(packet)
        self.bytes[queue] += packet.size
        self.stats[queue].enqueued += 1
        self.log.record(
            now, "enqueue", packet.flow_id, self.link.link_id,
            seq=packet.seq, dir=self.direction, queue=queue, qbytes=self.bytes[queue],
        )
        if not self.busy and not self._kick_pending:
            # defer so every arrival of this instant competes for the link
            self._kick_pending = True
            self.loop.schedule(now, self._kick)
        return True

    def _kick(self) -> None:
        self._kick_pending = False
        if not self.busy:
            self._start_next()

    def _pick(self) -> Optional[str]:
        if self.queues["EF"]:
            return "EF"
        while self._active:
            queue = self._active[0]
            if self._fresh_turn:
                self._deficit[queue] += AF_WEIGHTS[queue] * DRR_QUANTUM_BYTES
                self._fresh_turn = False
            if self.queues[queue][0].size <= self._deficit[queue]:
                return queue
            self._active.rotate(-1)
            self._fresh_turn = True
        if self.queues["BE"]:
            return "BE"
        return None

    def _start_next(self) -> None:
        queue = self._pick()
        if queue is None:
            self.busy = False
            return
        packet = self.queues[queue].popleft()
        self.bytes[queue] -= packet.size
        if queue in AF_WEIGHTS:
            self._deficit[queue] -= packet.size
            if not self.queues[queue]:
                self._deficit[queue] = 0.0
                self._active.popleft()
                self._fresh_turn = True
        now = self.loop.now
        end = now + self.tx_time_ms(packet.size)
        if queue == "EF":
            waited = now - packet.enqueued_at
            self.ef_max_queueing_ms = max(self.ef_max_queueing_ms, waited)
            if waited > self.ef_bound_ms + 1e-9:
                self.ef_violations += 1
        st = self.stats[queue]
        st.transmitted += 1
        st.transmitted_bytes += packet.size
        self.busy = True
        self.log.record(
            now, "transmit", packet.flow_id, self.link.link_id,
            seq=packet.seq, dir=self.direction, queue=queue, end=end,
        )
        self.loop.schedule(end, self._finish, packet)

    def _finish(self, packet: Packet) -> None:
        self.loop.schedule(self.loop.now + self.link.propagation_delay_ms, self._on_departure, packet)
        self._start_next()

    def to_dict(self) -> dict:
        return {
            "port": self.name,
            "ef_bound_ms": self.ef_bound_ms,
            "ef_max_queueing_ms": self.ef_max_queueing_ms,
            "ef_violations": self.ef_violations,
            "queues": {
                q: {
                    "enqueued": s.enqueued,
                    "dropped": s.dropped,
                    "transmitted": s.transmitted,
                    "transmitted_bytes": s.transmitted_bytes,
                    "drops_by_reason": dict(sorted(s.drops_by_reason.items())),
                }
                for q, s in self.stats.items()
            },
        }
