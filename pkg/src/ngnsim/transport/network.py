"""Packet-level transport: flows, ingress enforcement, forwarding, metrics."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from ..model import BEST_EFFORT, MediaType, TrafficClass, codepoint_to_class
from ..nass import GateSettings
from .enforcement import (
    MAX_PACKET_BYTES,
    MIN_PACKET_BYTES,
    Gate,
    InstalledPolicy,
    Meter,
    TokenBucket,
    TrafficPolicy,
    gate_check,
    police,
)
from .events import EventLog, EventLoop
from .scheduler import Packet, Port
from .topology import FWD, REV, Hop, NoRoute, Topology


class TransportError(Exception):
    pass


class UnknownGate(TransportError):
    pass


class UnknownFlow(TransportError):
    pass


class UnknownPolicy(TransportError):
    pass


@dataclass(frozen=True)
class FlowSpec:
    """Traffic source description.

    ``pattern`` is ``constant``, ``onoff`` or ``poisson``. A non-empty
    ``trace`` of ``(offset_ms, size_bytes)`` pairs overrides rate and
    pattern. ``stop_ms`` of ``None`` means run until the simulation ends.
    """

    flow_id: str
    src: str
    dst: str
    packet_size: int = 1000
    rate_bps: float = 0.0
    pattern: str = "constant"
    on_ms: float = 0.0
    off_ms: float = 0.0
    seed: int = 0
    trace: tuple[tuple[float, int], ...] = ()
    start_ms: float = 0.0
    stop_ms: Optional[float] = None
    media: Optional[MediaType] = None
    codepoint: int = 0

    def __post_init__(self) -> None:
        if not MIN_PACKET_BYTES <= self.packet_size <= MAX_PACKET_BYTES:
            raise ValueError(f"flow {self.flow_id}: packet size {self.packet_size} outside [40, 1500]")
        if not self.trace and self.rate_bps <= 0:
            raise ValueError(f"flow {self.flow_id}: rate must be positive")
        if self.pattern not in ("constant", "onoff", "poisson"):
            raise ValueError(f"flow {self.flow_id}: unknown pattern {self.pattern!r}")
        if self.pattern == "onoff" and (self.on_ms <= 0 or self.off_ms < 0):
            raise ValueError(f"flow {self.flow_id}: on/off periods must be positive")
        for _, size in self.trace:
            if not MIN_PACKET_BYTES <= size <= MAX_PACKET_BYTES:
                raise ValueError(f"flow {self.flow_id}: trace packet size {size} outside [40, 1500]")


@dataclass
class FlowMetrics:
    flow_id: str
    window: tuple[float, float]
    sent: int
    delivered: int
    dropped: int
    in_flight: int
    throughput_bps: float
    loss: float
    mean_delay_ms: Optional[float]
    jitter_ms: Optional[float]
    per_second: list[FlowMetrics] = field(default_factory=list)

    def to_row(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "start_ms": self.window[0],
            "end_ms": self.window[1],
            "sent": self.sent,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "in_flight": self.in_flight,
            "throughput_bps": self.throughput_bps,
            "loss": self.loss,
            "mean_delay_ms": self.mean_delay_ms,
            "jitter_ms": self.jitter_ms,
        }


def summarize(flow_id: str, packets: Sequence[Packet], window: tuple[float, float]) -> FlowMetrics:
    """Aggregate packets created inside ``window`` (half-open, ms)."""
    start, end = window
    sent = delivered = dropped = 0
    delivered_bits = 0
    delays: list[float] = []
    for p in packets:
        if not start <= p.created_at < end:
            continue
        sent += 1
        if p.dropped:
            dropped += 1
        elif p.delivered_at is not None:
            delivered += 1
            delivered_bits += p.size * 8
            delays.append(p.delivered_at - p.created_at)
    span_s = (end - start) / 1000.0
    mean_delay = sum(delays) / len(delays) if delays else None
    jitter = None
    if delays:
        jitter = (
            sum(abs(b - a) for a, b in zip(delays, delays[1:])) / (len(delays) - 1) if len(delays) > 1 else 0.0
        )
    return FlowMetrics(
        flow_id=flow_id,
        window=(start, end),
        sent=sent,
        delivered=delivered,
        dropped=dropped,
        in_flight=sent - delivered - dropped,
        throughput_bps=delivered_bits / span_s if span_s > 0 else 0.0,
        loss=dropped / sent if sent else 0.0,
        mean_delay_ms=mean_delay,
        jitter_ms=jitter,
    )


class _Flow:
    def __init__(self, spec: FlowSpec, seed: int) -> None:
        self.spec = spec
        self.rate_bps = spec.rate_bps
        self.stop_ms = spec.stop_ms
        self.next_seq = 0
        self.packets: list[Packet] = []
        self.rng = random.Random(f"{seed}:{spec.flow_id}")
        self.trace_index = 0
        self.stopped = False
        self.origin = spec.start_ms

    def interval_ms(self) -> float:
        return self.spec.packet_size * 8.0 / self.rate_bps * 1000.0


class Network:
    """The simulated IP transport with DiffServ enforcement at ingress.

    ``resolve`` maps an address (subscriber IP or node id) to a node id and
    returns ``None`` for addresses nobody currently owns.
    """

    def __init__(
        self,
        topology: Topology,
        loop: Optional[EventLoop] = None,
        log: Optional[EventLog] = None,
        resolve: Optional[Callable[[str], Optional[str]]] = None,
        seed: int = 0,
    ) -> None:
        self.topology = topology
        self.loop = loop if loop is not None else EventLoop()
        self.log = log if log is not None else EventLog()
        self.seed = seed
        self._resolve_extra = resolve
        self.ports: dict[Hop, Port] = {}
        for link in topology.links.values():
            for direction in (FWD, REV):
                self.ports[(link.link_id, direction)] = Port(
                    link, direction, self.loop, self.log, self._depart, self._dropped_at_port
                )
        self.gates: dict[str, Gate] = {}
        self._gate_index: dict[tuple[str, str], Gate] = {}
        self.policies: dict[str, InstalledPolicy] = {}
        self._classifiers: dict[Hop, list[tuple]] = {}
        self._install_seq = 0
        self.flows: dict[str, _Flow] = {}
        self._next_tick = 1000.0
        self.sent = self.delivered = self.dropped = 0
        self.policy_listeners: list[Callable[[str, TrafficPolicy], None]] = []

    # -- addressing -----------------------------------------------------

    def resolve(self, address: str) -> Optional[str]:
        if self._resolve_extra is not None:
            node = self._resolve_extra(address)
            if node is not None:
                return node
        return address if address in self.topology._adj else None

    # -- gates and policies ---------------------------------------------

    def add_gate(self, settings: GateSettings, link_id: str, subscriber_ip: str) -> Gate:
        if link_id not in self.topology.links:
            raise TransportError(f"gate {settings.gate_id}: unknown access link {link_id}")
        gate = Gate(settings, link_id, subscriber_ip)
        self.gates[settings.gate_id] = gate
        self._gate_index[(link_id, subscriber_ip)] = gate
        return gate

    def remove_gate(self, gate_id: str) -> None:
        gate = self.gates.pop(gate_id, None)
        if gate is None:
            raise UnknownGate(gate_id)
        self._gate_index.pop((gate.link_id, gate.subscriber_ip), None)
        for pid in [pid for pid, inst in self.policies.items() if inst.policy.gate_id == gate_id]:
            self.remove_policy(pid)

    def install_policy(self, policy: TrafficPolicy) -> str:
        gate = self.gates.get(policy.gate_id)
        if gate is None:
            raise UnknownGate(policy.gate_id)
        if not policy.path:
            raise TransportError(f"policy {policy.policy_id} has an empty path")
        self._install_seq += 1
        inst = InstalledPolicy(policy, self._install_seq)
        now = self.loop.now
        for direction, spec, ingress, classifier in (
            ("ul", policy.ul_policer, policy.path[0], policy.classifier),
            ("dl", policy.dl_policer, self.topology.reverse(list(policy.path))[0], policy.classifier.reversed()),
        ):
            inst.meters[direction] = Meter(f"{policy.meter_id}/{direction}")
            inst.buckets[direction] = TokenBucket(spec.rate_bps, spec.burst_bytes, now) if spec else None
            entries = self._classifiers.setdefault(tuple(ingress), [])
            entries.append((policy.gate_id, inst.order, direction, inst, classifier))
            entries.sort(key=lambda e: (e[0], e[1]))
        self.policies[policy.policy_id] = inst
        for dst in policy.allowed_destinations:
            gate.policy_destinations[dst] += 1
        self.log.record(
            now, "policy.install", None, policy.path[0][0],
            policy=policy.policy_id, gate=policy.gate_id, reservation=policy.reservation_id,
            codepoint=policy.marking,
        )
        for listener in self.policy_listeners:
            listener("install", policy)
        return policy.policy_id

    def remove_policy(self, policy_id: str) -> None:
        inst = self.policies.pop(policy_id, None)
        if inst is None:
            raise UnknownPolicy(policy_id)
        for key, entries in list(self._classifiers.items()):
            entries[:] = [e for e in entries if e[3] is not inst]
            if not entries:
                del self._classifiers[key]
        gate = self.gates.get(inst.policy.gate_id)
        if gate is not None:
            for dst in inst.policy.allowed_destinations:
                gate.policy_destinations[dst] -= 1
                if gate.policy_destinations[dst] <= 0:
                    del gate.policy_destinations[dst]
        self.log.record(
            self.loop.now, "policy.remove", None, inst.policy.path[0][0],
            policy=policy_id, gate=inst.policy.gate_id, reservation=inst.policy.reservation_id,
        )
        for listener in self.policy_listeners:
            listener("remove", inst.policy)

    def classify(self, packet: Packet, ingress: Hop) -> tuple[TrafficClass, Optional[tuple[InstalledPolicy, str]]]:
        """First matching classifier at ``ingress`` (by gate id, then install
        order); unmatched traffic is best effort whatever its marking."""
        for _, _, direction, inst, classifier in self._classifiers.get(ingress, ()):
            if classifier.matches(packet.src, packet.dst, packet.media):
                return inst.policy.traffic_class, (inst, direction)
        return BEST_EFFORT, None

    # -- flows ------------------------------------------------------------

    def add_flow(self, spec: FlowSpec) -> None:
        if spec.flow_id in self.flows:
            raise TransportError(f"duplicate flow id {spec.flow_id}")
        flow = _Flow(spec, self.seed)
        self.flows[spec.flow_id] = flow
        start = flow.origin = max(spec.start_ms, self.loop.now)
        if spec.trace:
            self.loop.schedule(start + spec.trace[0][0], self._emit, flow)
        elif spec.pattern == "poisson":
            self.loop.schedule(start + flow.rng.expovariate(1.0 / flow.interval_ms()), self._emit, flow)
        else:
            self.loop.schedule(start, self._emit, flow)

    def stop_flow(self, flow_id: str) -> None:
        flow = self._flow(flow_id)
        flow.stopped = True
        flow.stop_ms = self.loop.now if flow.stop_ms is None else min(flow.stop_ms, self.loop.now)

    def set_rate(self, flow_id: str, rate_bps: float) -> None:
        if rate_bps <= 0:
            raise ValueError("rate must be positive")
        self._flow(flow_id).rate_bps = rate_bps

    def _flow(self, flow_id: str) -> _Flow:
        try:
            return self.flows[flow_id]
        except KeyError:
            raise UnknownFlow(flow_id) from None

    def _next_emission(self, flow: _Flow, now: float) -> Optional[float]:
        spec = flow.spec
        if spec.trace:
            flow.trace_index += 1
            if flow.trace_index >= len(spec.trace):
                return None
            return flow.origin + spec.trace[flow.trace_index][0]
        if spec.pattern == "poisson":
            return now + flow.rng.expovariate(1.0 / flow.interval_ms())
        nxt = now + flow.interval_ms()
        if spec.pattern == "onoff":
            cycle = spec.on_ms + spec.off_ms
            phase = (nxt - flow.origin) % cycle
            if phase >= spec.on_ms - 1e-9:
                nxt += cycle - phase
        return nxt

    def _emit(self, flow: _Flow) -> None:
        now = self.loop.now
        spec = flow.spec
        if flow.stopped or (flow.stop_ms is not None and now >= flow.stop_ms):
            return
        size = spec.trace[flow.trace_index][1] if spec.trace else spec.packet_size
        packet = Packet(
            flow_id=spec.flow_id,
            seq=flow.next_seq,
            size=size,
            codepoint=spec.codepoint,
            created_at=now,
            src=spec.src,
            dst=spec.dst,
            media=spec.media,
        )
        flow.next_seq += 1
        flow.packets.append(packet)
        self.sent += 1
        self.log.record(now, "send", spec.flow_id, None, seq=packet.seq, size=size, dst=spec.dst)
        self._ingress(packet)
        nxt = self._next_emission(flow, now)
        if nxt is not None and (flow.stop_ms is None or nxt < flow.stop_ms):
            self.loop.schedule(nxt, self._emit, flow)

    def _drop(self, packet: Packet, reason: str, link_id: Optional[str] = None, direction: str = "-") -> None:
        packet.dropped = True
        packet.drop_reason = reason
        self.dropped += 1
        self.log.record(
            self.loop.now, "drop", packet.flow_id, link_id, seq=packet.seq, dir=direction, reason=reason
        )

    def _dropped_at_port(self, packet: Packet, reason: str, port: Port) -> None:
        self._drop(packet, reason, port.link.link_id, port.direction)

    def _ingress(self, packet: Packet) -> None:
        src_node = self.resolve(packet.src)
        dst_node = self.resolve(packet.dst)
        if src_node is None or dst_node is None:
            self._drop(packet, "unroutable")
            return
        if src_node == dst_node:
            packet.delivered_at = self.loop.now
            self.delivered += 1
            self.log.record(self.loop.now, "deliver", packet.flow_id, None, seq=packet.seq, delay=0.0)
            return
        try:
            packet.route = tuple(self.topology.route(src_node, dst_node))
        except NoRoute:
            self._drop(packet, "unroutable")
            return
        ingress = packet.route[0]
        gate = self._gate_index.get((ingress[0], packet.src))
        if gate is not None and not gate_check(packet.dst, gate):
            self._drop(packet, "gate", ingress[0], ingress[1])
            return
        tc, match = self.classify(packet, ingress)
        if match is None:
            packet.codepoint = 0
        else:
            inst, direction = match
            bucket = inst.buckets[direction]
            ok = police(packet.size, bucket, self.loop.now, inst.meters[direction]) if bucket else True
            if bucket is None:
                inst.meters[direction].count(packet.size, True)
            if ok:
                packet.codepoint = inst.policy.marking
            elif tc.kind.is_best_effort:
                tc = BEST_EFFORT
                packet.codepoint = 0
            else:
                self._drop(packet, "police", ingress[0], ingress[1])
                return
        self.ports[ingress].enqueue(packet, tc)

    def _depart(self, packet: Packet) -> None:
        packet.hop += 1
        if packet.hop >= len(packet.route):
            packet.delivered_at = self.loop.now
            self.delivered += 1
            self.log.record(
                self.loop.now, "deliver", packet.flow_id, packet.route[-1][0],
                seq=packet.seq, delay=packet.delivered_at - packet.created_at,
            )
            return
        hop = packet.route[packet.hop]
        self.ports[hop].enqueue(packet, codepoint_to_class(packet.codepoint))

    # -- running ------------------------------------------------------------

    def _tick(self) -> None:
        t = self.totals()
        self.log.record(self.loop.now, "counters", None, None, **t)

    def schedule_ticks(self, until: float) -> None:
        while self._next_tick <= until:
            self.loop.schedule(self._next_tick, self._tick)
            self._next_tick += 1000.0

    def run(self, until: float) -> EventLog:
        """Advance the simulation to ``until`` ms and return the event log."""
        if self.flows:
            self.schedule_ticks(until)
        self.loop.run(until)
        return self.log

    # -- measurement --------------------------------------------------------

    def packets(self, flow_id: str) -> list[Packet]:
        return self._flow(flow_id).packets

    def collect_metrics(self, flow_id: str, window: Optional[tuple[float, float]] = None) -> FlowMetrics:
        flow = self._flow(flow_id)
        if window is None:
            end = flow.stop_ms if flow.stop_ms is not None else self.loop.now
            window = (flow.spec.start_ms, max(end, flow.spec.start_ms))
        start, end = window
        metrics = summarize(flow_id, flow.packets, window)
        first = math.floor(start / 1000.0)
        last = math.ceil(end / 1000.0)
        for k in range(first, last):
            lo, hi = max(start, k * 1000.0), min(end, (k + 1) * 1000.0)
            if hi > lo:
                metrics.per_second.append(summarize(flow_id, flow.packets, (lo, hi)))
        return metrics

    def counters(self) -> dict:
        return {
            "gates": [g.to_dict() for _, g in sorted(self.gates.items())],
            "meters": [
                m.to_dict()
                for _, inst in sorted(self.policies.items())
                for _, m in sorted(inst.meters.items())
            ],
            "ports": [p.to_dict() for _, p in sorted(self.ports.items())],
        }

    def totals(self) -> dict[str, int]:
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "in_flight": self.sent - self.delivered - self.dropped,
        }

    def installed_for_gate(self, gate_id: str) -> list[TrafficPolicy]:
        return [inst.policy for inst in self.policies.values() if inst.policy.gate_id == gate_id]

    def ports_on(self, hops: Iterable[Hop]) -> list[Port]:
        return [self.ports[tuple(h)] for h in hops]
