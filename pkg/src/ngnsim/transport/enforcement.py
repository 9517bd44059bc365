"""Ingress enforcement: gates, token-bucket policers, installed policies."""

from __future__ import annotations

import fnmatch
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from ..model import MediaType, TrafficClass
from ..nass import GateSettings
from .topology import Hop

MAX_PACKET_BYTES = 1500
MIN_PACKET_BYTES = 40
POLICER_WINDOW_MS = 5.0


def policer_burst(rate_bps: float) -> float:
    """Bucket depth: five milliseconds at ``rate_bps``, never under one MTU."""
    return max(float(MAX_PACKET_BYTES), POLICER_WINDOW_MS / 1000.0 * rate_bps / 8.0)


@dataclass(frozen=True)
class PolicerSpec:
    rate_bps: float
    burst_bytes: float


@dataclass(frozen=True)
class Classifier:
    src: Optional[str] = None
    dst: Optional[str] = None
    media: Optional[MediaType] = None

    def matches(self, src: str, dst: str, media: Optional[MediaType]) -> bool:
        return (
            (self.src is None or self.src == src)
            and (self.dst is None or self.dst == dst)
            and (self.media is None or self.media == media)
        )

    def reversed(self) -> Classifier:
        return Classifier(src=self.dst, dst=self.src, media=self.media)


@dataclass(frozen=True)
class TrafficPolicy:
    """L3/L2 enforcement state derived from a reservation.

    ``ul_policer``/``dl_policer`` are ``None`` for unlimited (best effort).
    ``path`` is the uplink hop list; the downlink classifier is installed at
    the ingress of the reversed path.
    """

    policy_id: str
    gate_id: str
    reservation_id: str
    classifier: Classifier
    traffic_class: TrafficClass
    marking: int
    ul_policer: Optional[PolicerSpec]
    dl_policer: Optional[PolicerSpec]
    gate_open: bool
    allowed_destinations: tuple[str, ...]
    meter_id: str
    path: tuple[Hop, ...] = ()


class TokenBucket:
    """Byte-granular token bucket; starts full."""

    def __init__(self, rate_bps: float, burst_bytes: float, now_ms: float = 0.0) -> None:
        self.rate_bps = rate_bps
        self.burst_bytes = burst_bytes
        self.tokens = burst_bytes
        self.last_ms = now_ms

    def _refill(self, now_ms: float) -> None:
        if now_ms > self.last_ms:
            self.tokens = min(
                self.burst_bytes, self.tokens + (now_ms - self.last_ms) / 1000.0 * self.rate_bps / 8.0
            )
            self.last_ms = now_ms

    def conforms(self, size: int, now_ms: float) -> bool:
        self._refill(now_ms)
        # tolerate float dust from interval arithmetic
        if self.tokens + 1e-9 >= size:
            self.tokens = max(0.0, self.tokens - size)
            return True
        return False


@dataclass
class Meter:
    meter_id: str
    conformant_packets: int = 0
    conformant_bytes: int = 0
    excess_packets: int = 0
    excess_bytes: int = 0

    @property
    def packets(self) -> int:
        return self.conformant_packets + self.excess_packets

    def count(self, size: int, conformant: bool) -> None:
        if conformant:
            self.conformant_packets += 1
            self.conformant_bytes += size
        else:
            self.excess_packets += 1
            self.excess_bytes += size

    def to_dict(self) -> dict:
        return {
            "meter_id": self.meter_id,
            "conformant_packets": self.conformant_packets,
            "conformant_bytes": self.conformant_bytes,
            "excess_packets": self.excess_packets,
            "excess_bytes": self.excess_bytes,
        }


def police(packet_size: int, bucket: TokenBucket, now_ms: float, meter: Optional[Meter] = None) -> bool:
    """Return True for a conformant packet, False for excess."""
    ok = bucket.conforms(packet_size, now_ms)
    if meter is not None:
        meter.count(packet_size, ok)
    return ok


class Gate:
    """Live state of a subscriber gate on its access link.

    The gate is open while the initial settings say so or while any policy
    is installed against it; installed policies add their destinations.
    """

    def __init__(self, settings: GateSettings, link_id: str, subscriber_ip: str) -> None:
        self.settings = settings
        self.link_id = link_id
        self.subscriber_ip = subscriber_ip
        self.policy_destinations: Counter[str] = Counter()
        self.drops = 0
        self.passed = 0

    @property
    def gate_id(self) -> str:
        return self.settings.gate_id

    @property
    def is_open(self) -> bool:
        return self.settings.open or bool(self.policy_destinations)

    @property
    def allowed_destinations(self) -> list[str]:
        extra = [d for d in sorted(self.policy_destinations) if d not in self.settings.allowed_destinations]
        return list(self.settings.allowed_destinations) + extra

    def allows(self, dst: str) -> bool:
        return self.is_open and any(fnmatch.fnmatchcase(dst, pat) for pat in self.allowed_destinations)

    def to_dict(self) -> dict:
        return {
            "gate_id": self.gate_id,
            "link_id": self.link_id,
            "subscriber_ip": self.subscriber_ip,
            "open": self.is_open,
            "allowed_destinations": self.allowed_destinations,
            "passed": self.passed,
            "drops": self.drops,
        }


def gate_check(dst: str, gate: Gate) -> bool:
    """Pass (True) or drop (False); drops are counted on the gate."""
    if gate.allows(dst):
        gate.passed += 1
        return True
    gate.drops += 1
    return False


@dataclass
class InstalledPolicy:
    policy: TrafficPolicy
    order: int
    meters: dict[str, Meter] = field(default_factory=dict)
    buckets: dict[str, Optional[TokenBucket]] = field(default_factory=dict)
