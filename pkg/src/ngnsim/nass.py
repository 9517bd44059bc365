"""Network attachment: terminal registration, address pools and the NASS DB.

The store is a single-owner state machine. It keeps the subscription data
loaded from the scenario, hands out addresses lowest-first from each access
network's pool, and serves transport-layer profiles to resource control.
"""

from __future__ import annotations

import heapq
import ipaddress
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .model import MAX_PRIORITY, MediaType, TrafficClass

logger = logging.getLogger(__name__)


class NassError(Exception):
    pass


class UnknownSubscriber(NassError):
    pass


class AuthenticationFailed(NassError):
    pass


class AddressPoolExhausted(NassError):
    pass


class AlreadyAttached(NassError):
    pass


class NotAttached(NassError):
    pass


class NoActiveSession(NassError):
    pass


class AmbiguousKey(NassError):
    def __init__(self, key: str, matches: list[AccessSessionRecord]):
        self.key = key
        self.matches = matches
        listed = ", ".join(f"{r.physical_access_id}@{r.ip}" for r in matches)
        super().__init__(f"{key} has {len(matches)} active attachments: {listed}")


@dataclass(frozen=True)
class HardwareProfile:
    model: str = ""
    display_size: str = ""
    resolution: str = ""
    processor_memory: str = ""
    sound: str = ""


@dataclass(frozen=True)
class ConnectivityProfile:
    supported_interfaces: tuple[str, ...] = ("ethernet",)
    current_interface: str = "ethernet"
    dl_capability: float = 0.0
    ul_capability: float = 0.0


@dataclass(frozen=True)
class SoftwareProfile:
    os: str = ""
    browser: str = ""
    supported_media_types: tuple[MediaType, ...] = ()
    content_protection: tuple[str, ...] = ()


@dataclass(frozen=True)
class UserPreferences:
    desired_quality: TrafficClass = field(default_factory=lambda: TrafficClass.parse("BestEffort"))
    acceptable_quality: TrafficClass = field(default_factory=lambda: TrafficClass.parse("BestEffort"))
    time_budget_constraints: str = ""


@dataclass(frozen=True)
class TerminalProfile:
    hardware: HardwareProfile = field(default_factory=HardwareProfile)
    connectivity: ConnectivityProfile = field(default_factory=ConnectivityProfile)
    software: SoftwareProfile = field(default_factory=SoftwareProfile)
    user_preferences: UserPreferences = field(default_factory=UserPreferences)

    def __post_init__(self) -> None:
        conn = self.connectivity
        if conn.current_interface not in conn.supported_interfaces:
            raise ValueError(f"current interface {conn.current_interface!r} is not in supported_interfaces")
        prefs = self.user_preferences
        if prefs.acceptable_quality.rank > prefs.desired_quality.rank:
            raise ValueError("acceptable quality ranks above desired quality")


@dataclass(frozen=True)
class TransportQosProfile:
    transport_service_class: TrafficClass
    requestor_name: str
    max_priority: int
    media_type: MediaType
    ul_subscribed_bandwidth: float
    dl_subscribed_bandwidth: float

    def __post_init__(self) -> None:
        if self.ul_subscribed_bandwidth < 0 or self.dl_subscribed_bandwidth < 0:
            raise ValueError("subscribed bandwidths must be non-negative")
        if not 0 <= self.max_priority <= MAX_PRIORITY:
            raise ValueError(f"max_priority {self.max_priority} outside 0..{MAX_PRIORITY}")


@dataclass(frozen=True)
class GateSettings:
    gate_id: str
    allowed_destinations: tuple[str, ...] = ()
    ul_default_bandwidth: float = 0.0
    dl_default_bandwidth: float = 0.0
    open: bool = False
    privacy_indicator: bool = False


@dataclass(frozen=True)
class Subscription:
    """What the NASS knows about a subscriber before any attachment."""

    subscriber_id: str
    credentials: str
    qos_profile: TransportQosProfile
    gates: GateSettings
    logical_access_id: str = ""
    location: str = ""

    def __post_init__(self) -> None:
        q, g = self.qos_profile, self.gates
        if g.ul_default_bandwidth > q.ul_subscribed_bandwidth or g.dl_default_bandwidth > q.dl_subscribed_bandwidth:
            raise ValueError(f"{self.subscriber_id}: gate default bandwidth exceeds subscribed bandwidth")


@dataclass(frozen=True)
class AccessNetwork:
    """One access network: its address pool and where terminals hang off."""

    network_type: str
    realm: str
    pool_start: str
    pool_end: str
    node: str
    access_link: str
    racs_point_of_contact: str = "racs"

    def addresses(self) -> list[str]:
        lo = int(ipaddress.ip_address(self.pool_start))
        hi = int(ipaddress.ip_address(self.pool_end))
        if hi < lo:
            raise ValueError(f"{self.network_type}: empty pool {self.pool_start}-{self.pool_end}")
        return [str(ipaddress.ip_address(i)) for i in range(lo, hi + 1)]

    @classmethod
    def from_cidr(cls, network_type: str, realm: str, cidr: str, node: str, access_link: str, **kw) -> AccessNetwork:
        net = ipaddress.ip_network(cidr, strict=False)
        hosts = list(net.hosts())
        return cls(network_type, realm, str(hosts[0]), str(hosts[-1]), node, access_link, **kw)


@dataclass
class AccessSessionRecord:
    subscriber_id: str
    ip: str
    realm: str
    logical_access_id: str
    physical_access_id: str
    access_network_type: str
    racs_point_of_contact: str
    location: str
    terminal: TerminalProfile
    qos_profile: TransportQosProfile
    initial_gates: GateSettings
    attached_at: float
    node: str
    access_link: str
    active: bool = True

    def summary(self) -> dict:
        return {
            "subscriber_id": self.subscriber_id,
            "ip": self.ip,
            "realm": self.realm,
            "logical_access_id": self.logical_access_id,
            "physical_access_id": self.physical_access_id,
            "access_network_type": self.access_network_type,
            "racs_point_of_contact": self.racs_point_of_contact,
            "location": self.location,
            "node": self.node,
            "access_link": self.access_link,
            "privacy_indicator": self.initial_gates.privacy_indicator,
        }


@dataclass(frozen=True)
class TransportProfileView:
    qos_profile: TransportQosProfile
    gates: GateSettings
    summary: dict
    record: AccessSessionRecord


@dataclass(frozen=True)
class LocationEvent:
    time_ms: float
    subscriber_id: str
    physical_access_id: str
    location: str


class _Pool:
    def __init__(self, addresses: list[str]) -> None:
        self.size = len(addresses)
        self._order = {a: i for i, a in enumerate(addresses)}
        self._addresses = addresses
        self._free = list(range(len(addresses)))
        heapq.heapify(self._free)

    def take(self) -> Optional[str]:
        if not self._free:
            return None
        return self._addresses[heapq.heappop(self._free)]

    def give_back(self, address: str) -> None:
        heapq.heappush(self._free, self._order[address])

    @property
    def free(self) -> int:
        return len(self._free)


class Nass:
    def __init__(
        self,
        networks: list[AccessNetwork] = (),
        subscriptions: list[Subscription] = (),
        clock: Callable[[], float] = lambda: 0.0,
    ) -> None:
        self.clock = clock
        self.networks: dict[str, AccessNetwork] = {}
        self._pools: dict[str, _Pool] = {}
        self.subscriptions: dict[str, Subscription] = {}
        self.records: list[AccessSessionRecord] = []
        self._by_ip: dict[tuple[str, str], AccessSessionRecord] = {}
        self.location_log: list[LocationEvent] = []
        self._detach_listeners: list[Callable[[AccessSessionRecord], None]] = []
        self._attach_listeners: list[Callable[[AccessSessionRecord], None]] = []
        for net in networks:
            self.add_network(net)
        for sub in subscriptions:
            self.add_subscription(sub)

    def add_network(self, net: AccessNetwork) -> None:
        self.networks[net.network_type] = net
        self._pools[net.network_type] = _Pool(net.addresses())

    def add_subscription(self, sub: Subscription) -> None:
        self.subscriptions[sub.subscriber_id] = sub

    def on_attach(self, listener: Callable[[AccessSessionRecord], None]) -> None:
        self._attach_listeners.append(listener)

    def on_detach(self, listener: Callable[[AccessSessionRecord], None]) -> None:
        self._detach_listeners.append(listener)

    def pool_free(self, network_type: str) -> int:
        return self._pools[network_type].free

    def pool_size(self, network_type: str) -> int:
        return self._pools[network_type].size

    def allocated(self, network_type: str) -> int:
        return sum(1 for r in self.active_records() if r.access_network_type == network_type)

    def active_records(self) -> list[AccessSessionRecord]:
        return [r for r in self.records if r.active]

    def attach(
        self,
        subscriber: str,
        access_network_type: str,
        physical_access_id: str,
        terminal: TerminalProfile,
        credentials: str,
    ) -> AccessSessionRecord:
        sub = self.subscriptions.get(subscriber)
        if sub is None:
            raise UnknownSubscriber(subscriber)
        if sub.credentials != credentials:
            raise AuthenticationFailed(subscriber)
        net = self.networks.get(access_network_type)
        if net is None:
            raise NassError(f"unknown access network {access_network_type!r}")
        for rec in self.active_records():
            if rec.subscriber_id == subscriber and rec.physical_access_id == physical_access_id:
                raise AlreadyAttached(f"{subscriber} on {physical_access_id}")
        ip = self._pools[access_network_type].take()
        if ip is None:
            raise AddressPoolExhausted(access_network_type)
        gates = replace(sub.gates, open=False)
        in_use = {r.initial_gates.gate_id for r in self.active_records()}
        if gates.gate_id in in_use:
            # second attachment of the same subscription needs its own gate
            gates = replace(gates, gate_id=f"{gates.gate_id}@{physical_access_id}")
        record = AccessSessionRecord(
            subscriber_id=subscriber,
            ip=ip,
            realm=net.realm,
            logical_access_id=sub.logical_access_id or f"{access_network_type}:{physical_access_id}",
            physical_access_id=physical_access_id,
            access_network_type=access_network_type,
            racs_point_of_contact=net.racs_point_of_contact,
            location=sub.location,
            terminal=terminal,
            qos_profile=sub.qos_profile,
            initial_gates=gates,
            attached_at=self.clock(),
            node=net.node,
            access_link=net.access_link,
        )
        self.records.append(record)
        self._by_ip[(net.realm, ip)] = record
        logger.debug("attach %s -> %s", subscriber, ip)
        for listener in self._attach_listeners:
            listener(record)
        return record

    def detach(self, record: AccessSessionRecord) -> None:
        if not record.active:
            raise NotAttached(record.subscriber_id)
        record.active = False
        del self._by_ip[(record.realm, record.ip)]
        self._pools[record.access_network_type].give_back(record.ip)
        for listener in self._detach_listeners:
            listener(record)

    def find(self, subscriber: str, physical_access_id: Optional[str] = None) -> AccessSessionRecord:
        matches = [
            r
            for r in self.active_records()
            if r.subscriber_id == subscriber and (physical_access_id is None or r.physical_access_id == physical_access_id)
        ]
        if not matches:
            raise NotAttached(subscriber)
        if len(matches) > 1:
            raise AmbiguousKey(subscriber, matches)
        return matches[0]

    def record_for_ip(self, ip: str) -> Optional[AccessSessionRecord]:
        for (realm, addr), rec in self._by_ip.items():
            if addr == ip:
                return rec
        return None

    def lookup_transport_profile(self, key: str) -> TransportProfileView:
        """Read-only lookup by allocated address or subscriber id."""
        record = self.record_for_ip(key)
        if record is None:
            matches = [r for r in self.active_records() if r.subscriber_id == key]
            if not matches:
                raise NoActiveSession(key)
            if len(matches) > 1:
                raise AmbiguousKey(key, matches)
            record = matches[0]
        return TransportProfileView(record.qos_profile, record.initial_gates, record.summary(), record)

    def update_location(self, record: AccessSessionRecord, new_location: str) -> AccessSessionRecord:
        if not record.active:
            raise NotAttached(record.subscriber_id)
        record.location = new_location
        self.location_log.append(
            LocationEvent(self.clock(), record.subscriber_id, record.physical_access_id, new_location)
        )
        return record

    def check_invariants(self) -> None:
        seen: set[tuple[str, str]] = set()
        for rec in self.active_records():
            key = (rec.realm, rec.ip)
            assert key not in seen, f"duplicate active address {key}"
            seen.add(key)
        for net_type, pool in self._pools.items():
            assert pool.free + self.allocated(net_type) == pool.size, f"address leak in {net_type}"

