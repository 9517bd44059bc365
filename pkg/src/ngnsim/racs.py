"""Resource and admission control.

The policy decision function (``authorize``) clamps a request by the
subscriber's transport profile and runs it through the operator rule
repository. Transport resource control (``reserve``) books capacity on
every link of the route, all or nothing, against per-class budgets kept in
a :class:`CapacityLedger`. Accepted reservations are turned into traffic
policies and pushed to the enforcement points.

Authorization tokens cover the "terminal reserves after prior
authorization" provisioning flow; ``reserve_unauthorized`` covers terminals
that reserve directly, which the operator must allow explicitly.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence, Union

from .model import (
    EF_PRIORITY_FLOOR,
    ClassKind,
    IdFactory,
    MediaType,
    QosParameters,
    TrafficClass,
    class_to_codepoint,
)
from .nass import AmbiguousKey, GateSettings, Nass, NoActiveSession
from .transport.enforcement import Classifier, PolicerSpec, TrafficPolicy, policer_burst
from .transport.events import EventLog
from .transport.topology import Hop, NoRoute, Topology, opposite

logger = logging.getLogger(__name__)

TOKEN_LIFETIME_MS = 30_000.0


class InitiationMode(str, enum.Enum):
    """Who drives resource reservation for a session.

    * ``scenario1``: session control requests resources on the user's behalf.
    * ``scenario2``: session control authorizes, the terminal reserves with a token.
    * ``scenario3``: the terminal reserves directly, no prior authorization.
    """

    SCENARIO1 = "scenario1"
    SCENARIO2 = "scenario2"
    SCENARIO3 = "scenario3"


class RacsError(Exception):
    pass


class NoActiveAttachment(RacsError):
    pass


class InsufficientCapacity(RacsError):
    def __init__(self, link_id: str, direction: str = "", group: str = ""):
        self.link_id = link_id
        self.direction = direction
        self.group = group
        super().__init__(f"insufficient {group} capacity on {link_id}/{direction}")


class UnknownReservation(RacsError):
    pass


class WrongMode(RacsError):
    pass


class PolicyForbidden(RacsError):
    pass


class NotAdmitted(RacsError):
    pass


class TokenError(RacsError):
    pass


class TokenExpired(TokenError):
    pass


class TokenReused(TokenError):
    pass


class TokenRevoked(TokenReused):
    """The token was superseded by a newer one for the same session."""


# -- policy repository ------------------------------------------------------


@dataclass(frozen=True)
class RuleMatch:
    """Conjunction of optional constraints; ``None`` matches anything.

    ``traffic_class`` compares the class kind (AF drop precedence ignored).
    ``bandwidth`` ranges apply to the larger of the two directions.
    """

    requestor_name: Optional[str] = None
    media_type: Optional[MediaType] = None
    traffic_class: Optional[ClassKind] = None
    access_network_type: Optional[str] = None
    priority: Optional[tuple[int, int]] = None
    bandwidth: Optional[tuple[float, float]] = None

    def matches(self, ctx: MatchContext) -> bool:
        if self.requestor_name is not None and self.requestor_name != ctx.requestor_name:
            return False
        if self.media_type is not None and self.media_type != ctx.media_type:
            return False
        if self.traffic_class is not None and self.traffic_class != ctx.traffic_class.kind:
            return False
        if self.access_network_type is not None and self.access_network_type != ctx.access_network_type:
            return False
        if self.priority is not None and not self.priority[0] <= ctx.priority <= self.priority[1]:
            return False
        if self.bandwidth is not None and not self.bandwidth[0] <= ctx.bandwidth <= self.bandwidth[1]:
            return False
        return True


@dataclass(frozen=True)
class Ceiling:
    max_class: Optional[TrafficClass] = None
    max_priority: Optional[int] = None
    max_ul: Optional[float] = None
    max_dl: Optional[float] = None

    @classmethod
    def of(cls, qos: QosParameters) -> Ceiling:
        return cls(qos.traffic_class, qos.priority, qos.ul_bandwidth, qos.dl_bandwidth)

    def apply(self, qos: QosParameters) -> QosParameters:
        return qos.clamp(
            max_class=self.max_class, max_priority=self.max_priority, max_ul=self.max_ul, max_dl=self.max_dl
        )


class Action(str, enum.Enum):
    ADMIT = "admit"
    DENY = "deny"
    CLAMP = "clamp"


@dataclass(frozen=True)
class PolicyRule:
    rule_id: str
    match: RuleMatch
    action: Action
    precedence: int
    ceiling: Optional[Ceiling] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "action", Action(self.action))
        if self.action is Action.CLAMP and self.ceiling is None:
            raise ValueError(f"rule {self.rule_id}: clamp needs a ceiling")


class PolicyRepository:
    def __init__(self, rules: Iterable[PolicyRule] = ()) -> None:
        self._rules: list[PolicyRule] = []
        for rule in rules:
            self.add(rule)

    def add(self, rule: PolicyRule) -> None:
        if any(r.precedence == rule.precedence for r in self._rules):
            raise ValueError(f"precedence {rule.precedence} already used")
        if any(r.rule_id == rule.rule_id for r in self._rules):
            raise ValueError(f"duplicate rule id {rule.rule_id}")
        self._rules.append(rule)
        self._rules.sort(key=lambda r: r.precedence)

    @property
    def rules(self) -> list[PolicyRule]:
        return list(self._rules)

    def first_match(self, ctx: MatchContext) -> Optional[PolicyRule]:
        for rule in self._rules:
            if rule.match.matches(ctx):
                return rule
        return None

    def __len__(self) -> int:
        return len(self._rules)


# -- requests and decisions -------------------------------------------------


@dataclass(frozen=True)
class MatchContext:
    requestor_name: str
    media_type: MediaType
    traffic_class: TrafficClass
    access_network_type: str
    priority: int
    bandwidth: float


@dataclass(frozen=True)
class ResourceRequest:
    session_id: str
    subscriber_id: str
    src: str
    dst: str
    qos: QosParameters
    mode: InitiationMode = InitiationMode.SCENARIO1
    media_type: Optional[MediaType] = None


class Verdict(str, enum.Enum):
    ADMIT = "admit"
    MODIFY = "modify"
    REJECT = "reject"


@dataclass(frozen=True)
class PolicyDecision:
    verdict: Verdict
    request: ResourceRequest
    granted: Optional[QosParameters] = None
    reason: str = ""
    matched_rule: Optional[str] = None
    token: Optional[AuthToken] = None

    @property
    def admitted(self) -> bool:
        return self.verdict is not Verdict.REJECT

    def narrowed(self, qos: QosParameters) -> PolicyDecision:
        """Same decision with the grant shrunk to at most ``qos``."""
        if not self.admitted:
            raise NotAdmitted(self.reason)
        granted = self.granted.narrowed_to(qos)
        verdict = Verdict.MODIFY if granted.shrinks_any(self.request.qos) else Verdict.ADMIT
        return replace(self, granted=granted, verdict=verdict)

    def to_dict(self) -> dict:
        return {
            "session_id": self.request.session_id,
            "subscriber_id": self.request.subscriber_id,
            "mode": self.request.mode.value,
            "verdict": self.verdict.value,
            "reason": self.reason,
            "matched_rule": self.matched_rule,
            "requested": self.request.qos.to_dict(),
            "granted": self.granted.to_dict() if self.granted else None,
        }


@dataclass
class AuthToken:
    token_id: str
    session_id: str
    granted: QosParameters
    expiry: float
    decision: PolicyDecision
    used: bool = False
    revoked: bool = False

    def expired(self, now: float) -> bool:
        return now > self.expiry


# -- capacity ledger ----------------------------------------------------------


def _exact(value: float) -> Fraction:
    return Fraction(repr(float(value)))


def share_group(tc: TrafficClass) -> str:
    if tc.kind is ClassKind.EF:
        return "EF"
    if tc.kind.is_af:
        return "AF"
    return "BE"


@dataclass(frozen=True)
class Booking:
    link_id: str
    direction: str
    group: str
    bps: float


class CapacityLedger:
    """Booked bandwidth per (link, direction, class group), kept exact."""

    def __init__(self, topology: Topology) -> None:
        self.topology = topology
        self._booked: dict[tuple[str, str, str], Fraction] = {}

    def budget(self, link_id: str, direction: str, group: str) -> Fraction:
        link = self.topology.links[link_id]
        # via repr so a 0.3 share means exactly 3/10
        return _exact(link.shares.get(group, 0.0)) * _exact(link.capacity(direction))

    def booked(self, link_id: str, direction: str, group: str) -> float:
        return float(self._booked.get((link_id, direction, group), 0))

    def _first_violation(
        self, bookings: Sequence[Booking], credit: Sequence[Booking] = ()
    ) -> Optional[Booking]:
        delta: dict[tuple[str, str, str], Fraction] = {}
        for b in credit:
            key = (b.link_id, b.direction, b.group)
            delta[key] = delta.get(key, Fraction(0)) - _exact(b.bps)
        for b in bookings:
            key = (b.link_id, b.direction, b.group)
            delta[key] = delta.get(key, Fraction(0)) + _exact(b.bps)
        for b in bookings:
            key = (b.link_id, b.direction, b.group)
            if self._booked.get(key, Fraction(0)) + delta[key] > self.budget(*key):
                return b
        return None

    def fits(self, bookings: Sequence[Booking], credit: Sequence[Booking] = ()) -> bool:
        return self._first_violation(bookings, credit) is None

    def _apply(self, bookings: Iterable[Booking], sign: int) -> None:
        for b in bookings:
            key = (b.link_id, b.direction, b.group)
            value = self._booked.get(key, Fraction(0)) + sign * _exact(b.bps)
            if value:
                self._booked[key] = value
            else:
                self._booked.pop(key, None)

    def book(self, bookings: Sequence[Booking]) -> None:
        """All-or-nothing booking; raises :class:`InsufficientCapacity`."""
        bad = self._first_violation(bookings)
        if bad is not None:
            raise InsufficientCapacity(bad.link_id, bad.direction, bad.group)
        self._apply(bookings, +1)

    def release(self, bookings: Sequence[Booking]) -> None:
        self._apply(bookings, -1)

    def swap(self, old: Sequence[Booking], new: Sequence[Booking]) -> None:
        """Replace ``old`` by ``new`` in one step, judged with ``old`` credited."""
        bad = self._first_violation(new, credit=old)
        if bad is not None:
            raise InsufficientCapacity(bad.link_id, bad.direction, bad.group)
        self._apply(old, -1)
        self._apply(new, +1)

    def violations(self) -> list[tuple[str, str, str]]:
        return [key for key, value in self._booked.items() if value > self.budget(*key) or value < 0]

    def is_zero(self) -> bool:
        return not self._booked

    def snapshot(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for (link_id, direction, group), value in sorted(self._booked.items()):
            out.setdefault(f"{link_id}/{direction}", {})[group] = float(value)
        return out


# -- reservations -------------------------------------------------------------


class ReservationState(str, enum.Enum):
    RESERVED = "reserved"
    INSTALLED = "installed"
    RELEASED = "released"


@dataclass
class ReservationRecord:
    reservation_id: str
    session_id: str
    subscriber_id: str
    src: str
    dst: str
    hops: list[Hop]
    bookings: list[Booking]
    granted: QosParameters
    media_type: Optional[MediaType] = None
    state: ReservationState = ReservationState.RESERVED
    flagged: bool = False
    policy: Optional[TrafficPolicy] = None
    replaced_by: Optional[str] = None

    @property
    def path(self) -> list[str]:
        return [link_id for link_id, _ in self.hops]

    def to_dict(self) -> dict:
        return {
            "reservation_id": self.reservation_id,
            "session_id": self.session_id,
            "path": self.path,
            "state": self.state.value,
            "granted": self.granted.to_dict(),
            "bookings": [
                {"link": b.link_id, "dir": b.direction, "group": b.group, "bps": b.bps} for b in self.bookings
            ],
        }


def derive_traffic_policy(
    reservation: ReservationRecord, granted: QosParameters, gates: GateSettings
) -> TrafficPolicy:
    """Map a reservation onto marking, policing and gate state."""
    if reservation.state is not ReservationState.RESERVED:
        raise RacsError(f"{reservation.reservation_id} is {reservation.state.value}, not reserved")
    tc = granted.traffic_class
    if tc.kind.is_best_effort:
        ul = dl = None
    else:
        ul = PolicerSpec(granted.ul_bandwidth, policer_burst(granted.ul_bandwidth))
        dl = PolicerSpec(granted.dl_bandwidth, policer_burst(granted.dl_bandwidth))
    destinations = tuple(gates.allowed_destinations)
    if reservation.dst not in destinations:
        destinations += (reservation.dst,)
    return TrafficPolicy(
        policy_id=f"P-{reservation.reservation_id}",
        gate_id=gates.gate_id,
        reservation_id=reservation.reservation_id,
        classifier=Classifier(src=reservation.src, dst=reservation.dst, media=reservation.media_type),
        traffic_class=tc,
        marking=class_to_codepoint(tc),
        ul_policer=ul,
        dl_policer=dl,
        gate_open=True,
        allowed_destinations=destinations,
        meter_id=f"M-{reservation.reservation_id}",
        path=tuple(reservation.hops),
    )


PathHint = Union[None, tuple[str, str], Sequence[Hop]]


class Racs:
    """Policy decision function plus per-segment resource control.

    ``enforcement`` is anything with ``install_policy``/``remove_policy``
    (normally :class:`ngnsim.transport.Network`); ``resolve`` maps a
    destination address to a topology node.
    """

    def __init__(
        self,
        topology: Topology,
        nass: Nass,
        enforcement=None,
        rules: Iterable[PolicyRule] = (),
        allow_unauthorized_qos: bool = False,
        clock: Callable[[], float] = lambda: 0.0,
        log: Optional[EventLog] = None,
        ids: Optional[IdFactory] = None,
        ef_priority_floor: int = EF_PRIORITY_FLOOR,
        token_lifetime_ms: float = TOKEN_LIFETIME_MS,
        resolve: Optional[Callable[[str], Optional[str]]] = None,
    ) -> None:
        self.topology = topology
        self.nass = nass
        self.enforcement = enforcement
        self.repository = PolicyRepository(rules)
        self.allow_unauthorized_qos = allow_unauthorized_qos
        self.clock = clock
        self.log = log if log is not None else EventLog()
        self.ids = ids if ids is not None else IdFactory()
        self.ef_priority_floor = ef_priority_floor
        self.token_lifetime_ms = token_lifetime_ms
        self._resolve = resolve
        self.ledger = CapacityLedger(topology)
        self.reservations: dict[str, ReservationRecord] = {}
        self.tokens: dict[str, AuthToken] = {}
        self._session_tokens: dict[str, str] = {}
        self.decisions: list[PolicyDecision] = []
        nass.on_detach(self._flag_for_subscriber)

    # -- decision -----------------------------------------------------------

    def _profile(self, request: ResourceRequest):
        try:
            view = self.nass.lookup_transport_profile(request.src)
        except (NoActiveSession, AmbiguousKey) as exc:
            raise NoActiveAttachment(str(exc)) from None
        if view.record.subscriber_id != request.subscriber_id:
            raise NoActiveAttachment(f"{request.src} is not attached for {request.subscriber_id}")
        return view

    def _nass_clamp(self, request: ResourceRequest, view) -> QosParameters:
        profile = view.qos_profile
        clamped = request.qos.clamp(
            max_priority=profile.max_priority,
            max_ul=profile.ul_subscribed_bandwidth,
            max_dl=profile.dl_subscribed_bandwidth,
        )
        return clamped.with_ef_floor(self.ef_priority_floor)

    def match_context(self, request: ResourceRequest, qos: QosParameters, view) -> MatchContext:
        return MatchContext(
            requestor_name=view.qos_profile.requestor_name,
            media_type=request.media_type or view.qos_profile.media_type,
            traffic_class=qos.traffic_class,
            access_network_type=view.record.access_network_type,
            priority=qos.priority,
            bandwidth=max(qos.ul_bandwidth, qos.dl_bandwidth),
        )

    def _verdict(self, request: ResourceRequest, granted: QosParameters, **kw) -> PolicyDecision:
        verdict = Verdict.MODIFY if granted.shrinks_any(request.qos) else Verdict.ADMIT
        return PolicyDecision(verdict, request, granted=granted, **kw)

    def _log_request(self, request: ResourceRequest, op: str) -> None:
        self.log.record(
            self.clock(), "racs.request", None, None,
            session=request.session_id, subscriber=request.subscriber_id, mode=request.mode.value, op=op,
        )

    def _log_decision(self, decision: PolicyDecision) -> None:
        self.decisions.append(decision)
        self.log.record(
            self.clock(), "racs.decision", None, None,
            session=decision.request.session_id, verdict=decision.verdict.value,
            rule=decision.matched_rule or "-", reason=decision.reason or "-",
        )

    def authorize(self, request: ResourceRequest) -> PolicyDecision:
        """Choose the service policy for ``request`` and emit a verdict."""
        self._log_request(request, "authorize")
        view = self._profile(request)
        clamped = self._nass_clamp(request, view)
        rule = self.repository.first_match(self.match_context(request, clamped, view))
        if rule is None:
            decision = PolicyDecision(Verdict.REJECT, request, reason="default-deny")
        elif rule.action is Action.DENY:
            decision = PolicyDecision(Verdict.REJECT, request, reason=f"rule:{rule.rule_id}", matched_rule=rule.rule_id)
        else:
            granted = rule.ceiling.apply(clamped) if rule.action is Action.CLAMP else clamped
            granted = granted.with_ef_floor(self.ef_priority_floor)
            decision = self._verdict(request, granted, matched_rule=rule.rule_id)
        self._log_decision(decision)
        return decision

    # -- reservation ----------------------------------------------------------

    def resolve_node(self, address: str) -> Optional[str]:
        if self._resolve is not None:
            node = self._resolve(address)
            if node is not None:
                return node
        record = self.nass.record_for_ip(address)
        if record is not None:
            return record.node
        return address if address in self.topology._adj else None

    def route_for(self, request: ResourceRequest, hint: PathHint = None) -> list[Hop]:
        if hint is not None and len(hint) and not isinstance(hint[0], str):
            return [tuple(h) for h in hint]
        if hint is not None:
            src_node, dst_node = hint
        else:
            src_node, dst_node = self.resolve_node(request.src), self.resolve_node(request.dst)
        if src_node is None or dst_node is None:
            raise NoRoute(f"{request.src} -> {request.dst}")
        return self.topology.route(src_node, dst_node)

    @staticmethod
    def bookings_for(hops: Sequence[Hop], qos: QosParameters) -> list[Booking]:
        group = share_group(qos.traffic_class)
        if group == "BE":
            return []
        out: list[Booking] = []
        for link_id, direction in hops:
            if qos.ul_bandwidth:
                out.append(Booking(link_id, direction, group, qos.ul_bandwidth))
            if qos.dl_bandwidth:
                out.append(Booking(link_id, opposite(direction), group, qos.dl_bandwidth))
        return out

    def reserve(self, session_id: str, decision: PolicyDecision, path: PathHint = None) -> ReservationRecord:
        if not decision.admitted:
            raise NotAdmitted(decision.reason)
        request = decision.request
        hops = self.route_for(request, path)
        bookings = self.bookings_for(hops, decision.granted)
        try:
            self.ledger.book(bookings)
        except InsufficientCapacity as exc:
            self.log.record(
                self.clock(), "racs.reserve_failed", None, exc.link_id,
                session=session_id, dir=exc.direction, group=exc.group,
            )
            raise
        record = ReservationRecord(
            reservation_id=self.ids.new("R"),
            session_id=session_id,
            subscriber_id=request.subscriber_id,
            src=request.src,
            dst=request.dst,
            hops=list(hops),
            bookings=bookings,
            granted=decision.granted,
            media_type=request.media_type,
        )
        self.reservations[record.reservation_id] = record
        self.log.record(
            self.clock(), "racs.reserve", None, None,
            session=session_id, reservation=record.reservation_id, path=",".join(record.path) or "-",
            cls=str(decision.granted.traffic_class), ul=decision.granted.ul_bandwidth, dl=decision.granted.dl_bandwidth,
        )
        return record

    def _get(self, reservation_id: str) -> ReservationRecord:
        try:
            return self.reservations[reservation_id]
        except KeyError:
            raise UnknownReservation(reservation_id) from None

    def derive_traffic_policy(
        self, reservation: ReservationRecord, granted: QosParameters, gates: GateSettings
    ) -> TrafficPolicy:
        return derive_traffic_policy(reservation, granted, gates)

    def install_policy(self, policy: TrafficPolicy) -> str:
        reservation = self._get(policy.reservation_id)
        if reservation.state is not ReservationState.RESERVED:
            raise RacsError(f"{reservation.reservation_id} is {reservation.state.value}")
        handle = self.enforcement.install_policy(policy)
        reservation.policy = policy
        reservation.state = ReservationState.INSTALLED
        return handle

    def install(self, reservation: ReservationRecord, gates: GateSettings) -> TrafficPolicy:
        policy = self.derive_traffic_policy(reservation, reservation.granted, gates)
        self.install_policy(policy)
        return policy

    def release(self, reservation_id: str) -> ReservationRecord:
        """Free bookings and enforcement state; releasing twice is a no-op."""
        record = self._get(reservation_id)
        if record.state is ReservationState.RELEASED:
            return record
        self.ledger.release(record.bookings)
        if record.policy is not None and record.policy.policy_id in getattr(self.enforcement, "policies", {}):
            self.enforcement.remove_policy(record.policy.policy_id)
        record.state = ReservationState.RELEASED
        record.flagged = False
        self.log.record(
            self.clock(), "racs.release", None, None, session=record.session_id, reservation=reservation_id
        )
        return record

    def modify_reservation(
        self, reservation_id: str, granted: QosParameters, gates: Optional[GateSettings] = None
    ) -> ReservationRecord:
        """Swap an existing reservation for one with ``granted`` parameters.

        The ledger swap is atomic; when the old reservation carried a policy
        the new policy is installed before the old one is removed.
        """
        old = self._get(reservation_id)
        if old.state is ReservationState.RELEASED:
            raise RacsError(f"{reservation_id} already released")
        bookings = self.bookings_for(old.hops, granted)
        self.ledger.swap(old.bookings, bookings)
        new = ReservationRecord(
            reservation_id=self.ids.new("R"),
            session_id=old.session_id,
            subscriber_id=old.subscriber_id,
            src=old.src,
            dst=old.dst,
            hops=list(old.hops),
            bookings=bookings,
            granted=granted,
            media_type=old.media_type,
        )
        self.reservations[new.reservation_id] = new
        self.log.record(
            self.clock(), "racs.modify", None, None,
            session=old.session_id, reservation=new.reservation_id, replaces=reservation_id,
            cls=str(granted.traffic_class), ul=granted.ul_bandwidth, dl=granted.dl_bandwidth,
        )
        if old.policy is not None:
            gate_settings = gates or GateSettings(
                old.policy.gate_id,
                tuple(d for d in old.policy.allowed_destinations if d != old.dst),
            )
            self.install(new, gate_settings)
            self.enforcement.remove_policy(old.policy.policy_id)
        old.state = ReservationState.RELEASED
        old.replaced_by = new.reservation_id
        return new

    # -- provisioning variants ------------------------------------------------

    def issue_token(self, decision: PolicyDecision, session_id: str) -> AuthToken:
        if decision.request.mode is not InitiationMode.SCENARIO2:
            raise WrongMode(decision.request.mode.value)
        if not decision.admitted:
            raise NotAdmitted(decision.reason)
        previous = self._session_tokens.get(session_id)
        if previous is not None:
            self.tokens[previous].revoked = True
        token = AuthToken(
            token_id=self.ids.new("T"),
            session_id=session_id,
            granted=decision.granted,
            expiry=self.clock() + self.token_lifetime_ms,
            decision=decision,
        )
        self.tokens[token.token_id] = token
        self._session_tokens[session_id] = token.token_id
        self.log.record(self.clock(), "racs.token", None, None, session=session_id, token=token.token_id)
        return token

    def token_status(self, token_id: str) -> str:
        token = self.tokens[token_id]
        if token.used:
            return "used"
        if token.revoked:
            return "revoked"
        if token.expired(self.clock()):
            return "expired"
        return "pending"

    def reserve_with_token(self, token: AuthToken, path: PathHint = None) -> ReservationRecord:
        stored = self.tokens.get(token.token_id)
        if stored is None:
            raise TokenError(f"unknown token {token.token_id}")
        self._log_request(stored.decision.request, "reserve_with_token")
        if stored.used:
            raise TokenReused(stored.token_id)
        if stored.revoked:
            raise TokenRevoked(stored.token_id)
        if stored.expired(self.clock()):
            raise TokenExpired(stored.token_id)
        # consumed before booking: a failed reservation still burns the token
        stored.used = True
        decision = replace(stored.decision, granted=stored.granted, token=stored)
        return self.reserve(stored.session_id, decision, path)

    def authorize_unauthorized(self, request: ResourceRequest) -> PolicyDecision:
        """Profile-only clamp used for terminal-initiated reservations."""
        if request.mode is not InitiationMode.SCENARIO3:
            raise WrongMode(request.mode.value)
        self._log_request(request, "reserve_unauthorized")
        if not self.allow_unauthorized_qos:
            decision = PolicyDecision(Verdict.REJECT, request, reason="policy")
            self._log_decision(decision)
            raise PolicyForbidden("unauthorized QoS requests are disabled by operator policy")
        view = self._profile(request)
        decision = self._verdict(request, self._nass_clamp(request, view), reason="profile-only")
        self._log_decision(decision)
        return decision

    def reserve_unauthorized(self, request: ResourceRequest, path: PathHint = None) -> ReservationRecord:
        decision = self.authorize_unauthorized(request)
        return self.reserve(request.session_id, decision, path)

    # -- housekeeping ---------------------------------------------------------

    def _flag_for_subscriber(self, record) -> None:
        for res in self.reservations.values():
            if res.state is not ReservationState.RELEASED and res.src == record.ip and res.subscriber_id == record.subscriber_id:
                res.flagged = True
                self.log.record(
                    self.clock(), "racs.flag", None, None, session=res.session_id, reservation=res.reservation_id
                )

    def flagged(self) -> list[ReservationRecord]:
        return [r for r in self.reservations.values() if r.flagged]

    def release_flagged(self) -> list[ReservationRecord]:
        released = []
        for res in self.flagged():
            released.append(self.release(res.reservation_id))
        return released

    def active_reservations(self) -> list[ReservationRecord]:
        return [r for r in self.reservations.values() if r.state is not ReservationState.RELEASED]

    def check_invariants(self) -> None:
        assert not self.ledger.violations(), self.ledger.violations()
        expected = CapacityLedger(self.topology)
        for res in self.active_reservations():
            expected._apply(res.bookings, +1)
        assert expected._booked == self.ledger._booked, "ledger disagrees with live reservations"
