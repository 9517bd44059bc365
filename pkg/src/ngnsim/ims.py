"""Service-layer session control with the user profile repository.

``Ims.initiate_session`` runs the whole quality assurance procedure for one
session: service authentication against the stored profile, derivation of
QoS requirements from the requested operation point, resource authorization
and reservation through RACS in the requested provisioning mode, selection
of the final operation point and policy installation.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from .model import EF_PRIORITY_FLOOR, MAX_PRIORITY, IdFactory, MediaType, QosParameters, TrafficClass
from .nass import AmbiguousKey, Nass, TransportQosProfile
from .nass import NotAttached as NassNotAttached
from .racs import (
    InitiationMode,
    InsufficientCapacity,
    PolicyForbidden,
    Racs,
    RacsError,
    ReservationRecord,
    ReservationState,
    ResourceRequest,
)
from .transport.events import EventLog
from .transport.topology import NoRoute

logger = logging.getLogger(__name__)

REGISTRATION_EXPIRY_MS = 3_600_000.0


class ImsError(Exception):
    def __init__(self, message: str = "", session: Optional[SessionRecord] = None):
        super().__init__(message)
        self.session = session


class UnknownSubscriber(ImsError):
    pass


class AuthenticationFailed(ImsError):
    pass


class NotRegistered(ImsError):
    pass


class NotAttached(ImsError):
    pass


class ServiceNotSubscribed(ImsError):
    pass


class ResourcesRejected(ImsError):
    pass


class NoFeasiblePoint(ImsError):
    pass


class SessionNotActive(ImsError):
    pass


class NotRenegotiable(ImsError):
    pass


class UnknownSession(ImsError):
    pass


@dataclass(frozen=True)
class ServiceAuthorization:
    allowed: bool = True
    max_class: TrafficClass = field(default_factory=lambda: TrafficClass.parse("EF"))
    max_priority: int = MAX_PRIORITY


@dataclass(frozen=True)
class ServiceProfile:
    subscriber_id: str
    credentials: str
    subscribed_services: tuple[str, ...] = ()
    authorizations: dict[str, ServiceAuthorization] = field(default_factory=dict)
    content_entitlements: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name, auth in self.authorizations.items():
            if not 0 <= auth.max_priority <= MAX_PRIORITY:
                raise ValueError(f"{self.subscriber_id}/{name}: max_priority outside 0..{MAX_PRIORITY}")

    def authorization(self, service: str) -> Optional[ServiceAuthorization]:
        if service not in self.subscribed_services:
            return None
        return self.authorizations.get(service, ServiceAuthorization())


@dataclass(frozen=True)
class ServiceDefinition:
    """A service and its operation points, best first."""

    name: str
    media_type: MediaType
    operation_points: tuple[QosParameters, ...]
    renegotiable: bool = True
    server: Optional[str] = None

    def __post_init__(self) -> None:
        points = self.operation_points
        if not points:
            raise ValueError(f"service {self.name}: no operation points")
        for a, b in zip(points, points[1:]):
            if (b.dl_bandwidth, b.ul_bandwidth) > (a.dl_bandwidth, a.ul_bandwidth):
                raise ValueError(f"service {self.name}: operation points must not increase in bandwidth")
        if len({p.traffic_pattern for p in points}) > 1:
            raise ValueError(f"service {self.name}: operation points disagree on traffic pattern")


class SessionState(str, enum.Enum):
    AUTHENTICATING = "authenticating"
    AUTHORIZING_RESOURCES = "authorizing_resources"
    RESERVING = "reserving"
    ACTIVE = "active"
    RENEGOTIATING = "renegotiating"
    TERMINATED = "terminated"
    REJECTED = "rejected"


_TRANSITIONS = {
    SessionState.AUTHENTICATING: {SessionState.AUTHORIZING_RESOURCES, SessionState.REJECTED},
    SessionState.AUTHORIZING_RESOURCES: {SessionState.RESERVING, SessionState.REJECTED},
    SessionState.RESERVING: {SessionState.ACTIVE, SessionState.AUTHORIZING_RESOURCES, SessionState.REJECTED},
    SessionState.ACTIVE: {SessionState.RENEGOTIATING, SessionState.TERMINATED},
    SessionState.RENEGOTIATING: {SessionState.ACTIVE, SessionState.TERMINATED},
    SessionState.TERMINATED: set(),
    SessionState.REJECTED: set(),
}


class Initiator(str, enum.Enum):
    END_USER = "end_user"
    NETWORK = "network"
    SERVICE = "service"


@dataclass
class SessionRecord:
    session_id: str
    subscriber_id: str
    service: str
    mode: InitiationMode
    destination: str
    state: SessionState = SessionState.AUTHENTICATING
    chosen_point: Optional[int] = None
    reservation: Optional[str] = None
    granted: Optional[QosParameters] = None
    src_ip: Optional[str] = None
    reject_stage: Optional[str] = None
    reason: Optional[str] = None
    created_at: float = 0.0
    activated_at: Optional[float] = None
    ended_at: Optional[float] = None
    history: list[tuple[float, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "subscriber_id": self.subscriber_id,
            "service": self.service,
            "mode": self.mode.value,
            "destination": self.destination,
            "state": self.state.value,
            "chosen_point": self.chosen_point,
            "reservation": self.reservation,
            "granted": self.granted.to_dict() if self.granted else None,
            "reject_stage": self.reject_stage,
            "reason": self.reason,
            "created_at_ms": self.created_at,
            "activated_at_ms": self.activated_at,
            "ended_at_ms": self.ended_at,
            "history": [[t, s] for t, s in self.history],
        }


@dataclass(frozen=True)
class Registration:
    subscriber_id: str
    expiry: float


def derive_qos_requirements(
    service: ServiceDefinition,
    point: int,
    profile: ServiceProfile,
    nass_profile: TransportQosProfile,
    ef_priority_floor: int = EF_PRIORITY_FLOOR,
) -> tuple[int, QosParameters]:
    """Clamp operation point ``point`` by the subscriber's authorization.

    Class and priority are downgraded in place. A point whose bandwidth does
    not fit the subscribed bandwidth is skipped for the next lower one;
    returns ``(index, parameters)`` of the point actually used.
    """
    points = service.operation_points
    if not 0 <= point < len(points):
        raise NoFeasiblePoint(f"{service.name}: no operation point {point}")
    auth = profile.authorization(service.name) or ServiceAuthorization()
    prio_cap = min(auth.max_priority, nass_profile.max_priority)
    for index in range(point, len(points)):
        p = points[index]
        if p.ul_bandwidth > nass_profile.ul_subscribed_bandwidth or p.dl_bandwidth > nass_profile.dl_subscribed_bandwidth:
            continue
        qos = p.clamp(max_class=auth.max_class, max_priority=prio_cap)
        return index, qos.with_ef_floor(ef_priority_floor)
    raise NoFeasiblePoint(f"{service.name}: no point from {point} fits the subscribed bandwidth")


def _bound_ok(required: Optional[float], granted: Optional[float]) -> bool:
    if required is None:
        return True
    return granted is not None and granted <= required


def satisfies(point: QosParameters, granted: QosParameters) -> bool:
    """Does ``granted`` meet every quantitative requirement of ``point``?

    Class and priority are settled by downgrading during authorization, so
    only bandwidths and delay/loss/jitter bounds take part.
    """
    return (
        point.ul_bandwidth <= granted.ul_bandwidth
        and point.dl_bandwidth <= granted.dl_bandwidth
        and _bound_ok(point.max_delay, granted.max_delay)
        and _bound_ok(point.max_loss, granted.max_loss)
        and _bound_ok(point.max_jitter, granted.max_jitter)
    )


def determine_operation_point(service: ServiceDefinition, granted: QosParameters) -> int:
    for index, point in enumerate(service.operation_points):
        if satisfies(point, granted):
            return index
    raise NoFeasiblePoint(f"{service.name}: grant below the last operation point")


class Ims:
    def __init__(
        self,
        profiles: dict[str, ServiceProfile],
        catalog: dict[str, ServiceDefinition],
        nass: Nass,
        racs: Racs,
        clock: Callable[[], float] = lambda: 0.0,
        log: Optional[EventLog] = None,
        ids: Optional[IdFactory] = None,
        registration_expiry_ms: float = REGISTRATION_EXPIRY_MS,
        ef_priority_floor: int = EF_PRIORITY_FLOOR,
    ) -> None:
        for profile in profiles.values():
            for name in profile.subscribed_services:
                if name not in catalog:
                    raise ValueError(f"{profile.subscriber_id} subscribes to unknown service {name}")
        self.profiles = profiles
        self.catalog = catalog
        self.nass = nass
        self.racs = racs
        self.clock = clock
        self.log = log if log is not None else racs.log
        self.ids = ids if ids is not None else racs.ids
        self.registration_expiry_ms = registration_expiry_ms
        self.ef_priority_floor = ef_priority_floor
        self.registrations: dict[str, Registration] = {}
        self.sessions: dict[str, SessionRecord] = {}
        self.on_active: list[Callable[[SessionRecord], None]] = []
        self.on_modified: list[Callable[[SessionRecord], None]] = []
        self.on_closed: list[Callable[[SessionRecord], None]] = []

    # -- registration -----------------------------------------------------------

    def register_user(self, subscriber: str, credentials: str) -> Registration:
        profile = self.profiles.get(subscriber)
        if profile is None:
            raise UnknownSubscriber(subscriber)
        if profile.credentials != credentials:
            self.log.record(self.clock(), "ims.register", None, None, subscriber=subscriber, result="auth_failed")
            raise AuthenticationFailed(subscriber)
        reg = Registration(subscriber, self.clock() + self.registration_expiry_ms)
        self.registrations[subscriber] = reg
        self.log.record(self.clock(), "ims.register", None, None, subscriber=subscriber, expiry=reg.expiry)
        return reg

    def is_registered(self, subscriber: str) -> bool:
        reg = self.registrations.get(subscriber)
        return reg is not None and self.clock() <= reg.expiry

    # -- state machine helpers ----------------------------------------------------

    def _move(self, session: SessionRecord, state: SessionState) -> None:
        if state is session.state:
            return
        if state not in _TRANSITIONS[session.state]:
            raise RuntimeError(f"illegal transition {session.state.value} -> {state.value}")
        session.state = state
        session.history.append((self.clock(), state.value))
        self.log.record(self.clock(), "ims.state", None, None, session=session.session_id, state=state.value)

    def _reject(self, session: SessionRecord, stage: str, error: ImsError) -> ImsError:
        session.reject_stage = stage
        session.reason = str(error) or type(error).__name__
        session.chosen_point = None
        session.granted = None
        session.ended_at = self.clock()
        self._move(session, SessionState.REJECTED)
        self.log.record(
            self.clock(), "ims.reject", None, None,
            session=session.session_id, stage=stage, error=type(error).__name__, reason=session.reason,
        )
        error.session = session
        return error

    def _session(self, session_id: str) -> SessionRecord:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise UnknownSession(session_id) from None

    # -- the procedure --------------------------------------------------------------

    def derive_qos_requirements(
        self, service: ServiceDefinition, point: int, profile: ServiceProfile, nass_profile: TransportQosProfile
    ) -> tuple[int, QosParameters]:
        return derive_qos_requirements(service, point, profile, nass_profile, self.ef_priority_floor)

    def determine_operation_point(self, service: ServiceDefinition, granted: QosParameters) -> int:
        return determine_operation_point(service, granted)

    def initiate_session(
        self,
        subscriber: str,
        service_name: str,
        requested_point: Optional[int] = None,
        mode: InitiationMode = InitiationMode.SCENARIO1,
        destination: Optional[str] = None,
        physical_access_id: Optional[str] = None,
        session_id: Optional[str] = None,
    ) -> SessionRecord:
        """Run session setup; on failure the session is kept as rejected and
        the stage-specific error is raised with ``error.session`` set."""
        mode = InitiationMode(mode)
        service = self.catalog.get(service_name)
        dest = destination or (service.server if service else None) or "-"
        session = SessionRecord(
            session_id=self.ids.claim(session_id) if session_id else self.ids.new("S"),
            subscriber_id=subscriber,
            service=service_name,
            mode=mode,
            destination=dest,
            created_at=self.clock(),
        )
        session.history.append((self.clock(), session.state.value))
        self.sessions[session.session_id] = session
        self.log.record(
            self.clock(), "ims.invite", None, None,
            session=session.session_id, subscriber=subscriber, service=service_name, mode=mode.value,
        )

        # step 1: service authentication from the profile repository
        if not self.is_registered(subscriber):
            raise self._reject(session, "authenticating", NotRegistered(subscriber))
        try:
            record = self.nass.find(subscriber, physical_access_id)
        except (NassNotAttached, AmbiguousKey) as exc:
            raise self._reject(session, "authenticating", NotAttached(str(exc))) from None
        session.src_ip = record.ip
        profile = self.profiles[subscriber]
        if service is None or profile.authorization(service_name) is None or not profile.authorization(service_name).allowed:
            raise self._reject(session, "authenticating", ServiceNotSubscribed(f"{subscriber}: {service_name}"))
        if dest == "-":
            raise self._reject(session, "authenticating", ResourcesRejected(f"{service_name}: no destination"))
        self.log.record(self.clock(), "ims.authorized", None, None, session=session.session_id)
        self._move(session, SessionState.AUTHORIZING_RESOURCES)

        # steps 2-4: negotiation with resource control
        start = requested_point or 0
        if not 0 <= start < len(service.operation_points):
            raise self._reject(session, "authorizing_resources", NoFeasiblePoint(f"{service_name}: no point {start}"))
        last_error: Optional[ImsError] = None
        while start < len(service.operation_points):
            try:
                outcome = self._negotiate(session, service, profile, record, start)
            except _RetryLower as retry:
                last_error = ResourcesRejected(f"racs: {retry.cause}")
                start = retry.next_point
                self._move(session, SessionState.AUTHORIZING_RESOURCES)
                continue
            except ImsError as exc:
                raise self._reject(session, getattr(exc, "stage", session.state.value), exc) from None
            reservation, point = outcome
            break
        else:
            error = last_error or NoFeasiblePoint(f"{service_name}: no feasible operation point")
            raise self._reject(session, "reserving", error)

        try:
            self.racs.install(reservation, record.initial_gates)
        except Exception as exc:  # UnknownGate and friends
            self.racs.release(reservation.reservation_id)
            raise self._reject(session, "reserving", ResourcesRejected(f"racs: install failed: {exc}")) from None
        session.chosen_point = point
        session.reservation = reservation.reservation_id
        session.granted = reservation.granted
        session.activated_at = self.clock()
        self._move(session, SessionState.ACTIVE)
        for callback in self.on_active:
            callback(session)
        return session

    def _request(self, session: SessionRecord, qos: QosParameters, service: ServiceDefinition) -> ResourceRequest:
        return ResourceRequest(
            session_id=session.session_id,
            subscriber_id=session.subscriber_id,
            src=session.src_ip,
            dst=session.destination,
            qos=qos,
            mode=session.mode,
            media_type=service.media_type,
        )

    def _negotiate(self, session, service, profile, record, start) -> tuple[ReservationRecord, int]:
        racs = self.racs
        try:
            if session.mode is InitiationMode.SCENARIO3:
                # terminal reserves directly: raw operation point, profile-only clamp
                point = start
                request = self._request(session, service.operation_points[point], service)
                self._move(session, SessionState.RESERVING)
                try:
                    decision = racs.authorize_unauthorized(request)
                except PolicyForbidden as exc:
                    raise _stage(ResourcesRejected(f"racs: {exc}"), "racs")
                final = determine_operation_point(service, decision.granted)
                narrowed = decision.narrowed(service.operation_points[final])
                try:
                    reservation = racs.reserve(session.session_id, narrowed)
                except InsufficientCapacity as exc:
                    raise _RetryLower(final + 1, exc)
                return reservation, final

            point, qos = self.derive_qos_requirements(service, start, profile, record.qos_profile)
            request = self._request(session, qos, service)
            decision = racs.authorize(request)
            if not decision.admitted:
                raise _stage(ResourcesRejected(f"racs: {decision.reason}"), "racs")
            final = determine_operation_point(service, decision.granted)
            if final != point:
                final, qos = self.derive_qos_requirements(service, final, profile, record.qos_profile)
            narrowed = decision.narrowed(qos)
            self._move(session, SessionState.RESERVING)
            try:
                if session.mode is InitiationMode.SCENARIO2:
                    token = racs.issue_token(narrowed, session.session_id)
                    reservation = racs.reserve_with_token(token)
                else:
                    reservation = racs.reserve(session.session_id, narrowed)
            except InsufficientCapacity as exc:
                raise _RetryLower(final + 1, exc)
            return reservation, final
        except NoFeasiblePoint as exc:
            raise _stage(exc, session.state.value)
        except (NoRoute, RacsError) as exc:
            raise _stage(ResourcesRejected(f"racs: {type(exc).__name__}: {exc}"), "racs")

    # -- renegotiation and teardown ---------------------------------------------------

    def renegotiate(self, session_id: str, initiator: Initiator, new_point: int) -> SessionRecord:
        session = self._session(session_id)
        initiator = Initiator(initiator)
        if session.state is not SessionState.ACTIVE:
            raise SessionNotActive(session_id, session)
        service = self.catalog[session.service]
        if not service.renegotiable:
            raise NotRenegotiable(session.service, session)
        self.log.record(
            self.clock(), "ims.renegotiate", None, None,
            session=session_id, initiator=initiator.value, point=new_point,
        )
        self._move(session, SessionState.RENEGOTIATING)
        try:
            record = self.nass.record_for_ip(session.src_ip)
            if record is None or record.subscriber_id != session.subscriber_id:
                raise NassNotAttached(session.subscriber_id)
            profile = self.profiles[session.subscriber_id]
            point, qos = self.derive_qos_requirements(service, new_point, profile, record.qos_profile)
            decision = self.racs.authorize(self._request(session, qos, service))
            if not decision.admitted:
                raise ResourcesRejected(f"racs: {decision.reason}")
            final = determine_operation_point(service, decision.granted)
            if final != point:
                final, qos = self.derive_qos_requirements(service, final, profile, record.qos_profile)
            granted = decision.narrowed(qos).granted
            new_res = self.racs.modify_reservation(session.reservation, granted, record.initial_gates)
        except (ImsError, RacsError, NoRoute, NassNotAttached, AmbiguousKey) as exc:
            self._move(session, SessionState.ACTIVE)
            self.log.record(
                self.clock(), "ims.renegotiate_failed", None, None,
                session=session_id, error=type(exc).__name__,
            )
            if isinstance(exc, ResourcesRejected):
                exc.session = session
                raise
            raise ResourcesRejected(f"{type(exc).__name__}: {exc}", session) from None
        session.reservation = new_res.reservation_id
        session.chosen_point = final
        session.granted = new_res.granted
        self._move(session, SessionState.ACTIVE)
        for callback in self.on_modified:
            callback(session)
        return session

    def terminate_session(self, session_id: str, reason: str = "") -> SessionRecord:
        session = self._session(session_id)
        if session.state in (SessionState.TERMINATED, SessionState.REJECTED):
            return session
        if session.reservation is not None:
            self.racs.release(session.reservation)
        session.reservation = None
        if reason:
            session.reason = reason
        session.ended_at = self.clock()
        self._move(session, SessionState.TERMINATED)
        for callback in self.on_closed:
            callback(session)
        return session

    def reconcile_released(self) -> list[SessionRecord]:
        """Terminate active sessions whose reservation was released under them."""
        closed = []
        for session in self.sessions.values():
            if session.state in (SessionState.ACTIVE, SessionState.RENEGOTIATING) and session.reservation:
                res = self.racs.reservations.get(session.reservation)
                if res is not None and res.state is ReservationState.RELEASED:
                    session.reservation = None
                    closed.append(self.terminate_session(session.session_id, reason="detached"))
        return closed

    def check_invariants(self) -> None:
        enforcement = self.racs.enforcement
        for s in self.sessions.values():
            if s.state in (SessionState.ACTIVE, SessionState.RENEGOTIATING):
                assert s.reservation is not None and s.chosen_point is not None, s
                res = self.racs.reservations[s.reservation]
                assert res.state is ReservationState.INSTALLED, (s.session_id, res.state)
                live = [r for r in self.racs.active_reservations() if r.session_id == s.session_id]
                assert len(live) == 1, (s.session_id, live)
                if enforcement is not None:
                    assert res.policy.policy_id in enforcement.policies
            else:
                assert s.reservation is None or s.state is SessionState.AUTHENTICATING, s
                assert not [r for r in self.racs.active_reservations() if r.session_id == s.session_id], s.session_id


class _RetryLower(Exception):
    def __init__(self, next_point: int, cause: Exception):
        self.next_point = next_point
        self.cause = cause


def _stage(error: ImsError, stage: str) -> ImsError:
    error.stage = stage
    return error
