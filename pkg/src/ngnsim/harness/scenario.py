"""Scenario files: JSON documents parsed with source line numbers.

Validation collects every problem it can find instead of stopping at the
first one, so ``ngnsim validate`` can list them all.
"""

from __future__ import annotations

import json
import json.decoder
import json.scanner
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

from ..ims import Initiator, ServiceAuthorization, ServiceDefinition, ServiceProfile
from ..model import EF_PRIORITY_FLOOR, ClassKind, MediaType, QosParameters, TrafficClass
from ..nass import (
    AccessNetwork,
    ConnectivityProfile,
    GateSettings,
    HardwareProfile,
    SoftwareProfile,
    Subscription,
    TerminalProfile,
    TransportQosProfile,
    UserPreferences,
)
from ..qoe import Thresholds
from ..racs import Action, Ceiling, InitiationMode, PolicyRule, RuleMatch
from ..transport.topology import DEFAULT_QUEUE_BYTES, DEFAULT_SHARES, FWD, REV, Link, Topology

FORMAT_VERSION = 1

EVENT_TYPES = (
    "attach",
    "register",
    "initiate_session",
    "renegotiate",
    "terminate",
    "detach",
    "background_flow",
)


class ParseError(Exception):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass(frozen=True)
class Issue:
    line: Optional[int]
    where: str
    message: str

    def __str__(self) -> str:
        loc = f"line {self.line}: " if self.line else ""
        return f"{loc}{self.where}: {self.message}"


class ValidationErrors(Exception):
    def __init__(self, issues: list[Issue]):
        super().__init__("\n".join(str(i) for i in issues))
        self.issues = issues


# -- JSON with line numbers ----------------------------------------------------


class Node(dict):
    """A JSON object that remembers the line its opening brace sits on."""

    line: int = 0


def _line_of(text: str, index: int) -> int:
    return text.count("\n", 0, index) + 1


def _decoder() -> json.JSONDecoder:
    dec = json.JSONDecoder()

    def parse_object(s_and_end, strict, scan_once, object_hook, object_pairs_hook, memo=None):
        s, end = s_and_end
        pairs, new_end = json.decoder.JSONObject(s_and_end, strict, scan_once, None, list, memo)
        obj = Node(pairs)
        obj.line = _line_of(s, end - 1)
        return obj, new_end

    dec.parse_object = parse_object
    dec.scan_once = json.scanner.py_make_scanner(dec)
    return dec


def load_json(text: str) -> Any:
    try:
        return _decoder().decode(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None


# -- scenario model --------------------------------------------------------------


@dataclass(frozen=True)
class SubscriberSpec:
    profile: ServiceProfile
    subscription: Subscription
    terminal: TerminalProfile


@dataclass(frozen=True)
class Event:
    index: int
    at_ms: float
    type: str
    args: dict
    line: int = 0


@dataclass
class Scenario:
    name: str
    seed: int
    duration_ms: float
    topology: Topology
    access_networks: list[AccessNetwork]
    services: dict[str, ServiceDefinition]
    subscribers: dict[str, SubscriberSpec]
    rules: list[PolicyRule]
    allow_unauthorized_qos: bool = False
    ef_priority_floor: int = EF_PRIORITY_FLOOR
    thresholds: Thresholds = field(default_factory=Thresholds)
    event_log: bool = True
    events: list[Event] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        return {
            "nodes": len(self.topology.nodes),
            "links": len(self.topology.links),
            "access_networks": len(self.access_networks),
            "services": len(self.services),
            "subscribers": len(self.subscribers),
            "rules": len(self.rules),
            "events": len(self.events),
        }


ADMIT_ALL = PolicyRule("admit-all", RuleMatch(), Action.ADMIT, precedence=1_000_000)


class _Collector:
    def __init__(self) -> None:
        self.issues: list[Issue] = []

    def add(self, obj: Any, where: str, message: str) -> None:
        self.issues.append(Issue(getattr(obj, "line", None), where, message))

    def guard(self, obj: Any, where: str, build, *args, **kw):
        """Run a constructor; record its error instead of raising."""
        try:
            return build(*args, **kw)
        except (ValueError, TypeError, KeyError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
            self.add(obj, where, f"{type(exc).__name__}: {msg}" if isinstance(exc, KeyError) else str(msg))
            return None


def _obj(value: Any, issues: _Collector, where: str, parent: Any = None) -> Node:
    if isinstance(value, dict):
        return value
    if value is not None:
        issues.add(parent, where, "expected an object")
    return Node()


def _list(value: Any, issues: _Collector, where: str, parent: Any = None) -> list:
    if isinstance(value, list):
        return value
    if value is not None:
        issues.add(parent, where, "expected a list")
    return []


def _qos(d: dict) -> QosParameters:
    return QosParameters.from_dict(d)


def _terminal(d: dict) -> TerminalProfile:
    hw = HardwareProfile(**d.get("hardware", {}))
    conn_d = dict(d.get("connectivity", {}))
    if "supported_interfaces" in conn_d:
        conn_d["supported_interfaces"] = tuple(conn_d["supported_interfaces"])
    conn = ConnectivityProfile(**conn_d)
    sw_d = dict(d.get("software", {}))
    sw_d["supported_media_types"] = tuple(MediaType(m) for m in sw_d.get("supported_media_types", ()))
    sw_d["content_protection"] = tuple(sw_d.get("content_protection", ()))
    sw = SoftwareProfile(**sw_d)
    prefs_d = dict(d.get("user_preferences", {}))
    for key in ("desired_quality", "acceptable_quality"):
        if key in prefs_d:
            prefs_d[key] = TrafficClass.parse(prefs_d[key])
    return TerminalProfile(hw, conn, sw, UserPreferences(**prefs_d))


def _rule(d: dict) -> PolicyRule:
    m = d.get("match", {})
    match = RuleMatch(
        requestor_name=m.get("requestor_name"),
        media_type=MediaType(m["media_type"]) if m.get("media_type") else None,
        traffic_class=ClassKind(m["class"]) if m.get("class") else None,
        access_network_type=m.get("access_network_type"),
        priority=tuple(m["priority"]) if m.get("priority") is not None else None,
        bandwidth=tuple(float(x) for x in m["bandwidth_bps"]) if m.get("bandwidth_bps") is not None else None,
    )
    ceiling = None
    if d.get("ceiling") is not None:
        c = d["ceiling"]
        ceiling = Ceiling(
            max_class=TrafficClass.parse(c["max_class"]) if c.get("max_class") else None,
            max_priority=c.get("max_priority"),
            max_ul=c.get("max_ul_bps"),
            max_dl=c.get("max_dl_bps"),
        )
    return PolicyRule(str(d["id"]), match, Action(d["action"]), int(d["precedence"]), ceiling)


def _number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


# -- parsing ------------------------------------------------------------------------


def parse_text(text: str, source: str = "<scenario>") -> Scenario:
    doc = load_json(text)
    issues = _Collector()
    if not isinstance(doc, dict):
        raise ValidationErrors([Issue(1, source, "top level must be an object")])
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        issues.add(doc, "format_version", f"unsupported version {version!r}")

    meta = _obj(doc.get("meta"), issues, "meta", doc)
    name = str(meta.get("name", Path(source).stem))
    seed = meta.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        issues.add(meta, "meta.seed", "must be an integer")
        seed = 0
    duration = meta.get("duration_ms", 10_000)
    if not _number(duration) or duration <= 0:
        issues.add(meta, "meta.duration_ms", "must be a positive number")
        duration = 0.0

    # topology
    topo_d = _obj(doc.get("topology"), issues, "topology", doc)
    nodes = [str(n) for n in _list(topo_d.get("nodes"), issues, "topology.nodes", topo_d)]
    seen_nodes: set[str] = set()
    for n in nodes:
        if n in seen_nodes:
            issues.add(topo_d, "topology.nodes", f"duplicate node {n!r}")
        seen_nodes.add(n)
    links: list[Link] = []
    link_lines: dict[str, int] = {}
    for i, ld in enumerate(_list(topo_d.get("links"), issues, "topology.links", topo_d)):
        ld = _obj(ld, issues, f"topology.links[{i}]", topo_d)
        lid = str(ld.get("id", f"#{i}"))
        where = f"link {lid}"
        if lid in link_lines:
            issues.add(ld, where, f"duplicate link id, first defined at line {link_lines[lid]}, again at line {ld.line}")
            continue
        link_lines[lid] = ld.line
        for end in ("src", "dst"):
            if ld.get(end) not in seen_nodes:
                issues.add(ld, where, f"{end} {ld.get(end)!r} is not a node")
        shares = dict(DEFAULT_SHARES)
        shares.update(ld.get("shares", {}))
        link = issues.guard(
            ld, where, Link,
            link_id=lid,
            src=str(ld.get("src")),
            dst=str(ld.get("dst")),
            capacity_bps=float(ld.get("capacity_bps", 0)),
            propagation_delay_ms=float(ld.get("propagation_delay_ms", 0.0)),
            capacity_bps_rev=ld.get("capacity_bps_rev"),
            queue_capacity_bytes=int(ld.get("queue_capacity_bytes", DEFAULT_QUEUE_BYTES)),
            segment=str(ld.get("segment", "core")),
            shares=shares,
        )
        if link is not None and link.src in seen_nodes and link.dst in seen_nodes:
            links.append(link)
    topology = Topology(sorted(seen_nodes, key=nodes.index), links)
    if nodes and not topology.is_connected():
        issues.add(topo_d, "topology", "graph is not connected")

    # access networks
    networks: list[AccessNetwork] = []
    for i, nd in enumerate(_list(doc.get("access_networks"), issues, "access_networks", doc)):
        nd = _obj(nd, issues, f"access_networks[{i}]", doc)
        ntype = str(nd.get("type", f"#{i}"))
        where = f"access network {ntype}"
        if any(n.network_type == ntype for n in networks):
            issues.add(nd, where, "duplicate network type")
            continue
        node, link_id = nd.get("node"), nd.get("access_link")
        if node not in seen_nodes:
            issues.add(nd, where, f"node {node!r} is not a node")
        link = topology.links.get(link_id)
        if link is None:
            issues.add(nd, where, f"access link {link_id!r} is not a link")
        elif node not in (link.src, link.dst):
            issues.add(nd, where, f"access link {link_id} does not touch node {node}")
        if "cidr" in nd:
            net = issues.guard(
                nd, where, AccessNetwork.from_cidr, ntype, str(nd.get("realm", ntype)), str(nd["cidr"]),
                str(node), str(link_id), racs_point_of_contact=str(nd.get("racs_point_of_contact", "racs")),
            )
        else:
            net = issues.guard(
                nd, where, AccessNetwork, ntype, str(nd.get("realm", ntype)), str(nd.get("pool_start")),
                str(nd.get("pool_end")), str(node), str(link_id), str(nd.get("racs_point_of_contact", "racs")),
            )
        if net is not None and issues.guard(nd, where, net.addresses) is not None:
            networks.append(net)

    # services
    services: dict[str, ServiceDefinition] = {}
    for i, sd in enumerate(_list(doc.get("services"), issues, "services", doc)):
        sd = _obj(sd, issues, f"services[{i}]", doc)
        sname = str(sd.get("name", f"#{i}"))
        where = f"service {sname}"
        if sname in services:
            issues.add(sd, where, "duplicate service name")
            continue
        server = sd.get("server")
        if server is not None and server not in seen_nodes:
            issues.add(sd, where, f"server {server!r} is not a node")
        points = []
        for j, pd in enumerate(_list(sd.get("operation_points"), issues, f"{where}.operation_points", sd)):
            q = issues.guard(pd, f"{where} point {j}", _qos, _obj(pd, issues, f"{where} point {j}", sd))
            if q is not None:
                points.append(q)
        media = issues.guard(sd, where, MediaType, sd.get("media_type", "voice"))
        if media is None:
            continue
        svc = issues.guard(
            sd, where, ServiceDefinition, sname, media, tuple(points),
            bool(sd.get("renegotiable", True)), server,
        )
        if svc is not None:
            services[sname] = svc

    # subscribers
    subscribers: dict[str, SubscriberSpec] = {}
    for i, ud in enumerate(_list(doc.get("subscribers"), issues, "subscribers", doc)):
        ud = _obj(ud, issues, f"subscribers[{i}]", doc)
        sid = str(ud.get("id", f"#{i}"))
        where = f"subscriber {sid}"
        if sid in subscribers:
            issues.add(ud, where, "duplicate subscriber id")
            continue
        creds = str(ud.get("credentials", ""))
        auths: dict[str, ServiceAuthorization] = {}
        for svc_name, ad in _obj(ud.get("services"), issues, f"{where}.services", ud).items():
            if svc_name not in services:
                issues.add(ud, where, f"unknown service {svc_name!r}")
                continue
            ad = ad if isinstance(ad, dict) else {}
            auth = issues.guard(
                ud, f"{where}.services.{svc_name}", lambda ad=ad: ServiceAuthorization(
                    allowed=bool(ad.get("allowed", True)),
                    max_class=TrafficClass.parse(ad.get("max_class", "EF")),
                    max_priority=int(ad.get("max_priority", 15)),
                ),
            )
            if auth is not None:
                auths[svc_name] = auth
        profile = issues.guard(
            ud, where, ServiceProfile, sid, creds, tuple(auths), auths, tuple(ud.get("content_entitlements", ())),
        )
        nd = _obj(ud.get("nass"), issues, f"{where}.nass", ud)
        qd = _obj(nd.get("qos_profile"), issues, f"{where}.nass.qos_profile", nd)
        qos_profile = issues.guard(
            qd, f"{where}.qos_profile", lambda: TransportQosProfile(
                transport_service_class=TrafficClass.parse(qd.get("transport_service_class", "EF")),
                requestor_name=str(qd.get("requestor_name", sid)),
                max_priority=int(qd.get("max_priority", 15)),
                media_type=MediaType(qd.get("media_type", "voice")),
                ul_subscribed_bandwidth=float(qd.get("ul_subscribed_bps", 0)),
                dl_subscribed_bandwidth=float(qd.get("dl_subscribed_bps", 0)),
            ),
        )
        gd = _obj(nd.get("gates"), issues, f"{where}.nass.gates", nd)
        gates = GateSettings(
            gate_id=str(gd.get("gate_id", f"G-{sid}")),
            allowed_destinations=tuple(gd.get("allowed_destinations", ())),
            ul_default_bandwidth=float(gd.get("ul_default_bps", 0)),
            dl_default_bandwidth=float(gd.get("dl_default_bps", 0)),
            open=bool(gd.get("open", False)),
            privacy_indicator=bool(gd.get("privacy_indicator", False)),
        )
        subscription = None
        if qos_profile is not None:
            subscription = issues.guard(
                nd, where, Subscription, sid, creds, qos_profile, gates,
                str(nd.get("logical_access_id", "")), str(nd.get("location", "")),
            )
        terminal = issues.guard(ud, f"{where}.terminal", _terminal, _obj(ud.get("terminal"), issues, where, ud))
        if profile is not None and subscription is not None and terminal is not None:
            subscribers[sid] = SubscriberSpec(profile, subscription, terminal)

    # policies
    pol = _obj(doc.get("policies"), issues, "policies", doc)
    rules: list[PolicyRule] = []
    if "rules" not in pol:
        rules.append(ADMIT_ALL)
    for i, rd in enumerate(_list(pol.get("rules"), issues, "policies.rules", pol)):
        rd = _obj(rd, issues, f"policies.rules[{i}]", pol)
        where = f"rule {rd.get('id', f'#{i}')}"
        rule = issues.guard(rd, where, _rule, rd)
        if rule is None:
            continue
        clash = [r for r in rules if r.precedence == rule.precedence or r.rule_id == rule.rule_id]
        if clash:
            issues.add(rd, where, f"precedence or id collides with rule {clash[0].rule_id}")
            continue
        rules.append(rule)
    allow_unauth = bool(pol.get("allow_unauthorized_qos", False))
    floor = pol.get("ef_priority_floor", EF_PRIORITY_FLOOR)
    qd = _obj(doc.get("qoe"), issues, "qoe", doc)
    thresholds = issues.guard(qd, "qoe", lambda: Thresholds(
        degraded_loss=float(qd.get("degraded_loss", Thresholds.degraded_loss)),
        errored_loss=float(qd.get("errored_loss", Thresholds.errored_loss)),
        degraded_mos=float(qd.get("degraded_mos", Thresholds.degraded_mos)),
    )) or Thresholds()

    events = _parse_events(doc, issues, seen_nodes, services, subscribers, networks, duration)

    if issues.issues:
        raise ValidationErrors(issues.issues)
    scenario = Scenario(
        name=name,
        seed=seed,
        duration_ms=float(duration),
        topology=topology,
        access_networks=networks,
        services=services,
        subscribers=subscribers,
        rules=rules,
        allow_unauthorized_qos=allow_unauth,
        ef_priority_floor=int(floor),
        thresholds=thresholds,
        event_log=bool(meta.get("event_log", True)),
        events=events,
    )
    scenario.warnings = admissibility_warnings(scenario)
    return scenario


_REQUIRED = {
    "attach": ("subscriber", "network"),
    "register": ("subscriber",),
    "initiate_session": ("subscriber", "service", "session"),
    "renegotiate": ("session", "point"),
    "terminate": ("session",),
    "detach": ("subscriber",),
    "background_flow": ("flow_id", "src", "dst", "rate_bps"),
}


def _parse_events(doc, issues: _Collector, nodes, services, subscribers, networks, duration) -> list[Event]:
    events: list[Event] = []
    sessions: dict[str, str] = {}
    flow_ids: set[str] = set()
    last = float("-inf")
    net_types = {n.network_type for n in networks}
    for i, ed in enumerate(_list(doc.get("events"), issues, "events", doc)):
        ed = _obj(ed, issues, f"events[{i}]", doc)
        where = f"event {i}"
        at = ed.get("at_ms")
        etype = ed.get("type")
        if not _number(at) or at < 0:
            issues.add(ed, where, "at_ms must be a non-negative number")
            continue
        if at < last:
            issues.add(ed, where, f"events not sorted by time ({at} after {last})")
        last = max(last, at)
        if duration and at > duration:
            issues.add(ed, where, f"at {at} ms lies beyond duration {duration} ms")
        if etype not in EVENT_TYPES:
            issues.add(ed, where, f"unknown event type {etype!r}")
            continue
        missing = [k for k in _REQUIRED[etype] if k not in ed]
        if missing:
            issues.add(ed, where, f"{etype} needs {', '.join(missing)}")
            continue
        sub = ed.get("subscriber")
        if sub is not None and sub not in subscribers:
            issues.add(ed, where, f"unknown subscriber {sub!r}")
        if etype == "attach" and ed["network"] not in net_types:
            issues.add(ed, where, f"unknown access network {ed['network']!r}")
        if etype == "initiate_session":
            svc = services.get(ed["service"])
            if svc is None:
                issues.add(ed, where, f"unknown service {ed['service']!r}")
            elif not 0 <= int(ed.get("point", 0)) < len(svc.operation_points):
                issues.add(ed, where, f"service {svc.name} has no operation point {ed.get('point')}")
            try:
                InitiationMode(ed.get("mode", "scenario1"))
            except ValueError:
                issues.add(ed, where, f"unknown mode {ed.get('mode')!r}")
            label = str(ed["session"])
            if label in sessions:
                issues.add(ed, where, f"session {label!r} already initiated")
            sessions[label] = ed["service"]
            flow = ed.get("flow", {})
            if not isinstance(flow, dict) or flow.get("direction", "ul") not in ("ul", "dl", "both", "none"):
                issues.add(ed, where, "flow.direction must be ul, dl, both or none")
        if etype in ("renegotiate", "terminate") and ed["session"] not in sessions:
            issues.add(ed, where, f"unknown session {ed['session']!r}")
        if etype == "renegotiate":
            svc = services.get(sessions.get(ed["session"]))
            if svc is not None and not 0 <= int(ed["point"]) < len(svc.operation_points):
                issues.add(ed, where, f"service {svc.name} has no operation point {ed['point']}")
            try:
                Initiator(ed.get("initiator", "end_user"))
            except ValueError:
                issues.add(ed, where, f"unknown initiator {ed.get('initiator')!r}")
        if etype == "background_flow":
            fid = str(ed["flow_id"])
            if fid in flow_ids:
                issues.add(ed, where, f"duplicate flow id {fid!r}")
            flow_ids.add(fid)
            for end in ("src", "dst"):
                if ed[end] not in nodes:
                    issues.add(ed, where, f"{end} {ed[end]!r} is not a node")
        args = {k: v for k, v in ed.items() if k not in ("at_ms", "type")}
        events.append(Event(i, float(at), etype, args, ed.line))
    return events


def admissibility_warnings(scenario: Scenario) -> list[Issue]:
    """Warn when subscribed EF demand could exceed some link's EF budget."""
    demand = Fraction(0)
    for spec in scenario.subscribers.values():
        for name in spec.profile.subscribed_services:
            svc = scenario.services[name]
            best = svc.operation_points[0]
            auth = spec.profile.authorization(name)
            if best.traffic_class.kind is ClassKind.EF and auth.allowed and auth.max_class.kind is ClassKind.EF:
                demand += Fraction(max(best.ul_bandwidth, best.dl_bandwidth))
    warnings = []
    if demand == 0:
        return warnings
    for link in scenario.topology.links.values():
        for direction in (FWD, REV):
            budget = Fraction(repr(float(link.shares.get("EF", 0.0)))) * Fraction(repr(float(link.capacity(direction))))
            if demand > budget:
                warnings.append(Issue(
                    None, f"link {link.link_id}/{direction}",
                    f"subscribed EF demand {float(demand):g} b/s exceeds EF budget {float(budget):g} b/s",
                ))
    return warnings


def parse_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), str(path))
