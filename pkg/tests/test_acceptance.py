"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the conftest prints one PASS/FAIL
line per criterion in the terminal summary.
"""

import math
import random
import time
from fractions import Fraction
from importlib import resources

import pytest

from ngnsim.harness.runner import Simulation, run_scenario
from ngnsim.harness.scenario import parse_scenario
from ngnsim.model import BEST_EFFORT, BETTER_BEST_EFFORT, EF, ClassKind, MediaType, QosParameters, TrafficClass, af
from ngnsim.nass import AccessNetwork, GateSettings, Nass, Subscription, TerminalProfile, TransportQosProfile
from ngnsim.qoe import estimate_mos, mos_from_impairments
from ngnsim.racs import (
    Action,
    Ceiling,
    InitiationMode,
    InsufficientCapacity,
    PolicyRule,
    Racs,
    ResourceRequest,
    RuleMatch,
    Verdict,
)
from ngnsim.transport import FWD, REV, FlowSpec, Link, Network, Topology, parse_log
from ngnsim.transport.enforcement import Classifier, TrafficPolicy

SCENARIOS = resources.files("ngnsim") / "scenarios"
SUITE = sorted(p.name for p in SCENARIOS.iterdir() if p.name.endswith(".json"))


def load(name):
    return parse_scenario(str(SCENARIOS / name))


def exact(x):
    return Fraction(repr(float(x)))


# -- 1 ----------------------------------------------------------------------------


@pytest.mark.criterion(1, "QoS vs no-QoS contrast on golden scenario A")
def test_criterion_1_qos_contrast():
    t0 = time.perf_counter()
    with_qos = run_scenario(load("golden_a.json"))
    elapsed = time.perf_counter() - t0
    forced_be = run_scenario(load("golden_a_besteffort.json"))

    voice = with_qos.flows["call-1.ul"]
    mos_qos = with_qos.qoe["call-1"].mos
    be = forced_be.flows["voice"]
    mos_be = estimate_mos(be, MediaType.VOICE)

    # background really is 120 % of the 2 Mb/s bottleneck
    assert with_qos.flows["bulk"].sent * 1000 * 8 / 30 == pytest.approx(1.2 * 2e6, rel=0.01)
    assert voice.sent > 0 and voice.loss == 0
    assert mos_qos >= 4.0
    assert be.loss >= 0.05
    assert mos_be < mos_qos
    assert elapsed < 5.0, f"golden A took {elapsed:.2f} s"


# -- 2 ----------------------------------------------------------------------------


def five_link_world(seed):
    links = [
        Link("L1", "ue", "a", 10e6, 1.0),
        Link("L2", "a", "b", 4e6, 1.0),
        Link("L3", "b", "c", 6e6, 1.0, capacity_bps_rev=3e6),
        Link("L4", "c", "srv", 8e6, 1.0),
        Link("L5", "a", "d", 2e6, 1.0, shares={"EF": 0.5, "AF": 0.3, "BE": 0.2}),
    ]
    topo = Topology(["ue", "a", "b", "c", "d", "srv"], links)
    prof = TransportQosProfile(TrafficClass.parse("EF"), "r", 15, MediaType.VIDEO, 10e6, 10e6)
    subs = [Subscription(f"u{i}", "pw", prof, GateSettings(f"G{i}")) for i in range(4)]
    nass = Nass([AccessNetwork.from_cidr("dsl", "r", "10.0.0.0/28", "ue", "L1")], subs)
    for i in range(4):
        nass.attach(f"u{i}", "dsl", f"p{i}", TerminalProfile(), "pw")
    racs = Racs(topo, nass, rules=[PolicyRule("all", RuleMatch(), Action.ADMIT, 1)])
    return topo, nass, racs


def ledger_oracle(topo, reservations):
    """Recompute per-class bookings from live reservations alone."""
    booked = {}
    for res in reservations:
        tc = res.granted.traffic_class.kind
        group = "EF" if tc is ClassKind.EF else "AF" if tc.is_af else None
        if group is None:
            continue
        for link_id, direction in res.hops:
            back = REV if direction == FWD else FWD
            for d, bw in ((direction, res.granted.ul_bandwidth), (back, res.granted.dl_bandwidth)):
                if bw:
                    key = (link_id, d, group)
                    booked[key] = booked.get(key, Fraction(0)) + exact(bw)
    for (link_id, d, group), value in booked.items():
        link = topo.links[link_id]
        cap = link.capacity_bps if d == FWD else (link.capacity_bps_rev or link.capacity_bps)
        assert value <= exact(link.shares[group]) * exact(cap), (link_id, d, group, value)
    return booked


@pytest.mark.criterion(2, "ledger safety over randomized reserve/release sequences")
def test_criterion_2_ledger_safety():
    classes = [EF, af(1), af(2, 3), af(4), BEST_EFFORT, BETTER_BEST_EFFORT]
    dests = ["srv", "b", "c", "d"]
    for seed in range(25):
        rng = random.Random(seed)
        topo, nass, racs = five_link_world(seed)
        live = []
        for k in range(200):
            if live and rng.random() < 0.4:
                res = live.pop(rng.randrange(len(live)))
                racs.release(res.reservation_id)
            else:
                sub = rng.randrange(4)
                qos = QosParameters(rng.choice(classes), rng.randrange(0, 1500) * 1e3,
                                    rng.randrange(0, 1500) * 1e3, priority=rng.randrange(10, 16))
                req = ResourceRequest(f"s{k}", f"u{sub}", nass.find(f"u{sub}").ip, rng.choice(dests), qos)
                try:
                    live.append(racs.reserve(f"s{k}", racs.authorize(req)))
                except InsufficientCapacity:
                    pass
            oracle = ledger_oracle(topo, live)
            got = {key: value for key, value in racs.ledger._booked.items()}
            assert got == oracle, f"seed {seed} op {k}"
            assert not racs.ledger.violations()
            # every live reservation books each path hop
            for res in live:
                if res.granted.traffic_class.kind.is_best_effort:
                    continue
                booked_links = {b.link_id for b in res.bookings}
                assert booked_links == set(res.path) or not (res.granted.ul_bandwidth or res.granted.dl_bandwidth)
        for res in live:
            racs.release(res.reservation_id)
        assert racs.ledger.is_zero() and racs.ledger.snapshot() == {}


# -- 3 ----------------------------------------------------------------------------

LADDER = ["BestEffort", "BetterBestEffort", "AF4", "AF3", "AF2", "AF1", "EF"]
CLASSES = [EF, af(1), af(1, 3), af(2), af(3, 2), af(4), BETTER_BEST_EFFORT, BEST_EFFORT]
FLOOR = 10


def oracle_decision(rules, request, profile, network_type):
    """Independent authorize(): clamp by profile, brute-force rules, apply action."""
    q = request.qos
    cls, prio = q.traffic_class, min(q.priority, profile.max_priority)
    ul, dl = min(q.ul_bandwidth, profile.ul_subscribed_bandwidth), min(q.dl_bandwidth, profile.dl_subscribed_bandwidth)
    if cls.kind is ClassKind.EF and prio < FLOOR:
        cls = af(1)
    media = request.media_type or profile.media_type

    def holds(m):
        return (
            (m.requestor_name is None or m.requestor_name == profile.requestor_name)
            and (m.media_type is None or m.media_type == media)
            and (m.traffic_class is None or m.traffic_class == cls.kind)
            and (m.access_network_type is None or m.access_network_type == network_type)
            and (m.priority is None or m.priority[0] <= prio <= m.priority[1])
            and (m.bandwidth is None or m.bandwidth[0] <= max(ul, dl) <= m.bandwidth[1])
        )

    matches = [r for r in rules if holds(r.match)]
    if not matches:
        return Verdict.REJECT, None, None
    rule = min(matches, key=lambda r: r.precedence)
    if rule.action is Action.DENY:
        return Verdict.REJECT, rule.rule_id, None
    if rule.action is Action.CLAMP:
        c = rule.ceiling
        if c.max_class is not None and LADDER.index(cls.kind.value) > LADDER.index(c.max_class.kind.value):
            cls = c.max_class
        prio = prio if c.max_priority is None else min(prio, c.max_priority)
        ul = ul if c.max_ul is None else min(ul, c.max_ul)
        dl = dl if c.max_dl is None else min(dl, c.max_dl)
        if cls.kind is ClassKind.EF and prio < FLOOR:
            cls = af(1)
    shrunk = (
        ul < q.ul_bandwidth or dl < q.dl_bandwidth or prio < q.priority
        or LADDER.index(cls.kind.value) < LADDER.index(q.traffic_class.kind.value)
    )
    return (Verdict.MODIFY if shrunk else Verdict.ADMIT), rule.rule_id, (cls, prio, ul, dl)


def random_rule(rng, i, precedence):
    def maybe(values):
        return rng.choice([None, *values])

    lo = rng.randrange(16)
    blo = rng.choice([0, 64e3, 1e6])
    match = RuleMatch(
        requestor_name=maybe(["voip", "iptv"]),
        media_type=maybe(list(MediaType)),
        traffic_class=maybe([ClassKind.EF, ClassKind.AF1, ClassKind.AF3, ClassKind.BEST_EFFORT]),
        access_network_type=maybe(["dsl", "wlan"]),
        priority=maybe([(lo, rng.randrange(lo, 16))]),
        bandwidth=maybe([(blo, blo * rng.choice([2, 8, 40]))]),
    )
    action = rng.choice(list(Action))
    ceiling = None
    if action is Action.CLAMP:
        ceiling = Ceiling(
            max_class=maybe(CLASSES), max_priority=maybe([4, 9, 12]),
            max_ul=maybe([32e3, 500e3, 2e6]), max_dl=maybe([32e3, 500e3, 2e6]),
        )
    return PolicyRule(f"r{i}", match, action, precedence, ceiling)


@pytest.mark.criterion(3, "policy engine equals brute-force oracle on 100 x 100")
def test_criterion_3_policy_oracle():
    topo = Topology(["ue", "srv"], [Link("L", "ue", "srv", 100e6)])
    mismatches = 0
    for repo in range(100):
        rng = random.Random(1000 + repo)
        n = rng.randrange(0, 101)
        rules = [random_rule(rng, i, p) for i, p in enumerate(rng.sample(range(10_000), n))]
        profile = TransportQosProfile(
            TrafficClass.parse("EF"), rng.choice(["voip", "iptv"]), rng.randrange(16),
            rng.choice(list(MediaType)), rng.choice([64e3, 1e6, 4e6]), rng.choice([64e3, 1e6, 4e6]),
        )
        network_type = rng.choice(["dsl", "wlan"])
        nass = Nass(
            [AccessNetwork.from_cidr(network_type, "r", "10.0.0.0/30", "ue", "L")],
            [Subscription("u", "pw", profile, GateSettings("G"))],
        )
        ip = nass.attach("u", network_type, "p", TerminalProfile(), "pw").ip
        racs = Racs(topo, nass, rules=rules)
        for k in range(100):
            qos = QosParameters(
                rng.choice(CLASSES), rng.choice([0, 16e3, 64e3, 800e3, 2e6, 8e6]),
                rng.choice([0, 16e3, 64e3, 800e3, 2e6, 8e6]), priority=rng.randrange(16),
            )
            req = ResourceRequest(f"s{k}", "u", ip, "srv", qos, media_type=rng.choice([None, *MediaType]))
            got = racs.authorize(req)
            verdict, rule_id, granted = oracle_decision(rules, req, profile, network_type)
            ok = got.verdict is verdict and got.matched_rule == rule_id
            if granted is not None:
                g = got.granted
                ok = ok and (g.traffic_class, g.priority, g.ul_bandwidth, g.dl_bandwidth) == granted
            mismatches += not ok
    assert mismatches == 0


# -- 4 ----------------------------------------------------------------------------


def mode_world():
    # wide enough that all 20 clamped requests fit: the set is admissible
    links = [Link("A", "ue", "x", 200e6, 1.0), Link("B", "x", "srv", 200e6, 1.0), Link("C", "x", "y", 200e6, 1.0)]
    topo = Topology(["ue", "x", "y", "srv"], links)
    prof = TransportQosProfile(TrafficClass.parse("EF"), "voip", 13, MediaType.VOICE, 1.5e6, 2e6)
    nass = Nass([AccessNetwork.from_cidr("dsl", "r", "10.0.0.0/29", "ue", "A")],
                [Subscription("u", "pw", prof, GateSettings("G"))])
    ip = nass.attach("u", "dsl", "p", TerminalProfile(), "pw").ip
    net = Network(topo, resolve=lambda a: "ue" if a == ip else a)
    net.add_gate(GateSettings("G"), "A", ip)
    racs = Racs(topo, nass, net, [PolicyRule("all", RuleMatch(), Action.ADMIT, 1)], allow_unauthorized_qos=True)
    return racs, ip


def reserve_in_mode(racs, mode, session, req):
    if mode is InitiationMode.SCENARIO1:
        return racs.reserve(session, racs.authorize(req))
    if mode is InitiationMode.SCENARIO2:
        return racs.reserve_with_token(racs.issue_token(racs.authorize(req), session))
    return racs.reserve_unauthorized(req)


@pytest.mark.criterion(4, "initiation modes 1, 2, 3 converge on grants and ledger")
def test_criterion_4_mode_equivalence():
    rng = random.Random(4)
    requests = []
    for k in range(20):
        requests.append((
            rng.choice([EF, af(1), af(2, 2), af(4), BEST_EFFORT]),
            rng.randrange(1, 40) * 50e3, rng.randrange(1, 40) * 50e3,
            rng.randrange(8, 16), rng.choice(["srv", "y"]),
        ))
    outcomes = {}
    for mode in InitiationMode:
        racs, ip = mode_world()
        grants = []
        for k, (tc, ul, dl, prio, dst) in enumerate(requests):
            req = ResourceRequest(f"s{k}", "u", ip, dst, QosParameters(tc, ul, dl, priority=prio), mode)
            res = reserve_in_mode(racs, mode, f"s{k}", req)
            racs.install(res, GateSettings("G"))
            grants.append(res.granted)
        outcomes[mode] = (grants, racs.ledger.snapshot())
    first = outcomes[InitiationMode.SCENARIO1]
    # the set really exercises the profile clamp
    assert any(g.ul_bandwidth < r[1] or g.priority < r[3] for g, r in zip(first[0], requests))
    for mode, outcome in outcomes.items():
        assert outcome == first, mode


# -- 5 ----------------------------------------------------------------------------


def af_saturation(cap=1e6, seconds=10):
    links = [Link(f"A{i}", f"s{i}", "r", 100e6) for i in range(1, 5)] + [Link("B", "r", "d", cap, 1.0)]
    topo = Topology(["s1", "s2", "s3", "s4", "r", "d"], links)
    net = Network(topo)
    for i in range(1, 5):
        net.add_gate(GateSettings(f"G{i}", ("d",), open=True), f"A{i}", f"s{i}")
        tc = af(i)
        net.install_policy(TrafficPolicy(
            f"P{i}", f"G{i}", f"R{i}", Classifier(f"s{i}", "d"), tc, 10 + 8 * (i - 1),
            None, None, True, ("d",), f"M{i}", tuple(topo.route(f"s{i}", "d")),
        ))
        net.add_flow(FlowSpec(f"af{i}", f"s{i}", "d", 1000, cap, stop_ms=seconds * 1000))
    net.run(seconds * 1000)
    return net


@pytest.mark.criterion(5, "AF 4:3:2:1 goodput, BE loss above BBE, EF bound holds")
def test_criterion_5_scheduler():
    net = af_saturation()
    port = net.ports[("B", FWD)]
    served = [port.stats[f"AF{i}"].transmitted_bytes for i in range(1, 5)]
    total = sum(served)
    assert total * 8 / 10 == pytest.approx(1e6, rel=0.01)
    for share, weight in zip(served, (4, 3, 2, 1)):
        assert abs(share / total - weight / 10) <= 0.05 * weight / 10, served

    mixed = run_scenario(load("mixed_overload.json"))
    assert mixed.flows["plain"].loss > mixed.flows["bbe-1.ul"].loss

    checked = 0
    for name in SUITE:
        sim = Simulation(load(name))
        sim.run()
        for p in sim.network.ports.values():
            assert p.ef_violations == 0, (name, p.name)
            checked += p.stats["EF"].transmitted
    assert checked > 0


# -- 6 ----------------------------------------------------------------------------


@pytest.mark.criterion(6, "conservation per flow and byte-identical reruns")
def test_criterion_6_conservation_and_determinism(tmp_path):
    for name in SUITE:
        sc = load(name)
        first = run_scenario(sc, tmp_path / name / "a")
        run_scenario(sc, tmp_path / name / "b")
        for m in first.flows.values():
            assert m.sent == m.delivered + m.dropped + m.in_flight, (name, m.flow_id)
        t = first.totals
        assert t["sent"] == t["delivered"] + t["dropped"] + t["in_flight"]
        for f in ("events.log", "flows.csv", "sessions.json"):
            a = (tmp_path / name / "a" / f).read_bytes()
            assert a == (tmp_path / name / "b" / f).read_bytes(), (name, f)


# -- 7 ----------------------------------------------------------------------------

GAMMA = {"voice": 11, "video": 14, "streaming_audio": 9, "data_interactive": 6, "data_bulk": 2}


def closed_form(delay, loss, media):
    r = 93.2 - 0.024 * delay - (0.11 * (delay - 177.3) if delay > 177.3 else 0.0)
    r -= GAMMA[media] * math.log(1 + 15 * loss)
    if r <= 0:
        return 1.0
    if r >= 100:
        return 4.5
    return min(5.0, max(1.0, 1 + 0.035 * r + 7e-6 * r * (r - 60) * (100 - r)))


@pytest.mark.criterion(7, "QoE closed form, monotonicity, zero-impairment voice MOS 4.404")
def test_criterion_7_qoe():
    rng = random.Random(7)
    for _ in range(1000):
        media = rng.choice(list(GAMMA))
        delay, loss = rng.uniform(0, 800), rng.random()
        assert abs(mos_from_impairments(delay, loss, MediaType(media)) - closed_form(delay, loss, media)) <= 1e-9

    losses = [i / 49 for i in range(50)]
    delays = [i * 16.0 for i in range(50)]
    for media in MediaType:
        grid = [[mos_from_impairments(d, l, media) for d in delays] for l in losses]
        for row in grid:
            assert all(a >= b for a, b in zip(row, row[1:]))
        for col in zip(*grid):
            assert all(a >= b for a, b in zip(col, col[1:]))

    zero = mos_from_impairments(0.0, 0.0, MediaType.VOICE)
    # the closed form gives 4.409286 here; the stated target is checked as written
    assert abs(zero - 4.404) <= 0.001, f"zero-impairment voice MOS {zero:.6f}, target 4.404 +/- 0.001"


# -- 8 ----------------------------------------------------------------------------


@pytest.mark.criterion(8, "authorization precedes resource requests; RACS rejects are staged")
def test_criterion_8_procedure_ordering():
    report = run_scenario(load("procedure_ordering.json"))
    records = parse_log(report.events_log.splitlines())
    auth_fail = report.session("auth-fail")
    assert auth_fail.state.value == "rejected" and auth_fail.reject_stage == "authenticating"
    assert not [r for r in records if r.kind.startswith("racs.") and r.detail.get("session") == "auth-fail"]

    denied = report.session("racs-deny")
    assert denied.state.value == "rejected" and denied.reject_stage == "racs"
    installs = [r.detail["reservation"] for r in records if r.kind == "policy.install"]
    sessions_by_res = {
        r.detail["reservation"]: r.detail["session"] for r in records if r.kind == "racs.reserve"
    }
    assert "racs-deny" not in {sessions_by_res.get(res) for res in installs}
    assert [r for r in records if r.kind == "racs.request" and r.detail["session"] == "racs-deny"]
    assert report.session("ok-call").state.value == "active"
