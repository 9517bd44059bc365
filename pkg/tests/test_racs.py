import pytest
from hypothesis import given, settings, strategies as st

from ngnsim.model import (
    BEST_EFFORT,
    EF,
    ClassKind,
    MediaType,
    QosParameters,
    TrafficClass,
    af,
)
from ngnsim.nass import AccessNetwork, GateSettings, Nass, Subscription, TerminalProfile, TransportQosProfile
from ngnsim.racs import (
    Action,
    Booking,
    CapacityLedger,
    Ceiling,
    InitiationMode,
    InsufficientCapacity,
    MatchContext,
    NoActiveAttachment,
    PolicyForbidden,
    PolicyRepository,
    PolicyRule,
    Racs,
    ReservationState,
    ResourceRequest,
    RuleMatch,
    TokenExpired,
    TokenReused,
    TokenRevoked,
    UnknownReservation,
    Verdict,
    WrongMode,
)
from ngnsim.transport import FWD, REV, FlowSpec, Link, Network, Topology
from ngnsim.transport.network import UnknownGate

ADMIT_ALL = PolicyRule("all", RuleMatch(), Action.ADMIT, 1000)


class World:
    """ue --L-ue-- acc --L-core-- core --L-srv-- srv, all 10 Mb/s."""

    def __init__(self, rules=(ADMIT_ALL,), subscribed=2e6, allow=False, caps=(10e6, 10e6, 10e6)):
        self.now = 0.0
        links = [
            Link("L-ue", "ue", "acc", caps[0], 1.0),
            Link("L-core", "acc", "core", caps[1], 1.0),
            Link("L-srv", "core", "srv", caps[2], 1.0),
        ]
        self.topo = Topology(["ue", "acc", "core", "srv"], links)
        subs = [
            Subscription(
                name, "pw",
                TransportQosProfile(TrafficClass.parse("EF"), "voip", 15, MediaType.VOICE, subscribed, subscribed),
                GateSettings(f"G-{name}", ("srv",)),
            )
            for name in ("alice", "bob")
        ]
        net = AccessNetwork.from_cidr("dsl", "dsl.example", "10.0.0.0/28", "ue", "L-ue")
        self.nass = Nass([net], subs, lambda: self.now)
        self.net = Network(self.topo, resolve=self._resolve)
        self.nass.on_attach(lambda r: self.net.add_gate(r.initial_gates, r.access_link, r.ip))
        self.racs = Racs(
            self.topo, self.nass, self.net, rules, allow_unauthorized_qos=allow,
            clock=lambda: self.now, log=self.net.log,
        )
        self.records = {}

    def _resolve(self, address):
        rec = self.nass.record_for_ip(address)
        return rec.node if rec else (address if address in self.topo.nodes else None)

    def attach(self, who="alice", port="p1"):
        rec = self.nass.attach(who, "dsl", port, TerminalProfile(), "pw")
        self.records[who] = rec
        return rec

    def request(self, qos, who="alice", mode=InitiationMode.SCENARIO1, media=MediaType.VOICE, session="s1"):
        return ResourceRequest(session, who, self.records[who].ip, "srv", qos, mode, media)


def ef(bw, prio=12):
    return QosParameters(EF, bw, bw, priority=prio)


# -- authorize -----------------------------------------------------------------


def test_admit_within_profile_records_rule():
    w = World()
    w.attach()
    d = w.racs.authorize(w.request(ef(64_000)))
    assert d.verdict is Verdict.ADMIT and d.matched_rule == "all"
    assert d.granted == ef(64_000)


def test_subscribed_bandwidth_clamps_to_modify():
    w = World(subscribed=2e6)
    w.attach()
    d = w.racs.authorize(w.request(QosParameters(af(1), 8e6, 8e6, priority=5)))
    assert d.verdict is Verdict.MODIFY
    assert (d.granted.ul_bandwidth, d.granted.dl_bandwidth) == (2e6, 2e6)


def test_video_deny_rule_wins_by_precedence():
    rules = [
        PolicyRule("no-video", RuleMatch(media_type=MediaType.VIDEO), Action.DENY, 1),
        PolicyRule("all", RuleMatch(), Action.ADMIT, 2),
    ]
    w = World(rules)
    w.attach()
    d = w.racs.authorize(w.request(ef(64_000), media=MediaType.VIDEO))
    assert d.verdict is Verdict.REJECT and d.matched_rule == "no-video"
    ctx = w.racs.match_context(w.request(ef(64_000), media=MediaType.VIDEO), ef(64_000),
                               w.nass.lookup_transport_profile(w.records["alice"].ip))
    assert brute_force_rule(rules, ctx).rule_id == "no-video"
    assert w.racs.authorize(w.request(ef(64_000))).matched_rule == "all"


def test_no_rule_is_default_deny_and_unattached_source_errors():
    w = World(rules=())
    w.attach()
    d = w.racs.authorize(w.request(ef(64_000)))
    assert d.verdict is Verdict.REJECT and d.reason == "default-deny"
    req = ResourceRequest("s", "alice", "10.9.9.9", "srv", ef(64_000))
    with pytest.raises(NoActiveAttachment):
        w.racs.authorize(req)


def test_clamp_rule_applies_ceiling():
    rules = [PolicyRule("cap", RuleMatch(), Action.CLAMP, 1, Ceiling(max_class=af(2), max_ul=500_000))]
    w = World(rules)
    w.attach()
    d = w.racs.authorize(w.request(ef(1e6)))
    assert d.verdict is Verdict.MODIFY
    assert d.granted.traffic_class.kind is ClassKind.AF2
    assert d.granted.ul_bandwidth == 500_000 and d.granted.dl_bandwidth == 1e6


def test_repository_rejects_duplicate_precedence():
    repo = PolicyRepository([ADMIT_ALL])
    with pytest.raises(ValueError):
        repo.add(PolicyRule("other", RuleMatch(), Action.DENY, 1000))


# -- rule oracle ---------------------------------------------------------------


def rule_holds(rule, ctx):
    """Written without touching RuleMatch.matches."""
    m = rule.match
    checks = [
        m.requestor_name in (None, ctx.requestor_name),
        m.media_type in (None, ctx.media_type),
        m.traffic_class in (None, ctx.traffic_class.kind),
        m.access_network_type in (None, ctx.access_network_type),
        m.priority is None or (m.priority[0] <= ctx.priority and ctx.priority <= m.priority[1]),
        m.bandwidth is None or (m.bandwidth[0] <= ctx.bandwidth and ctx.bandwidth <= m.bandwidth[1]),
    ]
    return all(checks)


def brute_force_rule(rules, ctx):
    matching = [r for r in rules if rule_holds(r, ctx)]
    return min(matching, key=lambda r: r.precedence) if matching else None


CLASSES = [EF, af(1), af(2), af(3), af(4), BEST_EFFORT]


@st.composite
def rule_sets(draw):
    n = draw(st.integers(0, 100))
    precs = draw(st.lists(st.integers(0, 10_000), min_size=n, max_size=n, unique=True))
    rules = []
    for i, p in enumerate(precs):
        lo = draw(st.integers(0, 15))
        blo = draw(st.sampled_from([0, 1e5, 1e6]))
        match = RuleMatch(
            requestor_name=draw(st.sampled_from([None, "voip", "iptv"])),
            media_type=draw(st.sampled_from([None, *MediaType])),
            traffic_class=draw(st.sampled_from([None, ClassKind.EF, ClassKind.AF1, ClassKind.BEST_EFFORT])),
            access_network_type=draw(st.sampled_from([None, "dsl", "wlan"])),
            priority=draw(st.sampled_from([None, (lo, draw(st.integers(lo, 15)))])),
            bandwidth=draw(st.sampled_from([None, (blo, blo * 4 + 1)])),
        )
        rules.append(PolicyRule(f"r{i}", match, draw(st.sampled_from([Action.ADMIT, Action.DENY])), p))
    return rules


contexts = st.builds(
    MatchContext,
    requestor_name=st.sampled_from(["voip", "iptv"]),
    media_type=st.sampled_from(list(MediaType)),
    traffic_class=st.sampled_from(CLASSES),
    access_network_type=st.sampled_from(["dsl", "wlan"]),
    priority=st.integers(0, 15),
    bandwidth=st.sampled_from([0.0, 64e3, 5e5, 2e6, 8e6]),
)


@settings(max_examples=150, deadline=None)
@given(rule_sets(), st.lists(contexts, min_size=1, max_size=10))
def test_first_match_equals_brute_force(rules, ctxs):
    repo = PolicyRepository(rules)
    for ctx in ctxs:
        assert repo.first_match(ctx) == brute_force_rule(rules, ctx)


# -- reserve -------------------------------------------------------------------------


def test_reserve_books_every_link_in_both_directions():
    w = World()
    w.attach()
    res = w.racs.reserve("s1", w.racs.authorize(w.request(QosParameters(EF, 64e3, 32e3, priority=12))))
    assert res.state is ReservationState.RESERVED and res.path == ["L-ue", "L-core", "L-srv"]
    for link in res.path:
        assert w.racs.ledger.booked(link, FWD, "EF") == 64e3
        assert w.racs.ledger.booked(link, REV, "EF") == 32e3
    w.racs.check_invariants()


def test_ef_budget_admits_two_then_rejects_third():
    w = World(subscribed=5e6)
    w.attach()
    w.attach("bob", "p2")
    for k in range(2):
        w.racs.reserve(f"s{k}", w.racs.authorize(w.request(ef(1.5e6), session=f"s{k}")))
    before = w.racs.ledger.snapshot()
    with pytest.raises(InsufficientCapacity) as exc:
        w.racs.reserve("s3", w.racs.authorize(w.request(ef(1.5e6), who="bob", session="s3")))
    assert exc.value.link_id == "L-ue"
    assert w.racs.ledger.snapshot() == before


def test_partial_path_rolls_back():
    w = World(caps=(10e6, 10e6, 1e6))  # EF budget on L-srv is 300 kb/s
    w.attach()
    before = w.racs.ledger.snapshot()
    with pytest.raises(InsufficientCapacity) as exc:
        w.racs.reserve("s1", w.racs.authorize(w.request(ef(400e3))))
    assert exc.value.link_id == "L-srv"
    assert w.racs.ledger.snapshot() == before == {}
    assert w.racs.ledger.booked("L-ue", FWD, "EF") == 0
    fails = w.net.log.of_kind("racs.reserve_failed")
    assert len(fails) == 1 and fails[0].link_id == "L-srv"


def test_best_effort_never_books():
    w = World()
    w.attach()
    res = w.racs.reserve("s1", w.racs.authorize(w.request(QosParameters(BEST_EFFORT, 1e6, 1e6))))
    assert res.bookings == [] and w.racs.ledger.is_zero()


def test_ledger_swap_is_judged_with_old_credited():
    topo = Topology(["a", "b"], [Link("L", "a", "b", 1e6)])
    ledger = CapacityLedger(topo)
    old = [Booking("L", FWD, "EF", 200e3)]
    ledger.book(old)
    new = [Booking("L", FWD, "EF", 300e3)]
    assert not ledger.fits(new) and ledger.fits(new, credit=old)
    ledger.swap(old, new)
    assert ledger.booked("L", FWD, "EF") == 300e3
    with pytest.raises(InsufficientCapacity):
        ledger.swap(new, [Booking("L", FWD, "EF", 300_001)])
    assert ledger.booked("L", FWD, "EF") == 300e3


# -- policies -----------------------------------------------------------------------


def test_derive_policy_examples():
    w = World(subscribed=10e6)
    w.attach()
    res = w.racs.reserve("s1", w.racs.authorize(w.request(ef(64e3))))
    pol = w.racs.derive_traffic_policy(res, res.granted, w.records["alice"].initial_gates)
    assert pol.marking == 46
    assert (pol.ul_policer.rate_bps, pol.ul_policer.burst_bytes) == (64e3, 1500)
    assert "srv" in pol.allowed_destinations and pol.gate_open

    res = w.racs.reserve("s2", w.racs.authorize(w.request(QosParameters(af(1), 4e6, 4e6, priority=5), session="s2")))
    pol = w.racs.derive_traffic_policy(res, res.granted, w.records["alice"].initial_gates)
    assert pol.ul_policer.burst_bytes == 5 / 1000 * 4e6 / 8 == 2500
    assert pol.marking == 10

    res = w.racs.reserve("s3", w.racs.authorize(w.request(QosParameters(BEST_EFFORT, 1e6, 1e6), session="s3")))
    pol = w.racs.derive_traffic_policy(res, res.granted, w.records["alice"].initial_gates)
    assert pol.ul_policer is None and pol.dl_policer is None and pol.gate_open


def test_install_then_first_packet_is_metered_and_marked():
    w = World()
    rec = w.attach()
    res = w.racs.reserve("s1", w.racs.authorize(w.request(ef(64e3))))
    pol = w.racs.install(res, rec.initial_gates)
    assert res.state is ReservationState.INSTALLED
    w.net.add_flow(FlowSpec("f", rec.ip, "srv", 160, 64e3, trace=((0.0, 160),), media="voice"))
    w.net.run(50)
    assert w.net.policies[pol.policy_id].meters["ul"].packets == 1
    assert w.net.packets("f")[0].codepoint == 46
    assert w.net.packets("f")[0].delivered_at is not None


def test_install_on_detached_gate_raises():
    w = World()
    rec = w.attach()
    res = w.racs.reserve("s1", w.racs.authorize(w.request(ef(64e3))))
    w.nass.detach(rec)
    w.net.remove_gate(rec.initial_gates.gate_id)
    with pytest.raises(UnknownGate):
        w.racs.install(res, rec.initial_gates)


def test_release_restores_ledger_and_gate():
    w = World()
    rec = w.attach()
    res = w.racs.reserve("s1", w.racs.authorize(w.request(ef(64e3))))
    w.racs.install(res, rec.initial_gates)
    gate = w.net.gates[rec.initial_gates.gate_id]
    assert gate.is_open
    w.racs.release(res.reservation_id)
    assert w.racs.ledger.is_zero() and not gate.is_open
    assert gate.allowed_destinations == ["srv"]
    assert w.racs.release(res.reservation_id).state is ReservationState.RELEASED
    with pytest.raises(UnknownReservation):
        w.racs.release("R-nope")


def test_release_one_of_two_removes_only_its_bookings():
    w = World()
    w.attach()
    a = w.racs.reserve("s1", w.racs.authorize(w.request(ef(64e3))))
    b = w.racs.reserve("s2", w.racs.authorize(w.request(ef(100e3), session="s2")))
    before = w.racs.ledger.snapshot()
    w.racs.release(a.reservation_id)
    after = w.racs.ledger.snapshot()
    for port, groups in before.items():
        assert groups["EF"] - after[port]["EF"] == pytest.approx(64e3)
        assert after[port]["EF"] == pytest.approx(100e3)
    assert b.state is ReservationState.RESERVED


def test_modify_swaps_policy_before_removing_old():
    w = World()
    rec = w.attach()
    res = w.racs.reserve("s1", w.racs.authorize(w.request(ef(64e3))))
    old = w.racs.install(res, rec.initial_gates)
    new = w.racs.modify_reservation(res.reservation_id, ef(128e3))
    assert res.state is ReservationState.RELEASED and res.replaced_by == new.reservation_id
    assert new.state is ReservationState.INSTALLED
    assert old.policy_id not in w.net.policies and new.policy.policy_id in w.net.policies
    assert w.racs.ledger.booked("L-core", FWD, "EF") == 128e3
    w.racs.check_invariants()


# -- tokens ------------------------------------------------------------------------------


def test_token_lifecycle():
    w = World()
    w.attach()
    req = w.request(ef(64e3), mode=InitiationMode.SCENARIO2)
    d = w.racs.authorize(req)
    tok = w.racs.issue_token(d, "s1")
    assert tok.granted == req.qos and tok.expiry == 30_000
    with pytest.raises(WrongMode):
        w.racs.issue_token(w.racs.authorize(w.request(ef(64e3))), "s1")
    w.racs.reserve_with_token(tok)
    with pytest.raises(TokenReused):
        w.racs.reserve_with_token(tok)


def test_token_expires_after_thirty_seconds():
    w = World()
    w.attach()
    tok = w.racs.issue_token(w.racs.authorize(w.request(ef(64e3), mode=InitiationMode.SCENARIO2)), "s1")
    w.now = 31_000
    assert w.racs.token_status(tok.token_id) == "expired"
    with pytest.raises(TokenExpired):
        w.racs.reserve_with_token(tok)


def test_second_token_revokes_first():
    w = World()
    w.attach()
    d = w.racs.authorize(w.request(ef(64e3), mode=InitiationMode.SCENARIO2))
    first = w.racs.issue_token(d, "s1")
    second = w.racs.issue_token(d, "s1")
    with pytest.raises(TokenRevoked):
        w.racs.reserve_with_token(first)
    assert w.racs.reserve_with_token(second).state is ReservationState.RESERVED


def test_token_consumed_even_when_capacity_fails():
    w = World(caps=(10e6, 1e6, 10e6))
    w.attach()
    tok = w.racs.issue_token(w.racs.authorize(w.request(ef(400e3), mode=InitiationMode.SCENARIO2)), "s1")
    with pytest.raises(InsufficientCapacity):
        w.racs.reserve_with_token(tok)
    assert w.racs.token_status(tok.token_id) == "used"
    with pytest.raises(TokenReused):
        w.racs.reserve_with_token(tok)


# -- unauthorized reservations ----------------------------------------------------------


def test_unauthorized_forbidden_by_default():
    w = World()
    w.attach()
    with pytest.raises(PolicyForbidden):
        w.racs.reserve_unauthorized(w.request(ef(64e3), mode=InitiationMode.SCENARIO3))
    assert w.racs.decisions[-1].reason == "policy"
    assert w.racs.ledger.is_zero()


def test_unauthorized_clamp_matches_authorized_grant():
    qos = QosParameters(af(1), 8e6, 8e6, priority=5)
    w1 = World(subscribed=2e6)
    w1.attach()
    granted1 = w1.racs.reserve("s1", w1.racs.authorize(w1.request(qos))).granted
    w3 = World(subscribed=2e6, allow=True)
    w3.attach()
    res = w3.racs.reserve_unauthorized(w3.request(qos, mode=InitiationMode.SCENARIO3))
    assert res.granted == granted1
    assert w3.racs.ledger.snapshot() == w1.racs.ledger.snapshot()


def test_detach_flags_then_release_flagged():
    w = World()
    rec = w.attach()
    w.racs.reserve("s1", w.racs.authorize(w.request(ef(64e3))))
    w.nass.detach(rec)
    assert len(w.racs.flagged()) == 1
    w.racs.release_flagged()
    assert w.racs.ledger.is_zero() and not w.racs.flagged()


# -- randomized ledger safety ----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.sampled_from([EF, af(1), af(3), BEST_EFFORT]),
                          st.integers(1, 40), st.integers(0, 40)), max_size=60))
def test_random_reserve_release_keeps_ledger_safe(ops):
    w = World(subscribed=10e6, caps=(10e6, 4e6, 6e6))
    w.attach()
    live = []
    for k, (reserve, tc, ul, dl) in enumerate(ops):
        if reserve or not live:
            qos = QosParameters(tc, ul * 50e3, dl * 50e3, priority=12)
            try:
                live.append(w.racs.reserve(f"s{k}", w.racs.authorize(w.request(qos, session=f"s{k}"))))
            except InsufficientCapacity:
                pass
        else:
            w.racs.release(live.pop(ul % len(live)).reservation_id)
        w.racs.check_invariants()
        for res in live:
            # bookings identical along the path
            assert {(b.group, b.bps) for b in res.bookings if b.direction == res.hops[0][1]} <= {
                (b.group, b.bps) for b in res.bookings
            }
    for res in live:
        w.racs.release(res.reservation_id)
    assert w.racs.ledger.is_zero()


def test_identical_sequences_give_identical_logs():
    def run():
        w = World(subscribed=10e6)
        w.attach()
        for k in range(5):
            try:
                w.racs.reserve(f"s{k}", w.racs.authorize(w.request(ef(800e3), session=f"s{k}")))
            except InsufficientCapacity:
                pass
        return w.net.log.text()

    assert run() == run()
