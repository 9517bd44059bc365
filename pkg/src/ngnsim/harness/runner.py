"""Wire NASS, IMS, RACS and the transport onto one event loop and run."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..ims import ImsError, Initiator, Ims, SessionRecord
from ..model import IdFactory, MediaType
from ..nass import Nass, NassError
from ..qoe import QoeReport, qoe_report
from ..racs import InitiationMode, Racs, RacsError
from ..transport import EventLog, EventLoop, FlowMetrics, FlowSpec, Network, TransportError
from .scenario import FORMAT_VERSION, Event, Scenario

logger = logging.getLogger(__name__)

FLOW_COLUMNS = (
    "flow_id", "second", "start_ms", "end_ms", "sent", "delivered", "dropped", "in_flight",
    "throughput_bps", "loss", "mean_delay_ms", "jitter_ms",
)


class IoError(OSError):
    pass


@dataclass
class RunReport:
    scenario: str
    seed: int
    duration_ms: float
    sessions: list[SessionRecord]
    session_flows: dict[str, list[str]]
    qoe: dict[str, Optional[QoeReport]]
    flows: dict[str, FlowMetrics]
    decisions: list[dict]
    ledger_snapshots: list[dict]
    ledger_final: dict
    counters: dict
    totals: dict
    event_results: list[dict]
    warnings: list[str] = field(default_factory=list)
    events_log: str = ""

    def session(self, session_id: str) -> SessionRecord:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise KeyError(session_id)

    def sessions_document(self) -> dict:
        sessions = []
        for s in self.sessions:
            entry = s.to_dict()
            entry["flows"] = self.session_flows.get(s.session_id, [])
            report = self.qoe.get(s.session_id)
            entry["qoe"] = report.to_dict() if report else None
            sessions.append(entry)
        return {
            "format_version": FORMAT_VERSION,
            "scenario": self.scenario,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "sessions": sessions,
            "decisions": self.decisions,
            "ledger": {"final": self.ledger_final, "snapshots": self.ledger_snapshots},
            "flows": {fid: m.to_row() for fid, m in sorted(self.flows.items())},
            "totals": self.totals,
            "counters": self.counters,
            "event_results": self.event_results,
            "warnings": self.warnings,
        }

    def sessions_json(self) -> str:
        return json.dumps(self.sessions_document(), indent=2, sort_keys=True) + "\n"

    def flows_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(FLOW_COLUMNS)
        for fid, metrics in sorted(self.flows.items()):
            for second in metrics.per_second:
                row = second.to_row()
                writer.writerow([
                    fid, int(second.window[0] // 1000), row["start_ms"], row["end_ms"], row["sent"],
                    row["delivered"], row["dropped"], row["in_flight"], row["throughput_bps"], row["loss"],
                    "" if row["mean_delay_ms"] is None else row["mean_delay_ms"],
                    "" if row["jitter_ms"] is None else row["jitter_ms"],
                ])
        return buf.getvalue()


class Simulation:
    """One scenario, fully wired. ``run()`` executes it to the end."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None) -> None:
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.loop = EventLoop()
        self.log = EventLog(enabled=scenario.event_log)
        self.ids = IdFactory()
        clock = lambda: self.loop.now  # noqa: E731
        subs = scenario.subscribers
        self.nass = Nass(scenario.access_networks, [s.subscription for s in subs.values()], clock)
        self.network = Network(scenario.topology, self.loop, self.log, resolve=self._resolve, seed=self.seed)
        self.racs = Racs(
            scenario.topology, self.nass, self.network, scenario.rules,
            allow_unauthorized_qos=scenario.allow_unauthorized_qos, clock=clock, log=self.log, ids=self.ids,
            ef_priority_floor=scenario.ef_priority_floor,
        )
        self.ims = Ims(
            {sid: s.profile for sid, s in subs.items()}, scenario.services, self.nass, self.racs,
            clock=clock, log=self.log, ids=self.ids, ef_priority_floor=scenario.ef_priority_floor,
        )
        self.nass.on_attach(self._on_attach)
        self.ims.on_active.append(self._start_session_flows)
        self.ims.on_modified.append(self._retune_session_flows)
        self.ims.on_closed.append(self._stop_session_flows)
        self.flow_config: dict[str, dict] = {}
        self.session_flows: dict[str, list[str]] = {}
        self.event_results: list[dict] = []
        self.ledger_snapshots: list[dict] = []

    # -- glue ---------------------------------------------------------------------

    def _resolve(self, address: str) -> Optional[str]:
        record = self.nass.record_for_ip(address)
        return record.node if record is not None else None

    def _on_attach(self, record) -> None:
        self.network.add_gate(record.initial_gates, record.access_link, record.ip)

    def _session_flow_specs(self, session: SessionRecord) -> list[tuple[FlowSpec, bool]]:
        cfg = self.flow_config.get(session.session_id, {})
        direction = cfg.get("direction", "ul")
        media = self.scenario.services[session.service].media_type
        now = self.loop.now
        stop = self.scenario.duration_ms
        if cfg.get("duration_ms") is not None:
            stop = min(stop, now + float(cfg["duration_ms"]))
        out = []
        for d, src, dst, bw in (
            ("ul", session.src_ip, session.destination, session.granted.ul_bandwidth),
            ("dl", session.destination, session.src_ip, session.granted.dl_bandwidth),
        ):
            if direction not in (d, "both"):
                continue
            explicit = cfg.get("rate_bps")
            rate = float(explicit) if explicit is not None else bw
            if rate <= 0:
                continue
            spec = FlowSpec(
                flow_id=f"{session.session_id}.{d}",
                src=src,
                dst=dst,
                packet_size=int(cfg.get("packet_size", 200)),
                rate_bps=rate,
                pattern=cfg.get("pattern", "constant"),
                on_ms=float(cfg.get("on_ms", 0.0)),
                off_ms=float(cfg.get("off_ms", 0.0)),
                start_ms=now,
                stop_ms=stop,
                media=media,
            )
            out.append((spec, explicit is None))
        return out

    def _start_session_flows(self, session: SessionRecord) -> None:
        for spec, _ in self._session_flow_specs(session):
            self.network.add_flow(spec)
            self.session_flows.setdefault(session.session_id, []).append(spec.flow_id)

    def _retune_session_flows(self, session: SessionRecord) -> None:
        if self.flow_config.get(session.session_id, {}).get("rate_bps") is not None:
            return
        for fid in self.session_flows.get(session.session_id, []):
            bw = session.granted.ul_bandwidth if fid.endswith(".ul") else session.granted.dl_bandwidth
            if bw > 0:
                self.network.set_rate(fid, bw)

    def _stop_session_flows(self, session: SessionRecord) -> None:
        for fid in self.session_flows.get(session.session_id, []):
            self.network.stop_flow(fid)

    # -- events -----------------------------------------------------------------------

    def _result(self, event: Event, outcome: str, **detail) -> None:
        entry = {"event": event.index, "at_ms": event.at_ms, "type": event.type, "outcome": outcome}
        entry.update(detail)
        self.event_results.append(entry)
        if outcome != "ok":
            self.log.record(self.loop.now, "harness.result", None, None, event=event.index, outcome=outcome,
                            **{k: v for k, v in detail.items() if k != "message"})

    def _dispatch(self, event: Event) -> None:
        handler = getattr(self, f"_do_{event.type}")
        try:
            handler(event, event.args)
        except (ImsError, RacsError, NassError, TransportError, KeyError, ValueError) as exc:
            self._result(event, "error", error=type(exc).__name__, message=str(exc))
        else:
            self._result(event, "ok")
        self.ledger_snapshots.append(
            {"event": event.index, "at_ms": event.at_ms, "booked": self.racs.ledger.snapshot()}
        )

    def _do_attach(self, event: Event, a: dict) -> None:
        spec = self.scenario.subscribers[a["subscriber"]]
        self.nass.attach(
            a["subscriber"], a["network"], a.get("physical_access_id", f"pa-{a['subscriber']}"),
            spec.terminal, a.get("credentials", spec.subscription.credentials),
        )

    def _do_register(self, event: Event, a: dict) -> None:
        spec = self.scenario.subscribers[a["subscriber"]]
        self.ims.register_user(a["subscriber"], a.get("credentials", spec.profile.credentials))

    def _do_initiate_session(self, event: Event, a: dict) -> None:
        label = str(a["session"])
        self.flow_config[label] = dict(a.get("flow", {}))
        self.ims.initiate_session(
            a["subscriber"], a["service"], int(a.get("point", 0)), InitiationMode(a.get("mode", "scenario1")),
            destination=a.get("destination"), physical_access_id=a.get("physical_access_id"), session_id=label,
        )

    def _do_renegotiate(self, event: Event, a: dict) -> None:
        self.ims.renegotiate(str(a["session"]), Initiator(a.get("initiator", "end_user")), int(a["point"]))

    def _do_terminate(self, event: Event, a: dict) -> None:
        self.ims.terminate_session(str(a["session"]))

    def _do_detach(self, event: Event, a: dict) -> None:
        record = self.nass.find(a["subscriber"], a.get("physical_access_id"))
        self.nass.detach(record)
        self.racs.release_flagged()
        self.ims.reconcile_released()
        self.network.remove_gate(record.initial_gates.gate_id)

    def _do_background_flow(self, event: Event, a: dict) -> None:
        stop = self.scenario.duration_ms
        if a.get("stop_ms") is not None:
            stop = min(stop, float(a["stop_ms"]))
        trace = tuple((float(t), int(s)) for t, s in a.get("trace", ()))
        self.network.add_flow(FlowSpec(
            flow_id=str(a["flow_id"]),
            src=str(a["src"]),
            dst=str(a["dst"]),
            packet_size=int(a.get("packet_size", 1000)),
            rate_bps=float(a["rate_bps"]),
            pattern=a.get("pattern", "constant"),
            on_ms=float(a.get("on_ms", 0.0)),
            off_ms=float(a.get("off_ms", 0.0)),
            seed=int(a.get("seed", 0)),
            trace=trace,
            start_ms=event.at_ms,
            stop_ms=stop,
            media=MediaType(a["media"]) if a.get("media") else None,
            codepoint=int(a.get("codepoint", 0)),
        ))

    # -- running ------------------------------------------------------------------------

    def run(self) -> RunReport:
        sc = self.scenario
        # harness events are queued first, so at equal times they fire before
        # any packet emission scheduled later
        for event in sc.events:
            self.loop.schedule(event.at_ms, self._dispatch, event)
        if any(e.type in ("initiate_session", "background_flow") for e in sc.events):
            self.network.schedule_ticks(sc.duration_ms)
        self.loop.run(sc.duration_ms)
        return self._report()

    def _report(self) -> RunReport:
        sc = self.scenario
        flows = {fid: self.network.collect_metrics(fid) for fid in sorted(self.network.flows)}
        qoe: dict[str, Optional[QoeReport]] = {}
        for sid, session in self.ims.sessions.items():
            measured = [flows[f] for f in self.session_flows.get(sid, []) if flows[f].sent]
            media = sc.services[session.service].media_type if session.service in sc.services else None
            qoe[sid] = qoe_report(sid, measured[0], media, sc.thresholds) if measured and media else None
        return RunReport(
            scenario=sc.name,
            seed=self.seed,
            duration_ms=sc.duration_ms,
            sessions=list(self.ims.sessions.values()),
            session_flows=self.session_flows,
            qoe=qoe,
            flows=flows,
            decisions=[d.to_dict() for d in self.racs.decisions],
            ledger_snapshots=self.ledger_snapshots,
            ledger_final=self.racs.ledger.snapshot(),
            counters=self.network.counters(),
            totals=self.network.totals(),
            event_results=self.event_results,
            warnings=[str(w) for w in sc.warnings],
            events_log=self.log.text(),
        )


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    files = {
        "events.log": report.events_log,
        "flows.csv": report.flows_csv(),
        "sessions.json": report.sessions_json(),
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = {}
        for name, text in files.items():
            _atomic_write(out / name, text)
            written[name] = out / name
    except OSError as exc:
        raise IoError(f"cannot write reports to {out}: {exc}") from exc
    return written


def run_scenario(scenario: Scenario, out_dir: Optional[str | Path] = None, seed: Optional[int] = None) -> RunReport:
    report = Simulation(scenario, seed).run()
    if out_dir is not None:
        write_outputs(report, out_dir)
    return report
