"""Packet-level DiffServ transport simulation."""

from .enforcement import (
    Classifier,
    Gate,
    Meter,
    PolicerSpec,
    TokenBucket,
    TrafficPolicy,
    gate_check,
    police,
    policer_burst,
)
from .events import EventLog, EventLoop, LogRecord, parse_log
from .network import FlowMetrics, FlowSpec, Network, TransportError, UnknownFlow, UnknownGate, summarize
from .scheduler import Packet, Port, queue_for
from .topology import FWD, REV, Link, NoRoute, Topology

__all__ = [
    "Classifier",
    "EventLog",
    "EventLoop",
    "FWD",
    "FlowMetrics",
    "FlowSpec",
    "Gate",
    "Link",
    "LogRecord",
    "Meter",
    "Network",
    "NoRoute",
    "Packet",
    "PolicerSpec",
    "Port",
    "REV",
    "TokenBucket",
    "Topology",
    "TrafficPolicy",
    "TransportError",
    "UnknownFlow",
    "UnknownGate",
    "gate_check",
    "parse_log",
    "police",
    "policer_burst",
    "queue_for",
    "summarize",
]
