"""Deterministic event loop and the line-oriented event log.

Log records are ``time_ms kind flow_id link_id detail``; ``-`` stands in for
an absent flow or link, and ``detail`` is a space separated list of
``key=value`` tokens.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Optional


class EventLoop:
    """Min-heap of ``(time_ms, seq)`` ordered callbacks.

    ``seq`` is a global counter assigned when an event is scheduled, so two
    events at the same instant always fire in creation order.
    """

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()

    def schedule(self, at: float, callback: Callable[..., Any], *args: Any) -> int:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        seq = next(self._seq)
        heapq.heappush(self._heap, (at, seq, callback, args))
        return seq

    def call_later(self, delay: float, callback: Callable[..., Any], *args: Any) -> int:
        return self.schedule(self.now + delay, callback, *args)

    def peek(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def run(self, until: float) -> None:
        """Process every event with time <= ``until``, then park the clock there."""
        heap = self._heap
        while heap and heap[0][0] <= until:
            at, _, callback, args = heapq.heappop(heap)
            self.now = at
            callback(*args)
        self.now = max(self.now, until)

    def __len__(self) -> int:
        return len(self._heap)


def fmt_time(t: float) -> str:
    return f"{t:.6f}"


def _fmt_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(round(value, 9))
    text = str(value)
    return text.replace(" ", "_") if text else "-"


@dataclass(frozen=True)
class LogRecord:
    time_ms: float
    kind: str
    flow_id: str
    link_id: str
    detail: dict[str, str]

    @classmethod
    def parse(cls, line: str) -> LogRecord:
        parts = line.rstrip("\n").split(" ")
        t, kind, flow, link = parts[:4]
        detail = dict(tok.split("=", 1) for tok in parts[4:] if tok)
        return cls(float(t), kind, flow, link, detail)


class EventLog:
    def __init__(self, enabled: bool = True) -> None:
        self.enabled = enabled
        self.lines: list[str] = []

    def record(
        self,
        time_ms: float,
        kind: str,
        flow_id: Optional[str] = None,
        link_id: Optional[str] = None,
        **detail: Any,
    ) -> None:
        if not self.enabled:
            return
        parts = [fmt_time(time_ms), kind, flow_id or "-", link_id or "-"]
        parts.extend(f"{k}={_fmt_value(v)}" for k, v in detail.items())
        self.lines.append(" ".join(parts))

    def records(self) -> Iterator[LogRecord]:
        return (LogRecord.parse(line) for line in self.lines)

    def of_kind(self, *kinds: str) -> list[LogRecord]:
        wanted = set(kinds)
        return [r for r in self.records() if r.kind in wanted]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def __len__(self) -> int:
        return len(self.lines)

    def __iter__(self) -> Iterator[str]:
        return iter(self.lines)


def parse_log(lines: Iterable[str]) -> list[LogRecord]:
    return [LogRecord.parse(line) for line in lines if line.strip()]
