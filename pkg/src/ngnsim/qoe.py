"""Transport measurements to perceived quality.

MOS comes from a rating-factor model: delay impairment plus a
media-dependent loss impairment are subtracted from a base rating, and the
rating is mapped onto the 1..4.5 opinion scale by a cubic. Jitter is folded
into delay as ``mean + 2 * jitter`` to account for de-jitter buffering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .model import MediaType
from .transport.network import FlowMetrics

BASE_RATING = 93.2
DELAY_KNEE_MS = 177.3
LOSS_GAMMA = {
    MediaType.VOICE: 11.0,
    MediaType.VIDEO: 14.0,
    MediaType.STREAMING_AUDIO: 9.0,
    MediaType.DATA_INTERACTIVE: 6.0,
    MediaType.DATA_BULK: 2.0,
}

DEGRADED_LOSS = 0.01
ERRORED_LOSS = 0.05
DEGRADED_MOS = 3.5


class EmptyWindow(ValueError):
    pass


class UnknownSession(KeyError):
    pass


def effective_delay(mean_delay_ms: float, jitter_ms: float = 0.0) -> float:
    return mean_delay_ms + 2.0 * jitter_ms


def rating(delay_ms: float, loss: float, media: MediaType) -> float:
    delay_impairment = 0.024 * delay_ms
    if delay_ms > DELAY_KNEE_MS:
        delay_impairment += 0.11 * (delay_ms - DELAY_KNEE_MS)
    loss_impairment = LOSS_GAMMA[MediaType(media)] * math.log1p(15.0 * loss)
    return BASE_RATING - delay_impairment - loss_impairment


def mos_from_rating(r: float) -> float:
    if r <= 0:
        return 1.0
    if r >= 100:
        return 4.5
    mos = 1.0 + 0.035 * r + 7e-6 * r * (r - 60.0) * (100.0 - r)
    return min(5.0, max(1.0, mos))


def mos_from_impairments(delay_ms: float, loss: float, media: MediaType) -> float:
    return mos_from_rating(rating(delay_ms, loss, media))


def estimate_mos(metrics: FlowMetrics, media: MediaType) -> float:
    """MOS for a measured window; a window where nothing arrived scores 1."""
    if metrics.sent == 0:
        raise EmptyWindow(metrics.flow_id)
    if metrics.delivered == 0 or metrics.mean_delay_ms is None:
        return 1.0
    d = effective_delay(metrics.mean_delay_ms, metrics.jitter_ms or 0.0)
    return mos_from_impairments(d, metrics.loss, media)


@dataclass(frozen=True)
class Thresholds:
    degraded_loss: float = DEGRADED_LOSS
    errored_loss: float = ERRORED_LOSS
    degraded_mos: float = DEGRADED_MOS


def classify_second(m: FlowMetrics, media: MediaType, thresholds: Thresholds = Thresholds()) -> Optional[str]:
    """Bucket for one second: "unavailable", "errored", "degraded" or None."""
    if m.sent == 0:
        return None
    if m.loss >= 1.0 or m.delivered == 0:
        return "unavailable"
    if m.loss > thresholds.errored_loss:
        return "errored"
    if m.loss > thresholds.degraded_loss or estimate_mos(m, media) < thresholds.degraded_mos:
        return "degraded"
    return None


def temporal_quality(
    series: Sequence[FlowMetrics], media: MediaType = MediaType.VOICE, thresholds: Thresholds = Thresholds()
) -> tuple[int, int, int]:
    """Returns ``(degraded, errored, unavailable)`` second counts."""
    counts = {"degraded": 0, "errored": 0, "unavailable": 0}
    for second in series:
        bucket = classify_second(second, media, thresholds)
        if bucket is not None:
            counts[bucket] += 1
    return counts["degraded"], counts["errored"], counts["unavailable"]


@dataclass(frozen=True)
class QoeReport:
    session_id: str
    mos: float
    degraded_seconds: int
    errored_seconds: int
    unavailable_seconds: int
    total_seconds: int
    per_second_mos: tuple[Optional[float], ...] = field(default=())

    def __post_init__(self) -> None:
        if not 1.0 <= self.mos <= 5.0:
            raise ValueError(f"mos {self.mos} outside [1, 5]")
        if self.degraded_seconds + self.errored_seconds + self.unavailable_seconds > self.total_seconds:
            raise ValueError("temporal buckets exceed total seconds")

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "mos": self.mos,
            "degraded_seconds": self.degraded_seconds,
            "errored_seconds": self.errored_seconds,
            "unavailable_seconds": self.unavailable_seconds,
            "total_seconds": self.total_seconds,
            "per_second_mos": list(self.per_second_mos),
        }


def qoe_report(
    session_id: str,
    metrics: Optional[FlowMetrics],
    media: MediaType,
    thresholds: Thresholds = Thresholds(),
) -> QoeReport:
    """Whole-window MOS plus per-second buckets for one measured flow."""
    if metrics is None:
        raise UnknownSession(session_id)
    series = metrics.per_second
    degraded, errored, unavailable = temporal_quality(series, media, thresholds)
    per_second = tuple(estimate_mos(s, media) if s.sent else None for s in series)
    return QoeReport(
        session_id=session_id,
        mos=estimate_mos(metrics, media),
        degraded_seconds=degraded,
        errored_seconds=errored,
        unavailable_seconds=unavailable,
        total_seconds=len(series),
        per_second_mos=per_second,
    )
