"""Shared domain vocabulary: traffic classes, QoS bundles, media types, ids.

Everything here is an immutable value. The DiffServ marking table lives at
the bottom of the module together with its inverse.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import NewType, Optional

SubscriberId = NewType("SubscriberId", str)
SessionId = NewType("SessionId", str)
FlowId = NewType("FlowId", str)
ReservationId = NewType("ReservationId", str)
GateId = NewType("GateId", str)

MAX_PRIORITY = 15
EF_PRIORITY_FLOOR = 10


class ModelError(ValueError):
    pass


class DuplicateId(ModelError):
    pass


class ClassKind(str, enum.Enum):
    EF = "EF"
    AF1 = "AF1"
    AF2 = "AF2"
    AF3 = "AF3"
    AF4 = "AF4"
    BETTER_BEST_EFFORT = "BetterBestEffort"
    BEST_EFFORT = "BestEffort"

    @property
    def is_af(self) -> bool:
        return self in _AF_KINDS

    @property
    def is_best_effort(self) -> bool:
        return self in (ClassKind.BEST_EFFORT, ClassKind.BETTER_BEST_EFFORT)


_AF_KINDS = frozenset({ClassKind.AF1, ClassKind.AF2, ClassKind.AF3, ClassKind.AF4})

# EF > AF1 > AF2 > AF3 > AF4 > BetterBestEffort > BestEffort
_LADDER = {
    ClassKind.EF: 6,
    ClassKind.AF1: 5,
    ClassKind.AF2: 4,
    ClassKind.AF3: 3,
    ClassKind.AF4: 2,
    ClassKind.BETTER_BEST_EFFORT: 1,
    ClassKind.BEST_EFFORT: 0,
}


@dataclass(frozen=True, order=False)
class TrafficClass:
    kind: ClassKind
    drop_precedence: Optional[int] = None

    def __post_init__(self) -> None:
        if not isinstance(self.kind, ClassKind):
            object.__setattr__(self, "kind", ClassKind(self.kind))
        if self.kind.is_af:
            if self.drop_precedence not in (1, 2, 3):
                raise ModelError(f"{self.kind.value} needs drop precedence 1..3, got {self.drop_precedence!r}")
        elif self.drop_precedence is not None:
            raise ModelError(f"{self.kind.value} carries no drop precedence")

    @property
    def rank(self) -> int:
        """Position on the quality ladder; higher is better."""
        return _LADDER[self.kind]

    def at_most(self, ceiling: TrafficClass) -> TrafficClass:
        """Downgrade to ``ceiling`` when this class sits above it."""
        return ceiling if self.rank > ceiling.rank else self

    def __str__(self) -> str:
        if self.drop_precedence is None:
            return self.kind.value
        return f"{self.kind.value}.{self.drop_precedence}"

    @classmethod
    def parse(cls, text: str) -> TrafficClass:
        """Parse ``"EF"``, ``"AF2.3"``, ``"BestEffort"`` and friends."""
        name, _, prec = str(text).partition(".")
        kind = ClassKind(_CLASS_ALIASES.get(name, name))
        if kind.is_af:
            return cls(kind, int(prec) if prec else 1)
        if prec:
            raise ModelError(f"{name} carries no drop precedence")
        return cls(kind)


_CLASS_ALIASES = {"BE": "BestEffort", "BBE": "BetterBestEffort"}

EF = TrafficClass(ClassKind.EF)
BEST_EFFORT = TrafficClass(ClassKind.BEST_EFFORT)
BETTER_BEST_EFFORT = TrafficClass(ClassKind.BETTER_BEST_EFFORT)


def af(n: int, precedence: int = 1) -> TrafficClass:
    return TrafficClass(ClassKind(f"AF{n}"), precedence)


class MediaType(str, enum.Enum):
    VOICE = "voice"
    VIDEO = "video"
    STREAMING_AUDIO = "streaming_audio"
    DATA_INTERACTIVE = "data_interactive"
    DATA_BULK = "data_bulk"


class Direction(str, enum.Enum):
    UNIDIRECTIONAL = "unidirectional"
    BIDIRECTIONAL = "bidirectional"


class Symmetry(str, enum.Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


class Cast(str, enum.Enum):
    UNICAST = "unicast"
    MULTICAST = "multicast"


@dataclass(frozen=True)
class TrafficPattern:
    direction: Direction = Direction.BIDIRECTIONAL
    symmetry: Symmetry = Symmetry.ASYMMETRIC
    cast: Cast = Cast.UNICAST

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "symmetry", Symmetry(self.symmetry))
        object.__setattr__(self, "cast", Cast(self.cast))


@dataclass(frozen=True)
class QosParameters:
    """A bundle of QoS parameters. Bandwidths in bit/s, delays in ms."""

    traffic_class: TrafficClass
    ul_bandwidth: float
    dl_bandwidth: float
    max_delay: Optional[float] = None
    max_loss: Optional[float] = None
    max_jitter: Optional[float] = None
    priority: int = 0
    traffic_pattern: TrafficPattern = field(default_factory=TrafficPattern)

    def __post_init__(self) -> None:
        if self.ul_bandwidth < 0 or self.dl_bandwidth < 0:
            raise ModelError("bandwidths must be non-negative")
        if not 0 <= self.priority <= MAX_PRIORITY:
            raise ModelError(f"priority {self.priority} outside 0..{MAX_PRIORITY}")
        if self.max_loss is not None and not 0.0 <= self.max_loss <= 1.0:
            raise ModelError("max_loss must be a fraction in 0..1")
        for name in ("max_delay", "max_jitter"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ModelError(f"{name} must be non-negative")
        pattern = self.traffic_pattern
        if (
            pattern.direction is Direction.BIDIRECTIONAL
            and pattern.symmetry is Symmetry.SYMMETRIC
            and self.ul_bandwidth != self.dl_bandwidth
        ):
            raise ModelError("symmetric bidirectional pattern requires ul == dl")

    def check_ef_floor(self, floor: int = EF_PRIORITY_FLOOR) -> None:
        if self.traffic_class.kind is ClassKind.EF and self.priority < floor:
            raise ModelError(f"EF requires priority >= {floor}, got {self.priority}")

    def with_ef_floor(self, floor: int = EF_PRIORITY_FLOOR) -> QosParameters:
        """Demote EF to AF1 when priority has been clamped below the EF floor."""
        if self.traffic_class.kind is ClassKind.EF and self.priority < floor:
            return replace(self, traffic_class=af(1))
        return self

    def _bandwidth_fields(self, ul: float, dl: float) -> dict:
        changes: dict = {"ul_bandwidth": ul, "dl_bandwidth": dl}
        pattern = self.traffic_pattern
        if (
            pattern.direction is Direction.BIDIRECTIONAL
            and pattern.symmetry is Symmetry.SYMMETRIC
            and ul != dl
        ):
            both = min(ul, dl)
            changes = {"ul_bandwidth": both, "dl_bandwidth": both}
        return changes

    def clamp(
        self,
        *,
        max_class: Optional[TrafficClass] = None,
        max_priority: Optional[int] = None,
        max_ul: Optional[float] = None,
        max_dl: Optional[float] = None,
    ) -> QosParameters:
        """Return a copy with every given ceiling applied."""
        cls = self.traffic_class if max_class is None else self.traffic_class.at_most(max_class)
        prio = self.priority if max_priority is None else min(self.priority, max_priority)
        ul = self.ul_bandwidth if max_ul is None else min(self.ul_bandwidth, max_ul)
        dl = self.dl_bandwidth if max_dl is None else min(self.dl_bandwidth, max_dl)
        return replace(self, traffic_class=cls, priority=prio, **self._bandwidth_fields(ul, dl))

    def narrowed_to(self, other: QosParameters) -> QosParameters:
        """Pointwise minimum of two bundles; requirement bounds come from ``other``."""
        cls = self.traffic_class.at_most(other.traffic_class)
        return replace(
            self,
            traffic_class=cls,
            priority=min(self.priority, other.priority),
            max_delay=other.max_delay,
            max_loss=other.max_loss,
            max_jitter=other.max_jitter,
            **self._bandwidth_fields(
                min(self.ul_bandwidth, other.ul_bandwidth), min(self.dl_bandwidth, other.dl_bandwidth)
            ),
        )

    def shrinks_any(self, request: QosParameters) -> bool:
        """True if ``self`` grants strictly less than ``request`` in some dimension."""
        return (
            self.ul_bandwidth < request.ul_bandwidth
            or self.dl_bandwidth < request.dl_bandwidth
            or self.priority < request.priority
            or self.traffic_class.rank < request.traffic_class.rank
        )

    def to_dict(self) -> dict:
        return {
            "class": str(self.traffic_class),
            "ul_bps": self.ul_bandwidth,
            "dl_bps": self.dl_bandwidth,
            "max_delay_ms": self.max_delay,
            "max_loss": self.max_loss,
            "max_jitter_ms": self.max_jitter,
            "priority": self.priority,
            "pattern": [
                self.traffic_pattern.direction.value,
                self.traffic_pattern.symmetry.value,
                self.traffic_pattern.cast.value,
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> QosParameters:
        pattern = data.get("pattern")
        if isinstance(pattern, dict):
            tp = TrafficPattern(**pattern)
        elif pattern:
            tp = TrafficPattern(*pattern)
        else:
            tp = TrafficPattern()
        return cls(
            traffic_class=TrafficClass.parse(data.get("class", "BestEffort")),
            ul_bandwidth=float(data.get("ul_bps", 0)),
            dl_bandwidth=float(data.get("dl_bps", 0)),
            max_delay=data.get("max_delay_ms"),
            max_loss=data.get("max_loss"),
            max_jitter=data.get("max_jitter_ms"),
            priority=int(data.get("priority", 0)),
            traffic_pattern=tp,
        )


class IdFactory:
    """Hands out scenario-unique opaque tokens and refuses duplicates."""

    def __init__(self) -> None:
        self._seen: set[str] = set()
        self._counters: dict[str, itertools.count] = {}

    def new(self, prefix: str) -> str:
        counter = self._counters.setdefault(prefix, itertools.count(1))
        while True:
            token = f"{prefix}{next(counter)}"
            if token not in self._seen:
                self._seen.add(token)
                return token

    def claim(self, token: str) -> str:
        if token in self._seen:
            raise DuplicateId(token)
        self._seen.add(token)
        return token


# DiffServ marking table. Codepoints are the standard DSCP values.
_MARKING: dict[TrafficClass, int] = {
    EF: 46,
    BETTER_BEST_EFFORT: 2,
    BEST_EFFORT: 0,
}
for _n, _base in zip((1, 2, 3, 4), (10, 18, 26, 34)):
    for _p in (1, 2, 3):
        _MARKING[af(_n, _p)] = _base + 2 * (_p - 1)

_UNMARKING: dict[int, TrafficClass] = {cp: cls for cls, cp in _MARKING.items()}
assert len(_UNMARKING) == len(_MARKING)

MARKING_TABLE = dict(_MARKING)


def class_to_codepoint(traffic_class: TrafficClass) -> int:
    return _MARKING[traffic_class]


def codepoint_to_class(codepoint: int) -> TrafficClass:
    """Inverse of :func:`class_to_codepoint`; unknown codepoints are best effort."""
    return _UNMARKING.get(codepoint, BEST_EFFORT)
