"""What protocol nodes need from the engine that drives them.

Station and gateway state machines never touch the event queue directly;
they talk to a :class:`Runtime`.  ``simnet`` provides the real one, tests
use :class:`RecordingRuntime`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

from .core import NodeId


SETTLE_MS = 2000


class Runtime(Protocol):
    now: int
    # Sensing stops at ``horizon``; protocol nodes keep working until their
    # queues are empty and ``horizon + SETTLE_MS`` has passed.  None: no end.
    horizon: Optional[int]

    def send(self, src: NodeId, dst: NodeId, msg: Any) -> None: ...

    def broadcast(self, src: NodeId, dsts: Sequence[NodeId], msg: Any) -> None: ...

    def at(self, time: int, fn: Callable[..., None], *args: Any) -> None: ...

    def compute(self, node: NodeId, cost_ms: float) -> int:
        """Occupy ``node``'s processor for ``cost_ms``; returns the finish time."""
        ...

    def record(self, kind: str, **fields: Any) -> None: ...


def winding_down(rt: Any) -> bool:
    """True once the run is past its horizon plus the settle period."""
    h = getattr(rt, "horizon", None)
    return h is not None and rt.now >= h + SETTLE_MS


@dataclass(frozen=True)
class CostModel:
    """Processing time for validation work, in ms.

    Stations are datacentre-class machines; gateways are embedded sinks.  A
    signature check costs ``*_sig_ms``, touching one reading costs
    ``*_reading_ms`` and hashing costs ``*_kb_ms`` per KiB.
    """

    station_sig_ms: float = 0.01
    station_reading_ms: float = 0.0005
    station_kb_ms: float = 0.0005
    gateway_sig_ms: float = 0.3
    gateway_reading_ms: float = 0.05
    gateway_kb_ms: float = 0.02
    jitter: float = 0.05

    def station(self, sigs: int, readings: int, nbytes: int) -> float:
        return sigs * self.station_sig_ms + readings * self.station_reading_ms + nbytes / 1024 * self.station_kb_ms

    def gateway(self, sigs: int, readings: int, nbytes: int) -> float:
        return sigs * self.gateway_sig_ms + readings * self.gateway_reading_ms + nbytes / 1024 * self.gateway_kb_ms


@dataclass
class RecordingRuntime:
    """Synchronous runtime for unit tests: messages are collected, timers kept."""

    now: int = 0
    horizon: Optional[int] = None
    sent: List[Tuple[NodeId, NodeId, Any]] = field(default_factory=list)
    timers: List[Tuple[int, Callable[..., None], Tuple[Any, ...]]] = field(default_factory=list)
    events: List[Tuple[str, Dict[str, Any]]] = field(default_factory=list)

    def send(self, src: NodeId, dst: NodeId, msg: Any) -> None:
        self.sent.append((src, dst, msg))

    def broadcast(self, src: NodeId, dsts: Sequence[NodeId], msg: Any) -> None:
        for d in dsts:
            self.sent.append((src, d, msg))

    def at(self, time: int, fn: Callable[..., None], *args: Any) -> None:
        self.timers.append((time, fn, args))

    def compute(self, node: NodeId, cost_ms: float) -> int:
        return self.now

    def record(self, kind: str, **fields: Any) -> None:
        self.events.append((kind, fields))

    def take(self, kind: Optional[type] = None) -> List[Tuple[NodeId, NodeId, Any]]:
        """Pop the sent messages (optionally only those of one type)."""
        if kind is None:
            out, self.sent = self.sent, []
            return out
        out = [s for s in self.sent if isinstance(s[2], kind)]
        self.sent = [s for s in self.sent if not isinstance(s[2], kind)]
        return out

    def fire_due(self, until: int) -> None:
        """Run timers due at or before ``until`` in time order."""
        while True:
            due = sorted((t for t in self.timers if t[0] <= until), key=lambda t: t[0])
            if not due:
                break
            t = due[0]
            self.timers.remove(t)
            self.now = max(self.now, t[0])
            t[1](*t[2])
        self.now = max(self.now, until)
