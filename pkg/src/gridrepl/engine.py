"""Deterministic discrete-event engine.

Events are dispatched in ``(fire_at, seq)`` order where ``seq`` is the
insertion counter, so simultaneous events fire first-in first-out and a run
is bit-reproducible.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable


class SchedulingInPast(ValueError):
    pass


class HandlerFault(RuntimeError):
    """Raised when an event handler fails; the run halts."""

    def __init__(self, event: "Event", cause: BaseException):
        super().__init__(
            f"handler for {event.kind.name} at t={event.fire_at!r} (seq {event.seq}) "
            f"raised {type(cause).__name__}: {cause}"
        )
        self.event = event
        self.cause = cause


class EventKind(enum.Enum):
    FlowCompleted = "flow_completed"
    FileRecorded = "file_recorded"
    ActivityTick = "activity_tick"
    AnalysisStart = "analysis_start"
    ReproductionStart = "reproduction_start"
    MetricSample = "metric_sample"


@dataclass
class Event:
    kind: EventKind
    payload: Any = None
    fire_at: float = 0.0
    seq: int = -1


@dataclass(frozen=True)
class EventHandle:
    seq: int


@dataclass
class _Entry:
    event: Event
    alive: bool = True

    def __lt__(self, other: "_Entry") -> bool:
        a, b = self.event, other.event
        return (a.fire_at, a.seq) < (b.fire_at, b.seq)


Handler = Callable[[Event], None]


@dataclass
class Simulator:
    """Virtual clock plus a time-ordered event queue.

    Handlers are registered per :class:`EventKind`. Callbacks registered with
    :meth:`at_instant_end` run once, after every event at the current instant
    has been dispatched and before the clock advances; they may schedule
    further events at the current time.
    """

    _now: float = 0.0
    _queue: list[_Entry] = field(default_factory=list)
    _pending: dict[int, _Entry] = field(default_factory=dict)
    _seq: itertools.count = field(default_factory=itertools.count)
    _handlers: dict[EventKind, Handler] = field(default_factory=dict)
    _instant_hooks: list[Callable[[], None]] = field(default_factory=list)
    _hooks_armed: bool = False
    dispatched: int = 0

    def now(self) -> float:
        return self._now

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, event: Event, at: float) -> EventHandle:
        if at < self._now:
            raise SchedulingInPast(f"cannot schedule {event.kind.name} at {at!r} < now {self._now!r}")
        event.fire_at = float(at)
        event.seq = next(self._seq)
        entry = _Entry(event)
        heapq.heappush(self._queue, entry)
        self._pending[event.seq] = entry
        return EventHandle(event.seq)

    def cancel(self, handle: EventHandle) -> bool:
        entry = self._pending.pop(handle.seq, None)
        if entry is None:
            return False
        entry.alive = False
        return True

    def at_instant_end(self, hook: Callable[[], None]) -> None:
        """Register a hook; it only runs after :meth:`request_settle`."""
        self._instant_hooks.append(hook)

    def request_settle(self) -> None:
        self._hooks_armed = True

    def _settle(self) -> None:
        while self._hooks_armed:
            self._hooks_armed = False
            for hook in self._instant_hooks:
                hook()

    def _head(self) -> _Entry | None:
        q = self._queue
        while q and not q[0].alive:
            heapq.heappop(q)
        return q[0] if q else None

    def peek_time(self) -> float | None:
        head = self._head()
        return None if head is None else head.event.fire_at

    def run_until(self, t_end: float) -> int:
        if t_end < self._now:
            raise SchedulingInPast(f"run_until({t_end!r}) is before now {self._now!r}")
        count = 0
        queue = self._queue
        while True:
            head = self._head()
            if head is None or head.event.fire_at > self._now:
                if self._hooks_armed:
                    self._settle()
                    continue
            if head is None or head.event.fire_at > t_end:
                break
            heapq.heappop(queue)
            event = head.event
            del self._pending[event.seq]
            self._now = event.fire_at
            handler = self._handlers.get(event.kind)
            if handler is not None:
                try:
                    handler(event)
                except Exception as exc:
                    raise HandlerFault(event, exc) from exc
            count += 1
        self._now = max(self._now, float(t_end))
        self.dispatched += count
        return count

    def run(self) -> int:
        """Dispatch until the queue is empty."""
        count = 0
        while True:
            t = self.peek_time()
            if t is None:
                if self._hooks_armed:
                    self._settle()
                    continue
                return count
            count += self.run_until(t)
