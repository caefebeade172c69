"""Event timelines produced by the simulators, plus a list scheduler.

Each resource runs its events in program order. An event starts when its
resource is free and every dependency has finished (plus an optional
handoff delay). With a fixed order, every start time is a max-plus
expression of the durations, so makespan can only grow when a duration grows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable


@dataclass(frozen=True, slots=True)
class Event:
    id: int
    resource: str
    label: str
    start: float
    end: float
    amount: float = 0.0
    deps: tuple[int, ...] = ()


@dataclass
class Timeline:
    events: list[Event] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def on(self, resource: str) -> list[Event]:
        return [e for e in self.events if e.resource == resource]

    def busy_time(self, resource: str) -> float:
        return sum(e.end - e.start for e in self.on(resource))

    def resources(self) -> list[str]:
        return sorted({e.resource for e in self.events})

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "meta": self.meta,
            "events": [asdict(e) for e in self.events],
        }


class TimelineError(AssertionError):
    pass


def validate(tl: Timeline, tol: float = 0.0) -> None:
    """Check resource exclusivity and dependency ordering; raise TimelineError."""
    by_id = {e.id: e for e in tl.events}
    for e in tl.events:
        if e.end < e.start:
            raise TimelineError(f"event {e.id} {e.label!r} ends before it starts")
        for d in e.deps:
            if d not in by_id:
                raise TimelineError(f"event {e.id} depends on unknown event {d}")
            if by_id[d].end > e.start + tol:
                raise TimelineError(f"event {e.id} {e.label!r} starts before dependency {d} ends")
    for res in tl.resources():
        evs = sorted(tl.on(res), key=lambda e: (e.start, e.end))
        for a, b in zip(evs, evs[1:]):
            if b.start + tol < a.end:
                raise TimelineError(f"{res}: {a.label!r} and {b.label!r} overlap")


class ListScheduler:
    """Append events in program order; start = max(resource free, deps done + delay)."""

    def __init__(self):
        self.timeline = Timeline()
        self._free: dict[str, float] = {}
        self._ends: list[float] = []

    def end_of(self, event_id: int) -> float:
        return self._ends[event_id]

    def add(
        self,
        resource: str,
        label: str,
        duration: float,
        deps: Iterable[int | None] = (),
        synced: Iterable[int | None] = (),
        sync: float = 0.0,
        amount: float = 0.0,
    ) -> int:
        """Schedule one event; ``synced`` dependencies add ``sync`` handoff latency."""
        deps = tuple(d for d in deps if d is not None)
        synced = tuple(d for d in synced if d is not None)
        ready = max((self._ends[d] for d in deps), default=0.0)
        if synced:
            ready = max(ready, max(self._ends[d] for d in synced) + sync)
        start = max(self._free.get(resource, 0.0), ready)
        end = start + duration
        eid = len(self._ends)
        self._ends.append(end)
        self._free[resource] = end
        self.timeline.events.append(Event(eid, resource, label, start, end, amount, deps + synced))
        return eid
