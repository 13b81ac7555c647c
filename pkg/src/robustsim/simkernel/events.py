"""Timestamped event queue: ordered by (time, priority, insertion sequence)."""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

# Lower runs first among events sharing a timestamp.
PRIORITY = {
    "fault-end": 1,
    "fault-onset": 2,
    "update-submit": 3,
    "update-expiry": 4,
    "resume": 5,
    "log-alert": 6,
    "inspection": 7,
    "metric-sample": 8,
    "comm-timeout": 9,
    "step-end": 10,
    "horizon": 99,
}


@dataclass(order=True)
class Event:
    time: int
    priority: int
    seq: int
    kind: str = field(compare=False)
    data: Dict[str, Any] = field(compare=False, default_factory=dict)


class EventQueue:
    def __init__(self) -> None:
        self._heap: List[Event] = []
        self._seq = itertools.count()
        self.now = 0

    def push(self, time: int, kind: str, **data: Any) -> Event:
        if time < self.now:
            raise ValueError(f"cannot schedule {kind} at {time} before now={self.now}")
        ev = Event(int(time), PRIORITY[kind], next(self._seq), kind, data)
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> Optional[Event]:
        if not self._heap:
            return None
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        return ev

    def peek_time(self) -> Optional[int]:
        return self._heap[0].time if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)
