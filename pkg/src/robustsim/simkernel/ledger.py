"""Wall-clock accounting: a partition of the run into classified segments, and ETTR over it."""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

SEGMENT_CLASSES = ("productive", "checkpoint", "detection", "localization", "failover", "recompute")


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    cls: str

    @property
    def duration(self) -> int:
        return self.end - self.start

    def to_list(self) -> list:
        return [self.start, self.end, self.cls]


class MetricsLedger:
    """Contiguous segments from 0 onward. Adjacent segments of one class merge."""

    def __init__(self) -> None:
        self.segments: List[Segment] = []

    @property
    def cursor(self) -> int:
        return self.segments[-1].end if self.segments else 0

    def advance(self, until: int, cls: str) -> None:
        """Classify ``[cursor, until)`` as ``cls``."""
        if cls not in SEGMENT_CLASSES:
            raise ValueError(f"unknown segment class {cls!r}")
        start = self.cursor
        if until < start:
            raise ValueError(f"segment end {until} before cursor {start}")
        if until == start:
            return
        if self.segments and self.segments[-1].cls == cls:
            last = self.segments.pop()
            start = last.start
        self.segments.append(Segment(start, until, cls))

    def reclassify(self, start: int, end: int, old: str, new: str) -> None:
        """Relabel the ``old`` portions of ``[start, end)`` as ``new``."""
        out: List[Segment] = []
        for s in self.segments:
            if s.cls != old or s.end <= start or s.start >= end:
                out.append(s)
                continue
            lo, hi = max(s.start, start), min(s.end, end)
            if s.start < lo:
                out.append(Segment(s.start, lo, old))
            out.append(Segment(lo, hi, new))
            if hi < s.end:
                out.append(Segment(hi, s.end, old))
        self.segments = _merge(out)

    def truncate(self, horizon: int) -> None:
        out = []
        for s in self.segments:
            if s.start >= horizon:
                break
            out.append(Segment(s.start, min(s.end, horizon), s.cls))
        self.segments = out

    def totals(self) -> dict:
        out = {c: 0 for c in SEGMENT_CLASSES}
        for s in self.segments:
            out[s.cls] += s.duration
        return out

    def productive_between(self, a: int, b: int) -> int:
        return productive_between(self.segments, a, b)

    def to_list(self) -> list:
        return [s.to_list() for s in self.segments]

    @classmethod
    def from_list(cls, rows: Iterable[Sequence]) -> "MetricsLedger":
        led = cls()
        led.segments = [Segment(int(a), int(b), str(c)) for a, b, c in rows]
        return led


def _merge(segs: List[Segment]) -> List[Segment]:
    out: List[Segment] = []
    for s in segs:
        if s.duration == 0:
            continue
        if out and out[-1].cls == s.cls and out[-1].end == s.start:
            out[-1] = Segment(out[-1].start, s.end, s.cls)
        else:
            out.append(s)
    return out


def productive_between(segments: Sequence[Segment], a: int, b: int) -> int:
    total = 0
    for s in segments:
        if s.cls != "productive":
            continue
        lo, hi = max(s.start, a), min(s.end, b)
        if hi > lo:
            total += hi - lo
    return total


class _Prefix:
    """Cumulative productive time, queryable at any instant in O(log n)."""

    def __init__(self, segments: Sequence[Segment]):
        self.starts = [s.start for s in segments]
        self.segments = list(segments)
        self.before = []
        acc = 0
        for s in segments:
            self.before.append(acc)
            if s.cls == "productive":
                acc += s.duration

    def at(self, t: int) -> int:
        i = bisect.bisect_right(self.starts, t) - 1
        if i < 0:
            return 0
        s = self.segments[i]
        inside = min(t, s.end) - s.start if s.cls == "productive" else 0
        return self.before[i] + max(0, inside)


def boundaries(segments: Sequence[Segment]) -> List[int]:
    return [s.end for s in segments]


def ettr_at(segments: Sequence[Segment], t: int, window: Optional[int] = None) -> float:
    """Productive share of ``[0, t]`` or of the trailing ``window`` ending at ``t``."""
    if t <= 0:
        return 1.0
    pre = _Prefix(segments)
    if window is None:
        return pre.at(t) / t
    lo = max(0, t - window)
    return (pre.at(t) - pre.at(lo)) / min(t, window)


def ettr(ledger, mode: str = "cumulative", window_s: float = 3600.0,
         times: Optional[Sequence[int]] = None) -> List[Tuple[int, float]]:
    """ETTR series sampled at every segment boundary (or at ``times``).

    Sliding mode divides by ``min(t, window)`` so early samples are not
    penalized for time before the run began.
    """
    segments = ledger.segments if isinstance(ledger, MetricsLedger) else list(ledger)
    if not segments:
        return [(0, 1.0)]
    pre = _Prefix(segments)
    pts = list(times) if times is not None else boundaries(segments)
    window = int(round(window_s * 1000))
    out = []
    for t in pts:
        if t <= 0:
            out.append((t, 1.0))
        elif mode == "cumulative":
            out.append((t, pre.at(t) / t))
        elif mode == "sliding":
            lo = max(0, t - window)
            out.append((t, (pre.at(t) - pre.at(lo)) / min(t, window)))
        else:
            raise ValueError(f"unknown ETTR mode {mode!r}")
    return out
