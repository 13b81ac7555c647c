"""Real-time checks: periodic inspections, metric monitors and alert classification.

All times here are integer milliseconds.
"""
from __future__ import annotations

import math
import statistics
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

SECOND = 1000


class Action(str, Enum):
    EVICT_NOW = "evict-now"
    TOLERATE = "tolerate"
    STOP_TIME = "stop-time"
    AGGREGATION = "aggregation-trigger"
    ROLLBACK = "rollback"


@dataclass(frozen=True)
class InspectionRule:
    item: str
    interval_s: float
    threshold: int = 1
    kinds: Tuple[str, ...] = ()
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.interval_s <= 0:
            raise ValueError(f"{self.item}: interval must be positive")
        if self.threshold < 1:
            raise ValueError(f"{self.item}: threshold must be >= 1")

    @property
    def interval_ms(self) -> int:
        return int(round(self.interval_s * SECOND))


DEFAULT_RULES: Dict[str, InspectionRule] = {
    r.item: r
    for r in (
        InspectionRule("nic", 30, 1, ("nic-crash",)),
        InspectionRule("port-flapping", 30, 1, ("port-flapping",)),
        InspectionRule("switch", 30, 2, ("switch-down",)),
        InspectionRule("gpu-driver", 10, 1, ("gpu-driver-hang",)),
        InspectionRule("gpu-temp", 10, 1, ("gpu-high-temp",)),
        InspectionRule("gpu-lost", 10, 1, ("gpu-lost",)),
        InspectionRule("os-kernel", 2, 1, ("os-kernel-fault",)),
    )
}

# Items that can be configured but ship without a threshold.
CONFIG_ONLY_ITEMS = ("pcie-bandwidth", "row-remap", "packet-loss")

ITEM_ACTIONS = {
    "gpu-lost": Action.EVICT_NOW,
    "gpu-driver": Action.EVICT_NOW,
    "disk": Action.EVICT_NOW,
    "os-kernel": Action.EVICT_NOW,
    "gpu-temp": Action.EVICT_NOW,
    "switch": Action.EVICT_NOW,
    "pcie-bandwidth": Action.EVICT_NOW,
    "row-remap": Action.EVICT_NOW,
}
NETWORK_ITEMS = ("nic", "port-flapping", "packet-loss")


@dataclass(frozen=True)
class Alert:
    time: int
    source: str                         # inspection | log | metric | timeout
    rule: str
    machines: Tuple[int, ...] = ()
    detail: Mapping[str, object] = field(default_factory=dict)
    fault_ids: Tuple[int, ...] = ()     # ground truth, for accounting only

    @property
    def confidence(self) -> str:
        return "machine-attributed" if self.machines else "unattributed"

    def to_dict(self) -> dict:
        return {
            "time": self.time, "source": self.source, "rule": self.rule,
            "machines": list(self.machines), "confidence": self.confidence,
            "detail": dict(self.detail), "fault_ids": list(self.fault_ids),
        }


# --------------------------------------------------------------------------- inspections

class Inspector:
    """Tracks consecutive positive readings per (rule, machine).

    A reading counts only for faults whose onset is strictly before the poll.
    An alert is raised once a rule's threshold of consecutive positive polls
    is reached, and again on every further positive poll.
    """

    def __init__(self, rules: Mapping[str, InspectionRule]):
        self.rules = {k: v for k, v in rules.items() if v.enabled and v.kinds}
        self._streak: Dict[Tuple[str, int], int] = {}

    def rules_for(self, kind: str) -> List[InspectionRule]:
        return [r for r in self.rules.values() if kind in r.kinds]

    @staticmethod
    def next_poll(rule: InspectionRule, after: int) -> int:
        """First poll time strictly after ``after`` (polls run at multiples of the interval)."""
        iv = rule.interval_ms
        return (after // iv + 1) * iv

    def poll(self, rule: InspectionRule, now: int,
             readings: Mapping[int, Sequence[int]]) -> List[Alert]:
        """``readings``: machine -> ids of matching faults active on it since before ``now``."""
        alerts = []
        for key in [k for k in self._streak if k[0] == rule.item and k[1] not in readings]:
            del self._streak[key]
        for machine in sorted(readings):
            key = (rule.item, machine)
            self._streak[key] = self._streak.get(key, 0) + 1
            if self._streak[key] >= rule.threshold:
                alerts.append(Alert(now, "inspection", rule.item, (machine,),
                                    {"streak": self._streak[key]}, tuple(readings[machine])))
        return alerts

    def forget(self, machines: Iterable[int]) -> None:
        ms = set(machines)
        for key in [k for k in self._streak if k[1] in ms]:
            del self._streak[key]


# --------------------------------------------------------------------------- metric monitors

@dataclass(frozen=True)
class MetricMonitor:
    name: str
    metric: str                      # loss | grad-norm | rdma | tensorcore
    rule: str                        # nan | ratio-spike | zero-for | below | decline
    action: Action
    factor: float = 0.0
    duration_s: float = 0.0
    threshold: float = 0.0
    window: int = 10
    consecutive: int = 3


DEFAULT_MONITORS: Tuple[MetricMonitor, ...] = (
    MetricMonitor("loss-nan", "loss", "nan", Action.STOP_TIME),
    MetricMonitor("loss-spike", "loss", "ratio-spike", Action.STOP_TIME, factor=5.0),
    MetricMonitor("grad-norm-spike", "grad-norm", "ratio-spike", Action.STOP_TIME, factor=5.0),
    MetricMonitor("rdma-zero", "rdma", "zero-for", Action.AGGREGATION, duration_s=600),
    MetricMonitor("tensorcore-decline", "tensorcore", "decline", Action.AGGREGATION,
                  factor=0.5, window=10, consecutive=3),
    MetricMonitor("tensorcore-low", "tensorcore", "below", Action.AGGREGATION,
                  threshold=0.9, duration_s=600),
)


class MetricWatch:
    """Evaluates monitors over a stream of periodic job-level samples.

    Duration rules measure from the start of the sample interval in which
    the condition was first seen, since a sample summarizes that interval.
    """

    def __init__(self, monitors: Sequence[MetricMonitor], sample_s: float = 60.0):
        self.monitors = list(monitors)
        self.sample_ms = int(round(sample_s * SECOND))
        self.history: Dict[str, Deque[float]] = {}
        self._bad_since: Dict[str, int] = {}
        self._streak: Dict[str, int] = {}
        self._last: Dict[str, float] = {}

    def reset(self) -> None:
        self._bad_since.clear()
        self._streak.clear()
        self._last.clear()

    def observe(self, now: int, values: Mapping[str, float]) -> List[Alert]:
        alerts = []
        for mon in self.monitors:
            if mon.metric not in values:
                continue
            v = values[mon.metric]
            if self._check(mon, now, v):
                alerts.append(Alert(now, "metric", mon.name, (), {"metric": mon.metric, "value": _jsonable(v)}))
        for metric, v in values.items():
            if not math.isnan(v):
                self.history.setdefault(metric, deque(maxlen=32)).append(v)
            self._last[metric] = v
        return alerts

    def _check(self, mon: MetricMonitor, now: int, v: float) -> bool:
        if mon.rule == "nan":
            return math.isnan(v)
        if math.isnan(v):
            return False
        if mon.rule == "ratio-spike":
            prev = self._last.get(mon.metric)
            return prev is not None and not math.isnan(prev) and prev > 0 and v >= mon.factor * prev
        if mon.rule in ("zero-for", "below"):
            bad = v == 0 if mon.rule == "zero-for" else v < mon.threshold
            if not bad:
                self._bad_since.pop(mon.name, None)
                return False
            since = self._bad_since.setdefault(mon.name, now - self.sample_ms)
            return now - since >= int(round(mon.duration_s * SECOND))
        if mon.rule == "decline":
            hist = [x for x in self.history.get(mon.metric, ()) if x > 0][-mon.window:]
            if v <= 0 or not hist:
                self._streak[mon.name] = 0
                return False
            if v <= mon.factor * statistics.median(hist):
                self._streak[mon.name] = self._streak.get(mon.name, 0) + 1
            else:
                self._streak[mon.name] = 0
            return self._streak[mon.name] >= mon.consecutive
        raise ValueError(f"unknown rule {mon.rule!r}")


def _jsonable(v: float):
    return None if isinstance(v, float) and math.isnan(v) else v


# --------------------------------------------------------------------------- classification

@dataclass(frozen=True)
class NetworkTolerance:
    count: int = 2
    window_s: float = 300.0


def classify(alert: Alert, history: Sequence[Alert], tolerance: NetworkTolerance = NetworkTolerance()) -> Action:
    """Map an alert to the controller's next move.

    ``history`` holds earlier alerts (oldest first); only network alerts on
    the same machines inside the tolerance window matter.
    """
    if alert.source == "inspection":
        if alert.rule in NETWORK_ITEMS:
            window = int(round(tolerance.window_s * SECOND))
            recent = [
                a for a in history
                if a.source == "inspection" and a.rule in NETWORK_ITEMS
                and set(a.machines) & set(alert.machines)
                and 0 <= alert.time - a.time <= window and a is not alert
            ]
            return Action.EVICT_NOW if len(recent) + 1 >= tolerance.count else Action.TOLERATE
        return ITEM_ACTIONS.get(alert.rule, Action.EVICT_NOW)
    if alert.source == "log":
        if alert.detail.get("module"):
            return Action.ROLLBACK
        return Action.STOP_TIME
    if alert.source == "metric":
        if alert.rule in ("rdma-zero", "tensorcore-decline", "tensorcore-low", "mfu-decline"):
            return Action.AGGREGATION
        return Action.STOP_TIME
    # timeouts and anything else with no culprit
    return Action.STOP_TIME


class AlertLog:
    """Bounded alert history owned by the event loop."""

    def __init__(self, horizon_s: float = 3600.0):
        self.horizon_ms = int(horizon_s * SECOND)
        self._alerts: Deque[Alert] = deque()

    def add(self, alert: Alert) -> None:
        self._alerts.append(alert)
        while self._alerts and alert.time - self._alerts[0].time > self.horizon_ms:
            self._alerts.popleft()

    def recent(self) -> List[Alert]:
        return list(self._alerts)
