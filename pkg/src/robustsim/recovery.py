"""Restart machinery: warm-standby sizing and pool, lazy hot updates, failover and baselines."""
from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple


# --------------------------------------------------------------------------- pool sizing

def binomial_cdf_table(n: int, p: float) -> List[float]:
    """CDF values for k = 0..n, summed in log space so large ``n`` stays stable."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p == 0.0:
        return [1.0] * (n + 1)
    if p == 1.0:
        return [0.0] * n + [1.0]
    lp, lq = math.log(p), math.log1p(-p)
    logs = [
        math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1) + k * lp + (n - k) * lq
        for k in range(n + 1)
    ]
    top = max(logs)
    weights = [math.exp(v - top) for v in logs]
    total = math.fsum(weights)
    out = [c / total for c in itertools.accumulate(weights)]
    out[-1] = 1.0
    return out


def binomial_pmf(n: int, p: float) -> List[float]:
    cdf = binomial_cdf_table(n, p)
    return [cdf[0]] + [cdf[k] - cdf[k - 1] for k in range(1, n + 1)]


def size_pool(machine_count: int, daily_fail_prob: float, quantile: float = 0.99) -> int:
    """Smallest ``s`` with P[Binomial(N, p) <= s] >= ``quantile``."""
    if machine_count < 1:
        raise ValueError("machine_count must be >= 1")
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    if daily_fail_prob == 0.0:
        return 0
    if daily_fail_prob == 1.0:
        return machine_count
    cdf = binomial_cdf_table(machine_count, daily_fail_prob)
    # tolerate float noise right at the quantile
    return bisect.bisect_left(cdf, quantile - 1e-12)


# --------------------------------------------------------------------------- parameters

@dataclass
class RecoveryParams:
    daily_fail_prob: float = 0.001
    quantile: float = 0.99
    pool_target: Optional[int] = None
    wake_s: float = 30.0
    fresh_init_s: float = 300.0
    restart_s: float = 30.0
    hot_update_s: float = 60.0
    lazy_window_s: float = 86400.0
    quarantine_s: float = 3600.0
    remote_restore_s: float = 300.0
    spare_capacity: int = 10000

    def target_for(self, machine_count: int) -> int:
        if self.pool_target is not None:
            return self.pool_target
        return size_pool(machine_count, self.daily_fail_prob, self.quantile)


# Measured full-requeue and hot-update times at reference scales (machines -> seconds).
REQUEUE_POINTS = ((128, 454.0), (256, 545.0), (512, 635.0), (1024, 768.0))
HOT_UPDATE_POINTS = ((128, 46.0), (256, 51.0), (512, 54.0), (1024, 65.0))


def interpolate(points: Sequence[Tuple[int, float]], x: float) -> float:
    """Piecewise-linear interpolation, clamped at both ends."""
    xs = [p[0] for p in points]
    if x <= xs[0]:
        return points[0][1]
    if x >= xs[-1]:
        return points[-1][1]
    i = bisect.bisect_right(xs, x)
    (x0, y0), (x1, y1) = points[i - 1], points[i]
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def requeue_time(machine_count: int) -> float:
    return interpolate(REQUEUE_POINTS, machine_count)


def hot_update_time(machine_count: int) -> float:
    return interpolate(HOT_UPDATE_POINTS, machine_count)


# --------------------------------------------------------------------------- hot updates

class Urgency(str, Enum):
    URGENT = "urgent"
    LAZY = "lazy"


@dataclass
class HotUpdate:
    id: str
    urgency: Urgency
    submitted_at: float
    version: int
    applied_at: Optional[float] = None
    trigger: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id, "urgency": Urgency(self.urgency).value, "submitted_at": self.submitted_at,
            "version": self.version, "applied_at": self.applied_at, "trigger": self.trigger,
        }


class UpdateQueue:
    """Pending code updates.

    Urgent ones apply on submission. Lazy ones ride along with the next
    failover, or force an in-place restart once they have waited ``window``.
    """

    def __init__(self, window: float = 86400.0):
        self.window = window
        self.pending: List[HotUpdate] = []
        self.applied: List[HotUpdate] = []

    def _apply(self, updates: List[HotUpdate], at: float, trigger: str) -> List[HotUpdate]:
        for u in updates:
            if u.applied_at is not None:
                raise RuntimeError(f"update {u.id} applied twice")
            u.applied_at = at
            u.trigger = trigger
            self.pending.remove(u)
            self.applied.append(u)
        return updates

    def submit(self, update: HotUpdate) -> List[HotUpdate]:
        self.pending.append(update)
        if Urgency(update.urgency) is Urgency.URGENT:
            return self._apply([update], update.submitted_at, "urgent-submit")
        return []

    def next_expiry(self) -> Optional[float]:
        lazy = [u.submitted_at + self.window for u in self.pending]
        return min(lazy) if lazy else None

    def expire(self, now: float) -> List[HotUpdate]:
        """Apply every lazy update whose window has run out by ``now``."""
        due = [u for u in self.pending if u.submitted_at + self.window <= now]
        return self._apply(due, now, "window-expiry")

    def on_failover(self, now: float) -> List[HotUpdate]:
        # anything overdue should already have gone through expire()
        due = [u for u in self.pending if u.submitted_at <= now]
        return self._apply(due, now, "failover")

    def apply_updates(self, trigger: str, now: float) -> List[HotUpdate]:
        if trigger == "failover":
            return self.on_failover(now)
        if trigger == "window-expiry":
            return self.expire(now)
        if trigger == "urgent-submit":
            urgent = [u for u in self.pending if Urgency(u.urgency) is Urgency.URGENT]
            return self._apply(urgent, now, trigger)
        raise ValueError(f"unknown trigger {trigger!r}")


# --------------------------------------------------------------------------- standby pool

@dataclass
class StandbyMember:
    machine: int
    ready_at: float
    origin: str = "fresh"      # fresh | quarantine

    def state(self, now: float) -> str:
        return "warm" if self.ready_at <= now else "initializing"


class CapacityExhausted(RuntimeError):
    pass


class StandbyPool:
    """Spare machines held in sleep, plus the fresh-machine supply behind them.

    Machine ids are drawn from a counter starting at ``first_spare_id`` so
    they never collide with machines hosting the job.
    """

    def __init__(self, target: int, params: RecoveryParams, first_spare_id: int, now: float = 0.0):
        self.target = target
        self.params = params
        self._next_id = first_spare_id
        self._remaining = params.spare_capacity
        self.members: List[StandbyMember] = []
        self.quarantined: List[Tuple[float, int]] = []   # (release time, machine)
        for _ in range(target):
            self.members.append(StandbyMember(self._fresh_machine(), now))

    def _fresh_machine(self) -> int:
        if self._remaining <= 0:
            raise CapacityExhausted("no spare machines left to schedule")
        self._remaining -= 1
        m = self._next_id
        self._next_id += 1
        return m

    def warm_count(self, now: float) -> int:
        return sum(1 for m in self.members if m.ready_at <= now)

    def snapshot(self, now: float) -> List[dict]:
        return [{"machine": m.machine, "state": m.state(now), "ready_at": m.ready_at} for m in self.members]

    def release_quarantine(self, now: float) -> List[int]:
        back = []
        keep = []
        for release, m in sorted(self.quarantined):
            if release <= now and len(self.members) < self.target:
                self.members.append(StandbyMember(m, release, "quarantine"))
                back.append(m)
            else:
                keep.append((release, m))
        self.quarantined = keep
        return back

    def quarantine(self, machines: Iterable[int], now: float) -> None:
        for m in machines:
            self.quarantined.append((now + self.params.quarantine_s, m))

    def withdraw(self, count: int, now: float) -> List[StandbyMember]:
        """Take ``count`` replacements: earliest-ready pool members first, then fresh machines.

        The pool is topped back up to target with freshly scheduled machines.
        """
        self.release_quarantine(now)
        self.members.sort(key=lambda m: (m.ready_at, m.machine))
        taken = self.members[:count]
        self.members = self.members[count:]
        out = [StandbyMember(m.machine, max(m.ready_at, now) + self.params.wake_s, m.origin) for m in taken]
        for _ in range(count - len(taken)):
            out.append(StandbyMember(self._fresh_machine(), now + self.params.fresh_init_s, "fresh"))
        while len(self.members) < self.target:
            self.members.append(StandbyMember(self._fresh_machine(), now + self.params.fresh_init_s))
        return out


# --------------------------------------------------------------------------- failover

@dataclass
class FailoverPlan:
    evicted: List[int]
    replacements: List[int]
    ready_at: float
    restore_step: Optional[int] = None
    restore_tier: Optional[str] = None
    updates: List[str] = field(default_factory=list)
    warm_used: int = 0
    fresh_used: int = 0

    def to_dict(self) -> dict:
        return {
            "evicted": list(self.evicted), "replacements": list(self.replacements),
            "ready_at": self.ready_at, "restore_step": self.restore_step,
            "restore_tier": self.restore_tier, "updates": list(self.updates),
            "warm_used": self.warm_used, "fresh_used": self.fresh_used,
        }


def failover(evictions: Sequence[int], pool: StandbyPool, queue: Optional[UpdateQueue], now: float,
             params: RecoveryParams, restore_extra_s: float = 0.0) -> FailoverPlan:
    """Swap evicted machines for standbys and restart.

    The job comes back once every replacement is awake and the restart (plus
    any extra restore latency) has run. Pending lazy updates are folded in.
    """
    replacements = pool.withdraw(len(evictions), now) if evictions else []
    ready = max([now] + [r.ready_at for r in replacements])
    applied = queue.on_failover(now) if queue is not None else []
    warm = sum(1 for r in replacements if r.ready_at <= now + params.wake_s)
    return FailoverPlan(
        evicted=list(evictions),
        replacements=[r.machine for r in replacements],
        ready_at=ready + params.restart_s + restore_extra_s,
        updates=[u.id for u in applied],
        warm_used=warm,
        fresh_used=len(replacements) - warm,
    )


class RestartPolicy(str, Enum):
    REQUEUE = "requeue"
    RESCHEDULE = "reschedule"
    ORACLE = "oracle"
    OURS = "ours"


def baseline_restart(policy: RestartPolicy, evictions: int, machine_count: int, warm: int,
                     params: Optional[RecoveryParams] = None) -> float:
    """Downtime in seconds to get the job running again after ``evictions`` machines are lost."""
    params = params or RecoveryParams()
    policy = RestartPolicy(policy)
    if policy is RestartPolicy.REQUEUE:
        return requeue_time(machine_count)
    if policy is RestartPolicy.RESCHEDULE:
        return params.fresh_init_s + params.restart_s
    if policy is RestartPolicy.ORACLE:
        return params.wake_s + params.restart_s
    if evictions <= warm:
        return params.wake_s + params.restart_s
    return params.fresh_init_s + params.restart_s


DEFAULT_SCALES = (128, 256, 512, 1024)


def was_weights(machine_count: int, params: RecoveryParams, catastrophic: int = 32,
                catastrophic_mass: float = 0.01) -> List[Tuple[int, float]]:
    """(eviction count, weight) pairs: binomial mass over 1..P99 plus a fixed catastrophic share."""
    n99 = max(1, size_pool(machine_count, params.daily_fail_prob, params.quantile))
    pmf = binomial_pmf(machine_count, params.daily_fail_prob)[1:n99 + 1]
    total = math.fsum(pmf)
    if total == 0:
        pmf, total = [1.0] * n99, float(n99)
    weights = [(k + 1, (1 - catastrophic_mass) * w / total) for k, w in enumerate(pmf)]
    weights.append((catastrophic, catastrophic_mass))
    return weights


def was_table(policies: Iterable[RestartPolicy], params: Optional[RecoveryParams] = None,
              scales: Sequence[int] = DEFAULT_SCALES) -> Dict[int, Dict[str, float]]:
    """Weighted-average scheduling time per scale and policy."""
    params = params or RecoveryParams()
    policies = [RestartPolicy(p) for p in policies]
    table: Dict[int, Dict[str, float]] = {}
    for scale in scales:
        warm = params.target_for(scale)
        weights = was_weights(scale, params)
        table[scale] = {
            p.value: math.fsum(w * baseline_restart(p, k, scale, warm, params) for k, w in weights)
            for p in policies
        }
    return table
