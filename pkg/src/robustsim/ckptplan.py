"""Checkpoint backup placement, pipelined save timeline and recovery-point queries.

Step ``k`` (1-based) starts from state ``k - 1`` and snapshots it while the
forward/backward pass runs. The optimizer update of step ``k`` may not begin
until that snapshot has left the device, which is where stalls come from.

Three policies are modeled:

``byterobust-async``
    Two host buffers. D2H for the state of step ``i`` may start once the
    buffer used two steps earlier is serialized. The backup copy is pushed to
    the peer over idle communication cycles and never holds a buffer.
``memory-save``
    One host buffer, own copy only (no peer backup).
``megatron-blocking``
    Synchronous D2H + serialize straight to remote storage.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterable, List, Optional, Set

from robustsim.topology import ParallelTopology, backup_plan, plan_kind, shares_any_group


class CkptPolicy(str, Enum):
    ASYNC = "byterobust-async"
    MEMORY = "memory-save"
    BLOCKING = "megatron-blocking"


@dataclass(frozen=True)
class CkptDurations:
    """Per-step durations in any consistent time unit."""

    d2h: float = 5.0
    serialize: float = 2.0
    send: float = 3.0
    fwd_bwd: float = 14.0
    optimizer: float = 1.0

    def __post_init__(self) -> None:
        for name in ("d2h", "serialize", "send", "fwd_bwd", "optimizer"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class StepRecord:
    step: int            # 1-based training step
    state: int           # state being checkpointed (= step - 1)
    start: float
    ready: float         # optimizer could start here without checkpointing
    d2h_start: float
    d2h_end: float
    own_done: float      # serialized copy on the owner's host (or remote for blocking)
    backup_done: Optional[float]
    stall: float
    end: float


class CkptPipeline:
    """Incremental timeline: call :meth:`advance` once per training step."""

    def __init__(self, policy: CkptPolicy, durations: CkptDurations):
        self.policy = CkptPolicy(policy)
        self.durations = durations
        self._d2h_ends: Deque[float] = deque(maxlen=2)
        self.step = 0

    def reset(self) -> None:
        self._d2h_ends.clear()

    def _buffer_free_at(self) -> float:
        ser = self.durations.serialize
        if self.policy is CkptPolicy.ASYNC:
            if len(self._d2h_ends) < 2:
                return float("-inf")
            return self._d2h_ends[0] + ser
        if not self._d2h_ends:
            return float("-inf")
        return self._d2h_ends[-1] + ser

    def advance(self, start: float, fwd_bwd: Optional[float] = None,
                optimizer: Optional[float] = None) -> StepRecord:
        d = self.durations
        fb = d.fwd_bwd if fwd_bwd is None else fwd_bwd
        opt = d.optimizer if optimizer is None else optimizer
        self.step += 1
        ready = start + fb
        if self.policy is CkptPolicy.BLOCKING:
            d2h_start = ready
            d2h_end = ready + d.d2h
            stall = d.d2h + d.serialize
            own_done = d2h_end + d.serialize
            backup_done = None
        else:
            d2h_start = max(start, self._buffer_free_at())
            d2h_end = d2h_start + d.d2h
            stall = max(0, d2h_end - ready)
            own_done = d2h_end + d.serialize
            backup_done = own_done + d.send if self.policy is CkptPolicy.ASYNC else None
        self._d2h_ends.append(d2h_end)
        end = ready + stall + opt
        return StepRecord(self.step, self.step - 1, start, ready, d2h_start, d2h_end,
                          own_done, backup_done, stall, end)


def timeline(policy: CkptPolicy, durations: CkptDurations, steps: int) -> List[StepRecord]:
    pipe = CkptPipeline(policy, durations)
    out = []
    t = 0.0
    for _ in range(steps):
        rec = pipe.advance(t)
        out.append(rec)
        t = rec.end
    return out


def step_stall(policy: CkptPolicy, durations: CkptDurations, step: int) -> float:
    """Stall added to ``step`` (1-based) of a fresh run."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return timeline(policy, durations, step)[-1].stall


def max_in_flight(records: Iterable[StepRecord]) -> int:
    """Largest number of checkpoints simultaneously between D2H start and serialization."""
    edges = []
    for r in records:
        edges.append((r.d2h_start, 1))
        edges.append((r.own_done, -1))
    edges.sort(key=lambda e: (e[0], e[1]))
    cur = best = 0
    for _, delta in edges:
        cur += delta
        best = max(best, cur)
    return best


def plan_backups(topo: ParallelTopology) -> Dict[int, int]:
    """Backup peer per rank, checked against the no-shared-group rule where it applies."""
    plan = backup_plan(topo)
    if plan_kind(topo) != "neighbor":
        for r, p in plan.items():
            if p == r or shares_any_group(r, p, topo) or plan[p] != r:
                raise AssertionError(f"backup plan violates constraints at rank {r} -> {p}")
    return plan


@dataclass(frozen=True)
class RecoveryPoint:
    step: int
    tier: str                          # "memory" or "remote"
    sources: Dict[int, str] = field(default_factory=dict)   # rank -> own-copy|backup-copy|remote

    @property
    def source_counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for s in self.sources.values():
            out[s] = out.get(s, 0) + 1
        return out


@dataclass
class _SavedState:
    state: int
    own_done: float
    backup_done: Optional[float]


class ShardLedger:
    """Where each rank's checkpointed state lives, and when each copy completed.

    Every rank checkpoints in lock-step, so completion times are stored per
    state rather than per rank; placement is per rank via the backup plan.
    Host memory keeps the two most recent states (the dual buffer).
    """

    KEEP = 2

    def __init__(self, topo: ParallelTopology, policy: CkptPolicy = CkptPolicy.ASYNC,
                 remote_interval: int = 100, remote_upload: float = 0.0):
        self.topo = topo
        self.policy = CkptPolicy(policy)
        self.plan = plan_backups(topo)
        self.remote_interval = remote_interval
        self.remote_upload = remote_upload
        self._memory: Deque[_SavedState] = deque(maxlen=self.KEEP)
        # (state, completion time); state 0 is the initial model, always available
        self._remote: List[tuple] = [(0, float("-inf"))]

    def record(self, state: int, own_done: float, backup_done: Optional[float]) -> None:
        if self.policy is CkptPolicy.BLOCKING:
            self._remote.append((state, own_done))
            return
        self._memory.append(_SavedState(state, own_done, backup_done))
        if self.remote_interval and state % self.remote_interval == 0 and state > 0:
            self._remote.append((state, own_done + self.remote_upload))

    def record_step(self, rec: StepRecord) -> None:
        self.record(rec.state, rec.own_done, rec.backup_done)

    def reset(self, state: int, now: float) -> None:
        """After a restore every rank holds ``state`` again."""
        self._memory.clear()
        if self.policy is not CkptPolicy.BLOCKING:
            self._memory.append(_SavedState(state, now, now if self.policy is CkptPolicy.ASYNC else None))
        self._remote = [(s, t) for s, t in self._remote if s <= state]

    def last_fully_saved(self, now: float) -> int:
        best = self._remote_best(now, None)
        for s in self._memory:
            done = s.own_done if self.policy is not CkptPolicy.ASYNC else s.backup_done
            if done is not None and done <= now:
                best = max(best, s.state)
        return best

    def _remote_best(self, now: float, max_state: Optional[int]) -> int:
        return max(s for s, t in self._remote
                   if t <= now and (max_state is None or s <= max_state))

    def latest_recoverable(self, evicted_machines: Iterable[int], now: float,
                           max_state: Optional[int] = None) -> RecoveryPoint:
        """Newest state every shard can be restored from after ``evicted_machines`` are lost."""
        evicted: Set[int] = set(evicted_machines)
        topo = self.topo
        for saved in sorted(self._memory, key=lambda s: -s.state):
            if max_state is not None and saved.state > max_state:
                continue
            sources = self._sources_for(saved, evicted, now)
            if sources is not None:
                remote = self._remote_best(now, max_state)
                if remote > saved.state:
                    break
                return RecoveryPoint(saved.state, "memory", sources)
        step = self._remote_best(now, max_state)
        return RecoveryPoint(step, "remote", {r: "remote" for r in range(topo.world_size)})

    def _sources_for(self, saved: _SavedState, evicted: Set[int], now: float) -> Optional[Dict[int, str]]:
        topo = self.topo
        own_ok = saved.own_done <= now
        backup_ok = saved.backup_done is not None and saved.backup_done <= now
        sources = {}
        for r in range(topo.world_size):
            if own_ok and topo.machine_of(r) not in evicted:
                sources[r] = "own-copy"
            elif backup_ok and topo.machine_of(self.plan[r]) not in evicted:
                sources[r] = "backup-copy"
            else:
                return None
        return sources

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "memory": [
                {"state": s.state, "own_done": s.own_done, "backup_done": s.backup_done}
                for s in self._memory
            ],
            "remote": [s for s, t in self._remote],
        }
