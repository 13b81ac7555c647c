"""Stop-time diagnosis: test ladder, reattempt, rollback and two-phase replay localization."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Set


class ReplayError(ValueError):
    pass


# --------------------------------------------------------------------------- dual-phase replay

def replay_cardinality(m: int, n: int) -> int:
    """Suspect-set size the grouping promises: 1 when m <= n, else ceil(m / n)."""
    return 1 if m <= n else math.ceil(m / n)


def suspects(z: int, m: int, a: int, b: int) -> Set[int]:
    """Machines in horizontal group ``a`` whose vertical index is ``b``."""
    n = z // m
    return {x for x in range(a * m, (a + 1) * m) if x % n == b}


@dataclass(frozen=True)
class ReplayPlan:
    z: int
    m: int
    n: int
    horizontal_failed: List[int]
    vertical_failed: List[int]
    suspects: Set[int]

    @property
    def a(self) -> Optional[int]:
        return self.horizontal_failed[0] if len(self.horizontal_failed) == 1 else None

    @property
    def b(self) -> Optional[int]:
        return self.vertical_failed[0] if len(self.vertical_failed) == 1 else None

    @property
    def conclusive(self) -> bool:
        return self.a is not None and self.b is not None

    def to_dict(self) -> dict:
        return {
            "z": self.z, "m": self.m, "n": self.n, "a": self.a, "b": self.b,
            "horizontal_failed": list(self.horizontal_failed),
            "vertical_failed": list(self.vertical_failed),
            "suspects": sorted(self.suspects),
        }


def dual_phase_replay(z: int, m: int, faulty) -> ReplayPlan:
    """Locate a faulty machine with two rounds of group replays.

    Round one replays horizontal groups ``{x : x // m = i}``; round two
    replays vertical groups ``{x : x % n = j}`` with ``n = z // m``. Only
    groups holding the faulty machine fail. ``faulty`` is one machine index or
    a set of them; anything but exactly one failing group per round leaves
    the plan inconclusive with an empty suspect set.
    """
    if z < 1 or m < 1 or z % m:
        raise ReplayError(f"m={m} must divide z={z}")
    bad = {faulty} if isinstance(faulty, int) else set(faulty)
    for x in bad:
        if not 0 <= x < z:
            raise ReplayError(f"faulty machine {x} outside [0, {z})")
    n = z // m
    horiz = sorted({x // m for x in bad})
    vert = sorted({x % n for x in bad})
    s: Set[int] = set()
    if len(horiz) == 1 and len(vert) == 1:
        s = suspects(z, m, horiz[0], vert[0])
    return ReplayPlan(z, m, n, horiz, vert, s)


def replay_grouping(topo_machine_count: int, dp_size: int, k: int = 1) -> tuple:
    """Default (m, n): m machines per k data-parallel replicas, n = dp_size / k groups."""
    if dp_size % k:
        raise ReplayError(f"k={k} must divide dp_size={dp_size}")
    n = dp_size // k
    if topo_machine_count % n:
        raise ReplayError("machine count not divisible into replica groups")
    return topo_machine_count // n, n


# --------------------------------------------------------------------------- test verdicts

@dataclass
class DiagnosisParams:
    test_durations_s: Dict[str, float] = field(default_factory=lambda: {
        "eud": 60.0, "intra-comm": 30.0, "inter-comm": 30.0, "bitwise-align": 60.0,
    })
    false_negative_rate: float = 0.0
    eud_sdc_recall: float = 0.0
    align_sdc_recall: float = 0.7
    replay_step_s: float = 120.0
    k: int = 1


TEST_LADDER = ("eud", "intra-comm", "inter-comm")
NAN_LADDER = TEST_LADDER + ("bitwise-align",)

# Which fault kinds each test detects deterministically (before false negatives).
_CATCHES = {
    "eud": {"gpu-driver-hang", "gpu-lost", "gpu-high-temp", "cuda-error", "os-kernel-fault"},
    "intra-comm": set(),
    "inter-comm": {"nic-crash", "port-flapping", "switch-down", "transient-comm"},
    "bitwise-align": set(),
}


@dataclass(frozen=True)
class DiagnosticVerdict:
    test: str
    tested: frozenset
    failed: frozenset

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {"test": self.test, "tested": sorted(self.tested), "failed": sorted(self.failed)}


def run_test(test: str, machines: Iterable[int], active: Mapping[int, Sequence[str]],
             params: DiagnosisParams, rng: random.Random) -> DiagnosticVerdict:
    """Simulated test outcome per machine, driven by the faults active on it.

    SDC is caught by EUD and the alignment check only with their recall.
    """
    tested = frozenset(machines)
    failed = set()
    for m in sorted(tested):
        for kind in active.get(m, ()):
            if kind == "sdc":
                recall = params.eud_sdc_recall if test == "eud" else (
                    params.align_sdc_recall if test == "bitwise-align" else 0.0)
                hit = recall > 0 and rng.random() < recall
            else:
                hit = kind in _CATCHES[test]
            if hit and params.false_negative_rate > 0 and rng.random() < params.false_negative_rate:
                hit = False
            if hit:
                failed.add(m)
                break
    return DiagnosticVerdict(test, tested, frozenset(failed))


# --------------------------------------------------------------------------- pipeline

STAGES = ("diagnose", "reattempt", "rollback", "replay", "resolved", "escalated")
RESOLUTION_LABELS = ("evict-realtime", "evict-diagnose", "reattempt", "rollback", "replay", "aggregation")


class DiagnosisProbe(Protocol):
    """What the pipeline needs from the simulated cluster. Times are integer ms."""

    def machines(self) -> List[int]: ...

    def active_faults(self, at: int) -> Dict[int, List[str]]: ...

    def evict(self, machines: Set[int], at: int) -> Optional[int]:
        """Fail over ``machines``; return when the job is restarted, or None if impossible."""

    def restart_in_place(self, at: int) -> int: ...

    def previous_version(self) -> Optional[int]: ...

    def revert(self, at: int) -> int: ...

    def failure_latency(self, at: int) -> Optional[int]:
        """None if a job restarted at ``at`` runs clean, else ms until it fails again."""

    def replay_faulty(self, at: int) -> Set[int]: ...


@dataclass
class StageRecord:
    stage: str
    start: int
    end: int
    outcome: str
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "start": self.start, "end": self.end,
                "outcome": self.outcome, "detail": self.detail}


@dataclass
class PipelineResult:
    stages: List[StageRecord]
    end: int
    final: str                      # resolved | escalated | capacity-exhausted
    label: Optional[str] = None
    evicted: List[int] = field(default_factory=list)
    replay: Optional[ReplayPlan] = None

    @property
    def path(self) -> List[str]:
        return [s.stage for s in self.stages]


def _ms(seconds: float) -> int:
    return int(round(seconds * 1000))


class StopTimePipeline:
    """Walks diagnose -> (evict | reattempt) -> rollback -> replay for one incident.

    Each stage is entered at most once. Outcomes are ground-truthed through
    the probe, so the whole walk is decided when the incident starts.
    """

    def __init__(self, params: DiagnosisParams, rng: random.Random, dp_size: int):
        self.params = params
        self.rng = rng
        self.dp_size = dp_size

    def run(self, probe: DiagnosisProbe, at: int, entry: str = "diagnose", nan: bool = False) -> PipelineResult:
        if entry not in ("diagnose", "reattempt", "rollback", "replay"):
            raise ValueError(f"bad entry stage {entry!r}")
        stages: List[StageRecord] = []
        evicted: List[int] = []
        t = at
        stage = entry

        def restarted(ready: Optional[int], label: str, nxt: str):
            # returns (result or None, next stage, time)
            if ready is None:
                return PipelineResult(stages, t, "capacity-exhausted", None, evicted), None, t
            lat = probe.failure_latency(ready)
            if lat is None:
                return PipelineResult(stages, ready, "resolved", label, evicted), None, ready
            return None, nxt, ready + lat

        if stage == "diagnose":
            ladder = NAN_LADDER if nan else TEST_LADDER
            machines = probe.machines()
            verdicts = []
            start = t
            failed: Set[int] = set()
            for test in ladder:
                v = run_test(test, machines, probe.active_faults(t), self.params, self.rng)
                t += _ms(self.params.test_durations_s[test])
                verdicts.append(v.to_dict())
                if v.failed:
                    failed = set(v.failed)
                    break
            stages.append(StageRecord("diagnose", start, t, "evict" if failed else "all-pass",
                                      {"verdicts": verdicts}))
            if failed:
                evicted.extend(sorted(failed))
                ready = probe.evict(failed, t)
                stages.append(StageRecord("evict", t, ready if ready is not None else t, "failover",
                                          {"machines": sorted(failed)}))
                res, stage, t = restarted(ready, "evict-diagnose", "rollback")
                if res is not None:
                    return res
                stages[-1].outcome = "restart-failed"
            else:
                stage = "reattempt"

        if stage == "reattempt":
            ready = probe.restart_in_place(t)
            res, stage, t2 = restarted(ready, "reattempt", "rollback")
            stages.append(StageRecord("reattempt", t, t2, "resolved" if res else "failed"))
            if res is not None:
                return res
            t = t2

        if stage == "rollback":
            prev = probe.previous_version()
            if prev is None:
                stages.append(StageRecord("rollback", t, t, "skipped", {"reason": "no previous version"}))
            else:
                ready = probe.revert(t)
                res, _, t2 = restarted(ready, "rollback", "replay")
                stages.append(StageRecord("rollback", t, t2, "resolved" if res else "failed",
                                          {"version": prev}))
                if res is not None:
                    return res
                t = t2
            stage = "replay"

        # replay
        machines = probe.machines()
        z = len(machines)
        m, n = replay_grouping(z, self.dp_size, self.params.k)
        faulty_slots = probe.replay_faulty(t)
        plan = dual_phase_replay(z, m, {machines.index(x) for x in faulty_slots})
        start = t
        t += 2 * _ms(self.params.replay_step_s)
        if not plan.conclusive:
            stages.append(StageRecord("replay", start, t, "inconclusive", plan.to_dict()))
            stages.append(StageRecord("escalated", t, t, "halt"))
            return PipelineResult(stages, t, "escalated", None, evicted, plan)
        suspects_ = {machines[i] for i in plan.suspects}
        stages.append(StageRecord("replay", start, t, "evict", plan.to_dict()))
        evicted.extend(sorted(suspects_))
        ready = probe.evict(suspects_, t)
        stages.append(StageRecord("evict", t, ready if ready is not None else t, "failover",
                                  {"machines": sorted(suspects_)}))
        res, _, t2 = restarted(ready, "replay", "escalated")
        if res is not None:
            res.replay = plan
            return res
        stages[-1].outcome = "restart-failed"
        stages.append(StageRecord("escalated", t2, t2, "halt"))
        return PipelineResult(stages, t2, "escalated", None, evicted, plan)
