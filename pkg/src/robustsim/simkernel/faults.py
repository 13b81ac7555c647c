"""Fault vocabulary: each kind's observability class and its effect on the training job."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple


class Observability(str, Enum):
    INSPECTABLE = "inspectable"
    LOG = "log-visible"
    METRIC = "metric-visible"
    SILENT = "silent"


class Effect(str, Enum):
    HANG = "hang"          # job stops making progress, no error surfaced
    CRASH = "crash"        # job dies and logs an error
    SLOW = "slow"          # steps take longer
    NAN = "nan"            # loss turns NaN


@dataclass(frozen=True)
class KindInfo:
    observability: Observability
    effect: Effect


KINDS: Dict[str, KindInfo] = {
    "nic-crash": KindInfo(Observability.INSPECTABLE, Effect.HANG),
    "port-flapping": KindInfo(Observability.INSPECTABLE, Effect.HANG),
    "switch-down": KindInfo(Observability.INSPECTABLE, Effect.HANG),
    "gpu-driver-hang": KindInfo(Observability.INSPECTABLE, Effect.HANG),
    "gpu-high-temp": KindInfo(Observability.INSPECTABLE, Effect.SLOW),
    "gpu-lost": KindInfo(Observability.INSPECTABLE, Effect.HANG),
    "os-kernel-fault": KindInfo(Observability.INSPECTABLE, Effect.HANG),
    "cuda-error": KindInfo(Observability.LOG, Effect.CRASH),
    "user-code-bug": KindInfo(Observability.LOG, Effect.CRASH),
    "transient-comm": KindInfo(Observability.LOG, Effect.CRASH),
    "hdfs-error": KindInfo(Observability.LOG, Effect.CRASH),
    "fail-slow": KindInfo(Observability.METRIC, Effect.SLOW),
    "nan-loss": KindInfo(Observability.METRIC, Effect.NAN),
    "sdc": KindInfo(Observability.SILENT, Effect.NAN),
    "hang": KindInfo(Observability.SILENT, Effect.HANG),
}

# Faults that stay with the machine and are reproduced by replaying on it.
MACHINE_BOUND = {
    "nic-crash", "port-flapping", "switch-down", "gpu-driver-hang", "gpu-high-temp", "gpu-lost",
    "os-kernel-fault", "cuda-error", "fail-slow", "sdc", "hang",
}
# Faults that are properties of the job rather than of any machine.
JOB_LEVEL = {"user-code-bug", "nan-loss", "hdfs-error"}
# job-level kinds that can be pinned to the code version that introduced them
CODE_BOUND = {"user-code-bug", "nan-loss"}

DEFAULT_SLOWDOWN = {"gpu-high-temp": 0.8, "fail-slow": 0.5}


@dataclass
class FaultEvent:
    """One scripted fault.

    ``machines`` are logical slots in the job; each is bound to whichever
    physical machine fills that slot when the fault starts. Job-level kinds
    may leave ``machines`` empty.
    """

    id: int
    kind: str
    onset_ms: int
    machines: Tuple[int, ...] = ()
    duration_ms: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)
    # filled at onset
    physical: Tuple[int, ...] = ()
    started: bool = False
    ended: bool = False
    removed_at: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.onset_ms < 0:
            raise ValueError("fault onset must be >= 0")
        if self.duration_ms is not None and self.duration_ms <= 0:
            raise ValueError("fault duration must be positive")
        if self.kind in MACHINE_BOUND and not self.machines:
            raise ValueError(f"{self.kind} needs at least one target machine")

    @property
    def info(self) -> KindInfo:
        return KINDS[self.kind]

    @property
    def observability(self) -> Observability:
        return self.info.observability

    @property
    def effect(self) -> Effect:
        return self.info.effect

    @property
    def end_ms(self) -> Optional[int]:
        return None if self.duration_ms is None else self.onset_ms + self.duration_ms

    def active(self) -> bool:
        return self.started and not self.ended

    @property
    def slowdown(self) -> float:
        return float(self.params.get("factor", DEFAULT_SLOWDOWN.get(self.kind, 1.0)))

    def to_dict(self) -> dict:
        return {
            "id": self.id, "kind": self.kind, "onset_ms": self.onset_ms,
            "machines": list(self.machines), "duration_ms": self.duration_ms,
            "physical": list(self.physical), "removed_at": self.removed_at,
        }
