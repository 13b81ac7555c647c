"""Mutable cluster and job state owned by the event loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional


class JobMode:
    RUNNING = "running"
    STALLED = "stalled"      # failed but nobody has noticed yet
    BUSY = "busy"            # suspended while the controller works
    HALTED = "halted"


@dataclass
class TrainingJob:
    step_ms: int
    code_versions: List[int]
    step: int = 0                   # completed steps (= state index held by the job)
    high_water: int = 0             # most steps ever completed; steps at or below it are recompute
    mode: str = JobMode.RUNNING
    epoch: int = 0                  # bumped whenever in-flight work is abandoned
    step_start: int = 0
    stall_start: Optional[int] = None
    stall_crashed: bool = False
    last_restart: int = 0
    restored_from: Optional[int] = None

    @property
    def code_version(self) -> int:
        return self.code_versions[-1]


@dataclass
class MachineState:
    machine: int
    health: str                     # healthy | degraded | faulty | evicted | standby-warm | standby-initializing | quarantined
    slot: Optional[int] = None
    detail: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"machine": self.machine, "health": self.health, "slot": self.slot, "detail": dict(self.detail)}
