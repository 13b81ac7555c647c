"""Simulation report: plain JSON-compatible data, so save/load is lossless."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from robustsim.diagnosis import RESOLUTION_LABELS
from robustsim.simkernel.ledger import MetricsLedger


@dataclass
class IncidentCase:
    id: int
    trigger: Dict[str, Any]
    action: str
    detected_at: int
    onset: Optional[int] = None
    fault_ids: List[int] = field(default_factory=list)
    stages: List[Dict[str, Any]] = field(default_factory=list)
    evicted_slots: List[int] = field(default_factory=list)
    evicted_machines: List[int] = field(default_factory=list)
    final: str = "open"
    resolution: Optional[str] = None
    resolved_at: Optional[int] = None
    failover_ms: int = 0
    restore_step: Optional[int] = None
    restore_tier: Optional[str] = None
    lost_steps: int = 0

    @property
    def path(self) -> List[str]:
        return [s["stage"] for s in self.stages]

    @property
    def detection_latency(self) -> Optional[int]:
        return None if self.onset is None else self.detected_at - self.onset


@dataclass
class SimReport:
    name: str
    seed: int
    horizon_ms: int
    final_state: str
    final_step: int
    high_water: int
    ledger: List[list]
    totals: Dict[str, int]
    ettr_cumulative: List[list]
    ettr_sliding: List[list]
    ettr_window_ms: int
    incidents: List[Dict[str, Any]]
    resolution_breakdown: Dict[str, int]
    machines: List[Dict[str, Any]]
    updates: List[Dict[str, Any]]
    faults: List[Dict[str, Any]]
    trace: List[Dict[str, Any]]
    checkpoint: Dict[str, Any] = field(default_factory=dict)
    was_table: Optional[Dict[str, Dict[str, float]]] = None

    @property
    def final_ettr(self) -> float:
        return self.ettr_cumulative[-1][1] if self.ettr_cumulative else 1.0

    def incident_cases(self) -> List[IncidentCase]:
        return [IncidentCase(**d) for d in self.incidents]

    def metrics_ledger(self) -> MetricsLedger:
        return MetricsLedger.from_list(self.ledger)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SimReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n")


def resolution_breakdown(incidents: List[IncidentCase]) -> Dict[str, int]:
    out = {label: 0 for label in RESOLUTION_LABELS}
    out["escalated"] = 0
    out["unresolved"] = 0
    for inc in incidents:
        if inc.resolution in out:
            out[inc.resolution] += 1
        elif inc.final == "escalated":
            out["escalated"] += 1
        else:
            out["unresolved"] += 1
    return out


def format_report(rep: SimReport) -> str:
    lines = [
        f"scenario {rep.name} (seed {rep.seed})",
        f"  horizon       {rep.horizon_ms / 1000:.0f} s, final state {rep.final_state}",
        f"  steps         {rep.final_step} (high water {rep.high_water})",
        f"  ETTR          {rep.final_ettr:.4f} cumulative",
    ]
    total = sum(rep.totals.values()) or 1
    lines.append("  time split")
    for cls, ms in rep.totals.items():
        if ms:
            lines.append(f"    {cls:<13} {ms / 1000:>12.1f} s  {100 * ms / total:6.2f}%")
    lines.append(f"  incidents     {len(rep.incidents)}")
    for inc in rep.incidents:
        path = " > ".join(s["stage"] for s in inc["stages"]) or "-"
        lat = "" if inc["onset"] is None else f" (+{(inc['detected_at'] - inc['onset']) / 1000:.0f} s)"
        lines.append(
            f"    #{inc['id']} at {inc['detected_at'] / 1000:.0f} s{lat} via {inc['trigger']['rule']}: "
            f"{inc['action']} | {path} | {inc['resolution'] or inc['final']}"
            + (f" | evicted {inc['evicted_slots']}" if inc["evicted_slots"] else "")
        )
    lines.append("  resolutions")
    for label, n in rep.resolution_breakdown.items():
        if n:
            lines.append(f"    {label:<15} {n}")
    if rep.was_table:
        lines.append(format_was(rep.was_table))
    return "\n".join(lines)


def format_was(table: Dict) -> str:
    scales = list(table)
    policies = list(next(iter(table.values()))) if table else []
    head = "  WAS (s)  " + "".join(f"{p:>12}" for p in policies)
    rows = [head]
    for s in scales:
        rows.append(f"  {str(s):>7}  " + "".join(f"{table[s][p]:>12.2f}" for p in policies))
    return "\n".join(rows)
