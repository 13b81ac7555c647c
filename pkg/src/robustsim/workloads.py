"""Scenario generators: production-like fault mixes and the detection-latency benchmark."""
from __future__ import annotations

import random
from typing import Dict, List, Optional, Tuple

# Incident counts per symptom over a large production fleet, with the fault kind
# each symptom is simulated as. ``None`` marks manual restarts, simulated as
# lazy code updates rather than faults.
INCIDENT_MIX: Tuple[Tuple[str, int, Optional[str]], ...] = (
    ("CUDA Error", 19968, "cuda-error"),
    ("CPU Overload", 6095, "hdfs-error"),
    ("CPU OOM", 5567, "hdfs-error"),
    ("Insufficient Disk Space", 2755, "hdfs-error"),
    ("Infiniband Error", 1599, "transient-comm"),
    ("Filesystem Mount", 1176, "hdfs-error"),
    ("HDFS Error", 1104, "hdfs-error"),
    ("Container Error", 781, "hdfs-error"),
    ("OS Kernel Panic", 203, "os-kernel-fault"),
    ("GPU Memory Error", 188, "cuda-error"),
    ("External Service Error", 128, "hdfs-error"),
    ("GPU Unavailable", 76, "gpu-lost"),
    ("Disk Fault", 47, "os-kernel-fault"),
    ("Job Hang", 5506, "hang"),
    ("MFU Decline", 442, "fail-slow"),
    ("NaN value", 148, "sdc"),
    ("Code/Data Adjustment", 9582, None),
)

# Faults that clear on their own, and for how long they last (seconds).
TRANSIENT_S = {"transient-comm": 30.0, "hdfs-error": 45.0}


def mix_weights() -> Dict[str, float]:
    total = sum(c for _, c, _ in INCIDENT_MIX)
    return {name: c / total for name, c, _ in INCIDENT_MIX}


def mixed_production(events: int = 60, seed: int = 2024, horizon_steps: int = 23040,
                     step_duration_s: float = 15.0, topology: Optional[dict] = None) -> dict:
    """Scenario dict with ``events`` incidents drawn in proportion to the incident mix."""
    rng = random.Random(f"{seed}:mixed-production")
    topology = topology or {"tp": 2, "pp": 4, "dp": 8, "ranks_per_machine": 2}
    machines = topology["tp"] * topology["pp"] * topology["dp"] // topology.get("ranks_per_machine", 1)
    horizon_s = horizon_steps * step_duration_s
    names = [n for n, _, _ in INCIDENT_MIX]
    weights = [c for _, c, _ in INCIDENT_MIX]
    kinds = {n: k for n, _, k in INCIDENT_MIX}
    draws = rng.choices(names, weights=weights, k=events)
    onsets = sorted(rng.randrange(60, int(horizon_s) - 60, 60) for _ in range(events))
    faults: List[dict] = []
    updates: List[dict] = []
    version = 1
    for i, (name, onset) in enumerate(zip(draws, onsets)):
        kind = kinds[name]
        if kind is None:
            version += 1
            updates.append({"id": f"u{i}", "submitted_s": onset, "version": version, "urgency": "lazy"})
            continue
        entry: dict = {"kind": kind, "onset_s": onset, "params": {"symptom": name}}
        if kind not in ("hdfs-error",):
            entry["machines"] = [rng.randrange(machines)]
        if kind in TRANSIENT_S:
            entry["duration_s"] = TRANSIENT_S[kind]
        faults.append(entry)
    return {
        "name": "mixed_production",
        "seed": seed,
        "topology": topology,
        "horizon_steps": horizon_steps,
        "step_duration_s": step_duration_s,
        "faults": faults,
        "updates": updates,
    }


# Inspectable fault kinds in benchmark order, with the latency bound (s) the default
# inspection rules promise for each.
DETECTION_BENCH: Tuple[Tuple[str, float], ...] = (
    ("nic-crash", 30),
    ("port-flapping", 30),
    ("switch-down", 60),
    ("gpu-driver-hang", 10),
    ("gpu-high-temp", 10),
    ("gpu-lost", 10),
    ("os-kernel-fault", 2),
)


def detection_bench(gap_s: int = 3600, inspections: bool = True) -> dict:
    """One inspectable fault per kind, spaced ``gap_s`` apart on distinct machines."""
    faults = []
    for i, (kind, _) in enumerate(DETECTION_BENCH):
        faults.append({"kind": kind, "onset_s": (i + 1) * gap_s, "machines": [i]})
    return {
        "name": "table8_detection",
        "seed": 8,
        "topology": {"tp": 2, "pp": 2, "dp": 4, "ranks_per_machine": 2},
        "horizon_steps": int((len(faults) + 1) * gap_s / 15),
        "detection": {"inspections_enabled": inspections},
        "faults": faults,
    }
