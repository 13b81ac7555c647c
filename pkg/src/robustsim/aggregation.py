"""Stack-trace aggregation: group identical stacks, treat the majority as healthy, evict the rest's group."""
from __future__ import annotations

import re
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from robustsim.topology import (
    Axis,
    GroupRef,
    ParallelTopology,
    group_machines,
    group_of,
    shared_group,
    shared_machine_group,
)

ROLES = ("trainer", "dataloader", "checkpointer")

_IDENT_PATTERNS = (
    (re.compile(r"\brank[=:\s]*\d+", re.I), "rank=*"),
    (re.compile(r"0x[0-9a-fA-F]+"), "0x*"),
    (re.compile(r"\b\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?\b"), "<ip>"),
    (re.compile(r"\b(?:pid|tid)[=:\s]*\d+", re.I), "pid=*"),
)


def normalize_frame(frame: str) -> str:
    """Strip per-machine identifiers so healthy machines produce equal stacks."""
    for pat, repl in _IDENT_PATTERNS:
        frame = pat.sub(repl, frame)
    return frame.strip()


def signature(frames: Sequence[str]) -> str:
    return " <- ".join(normalize_frame(f) for f in frames)


# machine -> role -> frames
StackSnapshot = Mapping[int, Mapping[str, Sequence[str]]]


@dataclass
class StackGrouping:
    groups: Dict[str, Dict[str, FrozenSet[int]]]      # role -> signature -> machines
    dominant: Dict[str, List[str]]                     # role -> dominant signatures
    outliers: Set[int]
    contributors: Set[int]
    confidence: float

    @property
    def conclusive(self) -> bool:
        return bool(self.outliers)

    def to_dict(self) -> dict:
        return {
            "groups": {r: {s: sorted(ms) for s, ms in g.items()} for r, g in self.groups.items()},
            "dominant": {r: list(v) for r, v in self.dominant.items()},
            "outliers": sorted(self.outliers),
            "confidence": self.confidence,
        }


def cluster(snapshot: StackSnapshot) -> StackGrouping:
    """Group machines by exact (normalized) stack per role.

    The largest group of each role is healthy; every tie for largest counts
    as dominant. Machines outside a dominant group in any role are outliers.
    """
    if not snapshot:
        raise ValueError("snapshot is empty")
    groups: Dict[str, Dict[str, Set[int]]] = {}
    for machine, roles in snapshot.items():
        for role, frames in roles.items():
            groups.setdefault(role, {}).setdefault(signature(frames), set()).add(machine)
    dominant: Dict[str, List[str]] = {}
    outliers: Set[int] = set()
    shares = []
    for role, by_sig in groups.items():
        top = max(len(ms) for ms in by_sig.values())
        dom = sorted(s for s, ms in by_sig.items() if len(ms) == top)
        dominant[role] = dom
        members = set().union(*by_sig.values())
        healthy = set().union(*(by_sig[s] for s in dom))
        outliers |= members - healthy
        shares.append(top / len(members))
    frozen = {r: {s: frozenset(ms) for s, ms in g.items()} for r, g in groups.items()}
    return StackGrouping(frozen, dominant, outliers, set(snapshot), min(shares))


@dataclass(frozen=True)
class Isolation:
    machines: FrozenSet[int]
    group: Optional[GroupRef]
    granularity: str        # rank-group | machine-group | direct


def isolate(grouping: StackGrouping, topo: ParallelTopology) -> Isolation:
    """Machines to evict for the grouping's outliers.

    Prefers one parallel group covering every rank on the outlier machines;
    when a machine carries ranks from several groups, falls back to the
    smallest group whose machines cover the outliers; else evicts the
    outliers themselves.
    """
    if not grouping.outliers:
        raise ValueError("no outliers to isolate")
    outlier_machines = set(grouping.outliers)
    ranks = [r for m in sorted(outlier_machines) for r in topo.ranks_of(m)]
    g = shared_group(ranks, topo)
    if g is not None:
        return Isolation(group_machines(g, topo), g, "rank-group")
    g = shared_machine_group(outlier_machines, topo)
    if g is not None:
        return Isolation(group_machines(g, topo), g, "machine-group")
    return Isolation(frozenset(outlier_machines), None, "direct")


# --------------------------------------------------------------------------- fail-slow rounds

@dataclass
class FailSlowResult:
    flags: List[Optional[int]]          # per round: flagged PP-group index or None
    counts: Dict[int, int]
    evict: FrozenSet[int]
    group: Optional[int]
    duration_s: float

    @property
    def conclusive(self) -> bool:
        return self.group is not None


def pp_group_index(machine: int, topo: ParallelTopology) -> int:
    """Index of the machine-level pipeline group hosting ``machine`` (ordered by lowest machine)."""
    return _pp_groups(topo)[1][machine]


def _pp_groups(topo: ParallelTopology) -> Tuple[List[FrozenSet[int]], Dict[int, int]]:
    seen: List[FrozenSet[int]] = []
    index: Dict[int, int] = {}
    for m in range(topo.machine_count):
        if m in index:
            continue
        ms = group_machines(group_of(topo.ranks_of(m)[0], Axis.PP, topo), topo)
        for x in ms:
            index.setdefault(x, len(seen))
        seen.append(ms)
    return seen, index


def fail_slow_rounds(snapshot_at: Callable[[int], StackSnapshot], topo: ParallelTopology,
                     rounds: int = 5, interval_s: float = 10.0) -> FailSlowResult:
    """Repeat aggregation over ``rounds`` snapshots spaced ``interval_s`` apart.

    Each round flags the pipeline group holding the most outlier machines
    (lowest index on ties). The group flagged most often is evicted.
    """
    groups, index = _pp_groups(topo)
    flags: List[Optional[int]] = []
    for i in range(rounds):
        g = cluster(snapshot_at(i))
        if not g.outliers:
            flags.append(None)
            continue
        per = Counter(index[m] for m in g.outliers)
        best = max(per.values())
        flags.append(min(k for k, v in per.items() if v == best))
    counts = Counter(f for f in flags if f is not None)
    duration = (rounds - 1) * interval_s
    if not counts:
        return FailSlowResult(flags, {}, frozenset(), None, duration)
    top = max(counts.values())
    winner = min(k for k, v in counts.items() if v == top)
    return FailSlowResult(flags, dict(counts), groups[winner], winner, duration)


# --------------------------------------------------------------------------- synthetic stacks

HEALTHY_TRAINER = ("train_step", "optimizer.step", "reduce_scatter_tensor", "ncclKernel rank=0")
HEALTHY_DATALOADER = ("worker_loop", "queue.get")
HEALTHY_CKPT = ("ckpt_worker", "wait_for_request")


def healthy_stack() -> Dict[str, List[str]]:
    return {"trainer": list(HEALTHY_TRAINER), "dataloader": list(HEALTHY_DATALOADER),
            "checkpointer": list(HEALTHY_CKPT)}


def synth_snapshot(machines: Iterable[int], overrides: Mapping[int, Mapping[str, Sequence[str]]]) -> Dict[int, Dict[str, List[str]]]:
    """Healthy stacks everywhere, with per-machine role overrides."""
    snap = {}
    for m in machines:
        stacks = healthy_stack()
        for role, frames in overrides.get(m, {}).items():
            stacks[role] = list(frames)
        snap[m] = stacks
    return snap


def slow_rounds_source(machines: Sequence[int], degraders: Iterable[int], visibility: float,
                       rng: random.Random) -> Callable[[int], StackSnapshot]:
    """Round snapshots where each degrader shows a slow-path stack with probability ``visibility``."""
    degraders = sorted(set(degraders))

    def at(_round: int) -> StackSnapshot:
        over = {}
        for d in degraders:
            if rng.random() < visibility:
                over[d] = {"trainer": ["train_step", "forward", "slow_kernel_wait"]}
        return synth_snapshot(machines, over)

    return at
