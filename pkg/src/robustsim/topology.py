"""3D-parallel rank geometry.

Ranks are laid out TP-fastest, then PP, then DP::

    rank = dp * (pp_size * tp_size) + pp * tp_size + tp

Machines host contiguous blocks of ``ranks_per_machine`` ranks, so machine
``i`` owns ranks ``[i * rpm, (i + 1) * rpm)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Set, Tuple


class TopologyError(ValueError):
    pass


class Axis(str, Enum):
    TP = "TP"
    PP = "PP"
    DP = "DP"


# Order in which equally-sized covering groups are preferred.
AXIS_PREFERENCE = (Axis.PP, Axis.DP, Axis.TP)


class RankCoord(NamedTuple):
    tp: int
    pp: int
    dp: int


@dataclass(frozen=True)
class ParallelTopology:
    tp_size: int
    pp_size: int
    dp_size: int
    ranks_per_machine: int = 1

    def __post_init__(self) -> None:
        for name in ("tp_size", "pp_size", "dp_size", "ranks_per_machine"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise TopologyError(f"{name} must be a positive integer, got {value!r}")
        if self.world_size % self.ranks_per_machine:
            raise TopologyError(
                f"world size {self.world_size} is not divisible by "
                f"ranks_per_machine={self.ranks_per_machine}"
            )

    @property
    def world_size(self) -> int:
        return self.tp_size * self.pp_size * self.dp_size

    @property
    def machine_count(self) -> int:
        return self.world_size // self.ranks_per_machine

    def axis_size(self, axis: Axis) -> int:
        return {Axis.TP: self.tp_size, Axis.PP: self.pp_size, Axis.DP: self.dp_size}[Axis(axis)]

    def machine_of(self, rank: int) -> int:
        self._check_rank(rank)
        return rank // self.ranks_per_machine

    def ranks_of(self, machine: int) -> range:
        if not 0 <= machine < self.machine_count:
            raise TopologyError(f"machine {machine} out of range [0, {self.machine_count})")
        start = machine * self.ranks_per_machine
        return range(start, start + self.ranks_per_machine)

    def machines_of(self, ranks: Iterable[int]) -> Set[int]:
        return {self.machine_of(r) for r in ranks}

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.world_size:
            raise TopologyError(f"rank {rank} out of range [0, {self.world_size})")


@dataclass(frozen=True)
class GroupRef:
    """One parallel-group instance: ``axis`` varies, the other two coordinates are fixed.

    The coordinate belonging to ``axis`` is stored as ``None``.
    """

    axis: Axis
    tp: Optional[int] = None
    pp: Optional[int] = None
    dp: Optional[int] = None

    def __post_init__(self) -> None:
        fixed = {Axis.TP: self.tp, Axis.PP: self.pp, Axis.DP: self.dp}
        if fixed[self.axis] is not None:
            raise TopologyError(f"{self.axis.value} group cannot fix its own {self.axis.value} coordinate")
        if any(v is None for a, v in fixed.items() if a != self.axis):
            raise TopologyError("group must fix both coordinates off its axis")

    def to_dict(self) -> dict:
        return {"axis": self.axis.value, "tp": self.tp, "pp": self.pp, "dp": self.dp}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupRef":
        return cls(Axis(d["axis"]), d.get("tp"), d.get("pp"), d.get("dp"))


def rank_to_coord(rank: int, topo: ParallelTopology) -> RankCoord:
    topo._check_rank(rank)
    tp = rank % topo.tp_size
    pp = (rank // topo.tp_size) % topo.pp_size
    dp = rank // (topo.tp_size * topo.pp_size)
    return RankCoord(tp, pp, dp)


def coord_to_rank(coord: RankCoord, topo: ParallelTopology) -> int:
    tp, pp, dp = coord
    if not (0 <= tp < topo.tp_size and 0 <= pp < topo.pp_size and 0 <= dp < topo.dp_size):
        raise TopologyError(f"coordinate {tuple(coord)} out of range for {topo}")
    return dp * (topo.pp_size * topo.tp_size) + pp * topo.tp_size + tp


def group_of(rank: int, axis: Axis, topo: ParallelTopology) -> GroupRef:
    c = rank_to_coord(rank, topo)
    axis = Axis(axis)
    if axis is Axis.TP:
        return GroupRef(axis, pp=c.pp, dp=c.dp)
    if axis is Axis.PP:
        return GroupRef(axis, tp=c.tp, dp=c.dp)
    return GroupRef(axis, tp=c.tp, pp=c.pp)


def group_members(g: GroupRef, topo: ParallelTopology) -> FrozenSet[int]:
    n = topo.axis_size(g.axis)
    members = []
    for i in range(n):
        coord = RankCoord(
            i if g.axis is Axis.TP else g.tp,
            i if g.axis is Axis.PP else g.pp,
            i if g.axis is Axis.DP else g.dp,
        )
        members.append(coord_to_rank(coord, topo))
    return frozenset(members)


def all_groups(topo: ParallelTopology, axis: Optional[Axis] = None) -> List[GroupRef]:
    """Every group instance, ordered by axis preference then by lowest member rank."""
    axes = AXIS_PREFERENCE if axis is None else (Axis(axis),)
    out: List[GroupRef] = []
    for ax in axes:
        seen = {}
        for r in range(topo.world_size):
            g = group_of(r, ax, topo)
            seen.setdefault(g, r)
        out.extend(sorted(seen, key=seen.__getitem__))
    return out


def group_machines(g: GroupRef, topo: ParallelTopology) -> FrozenSet[int]:
    return frozenset(topo.machines_of(group_members(g, topo)))


def shared_group(outliers: Iterable[int], topo: ParallelTopology) -> Optional[GroupRef]:
    """Smallest single-axis group whose members include every outlier rank.

    Ties on size go PP, then DP, then TP. ``None`` when no single group covers
    the set.
    """
    s = set(outliers)
    if not s:
        raise TopologyError("outlier set must be non-empty")
    for r in s:
        topo._check_rank(r)
    anchor = min(s)
    candidates = []
    for pref, axis in enumerate(AXIS_PREFERENCE):
        g = group_of(anchor, axis, topo)
        if s <= group_members(g, topo):
            candidates.append((topo.axis_size(axis), pref, g))
    if not candidates:
        return None
    return min(candidates, key=lambda c: (c[0], c[1]))[2]


def shared_machine_group(machines: Iterable[int], topo: ParallelTopology) -> Optional[GroupRef]:
    """Machine-granular cover: smallest group whose hosting machines include ``machines``.

    Needed when one machine hosts several ranks of a TP group: a pipeline that
    spans machines 12..15 is then two rank-level PP groups sharing the same
    machines, and no single rank-level group covers every rank on them.
    """
    ms = set(machines)
    if not ms:
        raise TopologyError("machine set must be non-empty")
    anchor_ranks = topo.ranks_of(min(ms))
    best: Optional[Tuple[int, int, int, GroupRef]] = None
    for pref, axis in enumerate(AXIS_PREFERENCE):
        for r in anchor_ranks:
            g = group_of(r, axis, topo)
            hosted = group_machines(g, topo)
            if ms <= hosted:
                key = (len(hosted), pref, min(group_members(g, topo)), g)
                if best is None or key[:3] < best[:3]:
                    best = key
    return None if best is None else best[3]


def shares_any_group(a: int, b: int, topo: ParallelTopology) -> bool:
    ca, cb = rank_to_coord(a, topo), rank_to_coord(b, topo)
    same = (ca.tp == cb.tp) + (ca.pp == cb.pp) + (ca.dp == cb.dp)
    return same >= 2


def _machine_level_ok(mapping: Dict[int, int], topo: ParallelTopology) -> bool:
    for m in range(topo.machine_count):
        targets = {topo.machine_of(mapping[r]) for r in topo.ranks_of(m)}
        if len(targets) != 1 or m in targets:
            return False
    return True


def _xor_shift_plan(topo: ParallelTopology) -> Optional[Dict[int, int]]:
    if topo.pp_size < 2 or topo.pp_size % 2 or topo.dp_size % 2:
        return None
    half = topo.dp_size // 2
    mapping = {}
    for r in range(topo.world_size):
        c = rank_to_coord(r, topo)
        mapping[r] = coord_to_rank(RankCoord(c.tp, c.pp ^ 1, (c.dp + half) % topo.dp_size), topo)
    return mapping if _machine_level_ok(mapping, topo) else None


def _greedy_plan(topo: ParallelTopology) -> Optional[Dict[int, int]]:
    # Pairs whole machines, matching ranks by local index.
    rpm = topo.ranks_per_machine
    free = list(range(topo.machine_count))
    mapping: Dict[int, int] = {}
    while free:
        m = free.pop(0)
        for j, other in enumerate(free):
            pairs = list(zip(topo.ranks_of(m), topo.ranks_of(other)))
            if all(not shares_any_group(a, b, topo) for a, b in pairs):
                for a, b in pairs:
                    mapping[a], mapping[b] = b, a
                free.pop(j)
                break
        else:
            return None
    assert len(mapping) == rpm * topo.machine_count
    return mapping


def _neighbor_plan(topo: ParallelTopology) -> Dict[int, int]:
    mapping = {}
    last = topo.machine_count - 1
    for m in range(topo.machine_count):
        peer = m ^ 1
        if peer > last:
            # odd machine count: the last machine has nobody to pair with
            peer = m
        for a, b in zip(topo.ranks_of(m), topo.ranks_of(peer)):
            mapping[a] = b
    return mapping


def plan_kind(topo: ParallelTopology) -> str:
    return _backup_plan(topo)[0]


_PLAN_CACHE: Dict[ParallelTopology, Tuple[str, Dict[int, int]]] = {}


def _backup_plan(topo: ParallelTopology) -> Tuple[str, Dict[int, int]]:
    cached = _PLAN_CACHE.get(topo)
    if cached is not None:
        return cached
    plan = _xor_shift_plan(topo)
    kind = "cross-group"
    if plan is None:
        plan = _greedy_plan(topo)
        kind = "cross-group-search"
    if plan is None:
        plan = _neighbor_plan(topo)
        kind = "neighbor"
    _PLAN_CACHE[topo] = (kind, plan)
    return kind, plan


def backup_peer(rank: int, topo: ParallelTopology) -> int:
    """Rank that holds ``rank``'s checkpoint backup (and vice versa)."""
    topo._check_rank(rank)
    return _backup_plan(topo)[1][rank]


def backup_plan(topo: ParallelTopology) -> Dict[int, int]:
    return dict(_backup_plan(topo)[1])
