import random

import pytest
from hypothesis import given, strategies as st

from robustsim.aggregation import (
    cluster,
    fail_slow_rounds,
    isolate,
    normalize_frame,
    pp_group_index,
    signature,
    slow_rounds_source,
    synth_snapshot,
)
from robustsim.topology import ParallelTopology

HANG_TOPO = ParallelTopology(2, 4, 4, 2)
MACHINES = range(16)

HANG_OVERRIDES = {
    12: {"trainer": ["train_step", "backward", "irecv"]},
    13: {"trainer": ["train_step", "backward", "irecv"]},
    14: {"trainer": ["train_step", "backward", "isend"]},
    15: {"trainer": ["train_step", "backward", "all_gather_into_tensor"]},
}


def test_normalization_hides_identifiers():
    a = normalize_frame("ncclKernel rank=3 at 0x7ffdeadbeef peer 10.0.0.7:2222 pid=991")
    b = normalize_frame("ncclKernel rank=12 at 0x7ff00001 peer 10.0.3.2:2222 pid=4")
    assert a == b
    assert signature(["a rank=1", "b"]) == signature(["a rank=9", "b"])
    assert signature(["a", "b"]) != signature(["b", "a"])


def test_hang_snapshot_cluster_and_isolate():
    g = cluster(synth_snapshot(MACHINES, HANG_OVERRIDES))
    assert g.outliers == {12, 13, 14, 15}
    assert g.confidence == pytest.approx(12 / 16)
    iso = isolate(g, HANG_TOPO)
    assert iso.machines == {12, 13, 14, 15}
    assert iso.group.dp == 3


def test_uniform_snapshot_has_no_outliers():
    g = cluster(synth_snapshot(MACHINES, {}))
    assert g.outliers == set() and not g.conclusive
    with pytest.raises(ValueError):
        isolate(g, HANG_TOPO)


def test_even_split_is_inconclusive():
    over = {m: {"trainer": ["other"]} for m in range(8)}
    g = cluster(synth_snapshot(MACHINES, over))
    assert len(g.dominant["trainer"]) == 2
    assert g.outliers == set()


def test_outliers_from_any_role():
    over = {3: {"dataloader": ["worker_loop", "stuck_io"]}}
    assert cluster(synth_snapshot(MACHINES, over)).outliers == {3}


def test_single_outlier_evicts_only_itself():
    # one TP group per machine, so the smallest covering group is the machine
    g = cluster(synth_snapshot(MACHINES, {7: {"trainer": ["stuck"]}}))
    iso = isolate(g, HANG_TOPO)
    assert iso.machines == {7}


def test_uncoverable_outliers_evicted_directly():
    over = {0: {"trainer": ["stuck"]}, 7: {"trainer": ["stuck"]}}
    iso = isolate(cluster(synth_snapshot(MACHINES, over)), HANG_TOPO)
    assert iso.granularity == "direct"
    assert iso.machines == {0, 7}


@given(st.sets(st.integers(0, 15), min_size=1, max_size=6))
def test_isolation_covers_outliers(bad):
    over = {m: {"trainer": ["stuck"]} for m in bad}
    g = cluster(synth_snapshot(MACHINES, over))
    if not g.outliers:
        return
    assert g.outliers <= isolate(g, HANG_TOPO).machines


def scripted(flags_per_round, topo):
    """Rounds where listed machines show a slow stack."""
    def at(i):
        return synth_snapshot(range(topo.machine_count), {m: {"trainer": ["slow"]} for m in flags_per_round[i]})
    return at


def test_fail_slow_persistent_degrader():
    rounds = [{7}, {7}, set(), {7}, set()]
    res = fail_slow_rounds(scripted(rounds, HANG_TOPO), HANG_TOPO)
    assert res.conclusive
    assert 7 in res.evict
    assert res.evict == {4, 5, 6, 7}
    assert res.counts[pp_group_index(7, HANG_TOPO)] == 3
    assert res.duration_s == 40


def test_fail_slow_noise_loses_to_degrader():
    rounds = [{7}, {1}, {7}, {1}, {7}]
    res = fail_slow_rounds(scripted(rounds, HANG_TOPO), HANG_TOPO)
    assert res.group == pp_group_index(7, HANG_TOPO)


def test_fail_slow_no_flags():
    res = fail_slow_rounds(scripted([set()] * 5, HANG_TOPO), HANG_TOPO)
    assert not res.conclusive and res.evict == frozenset()


def test_slow_rounds_source_visibility():
    src = slow_rounds_source(list(MACHINES), [9], 1.0, random.Random(0))
    assert cluster(src(0)).outliers == {9}
    hidden = slow_rounds_source(list(MACHINES), [9], 0.0, random.Random(0))
    assert cluster(hidden(0)).outliers == set()
