import pytest
from hypothesis import given, settings, strategies as st

from robustsim.ckptplan import (
    CkptDurations,
    CkptPipeline,
    CkptPolicy,
    ShardLedger,
    max_in_flight,
    plan_backups,
    step_stall,
    timeline,
)
from robustsim.topology import Axis, ParallelTopology, all_groups, group_machines

PAIR_TOPO = ParallelTopology(2, 4, 2, 2)

durations = st.builds(
    CkptDurations,
    d2h=st.integers(0, 30),
    serialize=st.integers(0, 30),
    send=st.integers(0, 30),
    fwd_bwd=st.integers(0, 30),
    optimizer=st.integers(0, 5),
)


def buffer_oracle(buffers, d, steps):
    """Explicit host buffers, reused round-robin; each frees once its contents are serialized."""
    free_at = [float("-inf")] * buffers
    t = 0.0
    stalls = []
    for i in range(steps):
        b = i % buffers
        ready = t + d.fwd_bwd
        d2h_end = max(t, free_at[b]) + d.d2h
        free_at[b] = d2h_end + d.serialize
        stall = max(0.0, d2h_end - ready)
        stalls.append(stall)
        t = ready + stall + d.optimizer
    return stalls


def test_stall_examples():
    assert step_stall(CkptPolicy.BLOCKING, CkptDurations(d2h=5, serialize=2), 1) == 7
    assert step_stall(CkptPolicy.ASYNC, CkptDurations(d2h=1, fwd_bwd=14, optimizer=1), 5) == 0
    d = CkptDurations()
    assert [step_stall(p, d, 10) for p in CkptPolicy] == [0, 0, 7]
    with pytest.raises(ValueError):
        step_stall(CkptPolicy.ASYNC, d, 0)
    with pytest.raises(ValueError):
        CkptDurations(d2h=-1)


@settings(max_examples=300)
@given(durations, st.integers(1, 12))
def test_pipeline_matches_buffer_oracle(d, steps):
    for policy, buffers in ((CkptPolicy.ASYNC, 2), (CkptPolicy.MEMORY, 1)):
        got = [r.stall for r in timeline(policy, d, steps)]
        assert got == buffer_oracle(buffers, d, steps)
    assert all(r.stall == d.d2h + d.serialize for r in timeline(CkptPolicy.BLOCKING, d, steps))


@settings(max_examples=300)
@given(durations, st.integers(1, 12))
def test_stall_ordering_per_step(d, steps):
    a, m, b = (timeline(p, d, steps) for p in CkptPolicy)
    for ra, rm, rb in zip(a, m, b):
        assert ra.stall <= rm.stall <= rb.stall


@given(durations, st.integers(1, 12))
def test_buffers_bound_in_flight(d, steps):
    assert max_in_flight(timeline(CkptPolicy.ASYNC, d, steps)) <= 2
    assert max_in_flight(timeline(CkptPolicy.MEMORY, d, steps)) <= 1


def test_backup_done_follows_serialization():
    for r in timeline(CkptPolicy.ASYNC, CkptDurations(), 5):
        assert r.backup_done == r.own_done + 3
        assert r.d2h_start >= r.start
    assert all(r.backup_done is None for r in timeline(CkptPolicy.MEMORY, CkptDurations(), 3))


def test_pipeline_reset_forgets_buffers():
    pipe = CkptPipeline(CkptPolicy.MEMORY, CkptDurations(d2h=10, serialize=10, fwd_bwd=1))
    pipe.advance(0)
    busy = pipe.advance(12)
    pipe.reset()
    fresh = pipe.advance(busy.end)
    assert fresh.d2h_start == busy.end


def test_plan_backups_examples():
    plan = plan_backups(PAIR_TOPO)
    assert plan[8] == 2 and plan[9] == 3
    assert plan_backups(ParallelTopology(1, 1, 4)) == {0: 1, 1: 0, 2: 3, 3: 2}


def saved_ledger(topo, steps=5, policy=CkptPolicy.ASYNC):
    led = ShardLedger(topo, policy)
    for rec in timeline(policy, CkptDurations(), steps):
        led.record_step(rec)
    return led, 10_000.0


def test_latest_recoverable_examples():
    led, now = saved_ledger(PAIR_TOPO)
    assert led.last_fully_saved(now) == 4
    point = led.latest_recoverable(set(), now)
    assert point.step == 4 and point.tier == "memory"
    assert set(point.sources.values()) == {"own-copy"}

    pp = next(g for g in all_groups(PAIR_TOPO, Axis.PP) if g.dp == 1)
    point = led.latest_recoverable(group_machines(pp, PAIR_TOPO), now)
    assert point.step == 4 and point.tier == "memory"
    assert "backup-copy" in point.sources.values()

    # rank 8 on machine 4 backs up to rank 2 on machine 1: lose both
    point = led.latest_recoverable({PAIR_TOPO.machine_of(8), PAIR_TOPO.machine_of(2)}, now)
    assert point.tier == "remote" and point.step == 0


def test_recovery_respects_completion_time():
    led = ShardLedger(PAIR_TOPO, CkptPolicy.ASYNC)
    recs = timeline(CkptPolicy.ASYNC, CkptDurations(), 3)
    for r in recs:
        led.record_step(r)
    last = recs[-1]
    # own copy done but backup still in flight: evicting an owner must fall back
    point = led.latest_recoverable({0}, last.own_done)
    assert point.step == last.state - 1
    assert led.latest_recoverable(set(), last.own_done).step == last.state


def test_memory_save_has_no_backup():
    led, now = saved_ledger(PAIR_TOPO, policy=CkptPolicy.MEMORY)
    assert led.latest_recoverable(set(), now).step == 4
    assert led.latest_recoverable({0}, now).tier == "remote"


def test_remote_interval():
    led = ShardLedger(PAIR_TOPO, CkptPolicy.ASYNC, remote_interval=2, remote_upload=0.0)
    for rec in timeline(CkptPolicy.ASYNC, CkptDurations(), 6):
        led.record_step(rec)
    point = led.latest_recoverable({PAIR_TOPO.machine_of(8), PAIR_TOPO.machine_of(2)}, 10_000)
    assert point == point.__class__(4, "remote", point.sources)
    assert led.latest_recoverable(set(), 10_000, max_state=3).step <= 3
