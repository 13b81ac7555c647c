import random
from fractions import Fraction
from math import comb

import pytest
from hypothesis import given, settings, strategies as st

from robustsim.recovery import (
    CapacityExhausted,
    HotUpdate,
    RecoveryParams,
    RestartPolicy,
    StandbyPool,
    UpdateQueue,
    Urgency,
    baseline_restart,
    binomial_cdf_table,
    failover,
    hot_update_time,
    requeue_time,
    size_pool,
    was_table,
    was_weights,
)

NS = (16, 128, 1024, 4096)
PS = (0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0)


def exact_size(n, p, q=Fraction(99, 100)):
    """Exact CDF summation in integers, stopping at the first k that reaches q.

    With p = a/b each term is comb(n, k) a^k (b-a)^(n-k) / b^n, so the test
    compares integer numerators against q * b^n.
    """
    p = Fraction(str(p))
    a, b = p.numerator, p.denominator
    goal = q * b**n
    acc = 0
    for k in range(n + 1):
        acc += comb(n, k) * a**k * (b - a) ** (n - k)
        if acc >= goal:
            return k
    return n


def test_size_pool_examples():
    assert size_pool(1024, 0.0) == 0
    assert size_pool(1024, 0.001) == 4
    assert size_pool(1, 1.0) == 1
    cdf = binomial_cdf_table(1024, 0.001)
    assert cdf[3] == pytest.approx(0.97957, abs=1e-4)
    assert cdf[4] == pytest.approx(0.99598, abs=1e-4)


@pytest.mark.parametrize("n", NS)
@pytest.mark.parametrize("p", PS)
def test_size_pool_matches_exact_fraction(n, p):
    assert size_pool(n, p) == exact_size(n, p)


def test_size_pool_grid_frozen():
    expected = {
        16: [0, 0, 1, 2, 5, 16],
        128: [0, 1, 1, 4, 21, 128],
        1024: [0, 1, 4, 18, 125, 1024],
        4096: [0, 2, 9, 56, 455, 4096],
    }
    assert {n: [size_pool(n, p) for p in PS] for n in NS} == expected


@settings(max_examples=100)
@given(st.integers(1, 300), st.floats(0.0, 1.0), st.floats(0.05, 0.999))
def test_size_pool_is_the_quantile(n, p, q):
    s = size_pool(n, p, q)
    cdf = binomial_cdf_table(n, p)
    assert cdf[s] >= q - 1e-9
    if s > 0:
        assert cdf[s - 1] < q + 1e-9


@given(st.integers(2, 400), st.floats(1e-4, 0.2))
def test_size_pool_monotone_in_p(n, p):
    assert size_pool(n, p) <= size_pool(n, min(1.0, p * 2))


def test_size_pool_rejects_bad_input():
    with pytest.raises(ValueError):
        size_pool(0, 0.1)
    with pytest.raises(ValueError):
        size_pool(10, 1.5)
    with pytest.raises(ValueError):
        size_pool(10, 0.1, 0.0)


def test_failover_warm_pool():
    params = RecoveryParams(pool_target=4)
    pool = StandbyPool(4, params, first_spare_id=100)
    plan = failover([3, 7], pool, None, now=1000.0, params=params)
    assert plan.warm_used == 2 and plan.fresh_used == 0
    assert plan.ready_at == 1000 + params.wake_s + params.restart_s
    assert pool.warm_count(1000.0) == 2
    assert len(pool.members) == 4
    assert pool.warm_count(1000 + params.fresh_init_s) == 4


def test_failover_shortfall_gated_by_fresh_init():
    params = RecoveryParams(pool_target=4, fresh_init_s=600.0)
    pool = StandbyPool(4, params, first_spare_id=100)
    plan = failover(list(range(6)), pool, None, now=0.0, params=params)
    assert plan.warm_used == 4 and plan.fresh_used == 2
    assert plan.ready_at - params.restart_s == 600.0


def test_capacity_exhausted():
    params = RecoveryParams(pool_target=1, spare_capacity=2)
    pool = StandbyPool(1, params, first_spare_id=10)
    failover([0], pool, None, 0.0, params)
    with pytest.raises(CapacityExhausted):
        failover([1], pool, None, 0.0, params)


def test_quarantined_machines_return():
    params = RecoveryParams(pool_target=2)
    pool = StandbyPool(2, params, first_spare_id=10)
    pool.withdraw(1, 0.0)
    pool.members.pop()
    pool.quarantine([5], 0.0)
    assert pool.release_quarantine(params.quarantine_s - 1) == []
    assert pool.release_quarantine(params.quarantine_s) == [5]


def test_lazy_update_rides_failover():
    q = UpdateQueue(window=86400)
    q.submit(HotUpdate("u1", Urgency.LAZY, 0.0, 2))
    params = RecoveryParams()
    pool = StandbyPool(2, params, first_spare_id=10)
    plan = failover([1], pool, q, 7200.0, params)
    assert plan.updates == ["u1"]
    u = q.applied[0]
    assert u.applied_at == 7200.0 and u.trigger == "failover"
    assert plan.ready_at == 7200.0 + params.wake_s + params.restart_s


def test_lazy_update_expires():
    q = UpdateQueue(window=86400)
    q.submit(HotUpdate("u1", Urgency.LAZY, 0.0, 2))
    assert q.next_expiry() == 86400
    assert q.expire(86399) == []
    assert [u.id for u in q.expire(86400)] == ["u1"]
    assert q.applied[0].trigger == "window-expiry"


def test_urgent_update_immediate():
    q = UpdateQueue()
    applied = q.submit(HotUpdate("u9", Urgency.URGENT, 50.0, 3))
    assert [u.applied_at for u in applied] == [50.0]
    assert q.pending == []


def test_update_applied_once():
    q = UpdateQueue()
    u = HotUpdate("u1", Urgency.LAZY, 0.0, 2)
    q.submit(u)
    q.on_failover(10.0)
    assert q.on_failover(20.0) == []
    with pytest.raises(RuntimeError):
        q._apply([u], 30.0, "failover")
    with pytest.raises(ValueError):
        q.apply_updates("whenever", 1.0)


def test_randomized_update_schedules():
    rng = random.Random(5)
    for _ in range(50):
        q = UpdateQueue(window=86400)
        events = []
        for i in range(rng.randrange(1, 8)):
            events.append((rng.uniform(0, 864000), "submit", i))
        for _ in range(rng.randrange(0, 10)):
            events.append((rng.uniform(0, 864000), "failover", None))
        events.sort()
        failovers = [t for t, k, _ in events if k == "failover"]
        for t, kind, i in events:
            due = q.next_expiry()
            while due is not None and due <= t:
                q.expire(due)
                due = q.next_expiry()
            if kind == "submit":
                q.submit(HotUpdate(f"u{i}", rng.choice(list(Urgency)), t, i))
            else:
                q.on_failover(t)
        for u in q.applied:
            if u.urgency is Urgency.URGENT:
                assert u.applied_at == u.submitted_at
                continue
            nxt = [f for f in failovers if f >= u.submitted_at]
            expiry = u.submitted_at + 86400
            expected = min([expiry] + nxt[:1])
            assert u.applied_at == expected
            assert u.trigger == ("failover" if nxt and nxt[0] < expiry else "window-expiry")


def test_reference_times():
    assert requeue_time(1024) == 768
    assert hot_update_time(128) == 46
    assert requeue_time(64) == requeue_time(128)
    assert 454 < requeue_time(200) < 545


def test_oracle_is_wake_only():
    params = RecoveryParams()
    for k in (1, 3, 32):
        downtime = baseline_restart(RestartPolicy.ORACLE, k, 1024, 0, params)
        assert downtime - params.restart_s == params.wake_s


def test_ours_falls_back_on_shortfall():
    params = RecoveryParams()
    assert baseline_restart("ours", 2, 1024, 4, params) == params.wake_s + params.restart_s
    assert baseline_restart("ours", 32, 1024, 4, params) == params.fresh_init_s + params.restart_s


def test_was_weights_sum_to_one():
    for n in (128, 1024):
        w = was_weights(n, RecoveryParams())
        assert sum(x for _, x in w) == pytest.approx(1.0)
        assert w[-1] == (32, 0.01)


def test_was_table_frozen():
    table = was_table(list(RestartPolicy))
    requeue = {128: 454, 256: 545, 512: 635, 1024: 768}
    for scale, row in table.items():
        assert row["requeue"] == pytest.approx(requeue[scale])
        assert row["reschedule"] == pytest.approx(330)
        assert row["oracle"] == pytest.approx(60)
        assert row["ours"] == pytest.approx(62.7)
        assert row["ours"] < row["reschedule"] < row["requeue"]


def test_single_policy_table():
    table = was_table(["ours"])
    assert all(list(row) == ["ours"] for row in table.values())
