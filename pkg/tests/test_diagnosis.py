import random

import pytest
from hypothesis import given, strategies as st

from robustsim.diagnosis import (
    DiagnosisParams,
    ReplayError,
    StopTimePipeline,
    dual_phase_replay,
    replay_cardinality,
    replay_grouping,
    run_test,
)


def congruence_suspects(z, m, x):
    """Brute force: machines sharing x's horizontal group and its residue mod n."""
    n = z // m
    return {y for y in range(z) if y // m == x // m and y % n == x % n}


def test_replay_worked_example():
    plan = dual_phase_replay(24, 4, 13)
    assert (plan.n, plan.a, plan.b) == (6, 3, 1)
    assert plan.suspects == {13}


def test_small_examples():
    plan = dual_phase_replay(4, 2, 0)
    assert (plan.a, plan.b, plan.suspects) == (0, 0, {0})
    plan = dual_phase_replay(12, 6, 4)
    assert (plan.a, plan.b, plan.suspects) == (0, 0, {0, 2, 4})
    assert replay_cardinality(6, 2) == 3


def test_replay_matches_congruence_oracle():
    for z in range(1, 97):
        for m in (d for d in range(1, z + 1) if z % d == 0):
            for x in range(z):
                plan = dual_phase_replay(z, m, x)
                assert plan.conclusive
                assert x in plan.suspects
                assert plan.suspects == congruence_suspects(z, m, x)


@given(st.integers(1, 40), st.integers(1, 40))
def test_cardinality_formula_holds_when_groups_align(m, n):
    # the closed form is exact whenever n divides m or m <= n
    if m > n and m % n:
        return
    z = m * n
    sizes = {len(dual_phase_replay(z, m, x).suspects) for x in range(z)}
    assert sizes == {replay_cardinality(m, n)}


def test_cardinality_formula_counterexample():
    # m=3, n=2: horizontal group {0,1,2} holds residue 0 twice and residue 1 once
    assert dual_phase_replay(6, 3, 1).suspects == {1}
    assert replay_cardinality(3, 2) == 2


def test_two_faulty_machines_inconclusive():
    plan = dual_phase_replay(24, 4, {1, 13})
    assert not plan.conclusive
    assert plan.suspects == set()


def test_replay_errors():
    with pytest.raises(ReplayError):
        dual_phase_replay(10, 3, 0)
    with pytest.raises(ReplayError):
        dual_phase_replay(10, 5, 10)


def test_replay_grouping():
    assert replay_grouping(24, 6) == (4, 6)
    assert replay_grouping(16, 4, k=2) == (8, 2)
    with pytest.raises(ReplayError):
        replay_grouping(16, 4, k=3)


def test_run_test_ground_truth():
    p = DiagnosisParams()
    rng = random.Random(0)
    v = run_test("eud", range(16), {9: ["cuda-error"]}, p, rng)
    assert v.failed == {9}
    assert run_test("eud", range(16), {9: ["sdc"]}, p, rng).passed
    assert run_test("inter-comm", range(16), {2: ["nic-crash"]}, p, rng).failed == {2}
    p1 = DiagnosisParams(align_sdc_recall=1.0)
    assert run_test("bitwise-align", range(16), {13: ["sdc"]}, p1, rng).failed == {13}
    always_miss = DiagnosisParams(false_negative_rate=1.0)
    assert run_test("eud", range(16), {9: ["cuda-error"]}, always_miss, rng).passed


class FakeProbe:
    """Minimal cluster: faults are (kind, machine or None, version or None), fixed unless evicted."""

    def __init__(self, z, faults, versions=(1,)):
        self.z = z
        self.faults = list(faults)
        self.versions = list(versions)
        self.evictions = []

    def machines(self):
        return list(range(self.z))

    def _live(self):
        return [f for f in self.faults if f[2] is None or f[2] == self.versions[-1]]

    def active_faults(self, at):
        out = {}
        for kind, m, _ in self._live():
            if m is not None:
                out.setdefault(m, []).append(kind)
        return out

    def evict(self, machines, at):
        self.evictions.append(set(machines))
        self.faults = [f for f in self.faults if f[1] not in machines]
        return at + 60_000

    def restart_in_place(self, at):
        return at + 30_000

    def previous_version(self):
        return self.versions[-2] if len(self.versions) > 1 else None

    def revert(self, at):
        self.versions.pop()
        return at + 60_000

    def failure_latency(self, at):
        return 10_000 if self._live() else None

    def replay_faulty(self, at):
        return {m for _, m, _ in self._live() if m is not None}


def pipeline(params=None, dp=6):
    return StopTimePipeline(params or DiagnosisParams(), random.Random(1), dp_size=dp)


def test_pipeline_diagnose_evicts():
    probe = FakeProbe(24, [("cuda-error", 9, None)])
    res = pipeline().run(probe, 0)
    assert res.path == ["diagnose", "evict"]
    assert res.label == "evict-diagnose" and res.evicted == [9]


def test_pipeline_transient_reattempt():
    res = pipeline().run(FakeProbe(24, []), 0)
    assert res.path == ["diagnose", "reattempt"]
    assert res.label == "reattempt"


def test_pipeline_user_bug_rollback():
    probe = FakeProbe(24, [("user-code-bug", None, 7)], versions=(6, 7))
    res = pipeline().run(probe, 0)
    assert res.path == ["diagnose", "reattempt", "rollback"]
    assert res.label == "rollback" and probe.versions == [6]


def test_pipeline_sdc_reaches_replay():
    probe = FakeProbe(24, [("sdc", 13, None)], versions=(1, 2))
    res = pipeline().run(probe, 0)
    assert res.path == ["diagnose", "reattempt", "rollback", "replay", "evict"]
    assert res.label == "replay" and res.replay.suspects == {13}


def test_pipeline_no_previous_version_skips_rollback():
    res = pipeline().run(FakeProbe(24, [("sdc", 13, None)]), 0)
    assert [s.outcome for s in res.stages][2] == "skipped"
    assert res.label == "replay"


def test_pipeline_nan_ladder_align_stage():
    params = DiagnosisParams(align_sdc_recall=1.0)
    res = pipeline(params).run(FakeProbe(24, [("sdc", 13, None)]), 0, nan=True)
    verdicts = res.stages[0].detail["verdicts"]
    assert [v["test"] for v in verdicts] == ["eud", "intra-comm", "inter-comm", "bitwise-align"]
    assert res.evicted == [13]


def test_pipeline_escalates_when_replay_inconclusive():
    probe = FakeProbe(24, [("sdc", 1, None), ("sdc", 13, None)])
    res = pipeline().run(probe, 0)
    assert res.final == "escalated"
    assert res.path[-2:] == ["replay", "escalated"]


def test_stages_entered_at_most_once():
    for faults in ([], [("sdc", 5, None)], [("cuda-error", 2, None)], [("user-code-bug", None, 2)]):
        res = pipeline().run(FakeProbe(24, faults, versions=(1, 2)), 0)
        stops = [s for s in res.path if s != "evict"]
        assert len(stops) == len(set(stops))
        order = ["diagnose", "reattempt", "rollback", "replay", "escalated"]
        assert stops == sorted(stops, key=order.index)
