"""The event loop: a synchronous training job, injected faults, and the controller reacting to them."""
from __future__ import annotations

import logging
import math
import random
from dataclasses import replace
from typing import Dict, Iterable, List, Optional, Set, Tuple

from robustsim import aggregation
from robustsim.ckptplan import CkptDurations, CkptPipeline, CkptPolicy, ShardLedger
from robustsim.config import ScenarioConfig
from robustsim.detection import (
    DEFAULT_MONITORS,
    DEFAULT_RULES,
    Action,
    Alert,
    AlertLog,
    InspectionRule,
    Inspector,
    MetricWatch,
    NetworkTolerance,
    classify,
)
from robustsim.diagnosis import PipelineResult, StageRecord, StopTimePipeline
from robustsim.recovery import (
    CapacityExhausted,
    HotUpdate,
    StandbyPool,
    UpdateQueue,
    Urgency,
    failover,
)
from robustsim.report import IncidentCase, SimReport, resolution_breakdown
from robustsim.simkernel.events import Event, EventQueue
from robustsim.simkernel.faults import CODE_BOUND, JOB_LEVEL, Effect, FaultEvent, Observability
from robustsim.simkernel.ledger import MetricsLedger, ettr
from robustsim.simkernel.state import JobMode, MachineState, TrainingJob
from robustsim.topology import Axis, group_machines, group_of

log = logging.getLogger(__name__)

SECOND = 1000


def ms(seconds: float) -> int:
    return int(round(seconds * SECOND))


class FaultScriptError(ValueError):
    pass


class Simulator:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.topo = cfg.topology.build()
        self.M = self.topo.machine_count
        self.horizon = cfg.horizon_ms
        self.q = EventQueue()
        self.ledger = MetricsLedger()
        self.trace: List[dict] = []
        self.incidents: List[IncidentCase] = []
        self.final_state = "completed"
        self._halt_cls: Optional[str] = None

        seed = cfg.seed
        self.rng_diag = random.Random(f"{seed}:diagnosis")
        self.rng_agg = random.Random(f"{seed}:aggregation")

        self.slot_phys: List[int] = list(range(self.M))
        self.evicted: Set[int] = set()
        rp = cfg.recovery
        self.recovery = rp
        self.pool = StandbyPool(rp.target_for(self.M), rp, first_spare_id=self.M)
        self.updates = UpdateQueue(window=ms(rp.lazy_window_s))

        self.job = TrainingJob(step_ms=ms(cfg.step_duration_s), code_versions=list(cfg.code_versions))

        ck = cfg.checkpoint
        self.ckpt_policy = CkptPolicy(ck.policy)
        self.opt_ms = ms(ck.optimizer_s)
        self.ckpt_durations = CkptDurations(
            d2h=ms(ck.d2h_s), serialize=ms(ck.serialize_s), send=ms(ck.send_s),
            fwd_bwd=self.job.step_ms - self.opt_ms, optimizer=self.opt_ms,
        )
        self.ckpt = CkptPipeline(self.ckpt_policy, self.ckpt_durations)
        self.shards = ShardLedger(self.topo, self.ckpt_policy, ck.remote_interval_steps, ms(ck.remote_upload_s))
        self._step_ends: List[Tuple[int, int]] = [(0, 0)]   # (time, completed steps)
        self._cur_step: Optional[dict] = None

        det = cfg.detection
        self.inspector = Inspector(self._rules() if det.inspections_enabled else {})
        self.watch = MetricWatch(DEFAULT_MONITORS if det.monitors_enabled else (), det.metric_sample_s)
        self.alerts = AlertLog()
        self.tolerance = NetworkTolerance(det.network_tolerance_count, det.network_window_s)
        self._first_alert: Dict[int, int] = {}
        self._polls_pending: Set[str] = set()

        self.pipeline = StopTimePipeline(cfg.diagnosis, self.rng_diag, self.topo.dp_size)
        self.faults = self._build_faults()

    # ------------------------------------------------------------------ setup

    def _rules(self) -> Dict[str, InspectionRule]:
        rules = dict(DEFAULT_RULES)
        for item, ov in self.cfg.detection.rules.items():
            base = rules.get(item)
            if base is None:
                if ov.interval_s is None:
                    raise FaultScriptError(f"inspection rule {item!r} has no default; set interval_s")
                base = InspectionRule(item, ov.interval_s, ov.threshold or 1, tuple(ov.kinds or ()))
            rules[item] = InspectionRule(
                item,
                ov.interval_s if ov.interval_s is not None else base.interval_s,
                ov.threshold if ov.threshold is not None else base.threshold,
                tuple(ov.kinds) if ov.kinds is not None else base.kinds,
                ov.enabled if ov.enabled is not None else base.enabled,
            )
        return rules

    def _build_faults(self) -> List[FaultEvent]:
        out = []
        for i, f in enumerate(self.cfg.faults):
            machines = set(f.machines) | self.topo.machines_of(f.ranks)
            params = dict(f.params)
            out.append(FaultEvent(
                id=i, kind=f.kind, onset_ms=ms(f.onset_s), machines=tuple(sorted(machines)),
                duration_ms=None if f.duration_s is None else ms(f.duration_s), params=params,
            ))
        return out

    # ------------------------------------------------------------------ helpers

    def _trace(self, t: int, event: str, **data) -> None:
        self.trace.append({"t": t, "event": event, **data})

    def _active_at(self, f: FaultEvent, t: int) -> bool:
        return (f.started and f.onset_ms <= t and (f.end_ms is None or t < f.end_ms)
                and (f.removed_at is None or t < f.removed_at))

    def _on_job(self, f: FaultEvent) -> bool:
        if f.kind in JOB_LEVEL and not f.physical:
            return True
        return any(p not in self.evicted for p in f.physical)

    def _slots_of(self, f: FaultEvent) -> List[int]:
        live = {p: s for s, p in enumerate(self.slot_phys)}
        return sorted(live[p] for p in f.physical if p in live)

    def _relevant(self, f: FaultEvent, t: int) -> bool:
        if not (self._active_at(f, t) and self._on_job(f)):
            return False
        if "version" in f.params and f.kind in CODE_BOUND:
            return self.job.code_version == f.params["version"]
        return True

    def _nan_at(self, f: FaultEvent, t: int) -> Optional[int]:
        """Time the fault's NaN surfaces, if it has by ``t``."""
        if f.effect is not Effect.NAN or not self._relevant(f, t):
            return None
        if f.kind == "sdc":
            delay = ms(f.params.get("nan_delay_s", self.cfg.sdc_nan_delay_s))
            at = max(f.onset_ms, self.job.last_restart) + delay
        else:
            at = max(f.onset_ms, self.job.last_restart)
        return at if at <= t else None

    def breaking(self, t: int) -> List[FaultEvent]:
        return [f for f in self.faults if f.effect in (Effect.HANG, Effect.CRASH) and self._relevant(f, t)]

    def slowdown(self, t: int, strict: bool = False) -> float:
        """Step-time factor at ``t``; ``strict`` ignores faults starting exactly at ``t``."""
        factors = [f.slowdown for f in self.faults
                   if f.effect is Effect.SLOW and self._relevant(f, t) and not (strict and f.onset_ms == t)]
        return min(factors) if factors else 1.0

    # ------------------------------------------------------------------ public

    def run(self) -> SimReport:
        self._trace(0, "start", machines=self.M, world=self.topo.world_size, pool=self.pool.target)
        for f in self.faults:
            self.q.push(f.onset_ms, "fault-onset", fault=f.id)
        for u in self.cfg.updates:
            self.q.push(ms(u.submitted_s), "update-submit", update=u.id)
        sample = self.watch.sample_ms
        if self.watch.monitors and sample <= self.horizon:
            self.q.push(sample, "metric-sample")
        self.q.push(self.horizon, "horizon")
        if self.horizon > 0:
            self._start_step(0)
        handlers = {
            "fault-onset": self._on_fault_onset,
            "fault-end": self._on_fault_end,
            "step-end": self._on_step_end,
            "inspection": self._on_inspection,
            "metric-sample": self._on_metric_sample,
            "log-alert": self._on_log_alert,
            "comm-timeout": self._on_comm_timeout,
            "resume": self._on_resume,
            "update-submit": self._on_update_submit,
            "update-expiry": self._on_update_expiry,
        }
        while True:
            ev = self.q.pop()
            if ev is None or ev.kind == "horizon":
                break
            handlers[ev.kind](ev)
        return self._finish()

    def inject(self, fault: FaultEvent) -> List[dict]:
        """Start ``fault`` now; returns the signals it will produce."""
        t = self.q.now
        if fault.physical:
            bad = [p for p in fault.physical if p in self.evicted]
            if bad:
                raise FaultScriptError(f"fault {fault.id} targets evicted machines {bad}")
        else:
            fault.physical = tuple(self.slot_phys[s] for s in fault.machines)
        fault.started = True
        emissions = []
        info = fault.info
        if info.observability is Observability.INSPECTABLE:
            for rule in self.inspector.rules_for(fault.kind):
                emissions.append({"signal": "inspection", "rule": rule.item,
                                  "at": Inspector.next_poll(rule, t)})
                self._ensure_poll(rule, t)
        elif info.observability is Observability.LOG:
            emissions.append({"signal": "log", "at": t + ms(self.cfg.detection.log_latency_s)})
        elif info.effect is Effect.SLOW:
            emissions.append({"signal": "metric", "metric": "tensorcore", "factor": fault.slowdown})
        elif fault.kind == "nan-loss":
            emissions.append({"signal": "metric", "metric": "loss", "value": "nan"})
        if fault.kind == "sdc":
            emissions.append({"signal": "metric", "metric": "loss", "value": "nan",
                              "at": t + ms(fault.params.get("nan_delay_s", self.cfg.sdc_nan_delay_s))})
        if fault.end_ms is not None:
            self.q.push(max(fault.end_ms, t), "fault-end", fault=fault.id)
        self._trace(t, "fault-onset", fault=fault.id, kind=fault.kind, slots=list(fault.machines),
                    machines=list(fault.physical))
        self._check_job(t)
        return emissions

    # ------------------------------------------------------------------ training loop

    def _start_step(self, t: int) -> None:
        job = self.job
        job.mode = JobMode.RUNNING
        job.step_start = t
        slow = self.slowdown(t)
        fb = int(round((job.step_ms - self.opt_ms) / slow))
        rec = self.ckpt.advance(t, fb, int(round(self.opt_ms / slow)))
        self._cur_step = {"rec": rec, "state": job.step}
        self.q.push(int(rec.end), "step-end", epoch=job.epoch)

    def _on_step_end(self, ev: Event) -> None:
        job = self.job
        if ev.data["epoch"] != job.epoch or job.mode != JobMode.RUNNING:
            return
        rec = self._cur_step["rec"]
        cls = "productive" if job.step + 1 > job.high_water else "recompute"
        self.ledger.advance(int(rec.ready), cls)
        self.ledger.advance(int(rec.ready + rec.stall), "checkpoint")
        self.ledger.advance(int(rec.end), cls)
        self.shards.record(self._cur_step["state"], int(rec.own_done),
                           None if rec.backup_done is None else int(rec.backup_done))
        job.step += 1
        job.high_water = max(job.high_water, job.step)
        self._step_ends.append((ev.time, job.step))
        if self.cfg.trace_steps:
            self._trace(ev.time, "step", step=job.step, stall=int(rec.stall))
        self._start_step(ev.time)

    def _abandon_step(self, t: int) -> None:
        """Work since the current step began is lost."""
        self.job.epoch += 1
        self.ledger.advance(t, "recompute")

    def _check_job(self, t: int) -> None:
        job = self.job
        if job.mode != JobMode.RUNNING:
            return
        broken = self.breaking(t)
        if not broken:
            return
        self._abandon_step(t)
        job.mode = JobMode.STALLED
        job.stall_start = t
        job.stall_crashed = any(f.effect is Effect.CRASH for f in broken)
        det = self.cfg.detection
        for f in broken:
            if f.effect is Effect.CRASH:
                detail = {"kind": f.kind}
                if f.params.get("module"):
                    detail["module"] = f.params["module"]
                self.q.push(t + ms(det.log_latency_s), "log-alert", epoch=job.epoch, fault=f.id, detail=detail)
        self.q.push(t + ms(det.comm_timeout_s), "comm-timeout", epoch=job.epoch)
        self._trace(t, "job-stalled", faults=[f.id for f in broken], crashed=job.stall_crashed)

    # ------------------------------------------------------------------ fault events

    def _on_fault_onset(self, ev: Event) -> None:
        f = self.faults[ev.data["fault"]]
        self.inject(f)

    def _on_fault_end(self, ev: Event) -> None:
        f = self.faults[ev.data["fault"]]
        if f.ended:
            return
        f.ended = True
        self._trace(ev.time, "fault-end", fault=f.id)
        job = self.job
        if job.mode == JobMode.STALLED and not job.stall_crashed and not self.breaking(ev.time):
            # a hang that cleared by itself: the job picks up where it was
            self.ledger.advance(ev.time, "detection")
            job.epoch += 1
            job.stall_start = None
            self._trace(ev.time, "job-unstalled")
            self._start_step(ev.time)

    # ------------------------------------------------------------------ detection

    def _ensure_poll(self, rule: InspectionRule, after: int) -> None:
        if rule.item in self._polls_pending:
            return
        self._polls_pending.add(rule.item)
        self.q.push(Inspector.next_poll(rule, after), "inspection", rule=rule.item)

    def _on_inspection(self, ev: Event) -> None:
        rule = self.inspector.rules[ev.data["rule"]]
        self._polls_pending.discard(rule.item)
        t = ev.time
        readings: Dict[int, List[int]] = {}
        pending = False
        for f in self.faults:
            if f.kind not in rule.kinds or not f.started or f.ended:
                continue
            if f.end_ms is not None and f.end_ms <= t:
                continue
            if not self._on_job(f) or (f.removed_at is not None and f.removed_at <= t):
                continue
            pending = True
            if f.onset_ms < t:
                for p in f.physical:
                    if p not in self.evicted:
                        readings.setdefault(p, []).append(f.id)
        for alert in self.inspector.poll(rule, t, readings):
            self._on_alert(alert)
        if pending:
            self._ensure_poll(rule, t)

    def _metric_values(self, t: int) -> Dict[str, float]:
        job = self.job
        nan = any(self._nan_at(f, t) is not None for f in self.faults if f.effect is Effect.NAN)
        loss = float("nan") if nan else 1.0
        s = self.slowdown(t, strict=True)
        if job.mode == JobMode.STALLED:
            # a sample covers the interval before it; count only the part the job still ran
            period = self.watch.sample_ms
            s *= max(0, job.stall_start - (t - period)) / period
        return {"loss": loss, "grad-norm": loss, "rdma": s, "tensorcore": s}

    def _on_metric_sample(self, ev: Event) -> None:
        t = ev.time
        nxt = t + self.watch.sample_ms
        if nxt <= self.horizon:
            self.q.push(nxt, "metric-sample")
        if self.job.mode not in (JobMode.RUNNING, JobMode.STALLED):
            return
        for alert in self.watch.observe(t, self._metric_values(t)):
            if self.job.mode in (JobMode.BUSY, JobMode.HALTED):
                break
            ids = self._culprits_for_metric(alert.detail.get("metric"), t)
            self._on_alert(replace(alert, fault_ids=tuple(ids)))

    def _culprits_for_metric(self, metric: Optional[str], t: int) -> List[int]:
        if metric == "loss" or metric == "grad-norm":
            return [f.id for f in self.faults if f.effect is Effect.NAN and self._nan_at(f, t) is not None]
        if self.job.mode == JobMode.STALLED:
            return [f.id for f in self.breaking(t)]
        return [f.id for f in self.faults if f.effect is Effect.SLOW and self._relevant(f, t)]

    def _on_log_alert(self, ev: Event) -> None:
        if ev.data["epoch"] != self.job.epoch or self.job.mode != JobMode.STALLED:
            return
        f = self.faults[ev.data["fault"]]
        self._on_alert(Alert(ev.time, "log", f.kind, tuple(p for p in f.physical if p not in self.evicted),
                             ev.data["detail"], (f.id,)))

    def _on_comm_timeout(self, ev: Event) -> None:
        if ev.data["epoch"] != self.job.epoch or self.job.mode != JobMode.STALLED:
            return
        ids = tuple(f.id for f in self.breaking(ev.time))
        self._on_alert(Alert(ev.time, "timeout", "comm-timeout", (), {}, ids))

    def _on_alert(self, alert: Alert) -> None:
        t = alert.time
        for fid in alert.fault_ids:
            self._first_alert.setdefault(fid, t)
        if self.job.mode in (JobMode.BUSY, JobMode.HALTED):
            self._trace(t, "alert-deferred", rule=alert.rule, machines=list(alert.machines))
            return
        action = classify(alert, self.alerts.recent(), self.tolerance)
        self.alerts.add(alert)
        self._trace(t, "alert", source=alert.source, rule=alert.rule, machines=list(alert.machines),
                    action=action.value)
        if action is Action.TOLERATE:
            return
        self._handle(alert, action)

    # ------------------------------------------------------------------ controller

    def _suspend(self, t: int) -> None:
        job = self.job
        if job.mode == JobMode.RUNNING:
            self._abandon_step(t)
        else:
            self.ledger.advance(t, "detection")
            job.epoch += 1
        job.mode = JobMode.BUSY

    def _handle(self, alert: Alert, action: Action) -> None:
        t = alert.time
        onsets = [self.faults[i].onset_ms for i in alert.fault_ids]
        firsts = [self._first_alert[i] for i in alert.fault_ids if i in self._first_alert]
        inc = IncidentCase(
            id=len(self.incidents), trigger=alert.to_dict(), action=action.value,
            detected_at=min(firsts) if firsts else t, onset=min(onsets) if onsets else None,
            fault_ids=sorted(alert.fault_ids),
        )
        self.incidents.append(inc)
        self._suspend(t)

        nan_since = None
        if alert.source == "metric" and alert.detail.get("metric") in ("loss", "grad-norm"):
            times = [self._nan_at(f, t) for f in self.faults if f.effect is Effect.NAN]
            times = [x for x in times if x is not None]
            nan_since = min(times) if times else t
        restore_cap = None
        if nan_since is not None:
            # steps computed after the loss went bad are worthless
            self.ledger.reclassify(nan_since, t, "productive", "detection")
            good = max(s for te, s in self._step_ends if te <= nan_since)
            self.job.high_water = min(self.job.high_water, good)
            restore_cap = good

        probe = _Probe(self, inc)
        if action is Action.EVICT_NOW:
            slots = {s for s, p in enumerate(self.slot_phys) if p in alert.machines}
            result = self._evict_then(probe, slots, t, "evict-realtime")
        elif action is Action.AGGREGATION:
            result = self._aggregate(probe, alert, t)
        elif action is Action.ROLLBACK:
            result = self.pipeline.run(probe, t, entry="rollback")
        else:
            result = self.pipeline.run(probe, t, entry="diagnose", nan=nan_since is not None)
        stages = result.stages
        self._close(inc, probe, result, stages, t, restore_cap)

    def _evict_then(self, probe: "_Probe", slots: Set[int], t: int, label: str,
                    pre: Optional[List[StageRecord]] = None) -> PipelineResult:
        stages = list(pre or [])
        ready = probe.evict(slots, t)
        stages.append(StageRecord("evict", t, ready if ready is not None else t, "failover",
                                  {"machines": sorted(slots)}))
        if ready is None:
            return PipelineResult(stages, t, "capacity-exhausted", None, sorted(slots))
        lat = probe.failure_latency(ready)
        if lat is None:
            return PipelineResult(stages, ready, "resolved", label, sorted(slots))
        stages[-1].outcome = "restart-failed"
        rest = self.pipeline.run(probe, ready + lat, entry="diagnose")
        rest.stages = stages + rest.stages
        rest.evicted = sorted(slots) + rest.evicted
        return rest

    def _aggregate(self, probe: "_Probe", alert: Alert, t: int) -> PipelineResult:
        agg = self.cfg.aggregation
        slots = list(range(self.M))
        if alert.rule in ("tensorcore-decline", "tensorcore-low") and self.job.stall_start is None:
            degraders = set()
            for f in self.faults:
                if f.effect is Effect.SLOW and self._relevant(f, t):
                    degraders.update(self._slots_of(f))
            src = aggregation.slow_rounds_source(slots, degraders, agg.fail_slow_visibility, self.rng_agg)
            res = aggregation.fail_slow_rounds(src, self.topo, agg.rounds, agg.round_interval_s)
            end = t + ms(res.duration_s + agg.analysis_s)
            detail = {"mode": "fail-slow", "flags": res.flags,
                      "counts": {str(k): v for k, v in res.counts.items()}}
            evict = set(res.evict)
        else:
            snap = self._snapshot(t)
            grouping = aggregation.cluster(snap)
            end = t + ms(agg.analysis_s)
            detail = {"mode": "hang", "outliers": sorted(grouping.outliers),
                      "confidence": grouping.confidence}
            evict = set()
            if grouping.outliers:
                iso = aggregation.isolate(grouping, self.topo)
                evict = set(iso.machines)
                detail["granularity"] = iso.granularity
                detail["group"] = iso.group.to_dict() if iso.group else None
        if not evict:
            pre = [StageRecord("aggregation", t, end, "inconclusive", detail)]
            rest = self.pipeline.run(probe, end, entry="diagnose")
            rest.stages = pre + rest.stages
            return rest
        detail["evict"] = sorted(evict)
        pre = [StageRecord("aggregation", t, end, "evict", detail)]
        return self._evict_then(probe, evict, end, "aggregation", pre)

    def _snapshot(self, t: int) -> Dict[int, Dict[str, List[str]]]:
        over: Dict[int, Dict[str, List[str]]] = {}
        for f in self.breaking(t):
            if f.effect is not Effect.HANG:
                continue
            sigs = f.params.get("signatures")
            fslots = self._slots_of(f)
            if sigs:
                for slot, roles in sigs.items():
                    s = int(slot)
                    if isinstance(roles, list):
                        roles = {"trainer": roles}
                    over.setdefault(s, {}).update(roles)
                continue
            for s in fslots:
                peers = group_machines(group_of(self.topo.ranks_of(s)[0], Axis.PP, self.topo), self.topo)
                for p in peers:
                    over.setdefault(p, {}).setdefault("trainer", ["train_step", "p2p_wait", "irecv"])
            for s in fslots:
                over.setdefault(s, {})["trainer"] = ["train_step", f"stuck_in:{f.kind}"]
        return aggregation.synth_snapshot(range(self.M), over)

    def _close(self, inc: IncidentCase, probe: "_Probe", result: PipelineResult,
               stages: List[StageRecord], t: int, restore_cap: Optional[int]) -> None:
        for st in stages:
            cls = "failover" if st.stage == "evict" else "localization"
            if st.stage == "escalated":
                continue
            self.ledger.advance(max(st.end, self.ledger.cursor), cls)
        inc.stages = [s.to_dict() for s in stages]
        inc.evicted_slots = sorted(set(result.evicted))
        inc.evicted_machines = sorted(probe.evicted_phys)
        inc.final = result.final
        inc.failover_ms = sum(s.end - s.start for s in stages if s.stage == "evict")
        self._trace(t, "incident", id=inc.id, action=inc.action, path=inc.path, final=result.final,
                    evicted=inc.evicted_slots)
        if result.final != "resolved":
            self.job.mode = JobMode.HALTED
            self.final_state = result.final
            self._halt_cls = "localization" if result.final == "escalated" else "failover"
            self.ledger.advance(max(result.end, self.ledger.cursor), self._halt_cls)
            self._trace(result.end, "halt", reason=result.final)
            return
        inc.resolution = result.label
        inc.resolved_at = result.end
        point = self.shards.latest_recoverable(probe.evicted_phys_slots, t, restore_cap)
        resume_at = result.end
        if point.tier == "remote":
            resume_at += ms(self.recovery.remote_restore_s)
            self.ledger.advance(resume_at, "failover")
            inc.failover_ms += resume_at - result.end
        inc.restore_step = point.step
        inc.restore_tier = point.tier
        inc.lost_steps = self.job.high_water - point.step
        self.q.push(max(resume_at, self.q.now), "resume", epoch=self.job.epoch, step=point.step)

    def _on_resume(self, ev: Event) -> None:
        job = self.job
        if ev.data["epoch"] != job.epoch or job.mode != JobMode.BUSY:
            return
        t = ev.time
        step = ev.data["step"]
        job.step = step
        job.restored_from = step
        job.last_restart = t
        job.stall_start = None
        job.epoch += 1
        self._step_ends = [(te, s) for te, s in self._step_ends if s <= step] + [(t, step)]
        self.ckpt.reset()
        self.shards.reset(step, t)
        self.watch.reset()
        self._trace(t, "resume", step=step, version=job.code_version)
        job.mode = JobMode.RUNNING
        self._check_job(t)
        if job.mode == JobMode.RUNNING:
            self._start_step(t)

    # ------------------------------------------------------------------ updates

    def _set_version(self, version: int) -> None:
        self.job.code_versions.append(version)

    def _on_update_submit(self, ev: Event) -> None:
        entry = next(u for u in self.cfg.updates if u.id == ev.data["update"])
        upd = HotUpdate(entry.id, Urgency(entry.urgency), ev.time, entry.version)
        applied = self.updates.submit(upd)
        self._trace(ev.time, "update-submit", update=upd.id, urgency=upd.urgency.value, version=upd.version)
        if applied:
            self._apply_in_place(applied, ev.time)
        else:
            self.q.push(ev.time + self.updates.window, "update-expiry")

    def _on_update_expiry(self, ev: Event) -> None:
        applied = self.updates.expire(ev.time)
        if applied:
            self._apply_in_place(applied, ev.time)

    def _apply_in_place(self, applied: List[HotUpdate], t: int) -> None:
        for u in applied:
            self._set_version(u.version)
            self._trace(t, "update-applied", update=u.id, trigger=u.trigger, version=u.version)
        job = self.job
        if job.mode != JobMode.RUNNING:
            # the job is already down; the new code rides along with the pending restart
            return
        self._abandon_step(t)
        job.mode = JobMode.BUSY
        end = t + ms(self.recovery.hot_update_s)
        self.ledger.advance(end, "failover")
        point = self.shards.latest_recoverable(set(), t)
        self.q.push(end, "resume", epoch=job.epoch, step=point.step)

    # ------------------------------------------------------------------ finish

    def _finish(self) -> SimReport:
        T = self.horizon
        job = self.job
        if job.mode == JobMode.RUNNING and self.ledger.cursor < T:
            cls = "productive" if job.step + 1 > job.high_water else "recompute"
            self.ledger.advance(T, cls)
        elif job.mode == JobMode.STALLED:
            self.ledger.advance(max(T, self.ledger.cursor), "detection")
        elif job.mode == JobMode.HALTED:
            self.ledger.advance(max(T, self.ledger.cursor), self._halt_cls)
        self.ledger.truncate(T)
        if self.ledger.cursor < T:
            self.ledger.advance(T, "failover")
        self._trace(T, "end", state=self.final_state, step=job.step)
        window = ms(self.cfg.ettr_window_s)
        machines = self._machine_states(T)
        return SimReport(
            name=self.cfg.name, seed=self.cfg.seed, horizon_ms=T, final_state=self.final_state,
            final_step=job.step, high_water=job.high_water,
            ledger=self.ledger.to_list(), totals=self.ledger.totals(),
            ettr_cumulative=[[t, v] for t, v in ettr(self.ledger, "cumulative")],
            ettr_sliding=[[t, v] for t, v in ettr(self.ledger, "sliding", self.cfg.ettr_window_s)],
            ettr_window_ms=window,
            incidents=[_incident_dict(i) for i in self.incidents],
            resolution_breakdown=resolution_breakdown(self.incidents),
            machines=[m.to_dict() for m in machines],
            updates=[u.to_dict() for u in self.updates.applied + self.updates.pending],
            faults=[f.to_dict() for f in self.faults],
            trace=self.trace,
            checkpoint=self.shards.to_dict(),
        )

    def _machine_states(self, t: int) -> List[MachineState]:
        out = []
        for s, p in enumerate(self.slot_phys):
            kinds = [f.kind for f in self.faults if p in f.physical and self._active_at(f, t)]
            slow = self.slowdown(t)
            if any(k for k in kinds if k not in ("fail-slow", "gpu-high-temp")):
                out.append(MachineState(p, "faulty", s, {"kinds": kinds}))
            elif kinds:
                out.append(MachineState(p, "degraded", s, {"slowdown": slow}))
            else:
                out.append(MachineState(p, "healthy", s))
        for p in sorted(self.evicted):
            out.append(MachineState(p, "evicted"))
        for m in self.pool.members:
            out.append(MachineState(m.machine, "standby-" + m.state(t / SECOND)))
        for _, m in self.pool.quarantined:
            out.append(MachineState(m, "quarantined"))
        return sorted(out, key=lambda m: m.machine)


def _incident_dict(inc: IncidentCase) -> dict:
    from dataclasses import asdict
    return asdict(inc)


class _Probe:
    """Ground-truth view of the cluster handed to the diagnosis pipeline."""

    def __init__(self, sim: Simulator, inc: IncidentCase):
        self.sim = sim
        self.inc = inc
        self.evicted_phys: Set[int] = set()
        self.evicted_phys_slots: Set[int] = set()   # slots whose original machine was lost

    def machines(self) -> List[int]:
        return list(range(self.sim.M))

    def active_faults(self, at: int) -> Dict[int, List[str]]:
        sim = self.sim
        out: Dict[int, List[str]] = {}
        for f in sim.faults:
            if f.kind in JOB_LEVEL or not sim._relevant(f, at):
                continue
            for s in sim._slots_of(f):
                out.setdefault(s, []).append(f.kind)
        return out

    def evict(self, slots: Set[int], at: int) -> Optional[int]:
        sim = self.sim
        phys = [sim.slot_phys[s] for s in sorted(slots)]
        faulty_now = {p for p in phys
                      if any(p in f.physical and sim._active_at(f, at) for f in sim.faults)}
        for p in phys:
            sim.evicted.add(p)
        for f in sim.faults:
            if f.physical and f.removed_at is None and all(p in sim.evicted for p in f.physical):
                f.removed_at = at
        sim.inspector.forget(phys)
        try:
            # the update queue runs on the engine clock (ms), so updates are folded in here
            plan = failover(sorted(slots), sim.pool, None, at / SECOND, sim.recovery)
        except CapacityExhausted:
            sim._trace(at, "capacity-exhausted", slots=sorted(slots))
            return None
        sim.pool.quarantine([p for p in phys if p not in faulty_now], at / SECOND)
        for s, new in zip(sorted(slots), plan.replacements):
            sim.slot_phys[s] = new
        for u in sim.updates.on_failover(at):
            sim._set_version(u.version)
            sim._trace(at, "update-applied", update=u.id, trigger="failover", version=u.version)
        self.evicted_phys.update(phys)
        self.evicted_phys_slots.update(slots)
        ready = ms(plan.ready_at)
        sim._trace(at, "evict", slots=sorted(slots), machines=phys, replacements=plan.replacements,
                   ready=ready, warm=plan.warm_used, fresh=plan.fresh_used)
        return ready

    def restart_in_place(self, at: int) -> int:
        return at + ms(self.sim.recovery.restart_s)

    def previous_version(self) -> Optional[int]:
        v = self.sim.job.code_versions
        return v[-2] if len(v) >= 2 else None

    def revert(self, at: int) -> int:
        sim = self.sim
        old = sim.job.code_versions.pop()
        sim._trace(at, "rollback", from_version=old, to_version=sim.job.code_version)
        return at + ms(sim.recovery.hot_update_s)

    def failure_latency(self, at: int) -> Optional[int]:
        sim = self.sim
        det = sim.cfg.detection
        lats = []
        for f in sim.faults:
            if not sim._relevant(f, at):
                continue
            if f.effect is Effect.CRASH:
                lats.append(ms(det.log_latency_s))
            elif f.effect is Effect.HANG:
                lats.append(ms(det.comm_timeout_s))
            elif f.kind == "sdc":
                lats.append(ms(f.params.get("nan_delay_s", sim.cfg.sdc_nan_delay_s)))
            elif f.effect is Effect.NAN:
                lats.append(ms(det.metric_sample_s))
        return min(lats) if lats else None

    def replay_faulty(self, at: int) -> Set[int]:
        sim = self.sim
        out: Set[int] = set()
        for f in sim.faults:
            if f.kind in JOB_LEVEL or f.effect is Effect.SLOW or not sim._relevant(f, at):
                continue
            out.update(sim._slots_of(f))
        return out
