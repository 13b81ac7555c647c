"""Scenario configuration: JSON in, validated dataclasses out, and back again."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import jsonschema

from robustsim.ckptplan import CkptPolicy
from robustsim.diagnosis import DiagnosisParams
from robustsim.recovery import RecoveryParams
from robustsim.simkernel.faults import KINDS
from robustsim.topology import ParallelTopology, TopologyError


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = errors
        super().__init__("invalid scenario:\n" + "\n".join(f"  {e}" for e in errors))


@dataclass
class TopologyConfig:
    tp: int
    pp: int
    dp: int
    ranks_per_machine: int = 1

    def build(self) -> ParallelTopology:
        return ParallelTopology(self.tp, self.pp, self.dp, self.ranks_per_machine)


@dataclass
class FaultSpec:
    kind: str
    onset_s: float
    machines: List[int] = field(default_factory=list)
    ranks: List[int] = field(default_factory=list)
    duration_s: Optional[float] = None
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class UpdateSpec:
    id: str
    submitted_s: float
    version: int
    urgency: str = "lazy"


@dataclass
class RuleOverride:
    interval_s: Optional[float] = None
    threshold: Optional[int] = None
    kinds: Optional[List[str]] = None
    enabled: Optional[bool] = None


@dataclass
class DetectionConfig:
    inspections_enabled: bool = True
    monitors_enabled: bool = True
    rules: Dict[str, RuleOverride] = field(default_factory=dict)
    metric_sample_s: float = 60.0
    comm_timeout_s: float = 600.0
    log_latency_s: float = 10.0
    network_tolerance_count: int = 2
    network_window_s: float = 300.0


@dataclass
class CheckpointConfig:
    policy: str = CkptPolicy.ASYNC.value
    d2h_s: float = 5.0
    serialize_s: float = 2.0
    send_s: float = 3.0
    optimizer_s: float = 1.0
    remote_interval_steps: int = 100
    remote_upload_s: float = 60.0


@dataclass
class AggregationConfig:
    rounds: int = 5
    round_interval_s: float = 10.0
    analysis_s: float = 10.0
    fail_slow_visibility: float = 1.0


@dataclass
class ScenarioConfig:
    seed: int
    topology: TopologyConfig
    horizon_steps: int
    name: str = "scenario"
    step_duration_s: float = 15.0
    sdc_nan_delay_s: float = 300.0
    faults: List[FaultSpec] = field(default_factory=list)
    updates: List[UpdateSpec] = field(default_factory=list)
    code_versions: List[int] = field(default_factory=lambda: [1])
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    diagnosis: DiagnosisParams = field(default_factory=DiagnosisParams)
    recovery: RecoveryParams = field(default_factory=RecoveryParams)
    checkpoint: CheckpointConfig = field(default_factory=CheckpointConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    trace_steps: bool = False
    ettr_window_s: float = 3600.0

    @property
    def horizon_ms(self) -> int:
        return self.horizon_steps * int(round(self.step_duration_s * 1000))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        return parse_config(raw)


# --------------------------------------------------------------------------- schema

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_NONNEGINT = {"type": "integer", "minimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "name": {"type": "string"},
    "seed": {"type": "integer"},
    "topology": _obj({"tp": _POSINT, "pp": _POSINT, "dp": _POSINT, "ranks_per_machine": _POSINT},
                     ["tp", "pp", "dp"]),
    "horizon_steps": _NONNEGINT,
    "step_duration_s": _POS,
    "sdc_nan_delay_s": _NONNEG,
    "faults": {"type": "array", "items": _obj({
        "kind": {"enum": sorted(KINDS)},
        "onset_s": _NONNEG,
        "machines": {"type": "array", "items": _NONNEGINT},
        "ranks": {"type": "array", "items": _NONNEGINT},
        "duration_s": {"anyOf": [_POS, {"type": "null"}]},
        "params": {"type": "object"},
    }, ["kind", "onset_s"])},
    "updates": {"type": "array", "items": _obj({
        "id": {"type": "string"},
        "submitted_s": _NONNEG,
        "version": {"type": "integer"},
        "urgency": {"enum": ["lazy", "urgent"]},
    }, ["id", "submitted_s", "version"])},
    "code_versions": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
    "detection": _obj({
        "inspections_enabled": {"type": "boolean"},
        "monitors_enabled": {"type": "boolean"},
        "rules": {"type": "object", "additionalProperties": _obj({
            "interval_s": {"anyOf": [_POS, {"type": "null"}]},
            "threshold": {"anyOf": [_POSINT, {"type": "null"}]},
            "kinds": {"anyOf": [{"type": "array", "items": {"enum": sorted(KINDS)}}, {"type": "null"}]},
            "enabled": {"anyOf": [{"type": "boolean"}, {"type": "null"}]},
        })},
        "metric_sample_s": _POS,
        "comm_timeout_s": _POS,
        "log_latency_s": _NONNEG,
        "network_tolerance_count": _POSINT,
        "network_window_s": _NONNEG,
    }),
    "diagnosis": _obj({
        "test_durations_s": _obj({k: _NONNEG for k in ("eud", "intra-comm", "inter-comm", "bitwise-align")}),
        "false_negative_rate": _PROB,
        "eud_sdc_recall": _PROB,
        "align_sdc_recall": _PROB,
        "replay_step_s": _NONNEG,
        "k": _POSINT,
    }),
    "recovery": _obj({
        "daily_fail_prob": _PROB,
        "quantile": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "pool_target": {"anyOf": [_NONNEGINT, {"type": "null"}]},
        "wake_s": _NONNEG,
        "fresh_init_s": _NONNEG,
        "restart_s": _NONNEG,
        "hot_update_s": _NONNEG,
        "lazy_window_s": _POS,
        "quarantine_s": _NONNEG,
        "remote_restore_s": _NONNEG,
        "spare_capacity": _NONNEGINT,
    }),
    "checkpoint": _obj({
        "policy": {"enum": [p.value for p in CkptPolicy]},
        "d2h_s": _NONNEG, "serialize_s": _NONNEG, "send_s": _NONNEG, "optimizer_s": _NONNEG,
        "remote_interval_steps": _NONNEGINT,
        "remote_upload_s": _NONNEG,
    }),
    "aggregation": _obj({
        "rounds": _POSINT,
        "round_interval_s": _NONNEG,
        "analysis_s": _NONNEG,
        "fail_slow_visibility": _PROB,
    }),
    "trace_steps": {"type": "boolean"},
    "ettr_window_s": _POS,
}, ["seed", "topology", "horizon_steps"])


def _path(err: jsonschema.ValidationError) -> str:
    parts = ["$"]
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def _build(cls, raw: dict):
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for k, v in raw.items():
        if k in names:
            kwargs[k] = v
    return cls(**kwargs)


def parse_config(raw: dict) -> ScenarioConfig:
    """Validate ``raw`` and build a :class:`ScenarioConfig`; raises ConfigError listing every problem."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError([f"{_path(e)}: {e.message}" for e in errors])
    raw = copy.deepcopy(raw)
    topo_cfg = _build(TopologyConfig, raw.pop("topology"))
    det_raw = raw.pop("detection", {})
    rules = {k: _build(RuleOverride, v) for k, v in det_raw.pop("rules", {}).items()}
    det = _build(DetectionConfig, det_raw)
    det.rules = rules
    diag_raw = raw.pop("diagnosis", {})
    durations = DiagnosisParams().test_durations_s
    durations.update(diag_raw.pop("test_durations_s", {}))
    diag = _build(DiagnosisParams, diag_raw)
    diag.test_durations_s = durations
    cfg = ScenarioConfig(
        topology=topo_cfg,
        detection=det,
        diagnosis=diag,
        recovery=_build(RecoveryParams, raw.pop("recovery", {})),
        checkpoint=_build(CheckpointConfig, raw.pop("checkpoint", {})),
        aggregation=_build(AggregationConfig, raw.pop("aggregation", {})),
        faults=[_build(FaultSpec, f) for f in raw.pop("faults", [])],
        updates=[_build(UpdateSpec, u) for u in raw.pop("updates", [])],
        **raw,
    )
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg: ScenarioConfig) -> None:
    errors = []
    try:
        topo = cfg.topology.build()
    except TopologyError as exc:
        raise ConfigError([f"$.topology: {exc}"]) from None
    horizon_s = cfg.horizon_steps * cfg.step_duration_s
    for i, f in enumerate(cfg.faults):
        where = f"$.faults[{i}]"
        if f.onset_s > horizon_s:
            errors.append(f"{where}.onset_s: {f.onset_s} is beyond the horizon ({horizon_s} s)")
        for m in f.machines:
            if m >= topo.machine_count:
                errors.append(f"{where}.machines: machine {m} out of range [0, {topo.machine_count})")
        for r in f.ranks:
            if r >= topo.world_size:
                errors.append(f"{where}.ranks: rank {r} out of range [0, {topo.world_size})")
        if f.kind not in ("user-code-bug", "nan-loss", "hdfs-error") and not (f.machines or f.ranks):
            errors.append(f"{where}: {f.kind} needs target machines or ranks")
        if f.kind == "user-code-bug" and "version" not in f.params:
            errors.append(f"{where}.params.version: user-code-bug needs the code version it lives in")
    ids = [u.id for u in cfg.updates]
    if len(ids) != len(set(ids)):
        errors.append("$.updates: update ids must be unique")
    if cfg.checkpoint.optimizer_s >= cfg.step_duration_s:
        errors.append("$.checkpoint.optimizer_s: must be shorter than step_duration_s")
    if cfg.topology.dp % cfg.diagnosis.k:
        errors.append("$.diagnosis.k: must divide the data-parallel size")
    if errors:
        raise ConfigError(errors)


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"$: not valid JSON ({exc})"]) from None
    return parse_config(raw)


BUNDLED_DIR = Path(__file__).parent / "scenarios"


def bundled(name: str) -> ScenarioConfig:
    return load_config(BUNDLED_DIR / f"{name}.json")


def bundled_names() -> List[str]:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.json"))
