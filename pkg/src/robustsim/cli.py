"""Command-line front end: ``robustsim <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from robustsim import aggregation, ckptplan, diagnosis, recovery
from robustsim.config import BUNDLED_DIR, ConfigError, bundled_names, load_config
from robustsim.report import SimReport, format_report, format_was
from robustsim.topology import ParallelTopology, TopologyError, plan_kind

log = logging.getLogger("robustsim")


def _setup_logging() -> None:
    level = os.environ.get("ROBUSTSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    candidate = BUNDLED_DIR / f"{arg}.json"
    if candidate.exists():
        return candidate
    raise ConfigError([f"$: no such file or bundled scenario {arg!r} (bundled: {', '.join(bundled_names())})"])


def cmd_simulate(args) -> int:
    from robustsim.simkernel import run

    path = _resolve_config(args.config)
    cfg = load_config(path)
    if args.seed is not None:
        cfg.seed = args.seed
    log.info("running %s (seed %d, %d steps)", cfg.name, cfg.seed, cfg.horizon_steps)
    rep = run(cfg)
    if args.out:
        rep.save(args.out)
    print(format_report(rep))
    return 0


def cmd_replay_locate(args) -> int:
    plan = diagnosis.dual_phase_replay(args.z, args.m, set(args.faulty))
    out = plan.to_dict()
    out["expected_size"] = diagnosis.replay_cardinality(plan.m, plan.n)
    print(json.dumps(out, sort_keys=True))
    return 0 if plan.conclusive else 3


def _topo(args) -> ParallelTopology:
    rpm = args.ranks_per_machine if args.ranks_per_machine is not None else args.tp
    return ParallelTopology(args.tp, args.pp, args.dp, rpm)


def cmd_plan_backup(args) -> int:
    topo = _topo(args)
    plan = ckptplan.plan_backups(topo)
    print(f"# plan: {plan_kind(topo)}  ranks: {topo.world_size}  machines: {topo.machine_count}")
    print("rank\tmachine\tpeer\tpeer_machine")
    for r in range(topo.world_size):
        p = plan[r]
        print(f"{r}\t{topo.machine_of(r)}\t{p}\t{topo.machine_of(p)}")
    return 0


def cmd_size_standby(args) -> int:
    print(recovery.size_pool(args.n, args.p, args.q))
    return 0


def cmd_analyze_stacks(args) -> int:
    with open(args.snapshot) as fh:
        fixture = json.load(fh)
    machines = fixture.get("machines", fixture)
    snap = {}
    for m, roles in machines.items():
        snap[int(m)] = {"trainer": roles} if isinstance(roles, list) else roles
    if args.tp is not None:
        topo = _topo(args)
    elif "topology" in fixture:
        t = fixture["topology"]
        topo = ParallelTopology(t["tp"], t["pp"], t["dp"], t.get("ranks_per_machine", 1))
    else:
        raise ConfigError(["$.topology: pass --tp/--pp/--dp or include a topology in the fixture"])
    grouping = aggregation.cluster(snap)
    out = {"outliers": sorted(grouping.outliers), "confidence": grouping.confidence, "evict": []}
    if grouping.outliers:
        iso = aggregation.isolate(grouping, topo)
        out["evict"] = sorted(iso.machines)
        out["granularity"] = iso.granularity
        out["group"] = iso.group.to_dict() if iso.group else None
    print(json.dumps(out, sort_keys=True))
    return 0 if grouping.outliers else 3


def cmd_sweep(args) -> int:
    params = recovery.RecoveryParams()
    if args.config:
        params = load_config(_resolve_config(args.config)).recovery
    policies: List[str] = []
    for p in args.policy or ["requeue", "reschedule", "oracle", "ours"]:
        policies.extend(x for x in p.split(",") if x)
    try:
        pols = [recovery.RestartPolicy(p) for p in policies]
    except ValueError as exc:
        raise ConfigError([f"--policy: {exc}"]) from None
    scales = args.scales or list(recovery.DEFAULT_SCALES)
    table = recovery.was_table(pols, params, scales)
    print(format_was(table))
    if args.out:
        Path(args.out).write_text(json.dumps({str(k): v for k, v in table.items()}, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_report(args) -> int:
    rep = SimReport.load(args.report)
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(["t_ms", "ettr_cumulative", "ettr_sliding"])
        for (t, c), (_, s) in zip(rep.ettr_cumulative, rep.ettr_sliding):
            w.writerow([t, f"{c:.6f}", f"{s:.6f}"])
    else:
        print(format_report(rep))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustsim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="run a scenario and write its report")
    p.add_argument("--config", required=True, help="scenario JSON path or bundled scenario name")
    p.add_argument("--out", help="where to write the report JSON")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("replay-locate", help="two-phase replay suspect set")
    p.add_argument("--z", type=int, required=True, help="machine count")
    p.add_argument("--m", type=int, required=True, help="horizontal group size")
    p.add_argument("--faulty", type=int, nargs="+", required=True)
    p.set_defaults(fn=cmd_replay_locate)

    for name, fn, help_ in (("plan-backup", cmd_plan_backup, "checkpoint backup peer per rank"),
                            ("analyze-stacks", cmd_analyze_stacks, "cluster a stack snapshot and pick evictions")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--tp", type=int, required=name == "plan-backup")
        p.add_argument("--pp", type=int, required=name == "plan-backup")
        p.add_argument("--dp", type=int, required=name == "plan-backup")
        p.add_argument("--ranks-per-machine", type=int, help="defaults to tp (one TP group per machine)")
        if name == "analyze-stacks":
            p.add_argument("--snapshot", required=True, help="JSON fixture: {machines: {id: {role: [frames]}}}")
        p.set_defaults(fn=fn)

    p = sub.add_parser("size-standby", help="warm standby pool size")
    p.add_argument("--n", type=int, required=True, help="machines in the job")
    p.add_argument("--p", type=float, required=True, help="daily failure probability per machine")
    p.add_argument("--q", type=float, default=0.99, help="quantile (default 0.99)")
    p.set_defaults(fn=cmd_size_standby)

    p = sub.add_parser("sweep", help="weighted-average restart time per policy and scale")
    p.add_argument("--config", help="scenario whose recovery parameters to use")
    p.add_argument("--policy", action="append", help="policy name(s), comma separated; repeatable")
    p.add_argument("--scales", type=int, nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="pretty-print a saved report")
    p.add_argument("report")
    p.add_argument("--csv", action="store_true", help="emit the ETTR series as CSV")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TopologyError, diagnosis.ReplayError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
