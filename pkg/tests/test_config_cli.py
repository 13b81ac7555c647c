import json

import pytest

from robustsim.cli import main
from robustsim.config import ConfigError, bundled, bundled_names, parse_config
from robustsim.report import SimReport
from robustsim.workloads import INCIDENT_MIX, mix_weights, mixed_production, detection_bench


def test_bundled_scenarios_present():
    assert set(bundled_names()) == {"fig4_hang", "fig6_sdc", "table8_detection", "zero_fault", "mixed_production"}


@pytest.mark.parametrize("name", ["fig4_hang", "fig6_sdc", "table8_detection", "zero_fault", "mixed_production"])
def test_config_roundtrip(name):
    cfg = bundled(name)
    again = parse_config(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_generated_scenarios_match_bundled():
    assert bundled("mixed_production") == parse_config(mixed_production())
    assert bundled("table8_detection") == parse_config(detection_bench())


def test_mix_proportions():
    assert mix_weights()["Job Hang"] == pytest.approx(0.099, abs=0.001)
    assert sum(c for _, c, _ in INCIDENT_MIX) == 55365
    published = {"CUDA Error": 36.1, "CPU OOM": 10.1, "Job Hang": 9.9, "Code/Data Adjustment": 17.3}
    for name, pct in published.items():
        assert 100 * mix_weights()[name] == pytest.approx(pct, abs=0.05)


def test_schema_errors_have_field_paths():
    bad = {"name": "x", "seed": 1, "topology": {"tp": 2, "pp": 4, "dp": 4, "bogus": 1},
           "horizon_steps": "a", "faults": [{"kind": "nope", "onset_s": -1}]}
    with pytest.raises(ConfigError) as err:
        parse_config(bad)
    paths = {e.split(":")[0] for e in err.value.errors}
    assert paths == {"$.faults[0].kind", "$.faults[0].onset_s", "$.horizon_steps", "$.topology"}


def test_semantic_errors():
    base = {"name": "x", "seed": 1, "topology": {"tp": 2, "pp": 2, "dp": 2, "ranks_per_machine": 2},
            "horizon_steps": 10}
    with pytest.raises(ConfigError, match=r"faults\[0\]"):
        parse_config(dict(base, faults=[{"kind": "gpu-lost", "onset_s": 5, "machines": [9]}]))
    with pytest.raises(ConfigError, match="topology"):
        parse_config(dict(base, topology={"tp": 2, "pp": 2, "dp": 2, "ranks_per_machine": 3}))
    with pytest.raises(ConfigError):
        parse_config(dict(base, unknown=1))


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_simulate_and_report(capsys, tmp_path):
    out = tmp_path / "hang.json"
    code, text, _ = run_cli(capsys, "simulate", "--config", "fig4_hang", "--out", str(out))
    assert code == 0 and "aggregation" in text
    rep = SimReport.load(out)
    assert sorted(rep.incidents[0]["evicted_slots"]) == [12, 13, 14, 15]
    code, text, _ = run_cli(capsys, "report", str(out))
    assert code == 0 and "fig4_hang" in text
    code, text, _ = run_cli(capsys, "report", str(out), "--csv")
    assert text.splitlines()[0] == "t_ms,ettr_cumulative,ettr_sliding"


def test_cli_seed_override_and_determinism(capsys, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run_cli(capsys, "simulate", "--config", "mixed_production", "--seed", "3", "--out", str(a))
    run_cli(capsys, "simulate", "--config", "mixed_production", "--seed", "3", "--out", str(b))
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["seed"] == 3


def test_cli_bad_config(capsys, tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"name": "x", "seed": 1, "horizon_steps": 5, "topology": {"tp": 1, "pp": 1, "dp": 1},
                             "faults": [{"kind": "gpu-lost", "onset_s": "soon", "machines": [0]}]}))
    code, _, err = run_cli(capsys, "simulate", "--config", str(p))
    assert code != 0
    assert "$.faults[0].onset_s" in err
    code, _, err = run_cli(capsys, "simulate", "--config", "no-such-scenario")
    assert code != 0 and "bundled" in err


def test_cli_replay_locate(capsys):
    code, text, _ = run_cli(capsys, "replay-locate", "--z", "24", "--m", "4", "--faulty", "13")
    out = json.loads(text)
    assert code == 0 and out["suspects"] == [13] and (out["a"], out["b"]) == (3, 1)
    code, _, err = run_cli(capsys, "replay-locate", "--z", "10", "--m", "3", "--faulty", "1")
    assert code == 2 and "divide" in err


def test_cli_plan_backup(capsys):
    code, text, _ = run_cli(capsys, "plan-backup", "--tp", "2", "--pp", "4", "--dp", "2")
    rows = {int(r.split("\t")[0]): int(r.split("\t")[2]) for r in text.splitlines()[2:]}
    assert code == 0 and rows[8] == 2 and rows[9] == 3 and len(rows) == 16


def test_cli_size_standby(capsys):
    assert run_cli(capsys, "size-standby", "--n", "1024", "--p", "0.001")[1].strip() == "4"


def test_cli_analyze_stacks(capsys, tmp_path):
    healthy = ["train_step", "optimizer.step", "reduce_scatter_tensor"]
    machines = {str(m): {"trainer": healthy} for m in range(16)}
    machines["12"] = machines["13"] = {"trainer": ["train_step", "backward", "irecv"]}
    machines["14"] = {"trainer": ["train_step", "backward", "isend"]}
    machines["15"] = {"trainer": ["train_step", "backward", "all_gather_into_tensor"]}
    p = tmp_path / "snap.json"
    p.write_text(json.dumps({"topology": {"tp": 2, "pp": 4, "dp": 4, "ranks_per_machine": 2}, "machines": machines}))
    code, text, _ = run_cli(capsys, "analyze-stacks", "--snapshot", str(p))
    assert code == 0 and json.loads(text)["evict"] == [12, 13, 14, 15]


def test_cli_sweep(capsys, tmp_path):
    out = tmp_path / "was.json"
    code, text, _ = run_cli(capsys, "sweep", "--out", str(out))
    table = json.loads(out.read_text())
    assert code == 0 and set(table) == {"128", "256", "512", "1024"}
    for row in table.values():
        assert row["ours"] < row["reschedule"] < row["requeue"]
    code, text, _ = run_cli(capsys, "sweep", "--policy", "ours")
    assert text.splitlines()[0].split() == ["WAS", "(s)", "ours"]
    code, _, err = run_cli(capsys, "sweep", "--policy", "magic")
    assert code == 2 and "magic" in err
