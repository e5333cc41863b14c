import io
import json
import time

import pytest

from sap_loop.cli import SEED_ENV, CliError, default_config, main, resolve_config
from sap_loop.harness import read_metrics
from sap_loop.runtime import parse_trace
from sap_loop.tasks import builtin_tasks, task_to_dict


def cli(*argv):
    buf = io.StringIO()
    code = main(list(argv), out=buf)
    return code, buf.getvalue()


def test_run_is_reproducible(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    code, text = cli("run", "--task", "stove_moka", "--seed", "7", "--trace-out", str(a))
    assert code == 0
    line = text.strip()
    assert line.startswith("stove_moka Success") and "verifier_calls=" in line
    cli("run", "--task", "stove_moka", "--seed", "7", "--trace-out", str(b))
    assert a.read_bytes() == b.read_bytes()
    outcome = parse_trace(a.read_text())
    assert outcome.status.name == "Success"
    head = json.loads(a.read_text().splitlines()[0])
    assert head["run"]["trial"] == 7 and "noise" in head["run"]["run_config"]


def test_unknown_task_exit_code(tmp_path, capsys):
    code, _ = cli("run", "--task", "juggle", "--out-dir", str(tmp_path))
    assert code == 2
    assert "juggle" in capsys.readouterr().err


def test_bad_arm_exit_code(tmp_path):
    assert cli("bench", "--arm", "no-planner", "--out-dir", str(tmp_path))[0] == 2


def test_bench_single_trial_fast(tmp_path):
    t0 = time.perf_counter()
    code, text = cli("bench", "--suite", "long", "--trials", "1", "--seeds", "1",
                     "--out-dir", str(tmp_path))
    assert code == 0 and time.perf_counter() - t0 < 10
    assert (tmp_path / "bench.csv").exists() and (tmp_path / "bench.png").exists()
    rows = read_metrics(tmp_path / "bench.csv")
    assert {r["task_id"] for r in rows if r["row_type"] == "trial_block"} == {
        t.id for t in builtin_tasks() if t.suite == "long"}


def test_kebab_arm_disables_recovery(tmp_path):
    code, _ = cli("bench", "--suite", "goal", "--trials", "2", "--seeds", "1",
                  "--arm", "no-recovery", "--no-figures", "--out-dir", str(tmp_path))
    assert code == 0
    rows = read_metrics(tmp_path / "bench.csv")
    assert {r["condition"] for r in rows} == {"NoRecovery"}
    assert all(float(r["mean_recoveries"]) == 0 for r in rows)
    assert not (tmp_path / "bench.png").exists()


def test_sweep_three_conditions(tmp_path):
    code, text = cli("sweep", "--suite", "goal", "--trials", "1", "--seeds", "1",
                     "--out-dir", str(tmp_path))
    assert code == 0
    rows = read_metrics(tmp_path / "sweep.csv")
    assert {r["condition"] for r in rows} == {"F=10", "F=20", "F=50"}
    assert text.count("verifier calls x") >= 3
    assert (tmp_path / "sweep.png").stat().st_size > 0


def test_ablate_subset(tmp_path):
    code, _ = cli("ablate", "--suite", "goal", "--trials", "1", "--seeds", "1",
                  "--arms", "Full,weak-verifier", "--out-dir", str(tmp_path))
    assert code == 0
    rows = read_metrics(tmp_path / "ablate.csv")
    assert {r["condition"] for r in rows} == {"Full", "WeakVerifier"}
    assert (tmp_path / "ablate.png").exists()


def test_validate_task(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(task_to_dict(builtin_tasks()[0])))
    code, text = cli("validate-task", str(good))
    assert code == 0 and text.strip().endswith("ok")
    d = task_to_dict(builtin_tasks()[0])
    d["canonical_subgoals"] = ["pick up the unicorn"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    code, text = cli("validate-task", str(bad))
    assert code == 1 and "UnknownEntity" in text


def test_config_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"master_seed": 5, "trials": 7, "loop": {"verify_interval": 10}}))
    cfg = resolve_config(path, {}, env={})
    assert (cfg["master_seed"], cfg["trials"], cfg["loop"]["verify_interval"]) == (5, 7, 10)
    assert cfg["noise"]["master_seed"] == 5
    assert resolve_config(path, {}, env={SEED_ENV: "9"})["master_seed"] == 9
    assert resolve_config(path, {"master_seed": 11}, env={SEED_ENV: "9"})["master_seed"] == 11
    assert resolve_config(None, {}, env={})["trials"] == default_config()["trials"]


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"trails": 7}))
    with pytest.raises(CliError):
        resolve_config(path, {}, env={})
    assert cli("bench", "--config", str(path), "--out-dir", str(tmp_path))[0] == 2
