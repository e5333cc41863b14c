import math
import random

import pytest

from sap_loop.agents import BlindPlanner, MonolithicPlanner, NoisyVerifier
from sap_loop.harness import (
    ARMS, CSV_COLUMNS, aggregate, config_record, export_metrics, make_arm, read_metrics,
    run_trials, success_rate, summarize, sweep_verify_interval,
)
from sap_loop.runtime import LoopConfig
from sap_loop.tasks import builtin_suite, builtin_tasks
from sap_loop.world import NoiseConfig

ALL = builtin_tasks()
NOISE = NoiseConfig.canonical()


def test_arm_set():
    assert set(ARMS) == {"Full", "NoVisualInput", "NoRecovery", "WeakVerifier", "Monolithic"}
    cfg = LoopConfig()
    assert isinstance(make_arm("NoVisualInput", ALL, cfg)[0].planner, BlindPlanner)
    assert make_arm("NoRecovery", ALL, cfg)[1].recovery_enabled is False
    weak = make_arm("WeakVerifier", ALL, cfg)[0].verifier
    assert isinstance(weak, NoisyVerifier)
    assert (weak.p_false_positive, weak.p_false_negative) == (0.25, 0.25)
    assert isinstance(make_arm("Monolithic", ALL, cfg)[0].planner, MonolithicPlanner)
    assert make_arm("Full", ALL, cfg)[1] == cfg
    with pytest.raises(KeyError):
        make_arm("NoPlanner", ALL, cfg)


def _key(results):
    return sorted((r.task_id, r.seed_index, r.trial, r.success, r.steps, r.verifier_calls,
                   r.recoveries) for r in results)


def test_task_order_does_not_matter():
    tasks = builtin_suite("goal") + builtin_suite("long")[:2]
    shuffled = list(tasks)
    random.Random(4).shuffle(shuffled)
    kw = dict(noise=NOISE, registry=ALL, seed_indices=(0, 1))
    assert _key(run_trials(tasks, 3, **kw)) == _key(run_trials(shuffled, 3, **kw))


def test_workers_do_not_change_results():
    tasks = builtin_suite("object")
    kw = dict(noise=NOISE, registry=ALL, seed_indices=(0,))
    assert _key(run_trials(tasks, 2, **kw)) == _key(run_trials(tasks, 2, workers=2, **kw))


def test_seed_blocks_differ():
    res = run_trials(builtin_suite("long")[:1], 5, noise=NOISE, registry=ALL,
                     seed_indices=(0, 1))
    seeds = [r.seed for r in res]
    assert len(set(seeds)) == len(seeds)


@pytest.fixture(scope="module")
def rows():
    res = run_trials(builtin_suite("long")[:3] + builtin_suite("goal"), 6, arm="NoRecovery",
                     noise=NOISE, registry=ALL, seed_indices=(0, 1, 2))
    block = aggregate(res)
    return res, block, summarize(block)


def test_funnel_monotone(rows):
    _, block, summary = rows
    for r in block + summary:
        assert r.final_stage_rate >= r.success_rate - 1e-12
        if r.row_type == "suite_summary":
            continue  # pooled stage columns mix plan lengths
        stages = r.stage_rates
        assert all(a >= b - 1e-12 for a, b in zip(stages, stages[1:]))
        assert r.first_stage_rate == stages[0] and r.final_stage_rate == stages[-1]


def test_summary_mean_and_standard_error(rows):
    res, block, summary = rows
    tid = block[0].task_id
    per_seed = [success_rate(r for r in res if r.task_id == tid and r.seed_index == j)
                for j in range(3)]
    m = sum(per_seed) / 3
    se = math.sqrt(sum((x - m) ** 2 for x in per_seed) / 2 / 3)
    row = next(r for r in summary if r.row_type == "task_summary" and r.task_id == tid)
    assert row.success_rate == pytest.approx(m)
    assert row.success_rate_se == pytest.approx(se)
    suites = {r.suite for r in summary if r.row_type == "suite_summary"}
    assert suites == {"long", "goal", "all"}


def test_export_deterministic(rows, tmp_path):
    _, block, summary = rows
    cfg = config_record(LoopConfig(), NOISE, trials=6)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    export_metrics(block + summary, a, cfg)
    export_metrics(block + summary, b, cfg)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.startswith("# sap-loop ") and "\n# config {" in text
    assert "mean_verifier_calls" in CSV_COLUMNS and "mean_recoveries" in CSV_COLUMNS
    back = read_metrics(a)
    assert len(back) == len(block + summary)
    assert float(back[0]["success_rate"]) == pytest.approx(block[0].success_rate, abs=1e-6)


def test_sweep_conditions_and_call_counts():
    runs = sweep_verify_interval(builtin_suite("goal"), 2, (10, 20), noise=NOISE, registry=ALL)
    assert set(runs) == {10, 20}
    for F, res in runs.items():
        assert {r.condition for r in res} == {f"F={F}"}
        for r in res:
            assert r.verifier_calls == min(r.steps, 600) // F


def test_perfection_smoke():
    res = run_trials(builtin_suite("all"), 1, noise=NoiseConfig(), registry=ALL)
    assert success_rate(res) == 1.0 and all(r.recoveries == 0 for r in res)
