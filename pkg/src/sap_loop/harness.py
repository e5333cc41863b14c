"""Batch evaluation: ablation arms, interval sweeps and metric export."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

from . import __version__
from .agents import AgentBundle, BlindPlanner, MonolithicPlanner, NoisyVerifier, build_agents
from .rng import episode_seed, replicate_seed
from .runtime import LoopConfig, run_episode
from .world import NoiseConfig, TabletopWorld

__all__ = [
    "ARMS", "TrialResult", "MetricRow", "make_arm", "run_trials", "run_ablations",
    "sweep_verify_interval", "aggregate", "summarize", "export_metrics", "success_rate",
]

ARMS = ("Full", "NoVisualInput", "NoRecovery", "WeakVerifier", "Monolithic")
WEAK_VERIFIER = (0.25, 0.25)


@dataclass(frozen=True)
class TrialResult:
    condition: str
    task_id: str
    suite: str
    seed_index: int
    trial: int
    seed: int
    success: bool
    loop_success: bool
    completed: tuple[bool, ...]
    steps: int
    verifier_calls: int
    recoveries: int
    failure_reason: str | None


def make_arm(arm: str, tasks, config: LoopConfig, agents: dict | None = None,
             weak: tuple[float, float] = WEAK_VERIFIER) -> tuple[AgentBundle, LoopConfig]:
    """Agents and loop config for one ablation arm; all other settings stay fixed.

    ``agents`` is a role selection for :func:`build_agents`; the arm then
    swaps or wraps exactly one component of the resulting bundle.
    """
    if arm not in ARMS:
        raise KeyError(f"unknown arm {arm!r}; choose from {ARMS}")
    b = build_agents(agents, tasks)
    if arm == "NoVisualInput":
        b = replace(b, planner=BlindPlanner(b.planner))
    elif arm == "NoRecovery":
        config = replace(config, recovery_enabled=False)
    elif arm == "WeakVerifier":
        b = replace(b, verifier=NoisyVerifier(*weak, inner=b.verifier))
    elif arm == "Monolithic":
        b = replace(b, planner=MonolithicPlanner(tasks))
    return b, config


def _run_block(job):
    (condition, arm, tasks, registry, config, noise, master_seed, seed_index, trials,
     agent_spec) = job
    agents, cfg = make_arm(arm, registry, config, agent_spec)
    world = TabletopWorld(noise)
    block_seed = replicate_seed(master_seed, seed_index)
    out = []
    for task in tasks:
        for k in trials:
            seed = episode_seed(block_seed, task.id, k)
            o = run_episode(task, agents, cfg, seed, world=world, record_trace=False)
            out.append(TrialResult(
                condition, task.id, task.suite, seed_index, k, seed, o.task_success,
                o.success, tuple(o.per_subgoal_completed), o.steps_taken, o.verifier_calls,
                o.recoveries, None if o.failure_reason is None else o.failure_reason.name))
    return out


def run_trials(tasks, n_trials: int, *, arm: str = "Full", condition: str | None = None,
               config: LoopConfig | None = None, noise: NoiseConfig | None = None,
               master_seed: int = 0, seed_indices=(0,), registry=None,
               agents: dict | None = None, workers: int = 1) -> list[TrialResult]:
    """Run ``n_trials`` episodes per task per seed block.

    Episode seeds depend only on (master_seed, seed block, task id, trial),
    so results do not depend on task order, arm or worker count.
    """
    config = config or LoopConfig()
    noise = noise or NoiseConfig(master_seed=master_seed)
    registry = list(registry if registry is not None else tasks)
    condition = condition or arm
    jobs = []
    for j in seed_indices:
        for task in tasks:
            jobs.append((condition, arm, [task], registry, config, noise, master_seed, j,
                         range(n_trials), agents))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(job) for job in jobs]
    return [r for part in parts for r in part]


def run_ablations(tasks, n_trials: int, arms=ARMS, **kw) -> dict[str, list[TrialResult]]:
    return {arm: run_trials(tasks, n_trials, arm=arm, **kw) for arm in arms}


def sweep_verify_interval(tasks, n_trials: int, intervals=(10, 20, 50), *,
                          config: LoopConfig | None = None, **kw) -> dict[int, list[TrialResult]]:
    config = config or LoopConfig()
    return {F: run_trials(tasks, n_trials, condition=f"F={F}", config=config.with_interval(F),
                          **kw) for F in intervals}


# ---------------------------------------------------------------- metrics

def success_rate(results) -> float:
    results = list(results)
    return sum(r.success for r in results) / len(results) if results else float("nan")


@dataclass(frozen=True)
class MetricRow:
    row_type: str
    condition: str
    task_id: str
    suite: str
    seed_index: str
    n_trials: int
    success_rate: float
    success_rate_se: float
    first_stage_rate: float
    final_stage_rate: float
    stage_rates: tuple[float, ...]
    mean_steps: float
    mean_verifier_calls: float
    mean_recoveries: float
    step_limit_failures: int
    recovery_limit_failures: int


def _stats(group) -> dict:
    n = len(group)
    n_stages = max(len(r.completed) for r in group)
    stages = tuple(sum(1 for r in group if len(r.completed) > k and r.completed[k]) / n
                   for k in range(n_stages))
    sr = sum(r.success for r in group) / n
    return dict(
        n_trials=n, success_rate=sr, success_rate_se=math.sqrt(sr * (1 - sr) / n),
        first_stage_rate=stages[0], final_stage_rate=stages[-1], stage_rates=stages,
        mean_steps=sum(r.steps for r in group) / n,
        mean_verifier_calls=sum(r.verifier_calls for r in group) / n,
        mean_recoveries=sum(r.recoveries for r in group) / n,
        step_limit_failures=sum(r.failure_reason == "StepLimitExceeded" for r in group),
        recovery_limit_failures=sum(r.failure_reason == "RecoveryLimitExceeded" for r in group),
    )


def aggregate(results) -> list[MetricRow]:
    """One row per (condition, task, seed block), sorted by key."""
    groups = defaultdict(list)
    for r in results:
        groups[(r.condition, r.task_id, r.suite, r.seed_index)].append(r)
    return [MetricRow("trial_block", c, t, s, str(j), **_stats(groups[(c, t, s, j)]))
            for (c, t, s, j) in sorted(groups)]


def _mean_se(values) -> tuple[float, float]:
    n = len(values)
    m = sum(values) / n
    if n < 2:
        return m, 0.0
    var = sum((v - m) ** 2 for v in values) / (n - 1)
    return m, math.sqrt(var / n)


def summarize(rows: list[MetricRow]) -> list[MetricRow]:
    """Across seed blocks: mean and standard error per task and per suite.

    Suite rates first average tasks within a block, so every task weighs
    the same.
    """
    out = []
    by_task = defaultdict(list)
    for r in rows:
        if r.row_type == "trial_block":
            by_task[(r.condition, r.task_id, r.suite)].append(r)
    by_suite_block = defaultdict(lambda: defaultdict(list))
    for (c, t, s), rs in sorted(by_task.items()):
        out.append(_combine("task_summary", c, t, s, rs))
        for r in rs:
            by_suite_block[(c, s)][r.seed_index].append(r)
            by_suite_block[(c, "all")][r.seed_index].append(r)
    for (c, s), blocks in sorted(by_suite_block.items()):
        merged = [_combine("block", c, "*", s, rs, se_from_blocks=False)
                  for _, rs in sorted(blocks.items())]
        out.append(_combine("suite_summary", c, "*", s, merged))
    return out


def _combine(row_type, c, t, s, rs, se_from_blocks=True) -> MetricRow:
    def mean(attr):
        return sum(getattr(r, attr) for r in rs) / len(rs)
    width = max(len(r.stage_rates) for r in rs)
    stages = tuple(
        sum(r.stage_rates[k] for r in rs if len(r.stage_rates) > k)
        / max(1, sum(1 for r in rs if len(r.stage_rates) > k)) for k in range(width))
    sr, se = _mean_se([r.success_rate for r in rs])
    return MetricRow(
        row_type, c, t, s, "mean" if se_from_blocks else rs[0].seed_index,
        sum(r.n_trials for r in rs), sr, se if se_from_blocks else 0.0,
        mean("first_stage_rate"), mean("final_stage_rate"), stages, mean("mean_steps"),
        mean("mean_verifier_calls"), mean("mean_recoveries"),
        sum(r.step_limit_failures for r in rs), sum(r.recovery_limit_failures for r in rs))


CSV_COLUMNS = [f for f in MetricRow.__dataclass_fields__]


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, tuple):
        return ";".join(f"{x:.6f}" for x in v)
    return str(v)


def export_metrics(rows, path, resolved_config: dict | None = None) -> None:
    """Write metric rows as CSV preceded by ``#`` comment lines."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# sap-loop {__version__}\n")
        if resolved_config is not None:
            fh.write("# config " + json.dumps(resolved_config, sort_keys=True,
                                              separators=(",", ":")) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def config_record(config: LoopConfig, noise: NoiseConfig, **extra) -> dict:
    return {"loop": config.to_dict(), "noise": asdict(noise), **extra}
