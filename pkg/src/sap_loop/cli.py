"""Command-line entry point for the ``sap-loop`` tool.

Configuration resolves in layers: built-in defaults, then the ``--config``
JSON file, then ``SAP_LOOP_SEED`` for the master seed, then explicit flags.
The fully resolved configuration is echoed into every file written.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__
from .agents import DEFAULT_AGENTS, UnknownAgent, UnknownTask, build_agents
from .harness import (
    ARMS, aggregate, export_metrics, make_arm, run_ablations, run_trials, summarize,
    sweep_verify_interval,
)
from .rng import episode_seed, replicate_seed
from .runtime import ConfigInvalid, LoopConfig, run_episode, serialize_trace
from .tasks import TaskFileError, builtin_suite, builtin_tasks, lint_task, load_tasks
from .world import NoiseConfig, TabletopWorld

__all__ = ["main", "resolve_config", "default_config", "load_schema", "CliError"]

SEED_ENV = "SAP_LOOP_SEED"


class CliError(Exception):
    pass


def load_schema(name: str) -> dict:
    text = resources.files("sap_loop").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def default_config() -> dict:
    noise = NoiseConfig.canonical()
    return {
        "suite": "long",
        "task": None,
        "tasks_file": None,
        "arm": "Full",
        "arms": list(ARMS),
        "intervals": [10, 20, 50],
        "weak_verifier": [0.25, 0.25],
        "agents": copy.deepcopy(DEFAULT_AGENTS),
        "loop": LoopConfig().to_dict(),
        "noise": {"p_slip": noise.p_slip, "actuation_sigma": noise.actuation_sigma,
                  "sensor_sigma": noise.sensor_sigma,
                  "stuck_on_table_contact": noise.stuck_on_table_contact},
        "trials": 500,
        "seeds": 3,
        "master_seed": 0,
        "workers": 1,
        "out_dir": "results",
        "figures": True,
    }


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _arm_name(text: str) -> str:
    key = text.replace("-", "").replace("_", "").lower()
    for arm in ARMS:
        if arm.lower() == key:
            return arm
    raise CliError(f"unknown arm {text!r}; choose from {', '.join(ARMS)}")


def resolve_config(file_path=None, overrides: dict | None = None, env=None) -> dict:
    """Defaults < file < environment seed < flags. Raises CliError when invalid."""
    env = os.environ if env is None else env
    cfg = default_config()
    schema = load_schema("config")
    if file_path is not None:
        try:
            data = json.loads(Path(file_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {file_path}: {exc}") from None
        try:
            jsonschema.validate(data, schema)
        except jsonschema.ValidationError as exc:
            raise CliError(f"config {file_path}: {exc.message}") from None
        # agent selections replace the default role spec wholesale
        agents = data.pop("agents", None)
        cfg = _merge(cfg, data)
        if agents:
            cfg["agents"].update(agents)
    if env.get(SEED_ENV):
        try:
            cfg["master_seed"] = int(env[SEED_ENV])
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if isinstance(v, dict):
            cfg[k] = _merge(cfg[k], {a: b for a, b in v.items() if b is not None})
        else:
            cfg[k] = v
    cfg["noise"]["master_seed"] = cfg["master_seed"]
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        raise CliError(f"invalid configuration: {exc.message}") from None
    try:
        LoopConfig.from_dict(cfg["loop"])
        NoiseConfig(**cfg["noise"])
    except (ConfigInvalid, ValueError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    return cfg


# ---------------------------------------------------------------- plumbing

def _tasks(cfg) -> tuple[list, list]:
    """(selected tasks, planner registry)."""
    extra = []
    if cfg["tasks_file"]:
        try:
            extra = load_tasks(cfg["tasks_file"])
        except (OSError, ValueError, TaskFileError) as exc:
            raise CliError(f"cannot load tasks from {cfg['tasks_file']}: {exc}") from None
    registry = builtin_tasks() + extra
    if cfg["task"] is not None:
        chosen = [t for t in registry if t.id == cfg["task"]]
        if not chosen:
            raise UnknownTask(f"UnknownTask: no task with id {cfg['task']!r}")
        return chosen[-1:], registry
    if cfg["suite"] == "file":
        if not extra:
            raise CliError("suite 'file' needs tasks_file")
        return extra, registry
    try:
        return builtin_suite(cfg["suite"]), registry
    except KeyError as exc:
        raise CliError(str(exc)) from None


def _objects(cfg):
    return LoopConfig.from_dict(cfg["loop"]), NoiseConfig(**cfg["noise"])


def _header(cfg) -> dict:
    return {"version": __version__, "run_config": cfg}


def _png_meta(cfg) -> dict:
    return {"Software": f"sap-loop {__version__}",
            "Description": json.dumps(cfg, sort_keys=True, separators=(",", ":"))}


def _out_path(cfg, explicit, name) -> Path:
    path = Path(explicit) if explicit else Path(cfg["out_dir"]) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _trial_kw(cfg, tasks, registry) -> dict:
    loop, noise = _objects(cfg)
    return dict(config=loop, noise=noise, master_seed=cfg["master_seed"],
                seed_indices=tuple(range(cfg["seeds"])), registry=registry,
                agents=cfg["agents"], workers=cfg["workers"])


def _print_suites(rows, out) -> None:
    print(f"{'condition':<16}{'suite':<9}{'SR':>7}{'SE':>7}{'steps':>8}{'calls':>7}{'recov':>7}",
          file=out)
    for r in rows:
        if r.row_type == "suite_summary":
            print(f"{r.condition:<16}{r.suite:<9}{r.success_rate:7.3f}{r.success_rate_se:7.3f}"
                  f"{r.mean_steps:8.1f}{r.mean_verifier_calls:7.2f}{r.mean_recoveries:7.2f}",
                  file=out)


# ---------------------------------------------------------------- commands

def cmd_run(cfg, args, out) -> int:
    tasks, registry = _tasks(cfg)
    if cfg["task"] is None:
        raise CliError("run needs --task")
    task = tasks[0]
    loop, noise = _objects(cfg)
    agents, loop = make_arm(cfg["arm"], registry, loop, cfg["agents"],
                            tuple(cfg["weak_verifier"]))
    seed = episode_seed(replicate_seed(cfg["master_seed"], 0), task.id, args.seed)
    outcome = run_episode(task, agents, loop, seed, world=TabletopWorld(noise))
    trace_path = _out_path(cfg, args.trace_out, f"trace_{task.id}_{args.seed}.jsonl")
    meta = dict(_header(cfg), trial=args.seed)
    trace_path.write_text(serialize_trace(outcome, meta))
    status = outcome.status.name
    if outcome.status.name == "Success" and not outcome.task_success:
        status = "Success(goal unmet)"
    reason = f" ({outcome.failure_reason.name})" if outcome.failure_reason else ""
    print(f"{task.id} {status}{reason} steps={outcome.steps_taken} "
          f"verifier_calls={outcome.verifier_calls} recoveries={outcome.recoveries} "
          f"seed={seed} trace={trace_path}", file=out)
    return 0


def _write(cfg, rows, csv_path, plot, out) -> None:
    export_metrics(rows, csv_path, _header(cfg))
    print(f"wrote {csv_path}", file=out)
    if cfg["figures"]:
        png = csv_path.with_suffix(".png")
        plot(rows, png, metadata=_png_meta(cfg))
        print(f"wrote {png}", file=out)


def cmd_bench(cfg, args, out) -> int:
    from .plotting import plot_task_rates

    tasks, registry = _tasks(cfg)
    results = run_trials(tasks, cfg["trials"], arm=cfg["arm"], **_trial_kw(cfg, tasks, registry))
    rows = aggregate(results)
    rows += summarize(rows)
    _print_suites(rows, out)
    _write(cfg, rows, _out_path(cfg, args.csv_out, "bench.csv"),
           lambda r, p, metadata: plot_task_rates(r, p, f"{cfg['arm']} success rate",
                                                  metadata), out)
    return 0


def cmd_sweep(cfg, args, out) -> int:
    from .plotting import plot_interval_sweep

    tasks, registry = _tasks(cfg)
    kw = _trial_kw(cfg, tasks, registry)
    loop = kw.pop("config")
    runs = sweep_verify_interval(tasks, cfg["trials"], tuple(cfg["intervals"]), config=loop,
                                 arm=cfg["arm"], **kw)
    rows = aggregate([r for res in runs.values() for r in res])
    rows += summarize(rows)
    _print_suites(rows, out)
    base = {}
    for r in rows:
        if r.row_type == "suite_summary":
            base.setdefault(r.suite, r.mean_verifier_calls)
            ratio = r.mean_verifier_calls / base[r.suite] if base[r.suite] else float("nan")
            print(f"{r.condition:<16}{r.suite:<9}verifier calls x{ratio:.2f} "
                  f"relative to {cfg['intervals'][0] if cfg['intervals'] else ''}", file=out)
    _write(cfg, rows, _out_path(cfg, args.csv_out, "sweep.csv"), plot_interval_sweep, out)
    return 0


def cmd_ablate(cfg, args, out) -> int:
    from .plotting import plot_condition_bars

    tasks, registry = _tasks(cfg)
    runs = run_ablations(tasks, cfg["trials"], arms=tuple(cfg["arms"]),
                         **_trial_kw(cfg, tasks, registry))
    rows = aggregate([r for res in runs.values() for r in res])
    rows += summarize(rows)
    _print_suites(rows, out)
    _write(cfg, rows, _out_path(cfg, args.csv_out, "ablate.csv"),
           lambda r, p, metadata: plot_condition_bars(r, p, "ablation arms", metadata), out)
    return 0


def cmd_validate_task(args, out) -> int:
    try:
        data = json.loads(Path(args.file).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {args.file}: {exc}") from None
    errors = 0
    try:
        jsonschema.validate(data, load_schema("task"))
    except jsonschema.ValidationError as exc:
        print(f"SchemaError: {exc.message}", file=out)
        errors += 1
    records = data if isinstance(data, list) else data.get("tasks", [data])
    for rec in records:
        tid = rec.get("id", "?") if isinstance(rec, dict) else "?"
        findings = lint_task(rec) if isinstance(rec, dict) else []
        for f in findings:
            where = "" if f.index is None else f"[{f.index}]"
            print(f"{tid}{where}: {f.severity.name} {f.kind}: {f.message}", file=out)
            errors += f.severity.name == "Error"
        if not findings:
            print(f"{tid}: ok", file=out)
    return 1 if errors else 0


# ---------------------------------------------------------------- parser

def _csv_ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("intervals must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sap-loop",
                                description="Closed-loop subgoal agent simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--suite", help="long, spatial, object, goal, short, all or file")
    common.add_argument("--task", help="single task id")
    common.add_argument("--tasks-file", help="extra task definitions (JSON)")
    common.add_argument("--arm", help="Full, NoVisualInput, NoRecovery, WeakVerifier, "
                                      "Monolithic (kebab-case accepted)")
    common.add_argument("--master-seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--verify-interval", type=int)
    common.add_argument("--max-steps", type=int)
    common.add_argument("--max-recoveries", type=int)
    common.add_argument("--p-slip", type=float)
    common.add_argument("--no-figures", action="store_true", help="skip PNG output")
    batch = argparse.ArgumentParser(add_help=False)
    batch.add_argument("--trials", type=int)
    batch.add_argument("--seeds", type=int, help="number of seed blocks")
    batch.add_argument("--csv-out")

    r = sub.add_parser("run", parents=[common], help="run one episode and write its trace")
    r.add_argument("--seed", type=int, default=0, help="trial index within seed block 0")
    r.add_argument("--trace-out")
    sub.add_parser("bench", parents=[common, batch], help="success rates over a suite")
    s = sub.add_parser("sweep", parents=[common, batch], help="vary the verification interval")
    s.add_argument("--intervals", type=_csv_ints)
    a = sub.add_parser("ablate", parents=[common, batch], help="compare the ablation arms")
    a.add_argument("--arms", help="comma-separated arm names")
    v = sub.add_parser("validate-task", help="lint a task file")
    v.add_argument("file")
    return p


def _overrides(args) -> dict:
    g = vars(args).get
    ov = {
        "suite": g("suite"), "task": g("task"), "tasks_file": g("tasks_file"),
        "master_seed": g("master_seed"), "workers": g("workers"), "out_dir": g("out_dir"),
        "trials": g("trials"), "seeds": g("seeds"), "intervals": g("intervals"),
        "loop": {"verify_interval": g("verify_interval"), "max_steps": g("max_steps"),
                 "max_recoveries": g("max_recoveries")},
        "noise": {"p_slip": g("p_slip")},
    }
    if g("arm"):
        ov["arm"] = _arm_name(g("arm"))
    if g("arms"):
        ov["arms"] = [_arm_name(x) for x in g("arms").split(",") if x.strip()]
    if g("no_figures"):
        ov["figures"] = False
    return ov


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "sweep": cmd_sweep, "ablate": cmd_ablate}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-task":
            return cmd_validate_task(args, out)
        cfg = resolve_config(args.config, _overrides(args))
        build_agents(cfg["agents"], builtin_tasks())
        return COMMANDS[args.command](cfg, args, out)
    except (CliError, UnknownTask, UnknownAgent, ConfigInvalid) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        print(f"sap-loop: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
