"""The plan / execute / verify / recover control loop.

One episode runs the loop below against a world backend::

    plan once; i = r = s = 0
    while i < N:
        act on plan[i]; s += 1; fail if s > S_max
        every sample_interval ticks buffer an observation
        every F ticks: verify plan[i]
            Yes -> i += 1, r = 0
            No  -> diagnose; on Stuck run the recovery action for
                   lift_ticks world ticks, r += 1, fail if r > R_max

Recovery ticks advance the world but not the step counter ``s``.
"""
from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields

from .agents import AgentBundle, DiagnosisVerdict, MonolithicGoal, VerifierVerdict
from .grammar import Severity, Subgoal, validate_plan
from .world import (
    Action, ContainerState, DeviceState, GripperState, ObjectState, Observation,
    TabletopWorld, WorldState, WristView,
)

__all__ = [
    "LoopConfig", "ConfigInvalid", "AgentContractViolation", "FrameBuffer",
    "AgenticStep", "EpisodeOutcome", "Status", "FailureReason", "run_episode",
    "verification_due", "serialize_trace", "parse_trace", "TRACE_FORMAT",
]

TRACE_FORMAT = "sap-trace/1"


class ConfigInvalid(ValueError):
    pass


class AgentContractViolation(RuntimeError):
    pass


class Status(enum.Enum):
    Success = "Success"
    Failure = "Failure"


class FailureReason(enum.Enum):
    StepLimitExceeded = "StepLimitExceeded"
    RecoveryLimitExceeded = "RecoveryLimitExceeded"


@dataclass(frozen=True)
class LoopConfig:
    """Loop constants. Periods are seconds and only label the tick rates.

    ``verify_period`` defaults to ``verify_interval * exec_period``; if given
    explicitly it must agree with that product.
    """

    verify_interval: int = 20
    buffer_size: int = 2
    sample_interval: int = 5
    max_steps: int = 600
    max_recoveries: int = 3
    lift_ticks: int = 4
    exec_period: float = 0.1
    verify_period: float | None = None
    recovery_enabled: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def verify_seconds(self) -> float:
        if self.verify_period is None:
            return self.verify_interval * self.exec_period
        return self.verify_period

    def validate(self) -> None:
        ints = ("verify_interval", "buffer_size", "sample_interval", "max_steps", "lift_ticks")
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigInvalid(f"{name} must be a positive integer, got {v!r}")
        r = self.max_recoveries
        if isinstance(r, bool) or not isinstance(r, int) or r < 0:
            raise ConfigInvalid(f"max_recoveries must be a non-negative integer, got {r!r}")
        if not self.exec_period > 0:
            raise ConfigInvalid("exec_period must be positive")
        if self.verify_period is not None:
            ratio = self.verify_period / self.exec_period
            if abs(ratio - self.verify_interval) > 1e-9 * max(1.0, ratio):
                raise ConfigInvalid(
                    f"verify_period/exec_period = {ratio:g} but verify_interval = "
                    f"{self.verify_interval}")

    def with_interval(self, interval: int) -> "LoopConfig":
        d = asdict(self)
        d["verify_interval"] = interval
        if self.verify_period is not None:
            d["verify_period"] = interval * self.exec_period
        return LoopConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LoopConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown loop config keys: {sorted(extra)}")
        return cls(**d)


def verification_due(step: int, interval: int) -> bool:
    return step > 0 and step % interval == 0


class FrameBuffer:
    """The last ``capacity`` observations, sampled every ``sample_interval`` ticks.

    Until ``capacity`` samples exist, :meth:`frames` pads at the front by
    repeating the earliest sample.
    """

    def __init__(self, capacity: int, sample_interval: int):
        self.capacity = capacity
        self.sample_interval = sample_interval
        self._frames: deque[Observation] = deque(maxlen=capacity)

    def push(self, obs: Observation) -> None:
        self._frames.append(obs)

    def __len__(self) -> int:
        return len(self._frames)

    def frames(self) -> tuple[Observation, ...]:
        fr = tuple(self._frames)
        if fr and len(fr) < self.capacity:
            fr = (fr[0],) * (self.capacity - len(fr)) + fr
        return fr

    @property
    def newest(self) -> Observation:
        return self._frames[-1]

    @property
    def oldest(self) -> Observation:
        return self._frames[0]


@dataclass(frozen=True)
class AgenticStep:
    tick: int
    observation: Observation | None
    subgoal_index: int
    subgoal_text: str
    action: Action
    verification: VerifierVerdict | None = None
    diagnosis: DiagnosisVerdict | None = None
    recovery_triggered: bool = False
    recovery_count: int = 0


@dataclass
class EpisodeOutcome:
    status: Status
    failure_reason: FailureReason | None
    steps_taken: int
    verifier_calls: int
    recoveries: int
    per_subgoal_completed: list[bool]
    task_success: bool
    plan: list[str]
    trace: list[AgenticStep] | None = None
    task_id: str = ""
    seed: int = 0
    world_ticks: int = 0
    config: dict = field(default_factory=dict)
    agents: dict = field(default_factory=dict)
    world: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status is Status.Success


def _check_plan(plan) -> None:
    if not isinstance(plan, list) or not plan:
        raise AgentContractViolation("planner must return a non-empty list of subgoals")
    atoms = []
    for g in plan:
        if isinstance(g, Subgoal):
            atoms.append(g)
        elif isinstance(g, MonolithicGoal):
            atoms.extend(g.atoms)
        else:
            raise AgentContractViolation(f"planner returned a {type(g).__name__}")
    errors = [f for f in validate_plan(atoms) if f.severity is Severity.Error]
    if errors:
        raise AgentContractViolation(f"plan does not lint: {errors[0]}")


def _describe_world(world) -> dict:
    describe = getattr(world, "describe", None)
    if describe is not None:
        return describe()
    noise = getattr(world, "noise", None)
    out = {"backend": type(world).__name__}
    if noise is not None:
        out["noise"] = asdict(noise)
    return out


def run_episode(task, agents: AgentBundle, config: LoopConfig | None = None, seed: int = 0,
                world=None, record_trace: bool = True) -> EpisodeOutcome:
    """Run one episode to completion and return its outcome.

    Raises AgentContractViolation if an agent breaks its interface contract.
    """
    config = config or LoopConfig()
    world = world if world is not None else TabletopWorld()
    F = config.verify_interval
    si = config.sample_interval
    s_max = config.max_steps
    r_max = config.max_recoveries
    state = world.reset(task, seed)
    agents.reset(world.streams.agents)
    planner, executor, verifier, diagnoser, recovery = agents.roles()
    world_cfg = getattr(world, "config", None)

    obs0 = world.observe(state)
    plan = planner.plan(task.instruction, obs0)
    _check_plan(plan)
    n = len(plan)
    texts = [g.text for g in plan]
    buffer = FrameBuffer(config.buffer_size, si)
    buffer.push(obs0)

    i = r = s = 0
    calls = recoveries = 0
    world_ticks = 0
    completed = [False] * n
    trace: list[AgenticStep] | None = [] if record_trace else None
    status, reason = Status.Success, None

    while i < n:
        goal = plan[i]
        obs = world.observe(state)
        action = executor.act(goal, obs)
        if not isinstance(action, Action) or (world_cfg is not None
                                              and not action.is_valid(world_cfg)):
            raise AgentContractViolation(f"executor returned an invalid action {action!r}")
        state = world.step(state, action, goal)
        world_ticks += 1
        s += 1
        idx = i
        verdict = diag = None
        triggered = False
        if s > s_max:
            status, reason = Status.Failure, FailureReason.StepLimitExceeded
        else:
            if s % si == 0:
                buffer.push(world.observe(state))
            if s % F == 0:
                calls += 1
                verdict = verifier.verify(buffer, goal)
                if verdict is VerifierVerdict.Yes:
                    completed[i] = True
                    i += 1
                    r = 0
                else:
                    diag = diagnoser.diagnose(buffer)
                    if diag is DiagnosisVerdict.Stuck and config.recovery_enabled:
                        triggered = True
                        rec_action = recovery.recover(diag, world.observe(state))
                        for _ in range(config.lift_ticks):
                            state = world.step(state, rec_action, goal, recovering=True)
                        world_ticks += config.lift_ticks
                        r += 1
                        recoveries += 1
                        if r > r_max:
                            status, reason = Status.Failure, FailureReason.RecoveryLimitExceeded
        if trace is not None:
            trace.append(AgenticStep(s, obs, idx, texts[idx], action, verdict, diag,
                                     triggered, r))
        if reason is not None:
            break

    ok = status is Status.Success and world.evaluate(state, task.terminal_predicate)
    return EpisodeOutcome(
        status, reason, s, calls, recoveries, completed, bool(ok), texts, trace,
        task_id=getattr(task, "id", ""), seed=seed, world_ticks=world_ticks,
        config=config.to_dict(), agents=agents.describe(), world=_describe_world(world))


# ---------------------------------------------------------------- trace I/O

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _ws_to_dict(w: WorldState) -> dict:
    g = w.gripper
    return {
        "tick": w.tick, "stuck": w.stuck, "table_height": w.table_height,
        "gripper": [list(g.position), list(g.orientation), g.closed, g.holding],
        "objects": {k: [list(o.position), o.held, o.resting_on] for k, o in w.objects.items()},
        "containers": {k: [c.open, sorted(c.contents)] for k, c in w.containers.items()},
        "devices": {k: d.on for k, d in w.devices.items()},
    }


def _ws_from_dict(d: dict) -> WorldState:
    gp, go, gc, gh = d["gripper"]
    return WorldState(
        d["tick"],
        {k: ObjectState(tuple(p), h, r) for k, (p, h, r) in d["objects"].items()},
        {k: ContainerState(o, frozenset(c)) for k, (o, c) in d["containers"].items()},
        {k: DeviceState(v) for k, v in d["devices"].items()},
        GripperState(tuple(gp), tuple(go), gc, gh), d["stuck"], d["table_height"])


def _obs_to_dict(o: Observation | None):
    if o is None:
        return None
    wg = o.wrist.gripper
    return {"tick": o.tick, "third_person": _ws_to_dict(o.third_person),
            "wrist": [list(o.wrist.entities), [list(wg.position), list(wg.orientation),
                                               wg.closed, wg.holding], o.wrist.collision]}


def _obs_from_dict(d):
    if d is None:
        return None
    ents, (gp, go, gc, gh), col = d["wrist"]
    return Observation(d["tick"], _ws_from_dict(d["third_person"]),
                       WristView(tuple(ents), GripperState(tuple(gp), tuple(go), gc, gh), col))


def _enum_name(e):
    return None if e is None else e.name


def serialize_trace(outcome: EpisodeOutcome, meta: dict | None = None) -> str:
    """Canonical JSONL: a header line, one line per step, an outcome line.

    ``meta`` is stored verbatim under the header's ``run`` key.
    """
    header = {"type": "header", "format": TRACE_FORMAT, "task_id": outcome.task_id,
              "seed": outcome.seed, "plan": outcome.plan, "config": outcome.config,
              "agents": outcome.agents, "world": outcome.world}
    if meta is not None:
        header["run"] = meta
    lines = [_dumps(header)]
    for st in outcome.trace or ():
        lines.append(_dumps({
            "type": "step", "tick": st.tick, "observation": _obs_to_dict(st.observation),
            "subgoal_index": st.subgoal_index, "subgoal": st.subgoal_text,
            "action": list(st.action), "verification": _enum_name(st.verification),
            "diagnosis": _enum_name(st.diagnosis), "recovery": st.recovery_triggered,
            "recovery_count": st.recovery_count,
        }))
    lines.append(_dumps({
        "type": "outcome", "status": outcome.status.name,
        "failure_reason": _enum_name(outcome.failure_reason),
        "steps_taken": outcome.steps_taken, "verifier_calls": outcome.verifier_calls,
        "recoveries": outcome.recoveries, "per_subgoal_completed": outcome.per_subgoal_completed,
        "task_success": outcome.task_success, "world_ticks": outcome.world_ticks,
    }))
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> EpisodeOutcome:
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records or records[0].get("type") != "header":
        raise ValueError("trace must start with a header record")
    head, tail = records[0], records[-1]
    if head.get("format") != TRACE_FORMAT:
        raise ValueError(f"unsupported trace format {head.get('format')!r}")
    if tail.get("type") != "outcome":
        raise ValueError("trace must end with an outcome record")
    steps = []
    for rec in records[1:-1]:
        steps.append(AgenticStep(
            rec["tick"], _obs_from_dict(rec["observation"]), rec["subgoal_index"],
            rec["subgoal"], Action(*rec["action"]),
            None if rec["verification"] is None else VerifierVerdict[rec["verification"]],
            None if rec["diagnosis"] is None else DiagnosisVerdict[rec["diagnosis"]],
            rec["recovery"], rec["recovery_count"]))
    return EpisodeOutcome(
        Status[tail["status"]],
        None if tail["failure_reason"] is None else FailureReason[tail["failure_reason"]],
        tail["steps_taken"], tail["verifier_calls"], tail["recoveries"],
        list(tail["per_subgoal_completed"]), tail["task_success"], list(head["plan"]), steps,
        task_id=head["task_id"], seed=head["seed"], world_ticks=tail["world_ticks"],
        config=head["config"], agents=head["agents"], world=head["world"])
