"""Agent roles of the control loop and their reference implementations.

Five roles plug into the runtime: planner, executor, verifier, diagnoser and
recovery. Agents that need randomness receive the episode's ``agents``
stream through ``reset``; everything else is a pure function of its inputs.
"""
from __future__ import annotations

import abc
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .grammar import (
    GoalPredicate, SkillVerb, Subgoal, TOGGLE_VERBS, goal_predicate, parse_subgoal,
)
from .world import Action, Observation, WorldConfig

__all__ = [
    "VerifierVerdict", "DiagnosisVerdict", "Planner", "Executor", "Verifier",
    "Diagnoser", "Recovery", "MonolithicGoal", "UnknownTask", "InsufficientHistory",
    "OraclePlanner", "BlindPlanner", "MonolithicPlanner", "ScriptedExecutor",
    "IdleExecutor", "OracleVerifier", "NoisyVerifier", "WindowDiagnoser",
    "LiftRecovery", "ReorientRecovery", "AgentBundle", "normalize_instruction",
    "AGENT_REGISTRY", "DEFAULT_AGENTS", "UnknownAgent", "build_agents",
]


class VerifierVerdict(enum.Enum):
    Yes = "Yes"
    No = "No"


class DiagnosisVerdict(enum.Enum):
    Stuck = "Stuck"
    StillTrying = "StillTrying"


class UnknownTask(LookupError):
    pass


class InsufficientHistory(ValueError):
    pass


class _Role(abc.ABC):
    def reset(self, rng) -> None:
        """Start a new episode; ``rng`` is the episode's agents stream."""

    def describe(self) -> dict:
        params = {k: v for k, v in vars(self).items()
                  if not k.startswith("_") and isinstance(v, (int, float, str, bool))}
        return {"name": type(self).__name__, **params}


class Planner(_Role):
    @abc.abstractmethod
    def plan(self, instruction: str, initial_observation: Observation | None) -> list: ...


class Executor(_Role):
    @abc.abstractmethod
    def act(self, subgoal, observation: Observation) -> Action: ...


class Verifier(_Role):
    @abc.abstractmethod
    def verify(self, buffer, subgoal) -> VerifierVerdict: ...


class Diagnoser(_Role):
    @abc.abstractmethod
    def diagnose(self, buffer) -> DiagnosisVerdict: ...


class Recovery(_Role):
    @abc.abstractmethod
    def recover(self, diagnosis: DiagnosisVerdict, observation: Observation) -> Action: ...


# ---------------------------------------------------------------- goals

@dataclass(frozen=True)
class MonolithicGoal:
    """The whole instruction as one pseudo-subgoal (no decomposition).

    Completion is the conjunction of the task's terminal atoms.
    """

    instruction: str
    atoms: tuple[Subgoal, ...]

    @property
    def text(self) -> str:
        return self.instruction

    @property
    def predicate(self) -> GoalPredicate:
        preds = [goal_predicate(a) for a in self.atoms]
        return GoalPredicate(lambda w: all(p(w) for p in preds), self.instruction)

    def toggle_intents(self) -> frozenset:
        out = frozenset()
        for a in self.atoms:
            out |= a.toggle_intents()
        return out

    def __str__(self) -> str:
        return self.instruction


def normalize_instruction(text: str) -> str:
    return " ".join(text.lower().replace(",", " ").rstrip(".").split())


def _index_tasks(registry) -> dict:
    if isinstance(registry, Mapping):
        tasks = registry.values()
    else:
        tasks = registry
    return {normalize_instruction(t.instruction): t for t in tasks}


# ---------------------------------------------------------------- planners

class OraclePlanner(Planner):
    """Registry-backed planner returning each task's canonical decomposition.

    Subgoal slots may name an entity kind ("moka_pot") instead of an entity.
    With an initial observation, each pick of an ambiguous kind binds to the
    nearest still-unused instance; without one, it binds uniformly at random.
    A place of a kind refers to the instance picked last.
    """

    def __init__(self, registry):
        self._tasks = _index_tasks(registry)
        self._rng = None

    def reset(self, rng) -> None:
        self._rng = rng

    def lookup(self, instruction: str):
        try:
            return self._tasks[normalize_instruction(instruction)]
        except KeyError:
            raise UnknownTask(f"no task for instruction {instruction!r}") from None

    def plan(self, instruction, initial_observation=None):
        task = self.lookup(instruction)
        kinds = task.layout.kinds()
        names = {e.name for e in task.layout.entities}
        used: set[str] = set()
        last_of_kind: dict[str, str] = {}
        out = []
        for sg in task.canonical_subgoals:
            obj = sg.object
            if obj not in names and obj in kinds:
                if sg.verb is SkillVerb.PickUp or obj not in last_of_kind:
                    obj = self._bind(kinds[obj], used, initial_observation)
                    used.add(obj)
                else:
                    obj = last_of_kind[sg.object]
                last_of_kind[sg.object] = obj
            tgt = sg.target
            if tgt is not None and tgt not in names and tgt in kinds and len(kinds[tgt]) == 1:
                tgt = kinds[tgt][0]
            bound = replace(sg, object=obj, target=tgt)
            out.append(bound)
        return out

    def _bind(self, candidates: list[str], used: set[str], obs) -> str:
        if len(candidates) == 1:
            return candidates[0]
        if obs is None:
            rng = self._rng
            k = rng.choice(len(candidates)) if rng is not None else 0
            return candidates[k]
        w = obs.third_person
        gx, gy, gz = w.gripper.position
        free = [c for c in candidates if c not in used] or list(candidates)
        return min(free, key=lambda c: (math.dist(w.objects[c].position, (gx, gy, gz)), c))


class BlindPlanner(Planner):
    """Wraps a planner and withholds the initial observation from it."""

    def __init__(self, inner: Planner):
        self.inner = inner

    def reset(self, rng) -> None:
        self.inner.reset(rng)

    def plan(self, instruction, initial_observation=None):
        return self.inner.plan(instruction, None)

    def describe(self) -> dict:
        return {"name": "BlindPlanner", "inner": self.inner.describe()}


class MonolithicPlanner(Planner):
    def __init__(self, registry):
        self._tasks = _index_tasks(registry)

    def plan(self, instruction, initial_observation=None):
        try:
            task = self._tasks[normalize_instruction(instruction)]
        except KeyError:
            raise UnknownTask(f"no task for instruction {instruction!r}") from None
        return [MonolithicGoal(task.instruction, tuple(task.goal_atoms))]


# ---------------------------------------------------------------- executors

def _dist(a, b) -> float:
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


class ScriptedExecutor(Executor):
    """Stateless proportional controller over the observed scene.

    Each call recomputes the skill phase from the observation alone. With a
    closed, empty gripper still over its target it keeps pressing down; this
    is the failed-grasp behaviour that drives the arm into the table and is
    only cleared by a recovery action.
    """

    def __init__(self, speed: float = 0.0055, carry_height: float = 0.25,
                 align_radius: float = 0.05, descend_radius: float = 0.02,
                 close_tolerance: float = 0.012, release_clearance: float = 0.01,
                 align_clearance: float = 0.03, push_height: float = 0.02,
                 scan_yaw: float = 0.05):
        self.speed = speed
        self.carry_height = carry_height
        self.align_radius = align_radius
        self.descend_radius = descend_radius
        self.close_tolerance = close_tolerance
        self.release_clearance = release_clearance
        self.align_clearance = align_clearance
        self.push_height = push_height
        self.scan_yaw = scan_yaw

    # motion primitives
    def _move(self, g, target, grip: int) -> Action:
        dx, dy, dz = target[0] - g[0], target[1] - g[1], target[2] - g[2]
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        if d > self.speed:
            f = self.speed / d
            dx, dy, dz = dx * f, dy * f, dz * f
        return Action(dx, dy, dz, 0.0, 0.0, 0.0, grip)

    def _approach(self, g, target, grip: int) -> Action | None:
        """Travel high, align over the target, then descend; None on arrival."""
        exy = math.hypot(g[0] - target[0], g[1] - target[1])
        if exy > self.align_radius:
            return self._move(g, (target[0], target[1], max(self.carry_height, target[2])), grip)
        if exy > self.descend_radius:
            return self._move(g, (target[0], target[1], target[2] + self.align_clearance), grip)
        if _dist(g, target) <= self.close_tolerance:
            return None
        return self._move(g, target, grip)

    def _scan(self, gs) -> Action:
        return Action(0.0, 0.0, 0.0, 0.0, 0.0, self.scan_yaw, 1 if gs.closed else 0)

    def _retreat(self, gs) -> Action:
        p = gs.position
        grip = 1 if gs.holding is not None else 0
        return self._move(p, (p[0], p[1], max(p[2], self.carry_height)), grip)

    def _press(self) -> Action:
        return Action(0.0, 0.0, -self.speed, 0.0, 0.0, 0.0, 1)

    def act(self, subgoal, observation: Observation) -> Action:
        w = observation.third_person
        if isinstance(subgoal, MonolithicGoal):
            subgoal = next((a for a in subgoal.atoms if not goal_predicate(a)(w)), None)
            if subgoal is None:
                return self._retreat(w.gripper)
        v = subgoal.verb
        if v is SkillVerb.PickUp:
            return self._pick(w, subgoal.object)
        if goal_predicate(subgoal)(w):
            return self._retreat(w.gripper)
        if v in TOGGLE_VERBS:
            return self._toggle(w, subgoal.object)
        if v is SkillVerb.Push:
            return self._push(w, subgoal.object, subgoal.target)
        if subgoal.target not in w.objects:
            return self._scan(w.gripper)
        if w.gripper.holding != subgoal.object:
            return self._pick(w, subgoal.object)
        if v is SkillVerb.Place:
            tx, ty = self._free_spot(w, subgoal.object, subgoal.target)
            ref = w.objects[subgoal.target]
            top = ref.position[2] + w.geometry[subgoal.target].height / 2
        else:
            ref = w.objects[subgoal.target]
            r = w.geometry[subgoal.target].radius + w.geometry[subgoal.object].radius + 0.03
            ux, uy = subgoal.direction.vector
            tx, ty = ref.position[0] + ux * r, ref.position[1] + uy * r
            top = w.table_height
        release_z = top + w.geometry[subgoal.object].height / 2 + self.release_clearance
        return self._deliver(w.gripper, (tx, ty, release_z))

    def _pick(self, w, name: str) -> Action:
        gs = w.gripper
        g = gs.position
        if gs.holding == name:
            return self._move(g, (g[0], g[1], max(g[2], self.carry_height)), 1)
        if gs.holding is not None:
            return Action(grip=0)
        ob = w.objects.get(name)
        if ob is None:
            return self._scan(gs)
        o = ob.position
        exy = math.hypot(g[0] - o[0], g[1] - o[1])
        if gs.closed:
            return self._press() if exy <= self.descend_radius else Action(grip=0)
        return self._approach(g, o, 0) or Action(grip=1)

    def _deliver(self, gs, target) -> Action:
        return self._approach(gs.position, target, 1) or Action(grip=0)

    def _free_spot(self, w, name: str, support: str) -> tuple[float, float]:
        """First candidate point on ``support`` that clears its other occupants."""
        s = w.objects[support].position
        geo = w.geometry
        r_s, r_x = geo[support].radius, geo[name].radius
        cont = w.containers.get(support)
        occupants = [
            (o.position, geo[n].radius) for n, o in w.objects.items()
            if n != name and not o.held
            and (o.resting_on == support or (cont is not None and n in cont.contents))
        ]
        rho = 0.5 * r_s
        for ox, oy in ((-rho, 0.0), (rho, 0.0), (0.0, -rho), (0.0, rho), (0.0, 0.0)):
            px, py = s[0] + ox, s[1] + oy
            if all(math.hypot(px - p[0], py - p[1]) >= r_x + r + 0.005 for p, r in occupants):
                return px, py
        return s[0], s[1]

    def _toggle(self, w, name: str) -> Action:
        gs = w.gripper
        spec = w.geometry.get(name)
        if spec is None or spec.handle is None:
            return self._scan(gs)
        if gs.holding is not None:
            return Action(grip=0)
        g, h = gs.position, spec.handle
        if gs.closed:
            near = math.hypot(g[0] - h[0], g[1] - h[1]) <= self.descend_radius
            return self._press() if near else Action(grip=0)
        return self._approach(g, h, 0) or Action(grip=1)

    def _push(self, w, name: str, loc: str) -> Action:
        gs = w.gripper
        ob = w.objects.get(name)
        if ob is None:
            return self._scan(gs)
        if loc in w.locations:
            lx, ly = w.locations[loc][:2]
        elif loc in w.objects:
            lx, ly = w.objects[loc].position[:2]
        else:
            return self._scan(gs)
        if gs.holding is not None:
            return Action(grip=0)
        o = ob.position
        r = w.geometry[name].radius
        vx, vy = lx - o[0], ly - o[1]
        d = math.hypot(vx, vy)
        ux, uy = (vx / d, vy / d) if d > 1e-9 else (0.0, 1.0)
        g = gs.position
        pz = w.table_height + self.push_height
        if gs.closed:
            rx, ry = g[0] - o[0], g[1] - o[1]
            along = rx * ux + ry * uy
            lateral = abs(rx * uy - ry * ux)
            if along <= -(r - 0.01) and lateral <= 0.03 and abs(g[2] - pz) <= 0.02:
                # hold the push height independently of the planar motion
                a = self._move(g, (lx - ux * (r + 0.01), ly - uy * (r + 0.01), g[2]), 1)
                dz = max(-self.speed, min(self.speed, pz - g[2]))
                return a._replace(dz=dz)
            return Action(grip=0)
        pre = (o[0] - ux * (r + 0.03), o[1] - uy * (r + 0.03), pz)
        return self._approach(g, pre, 0) or Action(grip=1)


class IdleExecutor(Executor):
    """Emits the zero action; used with the abstract world."""

    def act(self, subgoal, observation):
        return Action()


# ---------------------------------------------------------------- verifiers

class OracleVerifier(Verifier):
    """Reads the ground truth behind the newest buffered observation."""

    def verify(self, buffer, subgoal):
        ok = buffer.newest.ground_truth(subgoal)
        return VerifierVerdict.Yes if ok else VerifierVerdict.No


class NoisyVerifier(Verifier):
    """Oracle verdicts flipped with fixed confusion probabilities.

    One uniform draw per call, whatever the verdict, so the stream position
    depends only on the number of calls.
    """

    def __init__(self, p_false_positive: float, p_false_negative: float,
                 inner: Verifier | None = None):
        if not (0 <= p_false_positive <= 1 and 0 <= p_false_negative <= 1):
            raise ValueError("confusion probabilities must be in [0, 1]")
        self.p_false_positive = p_false_positive
        self.p_false_negative = p_false_negative
        self.inner = inner or OracleVerifier()
        self._rng = None

    def reset(self, rng):
        self._rng = rng
        self.inner.reset(rng)

    def verify(self, buffer, subgoal):
        truth = self.inner.verify(buffer, subgoal)
        u = self._rng.random()
        if truth is VerifierVerdict.Yes:
            return VerifierVerdict.No if u < self.p_false_negative else truth
        return VerifierVerdict.Yes if u < self.p_false_positive else truth


class WindowDiagnoser(Diagnoser):
    """Stuck on a wrist collision, or on an arm that has not moved.

    "Not moved" means the gripper travelled less than ``progress_epsilon``
    between the oldest and newest buffered frames and did not pick anything
    up in between.
    """

    def __init__(self, progress_epsilon: float = 0.01):
        self.progress_epsilon = progress_epsilon

    def diagnose(self, buffer):
        frames = buffer.frames()
        if len(frames) < 2:
            raise InsufficientHistory(f"need 2 buffered frames, have {len(frames)}")
        old, new = frames[0], frames[-1]
        if new.wrist.collision:
            return DiagnosisVerdict.Stuck
        g_old, g_new = old.third_person.gripper, new.third_person.gripper
        moved = _dist(g_old.position, g_new.position)
        newly_holding = g_new.holding is not None and g_new.holding != g_old.holding
        if moved < self.progress_epsilon and not newly_holding:
            return DiagnosisVerdict.Stuck
        return DiagnosisVerdict.StillTrying


# ---------------------------------------------------------------- recovery

class LiftRecovery(Recovery):
    """Open the gripper and raise it at full step; the runtime repeats it."""

    def __init__(self, step: float | None = None):
        self.step = WorldConfig().max_step_translation if step is None else step

    def recover(self, diagnosis, observation):
        return Action(0.0, 0.0, self.step, 0.0, 0.0, 0.0, 0)


class ReorientRecovery(Recovery):
    """Rotate the wrist while backing off upward."""

    def __init__(self, step: float | None = None, yaw: float = 0.2):
        self.step = WorldConfig().max_step_translation if step is None else step
        self.yaw = yaw

    def recover(self, diagnosis, observation):
        return Action(0.0, 0.0, self.step, 0.0, 0.0, self.yaw, 0)


# ---------------------------------------------------------------- bundle

@dataclass
class AgentBundle:
    planner: Planner
    executor: Executor
    verifier: Verifier
    diagnoser: Diagnoser
    recovery: Recovery

    def roles(self):
        return (self.planner, self.executor, self.verifier, self.diagnoser, self.recovery)

    def reset(self, rng) -> None:
        for role in self.roles():
            role.reset(rng)

    def describe(self) -> dict:
        names = ("planner", "executor", "verifier", "diagnoser", "recovery")
        return {n: r.describe() for n, r in zip(names, self.roles())}

    @classmethod
    def reference(cls, registry, **executor_kw) -> "AgentBundle":
        """Oracle planner and verifier with the scripted executor."""
        return cls(OraclePlanner(registry), ScriptedExecutor(**executor_kw),
                   OracleVerifier(), WindowDiagnoser(), LiftRecovery())


# ---------------------------------------------------------------- registry

class UnknownAgent(KeyError):
    pass


AGENT_REGISTRY = {
    "planner": {
        "oracle": lambda reg, **kw: OraclePlanner(reg, **kw),
        "blind": lambda reg, **kw: BlindPlanner(OraclePlanner(reg, **kw)),
        "monolithic": lambda reg, **kw: MonolithicPlanner(reg, **kw),
    },
    "executor": {
        "scripted": lambda reg, **kw: ScriptedExecutor(**kw),
        "idle": lambda reg, **kw: IdleExecutor(**kw),
    },
    "verifier": {
        "oracle": lambda reg, **kw: OracleVerifier(**kw),
        "noisy": lambda reg, **kw: NoisyVerifier(**kw),
    },
    "diagnoser": {
        "window": lambda reg, **kw: WindowDiagnoser(**kw),
    },
    "recovery": {
        "lift": lambda reg, **kw: LiftRecovery(**kw),
        "reorient": lambda reg, **kw: ReorientRecovery(**kw),
    },
}

DEFAULT_AGENTS = {"planner": {"name": "oracle"}, "executor": {"name": "scripted"},
                  "verifier": {"name": "oracle"}, "diagnoser": {"name": "window"},
                  "recovery": {"name": "lift"}}


def build_agents(selection: Mapping | None, registry) -> AgentBundle:
    """Instantiate a bundle from ``{role: {"name": ..., **params}}``.

    Roles missing from ``selection`` take their defaults.
    """
    selection = dict(selection or {})
    extra = set(selection) - set(AGENT_REGISTRY)
    if extra:
        raise UnknownAgent(f"unknown agent roles: {sorted(extra)}")
    made = []
    for role, choices in AGENT_REGISTRY.items():
        spec = dict(selection.get(role) or DEFAULT_AGENTS[role])
        name = spec.pop("name", DEFAULT_AGENTS[role]["name"])
        if name not in choices:
            raise UnknownAgent(f"no {role} named {name!r}; choose from {sorted(choices)}")
        try:
            made.append(choices[name](registry, **spec))
        except TypeError as exc:
            raise UnknownAgent(f"bad parameters for {role} {name!r}: {exc}") from None
    return AgentBundle(*made)
