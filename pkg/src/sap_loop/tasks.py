"""Task specifications, the built-in suites and task-file I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .grammar import (
    GoalPredicate, GrammarError, LintFinding, Severity, Subgoal, goal_predicate,
    parse_subgoal, validate_plan,
)
from .world import EntitySpec, Layout

__all__ = [
    "TaskSpec", "builtin_suite", "builtin_tasks", "SUITES", "SHORT_SUITES",
    "load_tasks", "save_tasks", "task_to_dict", "task_from_dict", "lint_task",
    "TaskFileError",
]

SUITES = ("long", "spatial", "object", "goal")
SHORT_SUITES = ("spatial", "object", "goal")


class TaskFileError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """One benchmark task.

    ``canonical_subgoals`` may name an entity kind where the instance is
    chosen by the planner; ``goal_atoms`` always name concrete entities and
    their conjunction is the task's success test.
    """

    id: str
    instruction: str
    suite: str
    layout: Layout
    canonical_subgoals: tuple[Subgoal, ...]
    goal_atoms: tuple[Subgoal, ...]
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def terminal_predicate(self) -> GoalPredicate:
        preds = [goal_predicate(a) for a in self.goal_atoms]
        return GoalPredicate(lambda w: all(p(w) for p in preds), self.instruction)


# ---------------------------------------------------------------- layout helpers

def _item(name, kind, x, y, r, h):
    return EntitySpec(name, kind, (x, y, h / 2), r, h, movable=True)


def _surface(name, kind, x, y, r, h, movable=False):
    return EntitySpec(name, kind, (x, y, h / 2), r, h, movable=movable)


def _box(name, kind, x, y, r, h, floor=0.01, open_=True, handle=None):
    return EntitySpec(name, kind, (x, y, h / 2), r, h, container=True, floor=floor,
                      articulated=handle is not None, handle=handle, initially_open=open_)


def _stove(x, y, name="stove"):
    return EntitySpec(name, "stove", (x, y, 0.02), 0.12, 0.04, device=True,
                      handle=(x, y - 0.15, 0.04))


def _basket(x, y):
    return _box("basket", "basket", x, y, 0.08, 0.08)


def _drawer(name, x, y, open_):
    return _box(name, "drawer", x, y, 0.09, 0.10, open_=open_, handle=(x, y - 0.12, 0.05))


def _soup(x, y):
    return _item("alphabet_soup", "can", x, y, 0.03, 0.08)


def _sauce(x, y):
    return _item("tomato_sauce", "can", x, y, 0.03, 0.08)


def _cheese(x, y, name="cream_cheese_box"):
    return _item(name, "box", x, y, 0.03, 0.04)


def _butter(x, y):
    return _item("butter", "box", x, y, 0.03, 0.03)


def _mug(name, x, y):
    return _item(name, "mug", x, y, 0.035, 0.08)


def _plate(name, x, y, movable=False):
    return _surface(name, "plate", x, y, 0.07, 0.015, movable=movable)


def _bowl(x, y, name="black_bowl"):
    return _item(name, "bowl", x, y, 0.045, 0.04)


def _moka(name, x, y):
    return _item(name, "moka_pot", x, y, 0.04, 0.10)


def _layout(*entities, locations=None):
    return Layout(tuple(entities), locations=dict(locations or {}))


def _parse_all(lines):
    return tuple(parse_subgoal(t) for t in lines)


def _task(tid, instruction, suite, layout, plan, atoms):
    return TaskSpec(tid, instruction, suite, layout, _parse_all(plan), _parse_all(atoms))


def _long_tasks():
    yield _task(
        "soup_sauce", "put both the alphabet soup and the tomato sauce in the basket", "long",
        _layout(_basket(0.65, 0.62), _soup(0.32, 0.50), _sauce(0.40, 0.72), _butter(0.78, 0.35)),
        ["pick up the alphabet soup", "place the alphabet soup in the basket",
         "pick up the tomato sauce", "place the tomato sauce in the basket"],
        ["place the alphabet soup in the basket", "place the tomato sauce in the basket"])
    yield _task(
        "cheese_butter", "put both the cream cheese box and the butter in the basket", "long",
        _layout(_basket(0.30, 0.65), _cheese(0.62, 0.48), _butter(0.70, 0.72), _soup(0.20, 0.40)),
        ["pick up the cream cheese box", "place the cream cheese box in the basket",
         "pick up the butter", "place the butter in the basket"],
        ["place the cream cheese box in the basket", "place the butter in the basket"])
    yield _task(
        "stove_moka", "turn on the stove and put the moka pot on it", "long",
        _layout(_stove(0.35, 0.62), _moka("moka_pot", 0.70, 0.55), _plate("plate", 0.72, 0.80)),
        ["turn on the stove", "pick up the moka pot", "place the moka pot on the stove"],
        ["turn on the stove", "place the moka pot on the stove"])
    yield _task(
        "bowl_drawer", "put the black bowl in the bottom drawer of the cabinet and close it", "long",
        _layout(_drawer("bottom_drawer_of_the_cabinet", 0.32, 0.66, open_=False),
                _bowl(0.68, 0.52), _plate("plate", 0.70, 0.78)),
        ["open the bottom drawer of the cabinet", "pick up the black bowl",
         "place the black bowl in the bottom drawer of the cabinet",
         "close the bottom drawer of the cabinet"],
        ["place the black bowl in the bottom drawer of the cabinet",
         "close the bottom drawer of the cabinet"])
    yield _task(
        "mug_mug", "put the white mug on the left plate and put the yellow and white mug "
                   "on the right plate", "long",
        _layout(_plate("left_plate", 0.25, 0.72), _plate("right_plate", 0.75, 0.72),
                _mug("white_mug", 0.62, 0.45), _mug("yellow_and_white_mug", 0.38, 0.45),
                _mug("red_mug", 0.50, 0.82)),
        ["pick up the white mug", "place the white mug on the left plate",
         "pick up the yellow and white mug", "place the yellow and white mug on the right plate"],
        ["place the white mug on the left plate",
         "place the yellow and white mug on the right plate"])
    yield _task(
        "book_caddy", "pick up the book and place it in the back compartment of the caddy", "long",
        _layout(_box("back_compartment_of_the_caddy", "caddy", 0.30, 0.72, 0.07, 0.09),
                _box("front_compartment_of_the_caddy", "caddy", 0.30, 0.55, 0.07, 0.09),
                _item("book", "book", 0.72, 0.50, 0.035, 0.03)),
        ["pick up the book", "place the book in the back compartment of the caddy"],
        ["place the book in the back compartment of the caddy"])
    yield _task(
        "mug_pudding", "put the white mug on the plate and put the chocolate pudding "
                       "to the right of the plate", "long",
        _layout(_plate("plate", 0.40, 0.68), _mug("white_mug", 0.70, 0.45),
                _item("chocolate_pudding", "box", 0.25, 0.42, 0.03, 0.04)),
        ["pick up the white mug", "place the white mug on the plate",
         "pick up the chocolate pudding", "place the chocolate pudding to the right of the plate"],
        ["place the white mug on the plate",
         "place the chocolate pudding to the right of the plate"])
    yield _task(
        "soup_cheese", "put both the alphabet soup and the cream cheese box in the basket", "long",
        _layout(_basket(0.50, 0.75), _soup(0.25, 0.45), _cheese(0.75, 0.48),
                _sauce(0.50, 0.45)),
        ["pick up the alphabet soup", "place the alphabet soup in the basket",
         "pick up the cream cheese box", "place the cream cheese box in the basket"],
        ["place the alphabet soup in the basket", "place the cream cheese box in the basket"])
    yield _task(
        "moka_moka", "put both moka pots on the stove", "long",
        _layout(_stove(0.62, 0.66), _moka("moka_pot_1", 0.25, 0.45),
                _moka("moka_pot_2", 0.30, 0.75)),
        ["pick up the moka pot", "place the moka pot on the stove",
         "pick up the moka pot", "place the moka pot on the stove"],
        ["place the moka pot 1 on the stove", "place the moka pot 2 on the stove"])
    yield _task(
        "mug_wave", "put the yellow and white mug in the microwave and close it", "long",
        _layout(_box("microwave", "microwave", 0.30, 0.68, 0.09, 0.12,
                     handle=(0.42, 0.56, 0.06)),
                _mug("yellow_and_white_mug", 0.70, 0.50), _plate("plate", 0.72, 0.78)),
        ["pick up the yellow and white mug", "place the yellow and white mug in the microwave",
         "close the microwave"],
        ["place the yellow and white mug in the microwave", "close the microwave"])


def _short_tasks():
    yield _task(
        "spatial_box", "pick up the black bowl on the cookie box and place it on the plate",
        "spatial",
        _layout(_surface("cookie_box", "box", 0.35, 0.55, 0.06, 0.05), _bowl(0.35, 0.55),
                _plate("plate", 0.65, 0.55), _bowl(0.50, 0.78, "white_bowl")),
        ["pick up the black bowl on the cookie box", "place the black bowl on the plate"],
        ["place the black bowl on the plate"])
    yield _task(
        "spatial_drawer",
        "pick up the black bowl in the top drawer of the cabinet and place it on the plate",
        "spatial",
        _layout(_drawer("top_drawer_of_the_cabinet", 0.35, 0.62, open_=True), _bowl(0.35, 0.62),
                _plate("plate", 0.68, 0.55)),
        ["pick up the black bowl in the top drawer of the cabinet",
         "place the black bowl on the plate"],
        ["place the black bowl on the plate"])
    yield _task(
        "spatial_ramekin", "pick up the black bowl on the ramekin and place it on the plate",
        "spatial",
        _layout(_surface("ramekin", "ramekin", 0.62, 0.62, 0.04, 0.03), _bowl(0.62, 0.62),
                _plate("plate", 0.35, 0.55)),
        ["pick up the black bowl on the ramekin", "place the black bowl on the plate"],
        ["place the black bowl on the plate"])
    yield _task(
        "object_soup", "pick up the alphabet soup and place it in the basket", "object",
        _layout(_basket(0.60, 0.65), _soup(0.35, 0.50), _butter(0.70, 0.40)),
        ["pick up the alphabet soup", "place the alphabet soup in the basket"],
        ["place the alphabet soup in the basket"])
    yield _task(
        "object_cheese", "pick up the cream cheese and place it in the basket", "object",
        _layout(_basket(0.40, 0.65), _cheese(0.65, 0.50, "cream_cheese"), _soup(0.30, 0.40)),
        ["pick up the cream cheese", "place the cream cheese in the basket"],
        ["place the cream cheese in the basket"])
    yield _task(
        "object_ketchup", "pick up the ketchup and place it in the basket", "object",
        _layout(_basket(0.55, 0.70), _item("ketchup", "bottle", 0.40, 0.48, 0.03, 0.10),
                _sauce(0.72, 0.50)),
        ["pick up the ketchup", "place the ketchup in the basket"],
        ["place the ketchup in the basket"])
    yield _task(
        "goal_stove", "turn on the stove", "goal",
        _layout(_stove(0.50, 0.62), _bowl(0.20, 0.45, "bowl"), _plate("plate", 0.80, 0.45)),
        ["turn on the stove"], ["turn on the stove"])
    yield _task(
        "goal_bowl_plate", "put the bowl on the plate", "goal",
        _layout(_stove(0.50, 0.70), _bowl(0.30, 0.45, "bowl"), _plate("plate", 0.70, 0.45)),
        ["pick up the bowl", "place the bowl on the plate"], ["place the bowl on the plate"])
    yield _task(
        "goal_push_plate", "push the plate to the front of the stove", "goal",
        _layout(_stove(0.60, 0.72), _plate("plate", 0.30, 0.48, movable=True),
                _bowl(0.85, 0.40, "bowl"),
                locations={"front_of_the_stove": (0.60, 0.48)}),
        ["push the plate to the front of the stove"],
        ["push the plate to the front of the stove"])


def builtin_tasks() -> list[TaskSpec]:
    return [*_long_tasks(), *_short_tasks()]


def builtin_suite(name: str = "all") -> list[TaskSpec]:
    """Tasks of one suite: a suite name, ``short`` (three short suites) or ``all``."""
    tasks = builtin_tasks()
    if name == "all":
        return tasks
    if name == "short":
        return [t for t in tasks if t.suite in SHORT_SUITES]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {SUITES + ('short', 'all')}")
    return [t for t in tasks if t.suite == name]


# ---------------------------------------------------------------- JSON I/O

_ENTITY_FIELDS = ("name", "kind", "position", "radius", "height", "movable", "container",
                  "articulated", "floor", "device", "handle", "initially_open", "initially_on")


def task_to_dict(task: TaskSpec) -> dict:
    lay = task.layout
    ents = []
    for e in lay.entities:
        d = {k: getattr(e, k) for k in _ENTITY_FIELDS}
        d["position"] = list(e.position)
        d["handle"] = None if e.handle is None else list(e.handle)
        ents.append(d)
    return {
        "id": task.id,
        "instruction": task.instruction,
        "suite": task.suite,
        "layout": {
            "entities": ents,
            "gripper_home": list(lay.gripper_home),
            "table_height": lay.table_height,
            "workspace_min": list(lay.workspace_min),
            "workspace_max": list(lay.workspace_max),
            "locations": {k: list(v) for k, v in lay.locations.items()},
        },
        "canonical_subgoals": [s.text for s in task.canonical_subgoals],
        "goal_atoms": [s.text for s in task.goal_atoms],
    }


def task_from_dict(d: dict) -> TaskSpec:
    try:
        lay = d["layout"]
        ents = []
        for e in lay["entities"]:
            kw = {k: e[k] for k in _ENTITY_FIELDS if k in e}
            kw["position"] = tuple(kw["position"])
            if kw.get("handle") is not None:
                kw["handle"] = tuple(kw["handle"])
            ents.append(EntitySpec(**kw))
        layout = Layout(
            tuple(ents),
            tuple(lay.get("gripper_home", (0.5, 0.2, 0.3))),
            lay.get("table_height", 0.0),
            tuple(lay.get("workspace_min", (0.0, 0.0, 0.0))),
            tuple(lay.get("workspace_max", (1.0, 1.0, 0.5))),
            {k: tuple(v) for k, v in lay.get("locations", {}).items()},
        )
        return TaskSpec(
            d["id"], d["instruction"], d.get("suite", "custom"), layout,
            tuple(parse_subgoal(t) for t in d["canonical_subgoals"]),
            tuple(parse_subgoal(t) for t in d["goal_atoms"]),
        )
    except (KeyError, TypeError) as exc:
        raise TaskFileError(f"malformed task record: {exc}") from exc


def load_tasks(path) -> list[TaskSpec]:
    """Read a task file: one task object or a list of them."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("tasks", [data])
    return [task_from_dict(d) for d in data]


def save_tasks(tasks, path) -> None:
    Path(path).write_text(json.dumps([task_to_dict(t) for t in tasks], indent=2) + "\n")


def lint_task(d: dict) -> list[LintFinding]:
    """Check a raw task record without raising."""
    findings: list[LintFinding] = []
    for key in ("id", "instruction", "layout", "canonical_subgoals", "goal_atoms"):
        if key not in d:
            findings.append(LintFinding("MissingField", Severity.Error, None, key))
    if findings:
        return findings
    findings.extend(validate_plan(list(d["canonical_subgoals"])))
    names = set()
    kinds = set()
    for e in d["layout"].get("entities", []):
        if e.get("name") in names:
            findings.append(LintFinding("DuplicateEntity", Severity.Error, None, e.get("name")))
        names.add(e.get("name"))
        kinds.add(e.get("kind"))
    refs = names | kinds | set(d["layout"].get("locations", {}))
    for k, text in enumerate(list(d["canonical_subgoals"]) + list(d["goal_atoms"])):
        try:
            s = parse_subgoal(text)
        except GrammarError:
            continue
        for slot in (s.object, s.target, s.source):
            if slot is not None and slot not in refs:
                findings.append(LintFinding("UnknownEntity", Severity.Error, k,
                                            f"'{slot}' is not in the layout"))
    for k, text in enumerate(d["goal_atoms"]):
        try:
            parse_subgoal(text)
        except GrammarError as exc:
            findings.append(LintFinding(type(exc).__name__, Severity.Error, k, str(exc)))
    return findings
