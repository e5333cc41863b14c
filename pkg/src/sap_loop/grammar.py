"""Atomic skill grammar: parse, render, lint and compile subgoal instructions.

Every subgoal is an instance of one of eight templates::

    pick up [object] (from|in|on [location])
    place [object] in|on [location]
    place [object] to the left|right|front|back of [object]
    push [object] to [location]
    open|close [container]
    turn on|off [device]

Entity names are lower-case tokens joined by underscores, with the leading
article removed ("the yellow and white mug" -> ``yellow_and_white_mug``).
The slot prepositions ``in``, ``on`` and ``from`` may not appear inside a
name; everything else may, which is what makes some strings ambiguous.
"""
from __future__ import annotations

import enum
import functools
import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

__all__ = [
    "SkillVerb", "Relation", "Direction", "Subgoal", "GoalPredicate",
    "LintFinding", "Severity", "GrammarError", "UnknownVerb", "SlotMismatch",
    "AmbiguousParse", "parse_subgoal", "render", "compile_predicate",
    "validate_plan", "decompose_instruction", "goal_predicate", "entity_name", "entity_text",
]

ARTICLES = frozenset({"the", "a", "an"})
SLOT_PREPOSITIONS = frozenset({"in", "on", "from"})

PUSH_TOLERANCE = 0.03
DIRECTIONAL_REACH = 0.15
DIRECTIONAL_LATERAL = 0.05

_TOKEN = re.compile(r"^[a-z0-9][a-z0-9'\-]*$")


class SkillVerb(enum.Enum):
    PickUp = "pick up"
    Place = "place"
    Push = "push"
    PlaceDirectional = "place to"
    Open = "open"
    Close = "close"
    TurnOn = "turn on"
    TurnOff = "turn off"


TOGGLE_VERBS = frozenset({SkillVerb.Open, SkillVerb.Close, SkillVerb.TurnOn, SkillVerb.TurnOff})


class Relation(enum.Enum):
    In = "in"
    On = "on"


class Direction(enum.Enum):
    Left = "left"
    Right = "right"
    Front = "front"
    Back = "back"

    @property
    def vector(self) -> tuple[float, float]:
        return _DIRECTION_VECTORS[self]


# World frame as seen from the third-person camera: +x right, +y away.
_DIRECTION_VECTORS = {
    Direction.Left: (-1.0, 0.0),
    Direction.Right: (1.0, 0.0),
    Direction.Front: (0.0, -1.0),
    Direction.Back: (0.0, 1.0),
}


class GrammarError(ValueError):
    """Base class for subgoal parsing failures."""

    def __init__(self, message: str, text: str = ""):
        self.text = text
        super().__init__(f"{message}: {text!r}" if text else message)


class UnknownVerb(GrammarError):
    pass


class SlotMismatch(GrammarError):
    pass


class AmbiguousParse(GrammarError):
    pass


@dataclass(frozen=True)
class Subgoal:
    """One atomic skill with its slots bound to entity names."""

    verb: SkillVerb
    object: str
    target: str | None = None
    relation: Relation | None = None
    direction: Direction | None = None
    source: str | None = None
    source_relation: str | None = None
    source_text: str = field(default="", compare=False, repr=False)

    def __post_init__(self):
        _check_slots(self)

    @property
    def text(self) -> str:
        return render(self)

    @property
    def semantic_units(self) -> int:
        return 2 if (self.target or self.source) else 1

    def toggle_intents(self) -> frozenset[tuple[SkillVerb, str]]:
        if self.verb in TOGGLE_VERBS:
            return frozenset({(self.verb, self.object)})
        return frozenset()

    def __str__(self) -> str:
        return render(self)


def _check_slots(s: Subgoal) -> None:
    v = s.verb
    if not isinstance(v, SkillVerb):
        raise SlotMismatch(f"not a skill verb: {v!r}")
    if not s.object:
        raise SlotMismatch(f"{v.name} requires an object")
    has_target = s.target is not None
    if v is SkillVerb.PickUp:
        ok = not has_target and s.relation is None and s.direction is None
        ok = ok and ((s.source is None) == (s.source_relation is None))
        ok = ok and (s.source_relation is None or s.source_relation in SLOT_PREPOSITIONS)
    elif v is SkillVerb.Place:
        ok = has_target and isinstance(s.relation, Relation) and s.direction is None
    elif v is SkillVerb.PlaceDirectional:
        ok = has_target and s.relation is None and isinstance(s.direction, Direction)
    elif v is SkillVerb.Push:
        ok = has_target and s.relation is None and s.direction is None
    else:
        ok = not has_target and s.relation is None and s.direction is None
    if v is not SkillVerb.PickUp and (s.source is not None or s.source_relation is not None):
        ok = False
    if not ok:
        raise SlotMismatch(f"slots do not match the {v.name} template")


# ---------------------------------------------------------------- entities

def entity_name(words: Sequence[str] | str) -> str:
    """Turn article-prefixed words into a bare entity name; raise on junk."""
    if isinstance(words, str):
        words = words.split()
    toks = list(words)
    if toks and toks[0] in ARTICLES:
        toks = toks[1:]
    if not toks:
        raise SlotMismatch("empty entity slot")
    for t in toks:
        if t in SLOT_PREPOSITIONS or not _TOKEN.match(t):
            raise SlotMismatch(f"bad entity token {t!r}", " ".join(words))
    if toks[0] in ARTICLES:
        raise SlotMismatch("entity starts with an article", " ".join(words))
    return "_".join(toks)


def entity_text(name: str) -> str:
    return name.replace("_", " ")


def _try_entity(words: Sequence[str]) -> str | None:
    try:
        return entity_name(words)
    except SlotMismatch:
        return None


# ---------------------------------------------------------------- parsing

def _normalize(text: str) -> list[str]:
    t = text.strip().lower().rstrip(".")
    return t.split()


def _verb_prefix(tokens: list[str]) -> tuple[str, list[str]]:
    if not tokens:
        raise UnknownVerb("no verb", "")
    head = tokens[0]
    if head in ("pick", "turn"):
        if len(tokens) >= 2:
            pair = f"{head} {tokens[1]}"
            if pair in ("pick up", "turn on", "turn off"):
                return pair, tokens[2:]
        raise UnknownVerb("unknown verb", " ".join(tokens))
    if head in ("place", "push", "open", "close"):
        return head, tokens[1:]
    raise UnknownVerb("unknown verb", " ".join(tokens))


def _splits(rest: list[str], seps: Iterable[str]) -> list[tuple[str, str, str]]:
    """All (left, sep, right) readings of ``rest`` with a valid entity on each side."""
    seps = set(seps)
    out = []
    for k, tok in enumerate(rest):
        if tok in seps:
            a, b = _try_entity(rest[:k]), _try_entity(rest[k + 1:])
            if a and b:
                out.append((a, tok, b))
    return out


def _directional_splits(rest: list[str]) -> list[tuple[str, Direction, str]]:
    out = []
    for k in range(len(rest) - 3):
        if rest[k] == "to" and rest[k + 1] == "the" and rest[k + 3] == "of":
            try:
                d = Direction(rest[k + 2])
            except ValueError:
                continue
            a, b = _try_entity(rest[:k]), _try_entity(rest[k + 4:])
            if a and b:
                out.append((a, d, b))
    return out


def parse_subgoal(text: str) -> Subgoal:
    """Parse one instruction line into a :class:`Subgoal`.

    Raises UnknownVerb, SlotMismatch or AmbiguousParse.
    """
    tokens = _normalize(text)
    verb, rest = _verb_prefix(tokens)
    cands: list[Subgoal] = []
    if verb == "pick up":
        obj = _try_entity(rest)
        if obj:
            cands.append(Subgoal(SkillVerb.PickUp, obj))
        for a, sep, b in _splits(rest, SLOT_PREPOSITIONS):
            cands.append(Subgoal(SkillVerb.PickUp, a, source=b, source_relation=sep))
    elif verb == "place":
        for a, sep, b in _splits(rest, ("in", "on")):
            cands.append(Subgoal(SkillVerb.Place, a, target=b, relation=Relation(sep)))
        for a, d, b in _directional_splits(rest):
            cands.append(Subgoal(SkillVerb.PlaceDirectional, a, target=b, direction=d))
    elif verb == "push":
        for a, _, b in _splits(rest, ("to",)):
            cands.append(Subgoal(SkillVerb.Push, a, target=b))
    else:
        obj = _try_entity(rest)
        if obj:
            cands.append(Subgoal(SkillVerb(verb), obj))

    if not cands:
        raise SlotMismatch(f"slots do not fit the '{verb}' template", text)
    if len(cands) > 1:
        raise AmbiguousParse(f"{len(cands)} readings", text)
    return replace(cands[0], source_text=text)


def render(s: Subgoal) -> str:
    o = entity_text(s.object)
    v = s.verb
    if v is SkillVerb.PickUp:
        out = f"pick up the {o}"
        if s.source:
            out += f" {s.source_relation} the {entity_text(s.source)}"
        return out
    if v is SkillVerb.Place:
        return f"place the {o} {s.relation.value} the {entity_text(s.target)}"
    if v is SkillVerb.PlaceDirectional:
        return f"place the {o} to the {s.direction.value} of the {entity_text(s.target)}"
    if v is SkillVerb.Push:
        return f"push the {o} to the {entity_text(s.target)}"
    return f"{v.value} the {o}"


# ---------------------------------------------------------------- predicates

@dataclass(frozen=True)
class GoalPredicate:
    """Boolean test over a world state (or an observed snapshot of one)."""

    fn: Callable[[object], bool] = field(compare=False)
    description: str = ""

    def __call__(self, state) -> bool:
        return bool(self.fn(state))


def _holding(x):
    def pred(w):
        return x in w.objects and w.gripper.holding == x
    return pred


def _placed(x, rel, y):
    def pred(w):
        ob = w.objects.get(x)
        if ob is None or y not in w.objects or ob.held:
            return False
        if rel is Relation.In:
            c = w.containers.get(y)
            return c is not None and x in c.contents
        c = w.containers.get(y)
        return ob.resting_on == y and (c is None or x not in c.contents)
    return pred


def _directional(x, d, y):
    dx, dy = d.vector

    def pred(w):
        ob, ref, spec = w.objects.get(x), w.objects.get(y), w.geometry.get(y)
        if ob is None or ref is None or spec is None or ob.held:
            return False
        vx = ob.position[0] - ref.position[0]
        vy = ob.position[1] - ref.position[1]
        along = vx * dx + vy * dy
        lateral = abs(vx * dy - vy * dx)
        r = spec.radius
        return r <= along <= r + DIRECTIONAL_REACH and lateral <= DIRECTIONAL_LATERAL
    return pred


def _pushed(x, loc):
    def pred(w):
        ob = w.objects.get(x)
        if ob is None or ob.held:
            return False
        if loc in w.locations:
            lx, ly = w.locations[loc][:2]
        elif loc in w.objects and loc != x:
            lx, ly = w.objects[loc].position[:2]
        else:
            return False
        return math.hypot(ob.position[0] - lx, ob.position[1] - ly) <= PUSH_TOLERANCE
    return pred


def _device(d, on):
    def pred(w):
        dev = w.devices.get(d)
        return dev is not None and dev.on == on
    return pred


def _container(c, is_open):
    def pred(w):
        con = w.containers.get(c)
        return con is not None and con.open == is_open
    return pred


def compile_predicate(s: Subgoal) -> GoalPredicate:
    """Completion test for a subgoal.

    The PickUp source qualifier is carried by the subgoal but not checked.
    """
    v = s.verb
    if v is SkillVerb.PickUp:
        fn = _holding(s.object)
    elif v is SkillVerb.Place:
        fn = _placed(s.object, s.relation, s.target)
    elif v is SkillVerb.PlaceDirectional:
        fn = _directional(s.object, s.direction, s.target)
    elif v is SkillVerb.Push:
        fn = _pushed(s.object, s.target)
    elif v in (SkillVerb.TurnOn, SkillVerb.TurnOff):
        fn = _device(s.object, v is SkillVerb.TurnOn)
    else:
        fn = _container(s.object, v is SkillVerb.Open)
    return GoalPredicate(fn, render(s))


@functools.lru_cache(maxsize=4096)
def _cached_predicate(s: Subgoal) -> GoalPredicate:
    return compile_predicate(s)


def goal_predicate(goal) -> GoalPredicate:
    """Predicate for a subgoal, or the ``predicate`` of a composite goal."""
    if isinstance(goal, Subgoal):
        return _cached_predicate(goal)
    return goal.predicate


# ---------------------------------------------------------------- linting

class Severity(enum.Enum):
    Warning = "warning"
    Error = "error"


@dataclass(frozen=True)
class LintFinding:
    kind: str
    severity: Severity
    index: int | None = None
    message: str = ""

    def __str__(self) -> str:
        where = "" if self.index is None else f" (step {self.index + 1})"
        return f"{self.kind}:{self.severity.name}{where} {self.message}".rstrip()


MAX_PLAN_LENGTH = 5


def validate_plan(subgoals: Sequence[Subgoal | str]) -> list[LintFinding]:
    """Lint a plan. Never raises; unparseable lines become Error findings."""
    findings: list[LintFinding] = []
    parsed: list[Subgoal | None] = []
    for k, item in enumerate(subgoals):
        if isinstance(item, Subgoal):
            parsed.append(item)
            continue
        try:
            parsed.append(parse_subgoal(str(item)))
        except GrammarError as exc:
            parsed.append(None)
            findings.append(LintFinding(type(exc).__name__, Severity.Error, k, str(exc)))

    n = len(subgoals)
    if n == 0 or n > MAX_PLAN_LENGTH:
        findings.append(LintFinding(
            "OutOfRangeLength", Severity.Warning, None,
            f"{n} steps, expected 1..{MAX_PLAN_LENGTH}"))

    picked: set[str] = set()
    for k, s in enumerate(parsed):
        if s is None:
            continue
        if s.verb is SkillVerb.PickUp:
            picked.add(s.object)
        elif s.verb in (SkillVerb.Place, SkillVerb.PlaceDirectional) and s.object not in picked:
            findings.append(LintFinding(
                "DanglingReference", Severity.Warning, k,
                f"'{entity_text(s.object)}' is placed but never picked up"))
    return findings


# ---------------------------------------------------------------- instructions

_CLAUSE_VERBS = frozenset({"put", "pick", "place", "push", "open", "close", "turn"})


def _split_clauses(tokens: list[str]) -> list[list[str]]:
    """Split at "and"/"then" only when the next word starts a new clause."""
    clauses, cur = [], []
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        if tok in ("and", "then") and cur:
            nxt = k + 1
            if nxt < len(tokens) and tokens[nxt] == "then":
                nxt += 1
            if nxt < len(tokens) and tokens[nxt] in _CLAUSE_VERBS:
                clauses.append(cur)
                cur = []
                k = nxt
                continue
        cur.append(tok)
        k += 1
    if cur:
        clauses.append(cur)
    return clauses


def _singular(words: list[str]) -> list[str]:
    last = words[-1]
    if last.endswith("s") and not last.endswith("ss"):
        last = last[:-1]
    return words[:-1] + [last]


def decompose_instruction(text: str) -> list[Subgoal]:
    """Rule-based decomposition of a compound instruction into subgoals.

    Handles "put A in/on B", "put both A and B in C", "put both <plural> on C",
    "pick up A and place it ..." and "... and close it" style pronouns.
    Raises GrammarError for clauses outside these forms.
    """
    tokens = _normalize(text.replace(",", " "))
    plan: list[Subgoal] = []
    last_picked: str | None = None
    last_target: str | None = None

    def resolve(words: list[str], as_target: bool, clause_obj: str | None = None) -> list[str]:
        if words == ["it"]:
            if as_target:
                ref = last_target if last_target and last_target != clause_obj else None
                if ref is None:
                    mentioned = [s.target or s.object for s in reversed(plan)]
                    ref = next((m for m in mentioned if m and m != clause_obj), None)
            else:
                ref = last_picked
            if ref is None:
                raise SlotMismatch("unresolved pronoun", text)
            return entity_text(ref).split()
        return words

    def pick_place(obj_words, tail):
        nonlocal last_picked, last_target
        obj_words = resolve(obj_words, False)
        obj = entity_name(obj_words)
        if last_picked != obj or not plan or plan[-1].verb is not SkillVerb.PickUp:
            plan.append(parse_subgoal(f"pick up the {entity_text(obj)}"))
        last_picked = obj
        if tail[:1] == ["to"]:
            s = parse_subgoal(f"place the {entity_text(obj)} " + " ".join(tail))
        else:
            rel, tgt = tail[0], resolve(tail[1:], True, obj)
            s = parse_subgoal(f"place the {entity_text(obj)} {rel} " + " ".join(tgt))
        plan.append(s)
        last_target = s.target

    for clause in _split_clauses(tokens):
        head = clause[0]
        if head in ("put", "place"):
            body = clause[1:]
            if body[:1] == ["both"]:
                body = body[1:]
                split_at = next((k for k, t in enumerate(body) if t in ("in", "on")), None)
                if split_at is None:
                    raise SlotMismatch("no destination", text)
                objs, tail = body[:split_at], body[split_at:]
                if "and" in objs:
                    j = objs.index("and")
                    groups = [objs[:j], objs[j + 1:]]
                else:
                    groups = [_singular(objs)] * 2
                for g in groups:
                    pick_place(g, tail)
                continue
            dir_at = next((k for k in range(len(body) - 1)
                           if body[k] == "to" and body[k + 1] == "the"), None)
            rel_at = next((k for k, t in enumerate(body) if t in ("in", "on")), None)
            if dir_at is not None and (rel_at is None or dir_at < rel_at):
                pick_place(body[:dir_at], body[dir_at:])
            elif rel_at is not None:
                pick_place(body[:rel_at], body[rel_at:])
            else:
                raise SlotMismatch("no destination", text)
        elif head == "pick":
            s = parse_subgoal(" ".join(clause))
            plan.append(s)
            last_picked = s.object
        elif head in ("open", "close", "turn", "push"):
            words = clause
            if head == "turn":
                words = clause[:2] + resolve(clause[2:], True)
            elif head in ("open", "close"):
                words = clause[:1] + resolve(clause[1:], True)
            s = parse_subgoal(" ".join(words))
            plan.append(s)
            if head != "push":
                last_target = s.object
        else:
            raise UnknownVerb("unknown verb", " ".join(clause))
    return plan
