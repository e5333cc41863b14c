"""Seeded tabletop world: geometry-lite manipulation with failure injection.

States are immutable. ``step`` builds a new :class:`WorldState` and shares
every unchanged record with its predecessor, so keeping old states around
(frame buffers, traces) is cheap and safe.

Frame: metres, +x right, +y away from the third-person camera, +z up.
Every entity position is the centre of its bounding cylinder.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

from .grammar import SkillVerb, goal_predicate
from .rng import EpisodeStreams

__all__ = [
    "WorldConfig", "NoiseConfig", "EntitySpec", "Layout", "ObjectState",
    "ContainerState", "DeviceState", "GripperState", "WorldState", "Action",
    "WristView", "Observation", "TabletopWorld", "WorldError",
    "DuplicateEntity", "EntityOffTable", "world_to_json", "world_from_json",
    "canonical_json", "ZERO_ACTION",
]


class WorldError(ValueError):
    pass


class DuplicateEntity(WorldError):
    pass


class EntityOffTable(WorldError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    """Geometry constants; all lengths in metres, angles in radians."""

    grasp_radius: float = 0.03
    interact_radius: float = 0.05
    wrist_radius: float = 0.15
    max_step_translation: float = 0.05
    max_step_rotation: float = 0.2
    contact_epsilon: float = 0.005
    unstick_clearance: float = 0.1
    sensor_decimals: int = 3
    push_contact: float = 0.02


@dataclass(frozen=True)
class NoiseConfig:
    p_slip: float = 0.0
    actuation_sigma: float = 0.0
    sensor_sigma: float = 0.0
    stuck_on_table_contact: bool = True
    master_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_slip <= 1.0:
            raise ValueError(f"p_slip must be in [0, 1], got {self.p_slip}")
        if self.actuation_sigma < 0 or self.sensor_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")

    @classmethod
    def canonical(cls, master_seed: int = 0) -> "NoiseConfig":
        """The noise regime used for the directional ablation and sweep runs."""
        return cls(p_slip=0.25, actuation_sigma=0.0015, sensor_sigma=0.002,
                   stuck_on_table_contact=True, master_seed=master_seed)


@dataclass(frozen=True)
class EntitySpec:
    """Static description of one entity. ``position`` is the initial centre."""

    name: str
    kind: str
    position: tuple[float, float, float]
    radius: float
    height: float
    movable: bool = False
    container: bool = False
    articulated: bool = False
    floor: float = 0.0
    device: bool = False
    handle: tuple[float, float, float] | None = None
    initially_open: bool = True
    initially_on: bool = False


@dataclass(frozen=True)
class Layout:
    entities: tuple[EntitySpec, ...]
    gripper_home: tuple[float, float, float] = (0.5, 0.2, 0.3)
    table_height: float = 0.0
    workspace_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    workspace_max: tuple[float, float, float] = (1.0, 1.0, 0.5)
    locations: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def entity(self, name: str) -> EntitySpec:
        for e in self.entities:
            if e.name == name:
                return e
        raise KeyError(name)

    def kinds(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for e in self.entities:
            out.setdefault(e.kind, []).append(e.name)
        return out


class ObjectState(NamedTuple):
    position: tuple[float, float, float]
    held: bool
    resting_on: str | None


class ContainerState(NamedTuple):
    open: bool
    contents: frozenset


class DeviceState(NamedTuple):
    on: bool


class GripperState(NamedTuple):
    position: tuple[float, float, float]
    orientation: tuple[float, float, float]
    closed: bool
    holding: str | None


class Action(NamedTuple):
    """Cartesian displacement, rotation delta and binary gripper command."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    droll: float = 0.0
    dpitch: float = 0.0
    dyaw: float = 0.0
    grip: int = 0

    def is_valid(self, cfg: WorldConfig) -> bool:
        mt, mr = cfg.max_step_translation + 1e-12, cfg.max_step_rotation + 1e-12
        return (abs(self.dx) <= mt and abs(self.dy) <= mt and abs(self.dz) <= mt
                and abs(self.droll) <= mr and abs(self.dpitch) <= mr
                and abs(self.dyaw) <= mr and self.grip in (0, 1))


ZERO_ACTION = Action()


@dataclass(frozen=True, eq=True)
class WorldState:
    tick: int
    objects: Mapping[str, ObjectState]
    containers: Mapping[str, ContainerState]
    devices: Mapping[str, DeviceState]
    gripper: GripperState
    stuck: bool
    table_height: float
    geometry: Mapping[str, EntitySpec] = field(compare=False, repr=False, default_factory=dict)
    locations: Mapping[str, tuple[float, float]] = field(compare=False, repr=False,
                                                         default_factory=dict)


class WristView(NamedTuple):
    entities: tuple[str, ...]
    gripper: GripperState
    collision: bool


class Observation:
    """Dual-view snapshot. ``truth`` is privileged and only read by oracles.

    The wrist view is derived from ``truth`` on first access when the
    backend supplies it lazily.
    """

    __slots__ = ("tick", "third_person", "_wrist", "truth", "backend")

    def __init__(self, tick: int, third_person: WorldState, wrist: WristView | None = None,
                 truth=None, backend=None):
        self.tick = tick
        self.third_person = third_person
        self._wrist = wrist
        self.truth = truth
        self.backend = backend

    @property
    def wrist(self) -> WristView:
        if self._wrist is None:
            self._wrist = self.backend.wrist_view(self.truth)
        return self._wrist

    def ground_truth(self, goal) -> bool:
        return self.backend.check(self.truth, goal)

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (self.tick == other.tick and self.third_person == other.third_person
                and self.wrist == other.wrist)

    __hash__ = None

    def __repr__(self) -> str:
        return f"Observation(tick={self.tick}, wrist={self.wrist!r})"


def _clamp(v: float, lim: float) -> float:
    return lim if v > lim else (-lim if v < -lim else v)


class _NoisyObjects(Mapping):
    """Sensor view of the object table, perturbed on first access.

    The noise is drawn up front (three normals per object, in table order),
    so the stream position never depends on which objects a caller reads.
    """

    __slots__ = ("_truth", "_index", "_draws", "_sig", "_scale", "_cache")

    def __init__(self, truth, index, draws, sig, scale):
        self._truth = truth
        self._index = index
        self._draws = draws
        self._sig = sig
        self._scale = scale
        self._cache = {}

    def __getitem__(self, name):
        hit = self._cache.get(name)
        if hit is not None:
            return hit
        st = self._truth[name]
        k = 3 * self._index[name]
        d, sig, sc = self._draws, self._sig, self._scale
        x, y, z = st.position
        ob = ObjectState((round((x + sig * d[k]) * sc) / sc, round((y + sig * d[k + 1]) * sc) / sc,
                          round((z + sig * d[k + 2]) * sc) / sc), st.held, st.resting_on)
        self._cache[name] = ob
        return ob

    def get(self, name, default=None):
        return self[name] if name in self._truth else default

    def __contains__(self, name):
        return name in self._truth

    def __iter__(self):
        return iter(self._truth)

    def __len__(self):
        return len(self._truth)


class TabletopWorld:
    """Geometric world backend. One instance per episode runner."""

    def __init__(self, noise: NoiseConfig | None = None, config: WorldConfig | None = None):
        self.noise = noise or NoiseConfig()
        self.config = config or WorldConfig()
        self.layout: Layout | None = None
        self.streams: EpisodeStreams | None = None

    # ------------------------------------------------------------ reset
    def reset(self, task, seed: int) -> WorldState:
        layout: Layout = getattr(task, "layout", task)
        seen = set()
        lo, hi = layout.workspace_min, layout.workspace_max
        for e in layout.entities:
            if e.name in seen:
                raise DuplicateEntity(f"duplicate entity name {e.name!r}")
            seen.add(e.name)
            x, y, z = e.position
            if not (lo[0] <= x <= hi[0] and lo[1] <= y <= hi[1] and lo[2] <= z <= hi[2]):
                raise EntityOffTable(f"{e.name!r} at {e.position} is outside the workspace")
        self.layout = layout
        self.streams = EpisodeStreams(seed)
        self._geo = {e.name: e for e in layout.entities}
        th = layout.table_height

        objects: dict[str, ObjectState] = {}
        containers = {e.name: ContainerState(e.initially_open, frozenset())
                      for e in layout.entities if e.container}
        devices = {e.name: DeviceState(e.initially_on) for e in layout.entities if e.device}
        for e in layout.entities:
            if not e.movable:
                objects[e.name] = ObjectState(e.position, False, "table")
        for e in layout.entities:
            if e.movable:
                pos, support, inside = self._settle(objects, containers, e.name, e.position[:2])
                objects[e.name] = ObjectState(pos, False, support)
                if inside:
                    c = containers[inside]
                    containers[inside] = ContainerState(c.open, c.contents | {e.name})
        # the object table keeps this key order for the whole episode
        self._index = {n: k for k, n in enumerate(objects)}
        hx, hy, hz = layout.gripper_home
        return WorldState(0, objects, containers, devices,
                          GripperState((hx, hy, hz), (0.0, 0.0, 0.0), False, None),
                          False, th, self._geo, dict(layout.locations))

    # ------------------------------------------------------------ physics helpers
    def _top(self, objects, name: str) -> float:
        e = self._geo[name]
        return objects[name].position[2] + e.height / 2

    def _settle(self, objects, containers, name, xy, exclude=()):
        """Where an object released above ``xy`` comes to rest.

        Returns (position, resting_on, container_entered_or_None).
        """
        me = self._geo[name]
        x, y = xy[0], xy[1]
        best_c, best_c_top = None, -1.0
        best_s, best_s_top = None, -1.0
        for other, st in objects.items():
            if other == name or other in exclude or st.held:
                continue
            g = self._geo[other]
            ox, oy, oz = st.position
            if (x - ox) ** 2 + (y - oy) ** 2 > g.radius * g.radius:
                continue
            top = oz + g.height / 2
            if g.container and containers[other].open:
                if top > best_c_top:
                    best_c, best_c_top = other, top
            elif top > best_s_top:
                # objects sitting inside an open container do not shadow it
                inside_open = any(other in c.contents and c.open for c in containers.values())
                if not inside_open:
                    best_s, best_s_top = other, top
        if best_c is not None and best_c_top >= best_s_top:
            g = self._geo[best_c]
            base = objects[best_c].position[2] - g.height / 2
            return (x, y, base + g.floor + me.height / 2), best_c, best_c
        if best_s is not None:
            return (x, y, best_s_top + me.height / 2), best_s, None
        return (x, y, self.layout.table_height + me.height / 2), "table", None

    # ------------------------------------------------------------ step
    def step(self, state: WorldState, action: Action, goal=None,
             recovering: bool = False) -> WorldState:
        """Advance one tick. Never raises; impossible motions clamp or set flags.

        ``goal`` is the runtime's active subgoal; toggles need its intent.
        ``recovering`` is informational for this backend.
        """
        cfg = self.config
        noise = self.noise
        streams = self.streams
        mt = cfg.max_step_translation
        mr = cfg.max_step_rotation
        th = state.table_height
        g = state.gripper
        gx, gy, gz = g.position
        closed, holding = g.closed, g.holding
        stuck = state.stuck
        objects = state.objects
        containers = state.containers
        devices = state.devices

        dx, dy, dz = _clamp(action[0], mt), _clamp(action[1], mt), _clamp(action[2], mt)
        n0, n1, n2 = streams.actuation.normals(3)
        sig = noise.actuation_sigma
        ox, oy, oz = g.orientation

        if stuck:
            # jammed: only an open-gripper upward motion moves the arm
            if action[6] == 0 and dz > 0:
                gz += dz + (sig * n2 if sig else 0.0)
        else:
            if dx or dy or dz:
                if sig:
                    gx += dx + sig * n0
                    gy += dy + sig * n1
                    gz += dz + sig * n2
                else:
                    gx += dx
                    gy += dy
                    gz += dz
            ox += _clamp(action[3], mr)
            oy += _clamp(action[4], mr)
            oz += _clamp(action[5], mr)

        lo, hi = self.layout.workspace_min, self.layout.workspace_max
        gx = min(max(gx, lo[0]), hi[0])
        gy = min(max(gy, lo[1]), hi[1])
        floor_z = th
        if holding is not None:
            floor_z = th + self._geo[holding].height / 2
        if gz > hi[2]:
            gz = hi[2]

        # stuck onset: closed empty gripper driven into the table
        if not stuck and closed and holding is None and gz < th + cfg.contact_epsilon:
            if noise.stuck_on_table_contact:
                stuck = True
        if gz < floor_z:
            gz = floor_z
        if stuck and gz > th + cfg.unstick_clearance:
            stuck = False

        # contact pushing by a closed, empty gripper sweeping sideways
        if closed and holding is None and not state.stuck and (dx or dy):
            objects = self._shove(objects, containers, gx, gy, gz)

        grip = action[6]
        if grip == 1 and not closed:
            closed = True
            objects, containers, devices, holding = self._close(
                objects, containers, devices, (gx, gy, gz), goal)
        elif grip == 0 and closed:
            closed = False
            if holding is not None:
                objects, containers = self._release(objects, containers, holding, gx, gy)
                holding = None

        if holding is not None:
            ob = objects[holding]
            if ob.position != (gx, gy, gz):
                objects = dict(objects)
                objects[holding] = ObjectState((gx, gy, gz), True, None)

        return WorldState(state.tick + 1, objects, containers, devices,
                          GripperState((gx, gy, gz), (ox, oy, oz), closed, holding),
                          stuck, th, state.geometry, state.locations)

    def _close(self, objects, containers, devices, pos, goal):
        cfg = self.config
        gx, gy, gz = pos
        intents = goal.toggle_intents() if goal is not None else ()
        for verb, name in sorted(intents, key=lambda t: (t[0].name, t[1])):
            spec = self._geo.get(name)
            if spec is None or spec.handle is None:
                continue
            hx, hy, hz = spec.handle
            if (gx - hx) ** 2 + (gy - hy) ** 2 + (gz - hz) ** 2 > cfg.interact_radius ** 2:
                continue
            if self.streams.grasp.random() < self.noise.p_slip:
                return objects, containers, devices, None
            if verb in (SkillVerb.TurnOn, SkillVerb.TurnOff) and name in devices:
                devices = dict(devices)
                devices[name] = DeviceState(verb is SkillVerb.TurnOn)
            elif verb in (SkillVerb.Open, SkillVerb.Close) and name in containers:
                containers = dict(containers)
                c = containers[name]
                containers[name] = ContainerState(verb is SkillVerb.Open, c.contents)
            return objects, containers, devices, None

        best, best_d2 = None, cfg.grasp_radius ** 2
        for name, st in objects.items():
            if not self._geo[name].movable or st.held:
                continue
            if any(name in c.contents and not c.open for c in containers.values()):
                continue
            px, py, pz = st.position
            d2 = (gx - px) ** 2 + (gy - py) ** 2 + (gz - pz) ** 2
            if d2 <= best_d2:
                best, best_d2 = name, d2
        if best is None:
            return objects, containers, devices, None
        if self.streams.grasp.random() < self.noise.p_slip:
            return objects, containers, devices, None
        objects = dict(objects)
        objects[best] = ObjectState((gx, gy, gz), True, None)
        if any(best in c.contents for c in containers.values()):
            containers = {k: (ContainerState(c.open, c.contents - {best})
                              if best in c.contents else c) for k, c in containers.items()}
        objects, containers = self._resettle_dependents(objects, containers, best)
        return objects, containers, devices, best

    def _release(self, objects, containers, name, gx, gy):
        objects = dict(objects)
        pos, support, inside = self._settle(objects, containers, name, (gx, gy))
        objects[name] = ObjectState(pos, False, support)
        if inside:
            containers = dict(containers)
            c = containers[inside]
            containers[inside] = ContainerState(c.open, c.contents | {name})
        return objects, containers

    def _resettle_dependents(self, objects, containers, removed):
        for other, st in list(objects.items()):
            if st.resting_on == removed and not st.held:
                pos, support, inside = self._settle(objects, containers, other,
                                                    st.position[:2], exclude=(removed,))
                objects[other] = ObjectState(pos, False, support)
                if inside:
                    containers = dict(containers)
                    c = containers[inside]
                    containers[inside] = ContainerState(c.open, c.contents | {other})
        return objects, containers

    def _shove(self, objects, containers, gx, gy, gz):
        reach = self.config.push_contact
        out = None
        for name, st in objects.items():
            spec = self._geo[name]
            if not spec.movable or st.held or st.resting_on != "table":
                continue
            px, py, pz = st.position
            if gz > pz + spec.height / 2 + reach:
                continue
            ddx, ddy = px - gx, py - gy
            d = math.hypot(ddx, ddy)
            need = spec.radius + reach
            if d >= need:
                continue
            if d < 1e-9:
                ddx, ddy, d = 1.0, 0.0, 1.0
            nx, ny = gx + ddx / d * need, gy + ddy / d * need
            if out is None:
                out = dict(objects)
            out[name] = ObjectState((nx, ny, pz), False, "table")
        return objects if out is None else out

    # ------------------------------------------------------------ sensing
    def observe(self, state: WorldState) -> Observation:
        sig = self.noise.sensor_sigma
        if sig:
            draws = self.streams.sensor.normals(3 * len(state.objects))
            noisy = _NoisyObjects(state.objects, self._index, draws, sig,
                                  10 ** self.config.sensor_decimals)
            third = WorldState(state.tick, noisy, state.containers, state.devices,
                               state.gripper, state.stuck, state.table_height,
                               state.geometry, state.locations)
        else:
            third = state
        return Observation(state.tick, third, None, state, self)

    def wrist_view(self, state: WorldState) -> WristView:
        gx, gy, gz = state.gripper.position
        r2 = self.config.wrist_radius ** 2
        near = tuple(sorted(
            n for n, st in state.objects.items()
            if (st.position[0] - gx) ** 2 + (st.position[1] - gy) ** 2
            + (st.position[2] - gz) ** 2 <= r2))
        return WristView(near, state.gripper, state.stuck)

    # ------------------------------------------------------------ evaluation
    def check(self, state: WorldState, goal) -> bool:
        return goal_predicate(goal)(state)

    def evaluate(self, state: WorldState, predicate) -> bool:
        return bool(predicate(state))


# ---------------------------------------------------------------- serialization

def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return {True: "true", False: "false", None: "null"}[v]
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        s = f"{v:.9f}"
        return "0.000000000" if s == "-0.000000000" else s
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, Mapping):
        return "{" + ",".join(f"{_fmt(str(k))}:{_fmt(v[k])}" for k in sorted(v)) + "}"
    if isinstance(v, (list, tuple, frozenset, set)):
        items = sorted(v) if isinstance(v, (set, frozenset)) else v
        return "[" + ",".join(_fmt(x) for x in items) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, floats printed with 9 fixed decimals."""
    return _fmt(obj)


def world_to_dict(state: WorldState) -> dict:
    g = state.gripper
    return {
        "tick": state.tick,
        "table_height": float(state.table_height),
        "stuck": state.stuck,
        "gripper": {"position": [float(c) for c in g.position],
                    "orientation": [float(c) for c in g.orientation],
                    "closed": g.closed, "holding": g.holding},
        "objects": {n: {"position": [float(c) for c in o.position], "held": o.held,
                        "resting_on": o.resting_on} for n, o in state.objects.items()},
        "containers": {n: {"open": c.open, "contents": sorted(c.contents)}
                       for n, c in state.containers.items()},
        "devices": {n: {"on": d.on} for n, d in state.devices.items()},
    }


def world_to_json(state: WorldState) -> str:
    return canonical_json(world_to_dict(state))


def world_from_json(text: str, geometry=None, locations=None) -> WorldState:
    d = json.loads(text)
    g = d["gripper"]
    return WorldState(
        d["tick"],
        {n: ObjectState(tuple(o["position"]), o["held"], o["resting_on"])
         for n, o in d["objects"].items()},
        {n: ContainerState(c["open"], frozenset(c["contents"]))
         for n, c in d["containers"].items()},
        {n: DeviceState(v["on"]) for n, v in d["devices"].items()},
        GripperState(tuple(g["position"]), tuple(g["orientation"]), g["closed"], g["holding"]),
        d["stuck"], d["table_height"], geometry or {}, locations or {},
    )
