"""Geometry-free world backend with Bernoulli subgoal outcomes.

Subgoal ``k`` is represented by a device entity whose ``on`` flag means
"done". At every ``window``-th executor tick the active subgoal completes
with probability ``q[k]``; if it does not, the arm jams with probability
``p_stuck``. A jammed arm makes no progress until a recovery tick clears it.
Recovery ticks are not executor ticks and never end a window.

The gripper x coordinate is an odometer that advances while the arm is
free, so the standard window diagnoser sees motion exactly when it should.
"""
from __future__ import annotations

from .grammar import goal_predicate
from .rng import EpisodeStreams
from .world import DeviceState, GripperState, Observation, WorldState, WristView

__all__ = ["AbstractWorld"]

ODOMETER_STEP = 0.01


class AbstractWorld:
    def __init__(self, q, window: int, p_stuck: float = 0.0):
        self.q = tuple(float(x) for x in q)
        if not all(0.0 <= x <= 1.0 for x in self.q) or not 0.0 <= p_stuck <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if window < 1:
            raise ValueError("window must be a positive tick count")
        self.window = window
        self.p_stuck = p_stuck
        self.streams: EpisodeStreams | None = None
        self._order: dict[str, int] = {}
        self._exec_ticks = 0

    def describe(self) -> dict:
        return {"backend": "abstract", "q": list(self.q), "window": self.window,
                "p_stuck": self.p_stuck}

    def reset(self, task, seed: int) -> WorldState:
        names = [e.name for e in task.layout.entities if e.device]
        if len(names) != len(self.q):
            raise ValueError(f"task has {len(names)} subgoal devices but q has {len(self.q)}")
        self._order = {n: k for k, n in enumerate(names)}
        self.streams = EpisodeStreams(seed)
        self._exec_ticks = 0
        devices = {n: DeviceState(False) for n in names}
        return WorldState(0, {}, {}, devices, GripperState((0.0, 0.0, 0.0), (0.0, 0.0, 0.0),
                                                           False, None), False, 0.0)

    def step(self, state: WorldState, action, goal=None, recovering: bool = False) -> WorldState:
        g = state.gripper
        if recovering:
            return WorldState(state.tick + 1, state.objects, state.containers, state.devices,
                              g, False, state.table_height)
        self._exec_ticks += 1
        stuck = state.stuck
        x = g.position[0] if stuck else g.position[0] + ODOMETER_STEP
        devices = state.devices
        if self._exec_ticks % self.window == 0:
            # two draws per window, always, so the stream position is fixed
            u_done = self.streams.grasp.random()
            u_stuck = self.streams.grasp.random()
            name = getattr(goal, "object", None)
            if name in devices and not devices[name].on and not stuck:
                if u_done < self.q[self._order[name]]:
                    devices = dict(devices)
                    devices[name] = DeviceState(True)
                elif u_stuck < self.p_stuck:
                    stuck = True
        return WorldState(state.tick + 1, state.objects, state.containers, devices,
                          GripperState((x, 0.0, 0.0), g.orientation, False, None), stuck,
                          state.table_height)

    def observe(self, state: WorldState) -> Observation:
        return Observation(state.tick, state, None, state, self)

    def wrist_view(self, state: WorldState) -> WristView:
        return WristView((), state.gripper, state.stuck)

    def check(self, state: WorldState, goal) -> bool:
        return goal_predicate(goal)(state)

    def evaluate(self, state: WorldState, predicate) -> bool:
        return bool(predicate(state))
