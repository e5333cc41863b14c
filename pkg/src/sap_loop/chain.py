"""Exact success probability of the control loop over Bernoulli subgoals.

The model mirrors :class:`~sap_loop.abstract_world.AbstractWorld` driven by
the oracle planner, an idle executor, a verifier with fixed confusion rates,
the window diagnoser and lift recovery. Only window boundaries matter, so
the loop reduces to a Markov chain over

    (subgoal index i, recoveries r, subgoal done, arm stuck)

advanced once per verification window for ``floor(S_max / F)`` windows.
Mass that advances past an unfinished subgoal (a false positive) can never
satisfy the terminal predicate, so it is dropped.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

from .agents import (
    AgentBundle, IdleExecutor, LiftRecovery, NoisyVerifier, OraclePlanner, OracleVerifier,
    WindowDiagnoser,
)
from .grammar import SkillVerb, Subgoal
from .rng import episode_seed
from .runtime import LoopConfig, run_episode
from .tasks import TaskSpec
from .world import EntitySpec, Layout

__all__ = ["ChainModel", "chain_success_probability", "chain_task", "chain_agents",
           "simulate_chain"]


@dataclass(frozen=True)
class ChainModel:
    q: tuple[float, ...]
    p_false_positive: float = 0.0
    p_false_negative: float = 0.0
    max_recoveries: int = 3
    max_steps: int = 600
    verify_interval: int = 20
    p_stuck: float = 0.0
    recovery_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(float(x) for x in self.q))
        probs = (*self.q, self.p_false_positive, self.p_false_negative, self.p_stuck)
        if not self.q or not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError("need at least one subgoal and probabilities in [0, 1]")

    @property
    def windows(self) -> int:
        return self.max_steps // self.verify_interval

    def loop_config(self) -> LoopConfig:
        return LoopConfig(verify_interval=self.verify_interval, max_steps=self.max_steps,
                          max_recoveries=self.max_recoveries,
                          sample_interval=min(5, self.verify_interval),
                          recovery_enabled=self.recovery_enabled)


def chain_success_probability(m: ChainModel) -> float:
    n = len(m.q)
    fp, fn, ps = m.p_false_positive, m.p_false_negative, m.p_stuck
    dist = {(0, 0, False, False): 1.0}
    won = 0.0
    for _ in range(m.windows):
        nxt: dict = defaultdict(float)
        for (i, r, done, stuck), p in dist.items():
            # world resolves the window
            outcomes = []
            if done or stuck:
                outcomes.append((done, stuck, 1.0))
            else:
                q = m.q[i]
                outcomes.append((True, False, q))
                outcomes.append((False, True, (1 - q) * ps))
                outcomes.append((False, False, (1 - q) * (1 - ps)))
            for d, s, w in outcomes:
                w *= p
                if w == 0.0:
                    continue
                # verifier, then diagnoser on a negative verdict
                if d:
                    if i + 1 == n:
                        won += w * (1 - fn)
                    else:
                        nxt[(i + 1, 0, False, False)] += w * (1 - fn)
                    nxt[(i, r, d, s)] += w * fn
                else:
                    stay = w * (1 - fp)
                    if s and m.recovery_enabled:
                        if r + 1 <= m.max_recoveries:
                            nxt[(i, r + 1, False, False)] += stay
                    else:
                        nxt[(i, r, d, s)] += stay
        dist = nxt
    return won


def chain_task(n: int) -> TaskSpec:
    """A task of ``n`` abstract subgoals, each "turn on" of a marker device."""
    names = [f"step_{k + 1}" for k in range(n)]
    ents = tuple(EntitySpec(nm, "marker", (0.1 + 0.05 * k, 0.5, 0.0), 0.01, 0.0, device=True)
                 for k, nm in enumerate(names))
    plan = tuple(Subgoal(SkillVerb.TurnOn, nm) for nm in names)
    return TaskSpec(f"chain_{n}", " then ".join(f"turn on the {nm.replace('_', ' ')}"
                                                for nm in names),
                    "abstract", Layout(ents), plan, plan)


def chain_agents(task: TaskSpec, m: ChainModel) -> AgentBundle:
    if m.p_false_positive or m.p_false_negative:
        verifier = NoisyVerifier(m.p_false_positive, m.p_false_negative)
    else:
        verifier = OracleVerifier()
    return AgentBundle(OraclePlanner([task]), IdleExecutor(), verifier, WindowDiagnoser(),
                       LiftRecovery())


def simulate_chain(m: ChainModel, n_trials: int, master_seed: int = 0) -> float:
    """Monte-Carlo success rate of the real runtime on the abstract world."""
    from .abstract_world import AbstractWorld

    task = chain_task(len(m.q))
    agents = chain_agents(task, m)
    world = AbstractWorld(m.q, m.verify_interval, m.p_stuck)
    cfg = m.loop_config()
    wins = 0
    for k in range(n_trials):
        o = run_episode(task, agents, cfg, episode_seed(master_seed, task.id, k), world=world,
                        record_trace=False)
        wins += o.task_success
    return wins / n_trials
