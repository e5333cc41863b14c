"""End-to-end acceptance criteria. Each test records one PASS/FAIL line.

The long-suite arm runs are shared through a lazy module cache, so the
whole file takes roughly a quarter of an hour on one core.
"""
import itertools
import random
import time

import pytest

from conftest import ACCEPTANCE_LINES
from interpreter import interpret
from stubs import run_scripted, trajectory

from sap_loop.chain import ChainModel, chain_success_probability, simulate_chain
from sap_loop.grammar import (
    Direction, Relation, Severity, SkillVerb, Subgoal, decompose_instruction, parse_subgoal,
    render, validate_plan,
)
from sap_loop.harness import (
    ARMS, aggregate, config_record, export_metrics, make_arm, run_trials, success_rate,
)
from sap_loop.runtime import LoopConfig, run_episode, serialize_trace
from sap_loop.tasks import builtin_suite, builtin_tasks
from sap_loop.world import NoiseConfig, TabletopWorld

from test_grammar import VOCAB

ALL = builtin_tasks()
LONG = builtin_suite("long")
SHORT = builtin_suite("short")
NOISE = NoiseConfig.canonical()
TRIALS, SEEDS = 500, (0, 1, 2)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


class _Runs:
    """Long/short suite results keyed by (suite, arm, F), computed on first use."""

    def __init__(self):
        self.cache = {}

    def get(self, suite="long", arm="Full", F=20):
        key = (suite, arm, F)
        if key not in self.cache:
            tasks = LONG if suite == "long" else SHORT
            self.cache[key] = run_trials(
                tasks, TRIALS, arm=arm, condition=f"{arm}/F={F}",
                config=LoopConfig(verify_interval=F), noise=NOISE, registry=ALL,
                seed_indices=SEEDS)
        return self.cache[key]

    def per_seed(self, **key):
        res = self.get(**key)
        return [success_rate(r for r in res if r.seed_index == j) for j in SEEDS]


@pytest.fixture(scope="module")
def runs():
    return _Runs()


def _fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


# ---------------------------------------------------------------- 1

def test_criterion_1_loop_conformance():
    t0 = time.perf_counter()
    F = 3
    configs = [(1, 0, True), (2, 1, True), (3, 3, True), (2, 1, False)]
    total = mismatches = 0
    for L in range(7):
        for seq in itertools.product("YNS", repeat=L):
            for (n, R, rec), extra in itertools.product(configs, (0, F - 1)):
                S = L * F + extra
                if S < 1:
                    continue
                out, _, _ = run_scripted(seq, n, F, S, R, rec)
                total += 1
                mismatches += trajectory(out) != interpret(seq, n, F, S, R, rec)
    dt = time.perf_counter() - t0
    report(1, mismatches == 0 and dt < 5,
           f"{total - mismatches}/{total} sequences match the interpreter in {dt:.2f}s")


# ---------------------------------------------------------------- 2

CHAIN_MODELS = [
    ChainModel((0.5,), max_recoveries=0, max_steps=100),
    ChainModel((0.8, 0.8), 0.2, 0.2, max_recoveries=3, max_steps=160, p_stuck=0.3),
    ChainModel((0.3, 0.3, 0.3), max_recoveries=3, max_steps=200),
    ChainModel((0.3, 0.5, 0.8), 0.2, 0.2, max_recoveries=0, max_steps=200, p_stuck=0.2),
]


def test_criterion_2_chain_oracle():
    t0 = time.perf_counter()
    gaps = []
    for k, m in enumerate(CHAIN_MODELS):
        gaps.append(abs(simulate_chain(m, 10_000, master_seed=100 + k)
                        - chain_success_probability(m)))
    dt = time.perf_counter() - t0
    report(2, max(gaps) <= 0.02 and dt < 60,
           f"max |MC - DP| = {max(gaps):.4f} over {len(gaps)} configs in {dt:.1f}s")


# ---------------------------------------------------------------- 3-5

def test_criterion_3_recovery_benefit(runs):
    t0 = time.perf_counter()
    full, norec = runs.per_seed(arm="Full"), runs.per_seed(arm="NoRecovery")
    dt = time.perf_counter() - t0
    ok = all(a > b for a, b in zip(full, norec)) and dt < 300
    report(3, ok, f"Full {_fmt(full)} vs NoRecovery {_fmt(norec)} in {dt:.0f}s")


def test_criterion_4_decomposition_benefit(runs):
    full, mono = runs.per_seed(arm="Full"), runs.per_seed(arm="Monolithic")
    report(4, all(a > b for a, b in zip(full, mono)),
           f"Full {_fmt(full)} vs Monolithic {_fmt(mono)}")


def test_criterion_5_weak_verifier_worst(runs):
    rates = {arm: runs.per_seed(arm=arm) for arm in ARMS}
    weak = rates["WeakVerifier"]
    ok = all(weak[j] < min(rates[a][j] for a in ARMS if a != "WeakVerifier")
             for j in range(len(SEEDS)))
    report(5, ok, "; ".join(f"{a} {_fmt(v)}" for a, v in rates.items()))


# ---------------------------------------------------------------- 6

def test_criterion_6_verification_interval(runs):
    long20, long50 = runs.per_seed(F=20), runs.per_seed(F=50)
    drop = all(a < b for a, b in zip(long50, long20))
    short = {F: success_rate(runs.get(suite="short", F=F)) for F in (10, 20, 50)}
    band = max(short.values()) - min(short.values())
    counts = all(r.verifier_calls == r.steps // F
                 for F in (10, 20) for r in runs.get(F=F) + runs.get(suite="short", F=F))
    c10 = sum(r.verifier_calls for r in runs.get(F=10)) / len(runs.get(F=10))
    c20 = sum(r.verifier_calls for r in runs.get(F=20)) / len(runs.get(F=20))
    report(6, drop and band <= 0.03 and counts,
           f"long F=20 {_fmt(long20)} > F=50 {_fmt(long50)}; short band {band:.3f}; "
           f"calls = floor(steps/F) {'exact' if counts else 'VIOLATED'}; "
           f"mean calls F=20/F=10 = {c20 / c10:.3f}")


# ---------------------------------------------------------------- 7

def _metrics_bytes(results, tmp_path, name):
    path = tmp_path / name
    export_metrics(aggregate(results), path, config_record(LoopConfig(), NOISE))
    return path.read_bytes()


def test_criterion_7_determinism(tmp_path):
    rng = random.Random(2024)
    identical = 0
    for k in range(20):
        task = rng.choice(ALL)
        arm = rng.choice(ARMS)
        cfg = LoopConfig(verify_interval=rng.choice((10, 20, 50)),
                         max_steps=rng.choice((200, 400, 600)),
                         max_recoveries=rng.choice((0, 1, 3)))
        seed = rng.getrandbits(63)
        noise = NoiseConfig.canonical()
        traces, metrics = [], []
        for rep in range(2):
            agents, loop = make_arm(arm, ALL, cfg)
            out = run_episode(task, agents, loop, seed, world=TabletopWorld(noise))
            traces.append(serialize_trace(out))
            res = run_trials([task], 2, arm=arm, config=cfg, noise=noise,
                             master_seed=seed % 2 ** 32, registry=ALL)
            metrics.append(_metrics_bytes(res, tmp_path, f"m{k}_{rep}.csv"))
        identical += traces[0] == traces[1] and metrics[0] == metrics[1]
    order = list(ALL)
    random.Random(5).shuffle(order)
    kw = dict(noise=NOISE, registry=ALL, seed_indices=(0, 1))
    by_task = [{r.task_id: r for r in aggregate(run_trials(ts, 4, **kw))} for ts in (ALL, order)]
    unchanged = by_task[0] == by_task[1]
    report(7, identical == 20 and unchanged,
           f"{identical}/20 triples byte-identical; task-order permutation "
           f"{'leaves' if unchanged else 'CHANGES'} per-task metrics")


# ---------------------------------------------------------------- 8

QUOTED = [
    ("pick up the chocolate pudding and place it in the basket", 2),
    ("pick up the black bowl in the top drawer of the wooden cabinet and place it on the plate", 2),
    ("pick up the book and place it in the back compartment of the caddy", 2),
    ("Turn on the stove and put the moka pot on it", 3),
    ("Pick up the bowl on the cookie box and place it on the plate", 2),
    ("Pick up the ketchup and place it in the basket", 2),
    ("Put the bowl on the plate", 2),
    ("turn on the stove", 1),
    ("open the top drawer of the cabinet", 1),
    ("place the chocolate pudding to the right of the plate", 2),
    ("push the plate to the front of the stove", 1),
]


def _all_instances():
    for o in VOCAB:
        yield Subgoal(SkillVerb.PickUp, o)
        for v in (SkillVerb.Open, SkillVerb.Close, SkillVerb.TurnOn, SkillVerb.TurnOff):
            yield Subgoal(v, o)
        for t in VOCAB:
            yield Subgoal(SkillVerb.Push, o, target=t)
            for p in ("in", "on", "from"):
                yield Subgoal(SkillVerb.PickUp, o, source=t, source_relation=p)
            for r in Relation:
                yield Subgoal(SkillVerb.Place, o, target=t, relation=r)
            for d in Direction:
                yield Subgoal(SkillVerb.PlaceDirectional, o, target=t, direction=d)


def test_criterion_8_grammar():
    total = ok = 0
    verbs = set()
    for s in _all_instances():
        total += 1
        text = render(s)
        ok += parse_subgoal(text) == s and render(parse_subgoal(text)) == text
        verbs.add(s.verb)
    quoted_ok = 0
    for instruction, n in QUOTED:
        plan = decompose_instruction(instruction)
        quoted_ok += len(plan) == n and not [
            f for f in validate_plan(plan) if f.severity is Severity.Error]
    report(8, ok == total and len(verbs) == 8 and quoted_ok == len(QUOTED),
           f"{ok}/{total} round-trips over {len(verbs)} templates x {len(VOCAB)} entities; "
           f"{quoted_ok}/{len(QUOTED)} quoted instructions decompose")


# ---------------------------------------------------------------- 9

def test_criterion_9_perfection_limit():
    res = run_trials(builtin_suite("all"), 10, noise=NoiseConfig(), registry=ALL,
                     seed_indices=SEEDS)
    sr = success_rate(res)
    recov = sum(r.recoveries for r in res)
    report(9, sr == 1.0 and recov == 0,
           f"SR {sr:.3f} over {len(res)} episodes with {recov} recoveries")
