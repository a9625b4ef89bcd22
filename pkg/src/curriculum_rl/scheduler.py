"""Dynamic curriculum over difficulty lattices.

Each lattice is walked along the main trajectory

    seed -> s -> sv -> sc -> svc

where every node's predecessor is the latest earlier node differing on
exactly one axis (sv and sc both branch from s; svc follows sc). A node is
only attempted once its predecessor passed. When a node fails right after
its predecessor succeeded, the learner trains on an increment set isolating
what the transition added and reattempts, up to ``max_reattempts`` times.
The seed node has no predecessor, so it is simply re-queued.

Trace events are ``attempt``, ``pass``, ``fail``, ``increment``,
``reattempt`` and ``unresolved``.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .corpus import (CUBE_KEYS, Corpus, DifficultyCoordinate, DifficultyLattice, LatticeError,
                     validate_lattice)
from .grpo import GrpoConfig, Optimizer, SftConfig, train_sft, train_stage
from .policy import PolicyParams, sample, target_tokens, task_for_problem
from .rewards import RewardConfig, score_all
from .rng import derive_seed

log = logging.getLogger(__name__)

TRAJECTORY = ("seed", "s", "sv", "sc", "svc")
PREDECESSOR = {"s": "seed", "sv": "s", "sc": "s", "svc": "sc"}
STATUSES = ("pending", "passed", "failed", "unresolved")
EVENTS = ("attempt", "pass", "fail", "increment", "reattempt", "unresolved")


class SchedulerError(ValueError):
    pass


class IncrementDataGap(SchedulerError):
    """No corpus problem isolates the transition's new knowledge or modality."""


@dataclass(frozen=True)
class SchedulerConfig:
    pass_threshold: float = 0.5
    max_reattempts: int = 2
    increment_steps: int = 20
    increment_mode: str = "grpo"
    max_increment_problems: int = 8
    node_steps: int = 0
    lattice_batch: int = 1

    def __post_init__(self):
        if not 0 < self.pass_threshold <= 1:
            raise SchedulerError("pass_threshold must be in (0,1]")
        if self.max_reattempts < 1:
            raise SchedulerError("max_reattempts must be >= 1")
        if self.increment_steps < 0 or self.node_steps < 0:
            raise SchedulerError("step counts must be >= 0")
        if self.increment_mode not in ("grpo", "sft"):
            raise SchedulerError(f"unknown increment mode {self.increment_mode!r}")
        if self.lattice_batch < 1:
            raise SchedulerError("lattice_batch must be >= 1")


@dataclass
class CurriculumNode:
    lattice_id: str
    key: str
    coordinate: DifficultyCoordinate
    problem_id: str
    status: str = "pending"

    def set_status(self, status: str) -> None:
        allowed = {"pending": {"passed", "failed"}, "failed": {"passed", "unresolved"}}
        if status not in allowed.get(self.status, set()):
            raise SchedulerError(f"illegal status change {self.status} -> {status} at {self.key}")
        self.status = status


@dataclass(frozen=True)
class IncrementSet:
    source_key: str
    target_key: str
    axis: str
    kind: str
    member_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.member_ids:
            raise SchedulerError("increment set must be non-empty")
        if (self.axis == "s") != (self.kind == "knowledge"):
            raise SchedulerError(f"{self.kind} increment cannot sit on axis {self.axis}")


@dataclass(frozen=True)
class NodeEvaluation:
    passed: bool
    fraction_correct: float
    rewards: tuple[float, ...]


def _key_coordinate(key: str, s_rank: int) -> DifficultyCoordinate:
    return DifficultyCoordinate(s_rank if key != "seed" and "s" in key else 0, "v" in key, "c" in key)


def trajectory(lattice: DifficultyLattice, corpus: Corpus | None = None) -> list[CurriculumNode]:
    """Nodes of the main trajectory in order.

    With a corpus the lattice is fully validated and coordinates carry the
    real step rank; without one only the cube's keys are checked and the
    step rank is reported as 1.
    """
    if corpus is not None:
        validate_lattice(lattice, corpus).raise_for_failure()
    else:
        for key in CUBE_KEYS:
            if key not in lattice.nodes:
                raise LatticeError("cube", lattice.seed_id, "missing node", key)
    nodes = []
    for key in TRAJECTORY:
        pid = lattice.nodes[key]
        coord = corpus.problems[pid].difficulty if corpus is not None else _key_coordinate(key, 1)
        nodes.append(CurriculumNode(lattice.seed_id, key, coord, pid))
    return nodes


def transition_axis(source: DifficultyCoordinate, target: DifficultyCoordinate) -> str:
    diff = [a for a, changed in (("s", source.s != target.s), ("v", source.v != target.v),
                                 ("c", source.c != target.c)) if changed]
    if len(diff) != 1:
        raise SchedulerError(f"transition {source} -> {target} must change exactly one axis, "
                             f"got {diff or 'none'}")
    return diff[0]


def build_increment(source: CurriculumNode, target: CurriculumNode, corpus: Corpus) -> IncrementSet:
    """Corpus problems isolating what the source -> target transition adds.

    Step axis: seed-coordinate problems whose knowledge points add exactly one
    point beyond the source's, that point being new in the target. Visual or
    contextual axis: problems at the target's v/c flags and the source's step
    rank, using only the source's knowledge points.
    """
    axis = transition_axis(source.coordinate, target.coordinate)
    src = corpus.problems[source.problem_id]
    tgt = corpus.problems[target.problem_id]
    known = src.point_set
    new_points = tgt.point_set - known
    exclude = {source.problem_id, target.problem_id}
    members = []
    for pid in sorted(corpus.problems):
        if pid in exclude:
            continue
        p = corpus.problems[pid]
        if axis == "s":
            if not p.difficulty.is_seed:
                continue
            added = p.point_set - known
            if len(added) == 1 and added <= new_points:
                members.append(pid)
        else:
            d = p.difficulty
            if (d.v, d.c, d.s) != (target.coordinate.v, target.coordinate.c, source.coordinate.s):
                continue
            if p.point_set <= known:
                members.append(pid)
    if not members:
        raise IncrementDataGap(f"no problems isolate axis {axis} for {source.lattice_id} "
                               f"{source.key} -> {target.key}")
    kind = "knowledge" if axis == "s" else "modality"
    return IncrementSet(source.key, target.key, axis, kind, tuple(members))


# --------------------------------------------------------------------------
# learners


class CurriculumLearner(Protocol):
    def attempt(self, node: CurriculumNode, seed: int) -> Sequence[float]:
        """Per-rollout rewards for one attempt at ``node``."""

    def train_on(self, problem_ids: Sequence[str], steps: int, seed: int) -> None:
        """Train on the given problems (increment sets, or the node itself)."""


@dataclass
class ScriptedLearner:
    """Outcome oracle for tests and replay.

    ``outcomes`` maps ``(lattice_id, key)`` or bare ``key`` to the sequence of
    pass/fail results of successive attempts; the last entry repeats once the
    script runs out, and unscripted nodes pass.
    """

    outcomes: Mapping = field(default_factory=dict)
    G: int = 8
    correct_value: float = 0.9
    calls: Counter = field(default_factory=Counter)
    trained: list = field(default_factory=list)

    def outcome(self, lattice_id: str, key: str, n: int) -> bool:
        script = self.outcomes.get((lattice_id, key), self.outcomes.get(key))
        if not script:
            return True
        return bool(script[min(n, len(script) - 1)])

    def attempt(self, node: CurriculumNode, seed: int) -> list[float]:
        n = self.calls[(node.lattice_id, node.key)]
        self.calls[(node.lattice_id, node.key)] += 1
        ok = self.outcome(node.lattice_id, node.key, n)
        return [self.correct_value if ok else 0.0] * self.G

    def train_on(self, problem_ids: Sequence[str], steps: int, seed: int) -> None:
        self.trained.append((tuple(problem_ids), steps))


@dataclass
class PolicyLearner:
    """Toy policy trained with GRPO (or SFT) on corpus problems."""

    params: PolicyParams
    corpus: Corpus
    grpo: GrpoConfig
    reward: RewardConfig = RewardConfig()
    ref: PolicyParams | None = None
    mode: str = "grpo"
    sft: SftConfig = SftConfig()
    steps_trained: int = 0
    on_step: Callable[[dict], None] | None = None

    def __post_init__(self):
        if self.ref is None:
            self.ref = self.params
        self._opt = Optimizer(self.grpo.optimizer)

    def attempt(self, node: CurriculumNode, seed: int) -> np.ndarray:
        task = task_for_problem(self.corpus.problems[node.problem_id])
        comps = sample(self.params, task, self.grpo.group_size, self.grpo.temperature,
                       self.grpo.max_len, seed)
        return score_all(comps, task.correct_answer, self.reward)

    def train_on(self, problem_ids: Sequence[str], steps: int, seed: int) -> None:
        if steps <= 0 or not problem_ids:
            return
        tasks = [task_for_problem(self.corpus.problems[p]) for p in problem_ids]
        if self.mode == "sft":
            pairs = [(t, target_tokens(t)) for t in tasks] * steps
            rep = train_sft(self.params, pairs, replace(self.sft, epochs=1), seed, self.on_step)
        else:
            cfg = replace(self.grpo, aggregation="none", groups_per_step=1)
            rep = train_stage([(t.task_id, [t]) for t in tasks], self.params, cfg, self.reward,
                              steps, seed, self.ref, eval_samples=0, optimizer=self._opt,
                              on_step=self.on_step)
        self.params = rep.params
        self.steps_trained += len(rep.steps)


def evaluate_node(node: CurriculumNode, learner: CurriculumLearner, cfg: SchedulerConfig,
                  seed: int = 0, correct_value: float = 0.9) -> NodeEvaluation:
    """Pass iff the fraction of rollouts reaching ``correct_value`` meets the threshold."""
    rewards = np.asarray(learner.attempt(node, seed), dtype=float)
    frac = float(np.mean(rewards >= correct_value)) if rewards.size else 0.0
    return NodeEvaluation(frac >= cfg.pass_threshold, frac, tuple(float(r) for r in rewards))


# --------------------------------------------------------------------------
# state machine


@dataclass
class CurriculumTrace:
    events: list[dict] = field(default_factory=list)
    nodes: dict[str, list[CurriculumNode]] = field(default_factory=dict)

    def statuses(self) -> dict[str, dict[str, str]]:
        return {lat: {n.key: n.status for n in ns} for lat, ns in self.nodes.items()}

    def increment_counts(self) -> dict[str, int]:
        c = Counter(e["detail"]["axis"] for e in self.events if e["event"] == "increment")
        return {a: c.get(a, 0) for a in ("s", "v", "c")}

    def outcomes(self) -> dict[tuple[str, str], list[bool]]:
        out: dict[tuple[str, str], list[bool]] = {}
        for e in self.events:
            if e["event"] in ("pass", "fail"):
                out.setdefault((e["lattice"], e["coordinate"]), []).append(e["event"] == "pass")
        return out

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_trace(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def event_signature(events: Iterable[dict]) -> list[tuple]:
    """Events stripped of reward evidence, for replay comparison."""
    sig = []
    for e in events:
        extra = tuple(e["detail"].get("members", ())) if e["event"] == "increment" else ()
        sig.append((e["lattice"], e["coordinate"], e["event"], e["step"], extra))
    return sig


class _LatticeRun:
    """One lattice's walk; ``run_node`` processes one trajectory node at a time."""

    def __init__(self, nodes: list[CurriculumNode], corpus: Corpus, learner: CurriculumLearner,
                 cfg: SchedulerConfig, seed: int, correct_value: float, sink: list[dict]):
        self.nodes = nodes
        self.by_key = {n.key: n for n in nodes}
        self.corpus, self.learner, self.cfg = corpus, learner, cfg
        self.seed, self.correct_value, self.sink = seed, correct_value, sink
        self.lattice_id = nodes[0].lattice_id
        self.seq = 0

    def emit(self, node: CurriculumNode, event: str, **detail) -> None:
        self.sink.append({"lattice": self.lattice_id, "coordinate": node.key, "event": event,
                          "step": self.seq, "detail": detail})
        self.seq += 1

    def try_node(self, node: CurriculumNode, n: int) -> bool:
        ev = evaluate_node(node, self.learner, self.cfg,
                           derive_seed(self.seed, "attempt", self.lattice_id, node.key, n),
                           self.correct_value)
        self.emit(node, "pass" if ev.passed else "fail", attempt=n,
                  fraction_correct=ev.fraction_correct, rewards=list(ev.rewards))
        if self.cfg.node_steps:
            self.learner.train_on([node.problem_id], self.cfg.node_steps,
                                  derive_seed(self.seed, "node-train", self.lattice_id, node.key, n))
        return ev.passed

    def run_node(self, index: int) -> None:
        node = self.nodes[index]
        pred = self.by_key.get(PREDECESSOR.get(node.key, ""))
        if pred is not None and pred.status != "passed":
            return
        self.emit(node, "attempt", problem_id=node.problem_id)
        if self.try_node(node, 0):
            node.set_status("passed")
            return
        node.set_status("failed")
        for r in range(1, self.cfg.max_reattempts + 1):
            if pred is not None:
                self.inject(pred, node, r)
            self.emit(node, "reattempt", attempt=r)
            if self.try_node(node, r):
                node.set_status("passed")
                return
        node.set_status("unresolved")
        self.emit(node, "unresolved", attempts=1 + self.cfg.max_reattempts)

    def inject(self, source: CurriculumNode, target: CurriculumNode, r: int) -> None:
        axis = transition_axis(source.coordinate, target.coordinate)
        try:
            inc = build_increment(source, target, self.corpus)
        except IncrementDataGap as exc:
            log.warning("%s", exc)
            self.emit(target, "increment", axis=axis,
                      kind="knowledge" if axis == "s" else "modality",
                      source=source.key, members=[], data_gap=True)
            return
        members = list(inc.member_ids[: self.cfg.max_increment_problems])
        self.emit(target, "increment", axis=inc.axis, kind=inc.kind, source=source.key,
                  members=members, data_gap=False)
        self.learner.train_on(members, self.cfg.increment_steps,
                              derive_seed(self.seed, "increment", self.lattice_id, target.key, r))


def run_curriculum(lattices: Sequence[DifficultyLattice], learner: CurriculumLearner,
                   corpus: Corpus, cfg: SchedulerConfig = SchedulerConfig(), seed: int = 0,
                   correct_value: float = 0.9) -> CurriculumTrace:
    """Walk every lattice's trajectory; lattices in a batch advance round-robin, one node each."""
    trace = CurriculumTrace()
    for start in range(0, len(lattices), cfg.lattice_batch):
        batch = lattices[start:start + cfg.lattice_batch]
        runs = []
        for lat in batch:
            nodes = trajectory(lat, corpus)
            trace.nodes[lat.seed_id] = nodes
            sink: list[dict] = []
            runs.append((_LatticeRun(nodes, corpus, learner, cfg, seed, correct_value, sink), sink))
        for index in range(len(TRAJECTORY)):
            for run, _ in runs:
                run.run_node(index)
        for _, sink in runs:
            trace.events.extend(sink)
    return trace


def replay(trace_events: Sequence[dict], lattices: Sequence[DifficultyLattice], corpus: Corpus,
           cfg: SchedulerConfig, G: int = 8, correct_value: float = 0.9) -> CurriculumTrace:
    """Re-run the state machine with the recorded pass/fail outcomes."""
    outcomes: dict[tuple[str, str], list[bool]] = {}
    for e in trace_events:
        if e["event"] in ("pass", "fail"):
            outcomes.setdefault((e["lattice"], e["coordinate"]), []).append(e["event"] == "pass")
    learner = ScriptedLearner(outcomes, G=G, correct_value=correct_value)
    return run_curriculum(lattices, learner, corpus, replace(cfg, node_steps=0), 0, correct_value)

