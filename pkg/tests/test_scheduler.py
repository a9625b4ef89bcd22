from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curriculum_rl.corpus import DifficultyCoordinate, DifficultyLattice, LatticeError, build_corpus
from curriculum_rl.fixtures import lattice_problems, synthetic_hierarchy
from curriculum_rl.grpo import GrpoConfig
from curriculum_rl.policy import ToyPolicy
from curriculum_rl.scheduler import (CurriculumNode, IncrementDataGap, IncrementSet,
                                     PolicyLearner, SchedulerConfig, SchedulerError,
                                     ScriptedLearner, build_increment, evaluate_node,
                                     event_signature, read_trace, replay, run_curriculum,
                                     trajectory, transition_axis)

C = DifficultyCoordinate
ORDER = ("seed", "s", "sv", "sc", "svc")
STORE = synthetic_hierarchy()


def one_lattice_corpus(store, index=0):
    probs, lat = lattice_problems(store, index, np.random.default_rng(index))
    return build_corpus(probs, (), [lat], store), lat


def short(events):
    return [(e["coordinate"], e["event"]) for e in events]


def reference_events(script, R):
    """Straight-line re-statement of the walk used as an oracle."""
    before = {"s": "seed", "sv": "s", "sc": "s", "svc": "sc"}
    calls, status, out = Counter(), {}, []

    def outcome(key):
        seq = script.get(key)
        n = calls[key]
        calls[key] += 1
        return True if not seq else bool(seq[min(n, len(seq) - 1)])

    for key in ORDER:
        pred = before.get(key)
        if pred is not None and status[pred] != "passed":
            status[key] = "pending"
            continue
        out.append((key, "attempt"))
        ok = outcome(key)
        out.append((key, "pass" if ok else "fail"))
        tries = 0
        while not ok and tries < R:
            tries += 1
            if pred is not None:
                out.append((key, "increment"))
            out.append((key, "reattempt"))
            ok = outcome(key)
            out.append((key, "pass" if ok else "fail"))
        status[key] = "passed" if ok else "unresolved"
        if not ok:
            out.append((key, "unresolved"))
    return out


def check_trigger_invariant(events):
    """Increments fire iff the predecessor passed and the current attempt failed."""
    before = {"s": "seed", "sv": "s", "sc": "s", "svc": "sc"}
    passed = set()
    last = {}
    for i, e in enumerate(events):
        key, kind = e["coordinate"], e["event"]
        if kind == "pass":
            passed.add(key)
        if kind in ("pass", "fail"):
            last[key] = kind
        if kind == "increment":
            assert key in before and before[key] in passed
            assert last[key] == "fail"
        if kind == "fail" and i + 1 < len(events) and events[i + 1]["coordinate"] == key:
            nxt = events[i + 1]["event"]
            if key in before:
                assert nxt in ("increment", "unresolved")
            else:
                assert nxt in ("reattempt", "unresolved")


class TestTrajectory:
    def test_order(self, corpus):
        for lat in corpus.lattices:
            nodes = trajectory(lat, corpus)
            assert [n.key for n in nodes] == list(ORDER)
            s = nodes[1].coordinate.s
            assert [n.coordinate for n in nodes] == [
                C(0), C(s), C(s, True), C(s, False, True), C(s, True, True)]
            assert all(n.status == "pending" for n in nodes)

    def test_without_corpus(self, corpus):
        nodes = trajectory(corpus.lattices[0])
        assert [n.coordinate for n in nodes] == [
            C(0), C(1), C(1, True), C(1, False, True), C(1, True, True)]

    def test_missing_node(self, corpus):
        lat = corpus.lattices[0]
        nodes = {k: v for k, v in lat.nodes.items() if k != "svc"}
        with pytest.raises(LatticeError, match="svc"):
            trajectory(DifficultyLattice(lat.seed_id, nodes))

    def test_two_lattices_independent(self, corpus):
        a, b = corpus.lattices[:2]
        assert [n.key for n in trajectory(a, corpus)] == [n.key for n in trajectory(b, corpus)]
        assert {n.problem_id for n in trajectory(a, corpus)}.isdisjoint(
            n.problem_id for n in trajectory(b, corpus))


class TestNodes:
    def test_status_transitions(self):
        n = CurriculumNode("L", "s", C(1), "p")
        n.set_status("failed")
        n.set_status("unresolved")
        with pytest.raises(SchedulerError):
            n.set_status("passed")
        m = CurriculumNode("L", "s", C(1), "p")
        with pytest.raises(SchedulerError):
            m.set_status("unresolved")

    def test_increment_set_rules(self):
        with pytest.raises(SchedulerError):
            IncrementSet("seed", "s", "s", "knowledge", ())
        with pytest.raises(SchedulerError):
            IncrementSet("s", "sv", "v", "knowledge", ("x",))

    @pytest.mark.parametrize("kw", [{"pass_threshold": 0}, {"pass_threshold": 1.5},
                                    {"max_reattempts": 0}, {"increment_steps": -1},
                                    {"increment_mode": "x"}, {"lattice_batch": 0}])
    def test_config_rejected(self, kw):
        with pytest.raises(SchedulerError):
            SchedulerConfig(**kw)


class _Fixed:
    def __init__(self, rewards):
        self.rewards = rewards

    def attempt(self, node, seed):
        return self.rewards

    def train_on(self, ids, steps, seed):
        pass


class TestEvaluateNode:
    NODE = CurriculumNode("L", "seed", C(0), "p")

    @pytest.mark.parametrize("correct,threshold,passed", [
        (6, 0.5, True), (0, 0.5, False), (7, 1.0, False), (8, 1.0, True), (4, 0.5, True)])
    def test_threshold(self, correct, threshold, passed):
        rewards = [0.9] * correct + [0.1] * (8 - correct)
        ev = evaluate_node(self.NODE, _Fixed(rewards), SchedulerConfig(pass_threshold=threshold))
        assert ev.passed is passed
        assert ev.fraction_correct == correct / 8
        assert ev.rewards == tuple(rewards)


class TestIncrement:
    def test_knowledge_increment(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        nodes = {n.key: n for n in trajectory(lat, corpus)}
        inc = build_increment(nodes["seed"], nodes["s"], corpus)
        assert (inc.axis, inc.kind) == ("s", "knowledge")
        seed_pts = corpus.problems[lat.nodes["seed"]].point_set
        new = corpus.problems[lat.nodes["s"]].point_set - seed_pts
        for pid in inc.member_ids:
            p = corpus.problems[pid]
            assert p.difficulty.is_seed
            added = p.point_set - seed_pts
            assert len(added) == 1 and added <= new
        assert inc.member_ids == (f"{lat.seed_id}-k1", f"{lat.seed_id}-k2")

    def test_modality_increment(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        nodes = {n.key: n for n in trajectory(lat, corpus)}
        inc = build_increment(nodes["s"], nodes["sv"], corpus)
        assert (inc.axis, inc.kind) == ("v", "modality")
        s_rank = nodes["s"].coordinate.s
        for pid in inc.member_ids:
            assert corpus.problems[pid].difficulty == C(s_rank, True, False)
        assert build_increment(nodes["sc"], nodes["svc"], corpus).member_ids == (
            f"{lat.seed_id}-mvc",)

    def test_two_axis_transition_rejected(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        nodes = {n.key: n for n in trajectory(lat, corpus)}
        with pytest.raises(SchedulerError, match="exactly one axis"):
            build_increment(nodes["sv"], nodes["sc"], corpus)
        with pytest.raises(SchedulerError):
            transition_axis(C(0), C(0))

    def test_data_gap(self, full_store):
        probs, lat = lattice_problems(full_store, 0, np.random.default_rng(0))
        keep = [p for p in probs if not p.id.endswith(("-k1", "-k2"))]
        corpus = build_corpus(keep, (), [lat], full_store)
        nodes = {n.key: n for n in trajectory(lat, corpus)}
        with pytest.raises(IncrementDataGap):
            build_increment(nodes["seed"], nodes["s"], corpus)
        trace = run_curriculum([lat], ScriptedLearner({"s": [False, True]}), corpus)
        inc = [e for e in trace.events if e["event"] == "increment"]
        assert inc[0]["detail"]["data_gap"] is True and inc[0]["detail"]["members"] == []


class TestRunCurriculum:
    def test_all_pass(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        trace = run_curriculum([lat], ScriptedLearner(), corpus)
        assert short(trace.events) == [(k, e) for k in ORDER for e in ("attempt", "pass")]
        assert trace.increment_counts() == {"s": 0, "v": 0, "c": 0}
        assert set(trace.statuses()[lat.seed_id].values()) == {"passed"}

    def test_single_knowledge_increment(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        learner = ScriptedLearner({"s": [False, True]})
        trace = run_curriculum([lat], learner, corpus)
        assert short(trace.events) == [
            ("seed", "attempt"), ("seed", "pass"),
            ("s", "attempt"), ("s", "fail"), ("s", "increment"), ("s", "reattempt"), ("s", "pass"),
            ("sv", "attempt"), ("sv", "pass"), ("sc", "attempt"), ("sc", "pass"),
            ("svc", "attempt"), ("svc", "pass")]
        inc = trace.events[4]["detail"]
        assert inc["axis"] == "s" and inc["kind"] == "knowledge"
        assert inc["members"] == [f"{lat.seed_id}-k1", f"{lat.seed_id}-k2"]
        assert learner.trained == [((f"{lat.seed_id}-k1", f"{lat.seed_id}-k2"), 20)]

    def test_unresolved_then_continue(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        trace = run_curriculum([lat], ScriptedLearner({"sv": [False]}), corpus,
                               SchedulerConfig(max_reattempts=2))
        cycle = [("sv", "increment"), ("sv", "reattempt"), ("sv", "fail")]
        assert short(trace.events) == [
            ("seed", "attempt"), ("seed", "pass"), ("s", "attempt"), ("s", "pass"),
            ("sv", "attempt"), ("sv", "fail")] + cycle * 2 + [
            ("sv", "unresolved"), ("sc", "attempt"), ("sc", "pass"),
            ("svc", "attempt"), ("svc", "pass")]
        assert trace.statuses()[lat.seed_id]["sv"] == "unresolved"
        assert trace.increment_counts() == {"s": 0, "v": 2, "c": 0}

    def test_seed_failure_requeues_without_increment(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        trace = run_curriculum([lat], ScriptedLearner({"seed": [False]}), corpus)
        assert short(trace.events) == [
            ("seed", "attempt"), ("seed", "fail"), ("seed", "reattempt"), ("seed", "fail"),
            ("seed", "reattempt"), ("seed", "fail"), ("seed", "unresolved")]
        assert trace.statuses()[lat.seed_id]["s"] == "pending"

    def test_steps_are_sequential(self, corpus):
        trace = run_curriculum(corpus.lattices, ScriptedLearner({"s": [False, True]}), corpus)
        for lat in corpus.lattices:
            steps = [e["step"] for e in trace.events if e["lattice"] == lat.seed_id]
            assert steps == list(range(len(steps)))

    def test_round_robin_batch(self, corpus):
        lats = corpus.lattices[:2]
        seq = run_curriculum(lats, ScriptedLearner(), corpus)
        rr = run_curriculum(lats, ScriptedLearner(), corpus, SchedulerConfig(lattice_batch=2))
        assert short(seq.events) == short(rr.events)

    @given(st.dictionaries(st.sampled_from(ORDER), st.lists(st.booleans(), min_size=1, max_size=4)),
           st.integers(1, 3))
    def test_matches_reference(self, script, R):
        corpus, lat = one_lattice_corpus(STORE)
        trace = run_curriculum([lat], ScriptedLearner(script), corpus,
                               SchedulerConfig(max_reattempts=R))
        assert short(trace.events) == reference_events(script, R)
        check_trigger_invariant(trace.events)
        increments = sum(e["event"] == "increment" for e in trace.events)
        if R >= 2:
            assert len(trace.events) <= 5 * (1 + R) * (1 + increments)
        assert all(e["detail"]["attempt"] <= R for e in trace.events
                   if e["event"] == "reattempt")

    def test_replay_reproduces_events(self, corpus, tmp_path):
        rng = np.random.default_rng(4)
        script = {(lat.seed_id, key): list(rng.random(3) < 0.6)
                  for lat in corpus.lattices for key in ORDER}
        cfg = SchedulerConfig(max_reattempts=2)
        trace = run_curriculum(corpus.lattices, ScriptedLearner(script), corpus, cfg)
        trace.write_jsonl(tmp_path / "t.jsonl")
        again = replay(read_trace(tmp_path / "t.jsonl"), corpus.lattices, corpus, cfg)
        assert event_signature(again.events) == event_signature(trace.events)

    def test_policy_learner_deterministic(self, full_store):
        corpus, lat = one_lattice_corpus(full_store)
        cfg = GrpoConfig(learning_rate=0.02, optimizer="adam", max_len=16)
        sched = SchedulerConfig(increment_steps=2)
        runs = []
        for _ in range(2):
            learner = PolicyLearner(ToyPolicy().init(0), corpus, cfg)
            trace = run_curriculum([lat], learner, corpus, sched, seed=5)
            runs.append((trace.events, learner.params.theta))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])
