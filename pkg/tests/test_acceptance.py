"""Acceptance gate: ten criteria, each with a tolerance and a runtime budget.

Every criterion prints one PASS/FAIL line (also repeated in the terminal
summary) and then asserts, so a failure is both visible and red.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from curriculum_rl.corpus import DifficultyCoordinate, DifficultyLattice, LatticeError, build_corpus
from curriculum_rl.evaluation import LEVEL_RANGES, report, weighted_mean
from curriculum_rl.fixtures import eval_items, lattice_problems, synthetic_hierarchy
from curriculum_rl.grpo import (GrpoConfig, SftConfig, advantages, build_batch, grpo_loss,
                                train_sft, train_stage)
from curriculum_rl.knowledge_store import KnowledgeAnnotation, SimilarityMatrix, cluster_tags
from curriculum_rl.pipeline import run_pipeline
from curriculum_rl.policy import (DEFAULT_VOCAB, Completion, ToyPolicy, generate_tasks, sample,
                                  target_tokens)
from curriculum_rl.rewards import GroupRewards, rankwise_aggregate, score
from curriculum_rl.scheduler import (SchedulerConfig, ScriptedLearner, run_curriculum,
                                     trajectory)

import conftest
from gradcheck import max_rel_error, numeric_grad

C = DifficultyCoordinate
STORE = synthetic_hierarchy()
ORDER = ("seed", "s", "sv", "sc", "svc")
PRED = {"s": "seed", "sv": "s", "sc": "s", "svc": "sc"}


def gate(capsys, number, title, limit_s, body):
    """Run ``body`` -> (ok, detail); print one line; assert tolerance and runtime."""
    t0 = time.perf_counter()
    ok, detail = body()
    elapsed = time.perf_counter() - t0
    in_time = elapsed < limit_s
    verdict = "PASS" if ok and in_time else "FAIL"
    line = (f"[{number:2d}] {verdict}  {title}: {detail}  "
            f"({elapsed:.2f}s, limit {limit_s:g}s)")
    conftest.ACCEPTANCE.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, detail
    assert in_time, f"runtime {elapsed:.2f}s exceeds {limit_s}s"


# --------------------------------------------------------------------------
# 1. reward exactness


def expected_reward(text, gold):
    """Independent parse of the output text: one separator, optional trailing EOS."""
    body = text[:-1] if text.endswith("$") else text
    if body.count("|") != 1:
        return 0.0
    return 0.9 if body.split("|", 1)[1] == gold else 0.1


def reward_exactness():
    rng = np.random.default_rng(1)
    pol = ToyPolicy()
    comps = []
    while len(comps) < 1000:
        task = generate_tasks(C(int(rng.integers(0, 3))), 1, seed=int(rng.integers(1 << 30)))[0]
        kind = len(comps) % 4
        if kind == 0:
            toks = target_tokens(task)  # correct
        elif kind == 1:
            wrong = "".join("abcd"[("abcd".index(ch) + 1) % 4] for ch in task.correct_answer)
            toks = target_tokens(replace(task, correct_answer=wrong))  # well-formed, wrong
        else:
            toks = list(sample(pol.init(int(rng.integers(1000)), scale=1.5), task, 1,
                               max_len=int(rng.integers(1, 12)),
                               seed=int(rng.integers(1 << 30)))[0].tokens)
        ans, ok = DEFAULT_VOCAB.decode(toks)
        c = Completion(tuple(toks), np.zeros(len(toks)), ans, ok)
        comps.append((c, task.correct_answer))
    got = [score(c, gold) for c, gold in comps]
    want = [expected_reward(c.text(), gold) for c, gold in comps]
    mismatches = sum(g != w for g, w in zip(got, want))
    values = {v: got.count(v) for v in (0.9, 0.1, 0.0)}
    ok = mismatches == 0 and set(got) == {0.9, 0.1, 0.0}
    return ok, f"1000 completions, mismatches={mismatches}, counts={values}"


# --------------------------------------------------------------------------
# 2. rank-wise aggregation


def brute_force(rows):
    srt = [sorted(float(x) for x in r) for r in rows]
    return [sum(r[g] for r in srt) / len(srt) for g in range(len(srt[0]))]


def rankwise_oracle():
    rng = np.random.default_rng(2)
    bad_exact = bad_mean = bad_mono = 0
    for _ in range(500):
        n, G = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        if rng.random() < 0.5:
            rows = rng.choice([0.0, 0.1, 0.9], size=(n, G))
        else:
            rows = rng.random((n, G))
        agg = rankwise_aggregate(GroupRewards("p", tuple(rows)))
        bad_exact += agg.tolist() != brute_force(rows)
        bad_mean += abs(agg.mean() - rows.mean()) > 1e-12
        bad_mono += bool(np.any(np.diff(agg) < 0))
    ok = bad_exact == bad_mean == bad_mono == 0
    return ok, (f"500 groups, inexact={bad_exact}, mean_violations={bad_mean}, "
                f"monotonicity_violations={bad_mono}")


# --------------------------------------------------------------------------
# 3. GRPO gradient


def grpo_gradient():
    pol = ToyPolicy()
    task = generate_tasks(C(1, True, False), 1, seed=3)[0]
    worst, checks = 0.0, 0
    for point in range(5):
        rng = np.random.default_rng(point)
        old, ref = pol.init(point, scale=0.8), pol.init(100 + point, scale=0.8)
        cur = old.with_theta(old.theta + rng.normal(0, 0.05, old.theta.size))
        batch = build_batch(task, sample(old, task, 8, max_len=8, seed=point),
                            rng.uniform(0, 1, 8), old, ref)
        for beta in (0.0, 0.04):
            cfg = GrpoConfig(beta=beta, epsilon=0.2)
            res = grpo_loss(cur, batch, cfg, ref)
            fd = numeric_grad(lambda th: grpo_loss(cur.with_theta(th), batch, cfg, ref).loss,
                              cur.theta, h=1e-5)
            worst = max(worst, max_rel_error(res.grad, fd))
            checks += 1
    return worst < 1e-4, (f"{checks} checks over all {pol.n_params} coordinates, "
                          f"max_rel_err={worst:.2e} (tol 1e-4)")


# --------------------------------------------------------------------------
# 4. advantage normalization


def advantage_normalization():
    rng = np.random.default_rng(4)
    worst_mean, worst_var, nonzero_equal = 0.0, 0.0, 0
    for i in range(1000):
        if i % 10 == 0:
            r = np.full(8, rng.choice([0.0, 0.1, 0.9]))
        elif i % 2:
            r = rng.choice([0.0, 0.1, 0.9], size=8)
        else:
            r = rng.random(8)
        a = advantages(r)
        if np.all(r == r[0]):
            nonzero_equal += int(np.any(a != 0.0))
            continue
        worst_mean = max(worst_mean, abs(a.mean()))
        if r.std() > 1e-8:
            worst_var = max(worst_var, abs(a.var() - 1.0))
    ok = worst_mean < 1e-9 and worst_var < 1e-6 and nonzero_equal == 0
    return ok, (f"1000 vectors, max|mean|={worst_mean:.1e}, max|var-1|={worst_var:.1e}, "
                f"all-equal nonzero={nonzero_equal}")


# --------------------------------------------------------------------------
# 5. toy learning signal


def toy_learning_signal():
    pol = ToyPolicy()
    gains = []
    for seed in (0, 1, 2):
        warm = generate_tasks(C(0), 32, seed=1000 + seed)
        sft = train_sft(pol.init(seed), [(t, target_tokens(t)) for t in warm],
                        SftConfig(learning_rate=0.01, epochs=3), seed=seed)
        tasks = generate_tasks(C(0), 3, seed=seed)
        cfg = GrpoConfig(learning_rate=0.02, optimizer="adam", group_size=8, temperature=1.0,
                         max_len=32)
        rep = train_stage([("principle", tasks)], sft.params, cfg, steps=200, seed=seed,
                          eval_samples=256)
        gains.append((rep.initial["mean_reward"], rep.final["mean_reward"]))
    ok = all(b - a >= 0.3 for a, b in gains)
    return ok, "seeds 0-2: " + ", ".join(f"{a:.3f}->{b:.3f}" for a, b in gains)


# --------------------------------------------------------------------------
# 6. scheduler conformance


def short(events):
    return [(e["coordinate"], e["event"]) for e in events]


def trigger_violations(events):
    """Count increments that fire without (pred passed and current failed), and misses."""
    passed, last, bad = set(), {}, 0
    for i, e in enumerate(events):
        key, kind = e["coordinate"], e["event"]
        if kind in ("pass", "fail"):
            last[key] = kind
            passed |= {key} if kind == "pass" else set()
        if kind == "increment":
            bad += not (key in PRED and PRED[key] in passed and last.get(key) == "fail")
        if kind == "fail" and key in PRED and i + 1 < len(events):
            nxt = events[i + 1]
            if nxt["coordinate"] == key and nxt["event"] not in ("increment", "unresolved"):
                bad += 1
    return bad


def scheduler_conformance():
    probs, lat = lattice_problems(STORE, 0, np.random.default_rng(0))
    corpus = build_corpus(probs, (), [lat], STORE)
    ok_examples = []
    t = run_curriculum([lat], ScriptedLearner(), corpus)
    ok_examples.append(short(t.events) == [(k, e) for k in ORDER for e in ("attempt", "pass")])
    t = run_curriculum([lat], ScriptedLearner({"s": [False, True]}), corpus)
    ok_examples.append(short(t.events) == [
        ("seed", "attempt"), ("seed", "pass"), ("s", "attempt"), ("s", "fail"),
        ("s", "increment"), ("s", "reattempt"), ("s", "pass"), ("sv", "attempt"),
        ("sv", "pass"), ("sc", "attempt"), ("sc", "pass"), ("svc", "attempt"), ("svc", "pass")]
        and t.events[4]["detail"]["kind"] == "knowledge")
    t = run_curriculum([lat], ScriptedLearner({"sv": [False]}), corpus,
                       SchedulerConfig(max_reattempts=2))
    cycle = [("sv", "increment"), ("sv", "reattempt"), ("sv", "fail")]
    ok_examples.append(short(t.events) == [
        ("seed", "attempt"), ("seed", "pass"), ("s", "attempt"), ("s", "pass"),
        ("sv", "attempt"), ("sv", "fail")] + cycle * 2 + [
        ("sv", "unresolved"), ("sc", "attempt"), ("sc", "pass"), ("svc", "attempt"),
        ("svc", "pass")])

    rng = np.random.default_rng(6)
    violations = increments = 0
    for _ in range(10_000):
        script = {k: list(rng.random(int(rng.integers(1, 5))) < 0.5)
                  for k in ORDER if rng.random() < 0.8}
        t = run_curriculum([lat], ScriptedLearner(script), corpus,
                           SchedulerConfig(max_reattempts=int(rng.integers(1, 4))))
        violations += trigger_violations(t.events)
        increments += sum(e["event"] == "increment" for e in t.events)
    ok = all(ok_examples) and violations == 0
    return ok, (f"examples={['ok' if x else 'MISMATCH' for x in ok_examples]}, "
                f"10000 fuzzed scripts, {increments} increments, violations={violations}")


# --------------------------------------------------------------------------
# 7. trajectory order


def drop_last_point(p):
    pts = p.annotation.step_points[:-1]
    return replace(p, annotation=KnowledgeAnnotation(p.id, pts), knowledge_count=len(pts))


def trajectory_order():
    wrong_order = wrong_reject = 0
    n = 20
    for i in range(n):
        probs, lat = lattice_problems(STORE, i, np.random.default_rng(i))
        corpus = build_corpus(probs, (), [lat], STORE)
        s = corpus.problems[lat.nodes["s"]].difficulty.s
        coords = [node.coordinate for node in trajectory(lat, corpus)]
        wrong_order += coords != [C(0), C(s), C(s, True), C(s, False, True), C(s, True, True)]

        broken = [drop_last_point(p) if p.id == lat.nodes["s"] else p for p in probs]
        try:
            build_corpus(broken, (), [lat], STORE)
            wrong_reject += 1
        except LatticeError as exc:
            wrong_reject += exc.invariant != "step_increment"
        nodes = {k: v for k, v in lat.nodes.items() if k != ORDER[1 + i % 4]}
        try:
            build_corpus(probs, (), [DifficultyLattice(lat.seed_id, nodes)], STORE)
            wrong_reject += 1
        except LatticeError as exc:
            wrong_reject += exc.invariant != "cube"
    ok = wrong_order == 0 and wrong_reject == 0
    return ok, (f"{n} valid lattices, order errors={wrong_order}; {2 * n} invalid, "
                f"misclassified={wrong_reject}")


# --------------------------------------------------------------------------
# 8. eval arithmetic


def eval_arithmetic():
    items = eval_items(STORE, 100, seed=8)
    rng = np.random.default_rng(8)
    judgments = [bool(x) for x in rng.random(100) < 0.55]
    rep = report(items, judgments)
    bucket_errors = 0
    for it in items:
        want = 1 if it.reasoning_steps <= 3 else 2 if it.reasoning_steps <= 6 else 3
        bucket_errors += it.level != want
        lo, hi = LEVEL_RANGES[it.level]
        bucket_errors += not lo <= it.reasoning_steps <= hi
    split = [rep.levels[lv].total for lv in (1, 2, 3)]
    direct = sum(judgments) / 100
    gaps = [abs(weighted_mean(c) - rep.overall) for c in (rep.levels, rep.domains,
                                                           rep.subdomains)]
    ok = bucket_errors == 0 and split == [62, 30, 8] and max(gaps) < 1e-12 \
        and rep.overall == direct
    return ok, (f"split={split}, bucket errors={bucket_errors}, overall={rep.overall:.2f}, "
                f"max|weighted-overall|={max(gaps):.1e}")


# --------------------------------------------------------------------------
# 9. clustering recovery


def clustering_recovery():
    rng = np.random.default_rng(9)
    recovered = 0
    for _ in range(100):
        k = int(rng.integers(2, 5))
        sizes = rng.integers(2, 30 // k + 1, size=k)
        n = int(sizes.sum())
        block = rng.permutation(np.repeat(np.arange(k), sizes))
        S = rng.uniform(0.0, 0.3, size=(n, n))
        same = block[:, None] == block[None, :]
        S[same] = rng.uniform(0.7, 0.95, size=int(same.sum()))
        S = np.triu(S, 1)
        S = S + S.T
        np.fill_diagonal(S, 1.0)
        labels = tuple(f"tag{i:02d}" for i in range(n))
        truth = sorted(sorted(labels[i] for i in range(n) if block[i] == b) for b in range(k))
        got = sorted(sorted(c) for c in cluster_tags(SimilarityMatrix(labels, S), k).cut(k))
        recovered += got == truth
    return recovered == 100, f"{recovered}/100 planted partitions recovered (n <= 30)"


# --------------------------------------------------------------------------
# 10. end-to-end reproducibility


def reproducibility(tmp_path):
    def body():
        files = ("metrics/sft.jsonl", "metrics/pre.jsonl", "metrics/dyn.jsonl",
                 "rewards/pre.jsonl", "trace/dyn.jsonl", "eval/preds.jsonl")
        for name in ("a", "b"):
            run_pipeline("toy", output_dir=tmp_path / name, environ={})
        differing = [f for f in files
                     if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
        sizes = sum((tmp_path / "a" / f).stat().st_size for f in files)
        return not differing, (f"{len(files)} logs ({sizes} bytes) compared, "
                               f"differing={differing or 'none'}")
    return body


CRITERIA = [
    (1, "reward exactness", 1, reward_exactness),
    (2, "rank-wise aggregation oracle", 5, rankwise_oracle),
    (3, "GRPO gradient vs finite differences", 30, grpo_gradient),
    (4, "advantage normalization", 1, advantage_normalization),
    (5, "toy learning signal", 120, toy_learning_signal),
    (6, "scheduler state machine", 10, scheduler_conformance),
    (7, "trajectory order", 1, trajectory_order),
    (8, "eval harness arithmetic", 1, eval_arithmetic),
    (9, "clustering recovery", 5, clustering_recovery),
]


@pytest.mark.parametrize("number,title,limit,body", CRITERIA,
                         ids=[f"c{n:02d}" for n, *_ in CRITERIA])
def test_criterion(capsys, number, title, limit, body):
    gate(capsys, number, title, limit, body)


def test_criterion_10_reproducibility(capsys, tmp_path):
    gate(capsys, 10, "end-to-end reproducibility", 300, reproducibility(tmp_path))
