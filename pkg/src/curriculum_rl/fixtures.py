"""Deterministic synthetic hierarchies, corpora and benchmark items.

Everything here is generated from a seed, so tests, the CLI and the pipeline
can build the same toy world without shipping data files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import (SEED, Corpus, DifficultyCoordinate, DifficultyLattice, Problem,
                     VariantGroup, build_corpus)
from .evaluation import DOMAINS, EvalItem, LEVEL_RANGES
from .knowledge_store import (PRINCIPLE_KINDS, KnowledgeAnnotation, KnowledgeHierarchy,
                              hierarchy_from_obj)
from .policy import ANSWER_SYMBOLS, SyntheticTask, _features
from .rng import derive_seed, stream

FULL_LEAVES = 491
FULL_PRINCIPLES = 1819
LEVEL_SHARES = (62, 30, 8)


def leaf_keyword(point_id: str) -> str:
    return f"[{point_id}]"


def hierarchy_obj(leaves: int = FULL_LEAVES, principles: int = FULL_PRINCIPLES,
                  branching: tuple[int, int] = (2, 2)) -> list[dict]:
    """Five-level tree over the 4 domains / 13 subdomains.

    Each subdomain gets ``branching[0]`` level-3 topics with ``branching[1]``
    level-4 units each; leaves are dealt round-robin over the units and
    principles are spread as evenly as possible (1..7 per leaf).
    """
    subs = [(d, s) for d, ss in DOMAINS.items() for s in ss]
    units = len(subs) * branching[0] * branching[1]
    if leaves < units:
        raise ValueError(f"need at least {units} leaves")
    if not leaves <= principles <= 7 * leaves:
        raise ValueError("principle total must allow 1..7 per leaf")
    base, extra = divmod(principles, leaves)
    unit_leaves: list[list[int]] = [[] for _ in range(units)]
    for i in range(leaves):
        unit_leaves[i % units].append(i)

    def leaf(i: int, sub: str) -> dict:
        pid = f"k{i + 1:03d}"
        m = base + (1 if i < extra else 0)
        return {"id": pid, "name": f"{leaf_keyword(pid)} {sub} point", "level": 5,
                "principles": [{"id": f"{pid}.p{j + 1}", "kind": PRINCIPLE_KINDS[j % 3],
                                "statement": f"principle {j + 1} of {pid}"} for j in range(m)]}

    roots: dict[str, dict] = {}
    u = 0
    for si, (dom, sub) in enumerate(subs):
        root = roots.setdefault(dom, {"id": f"d{len(roots) + 1}", "name": dom, "level": 1,
                                      "children": []})
        sid = f"{root['id']}.s{si + 1}"
        snode = {"id": sid, "name": sub, "level": 2, "children": []}
        for t in range(branching[0]):
            tnode = {"id": f"{sid}.t{t + 1}", "name": f"{sub} topic {t + 1}", "level": 3,
                     "children": []}
            for w in range(branching[1]):
                wnode = {"id": f"{tnode['id']}.u{w + 1}", "name": f"{sub} unit {t + 1}.{w + 1}",
                         "level": 4, "children": [leaf(i, sub) for i in unit_leaves[u]]}
                u += 1
                tnode["children"].append(wnode)
            snode["children"].append(tnode)
        root["children"].append(snode)
    return list(roots.values())


def synthetic_hierarchy(leaves: int = FULL_LEAVES, principles: int = FULL_PRINCIPLES
                        ) -> KnowledgeHierarchy:
    return hierarchy_from_obj(hierarchy_obj(leaves, principles), expected_principles=None)


def keyword_table(store: KnowledgeHierarchy) -> dict[str, str]:
    return {leaf_keyword(k): k for k in store.leaf_ids}


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusSizes:
    standard: int = 40
    image_groups: int = 12
    group_size: int = 3
    lattices: int = 6
    question_groups: int = 2


def _problem(store: KnowledgeHierarchy, pid: str, seed_id: str, points: list[str],
             rng: np.random.Generator, coord: DifficultyCoordinate = SEED,
             question: str | None = None, image_ref: str | None = None,
             extra_principles: tuple[str, ...] = ()) -> Problem:
    principle_ids = []
    for k in dict.fromkeys(points):
        principle_ids.extend(store.points[k].principle_ids)
    for q in extra_principles:
        if q not in principle_ids:
            principle_ids.append(q)
    return Problem(
        id=pid, seed_id=seed_id,
        question=question if question is not None else f"question {pid}",
        answer=str(int(rng.integers(1, 1000))),
        annotation=KnowledgeAnnotation(pid, tuple(points), tuple(principle_ids)),
        difficulty=coord, knowledge_count=len(points),
        image_ref=image_ref if image_ref is not None else f"img/{pid}.png",
        ggb_ref=f"ggb/{pid}.ggb",
        solution=tuple(f"apply {leaf_keyword(k)}" for k in points),
    )


def lattice_problems(store: KnowledgeHierarchy, index: int, rng: np.random.Generator
                     ) -> tuple[list[Problem], DifficultyLattice]:
    """One valid lattice (s* = 2) plus the problems its increments draw on.

    Seed uses 4 points; the s-chain adds one point per rank (4, 5, 6); the
    hardest node therefore carries 6. Two standard problems each add one of
    the new points to the seed's knowledge, and one extra problem per modality
    transition applies only the new axis at the s node's knowledge.
    """
    leaves = store.leaf_ids
    pts = [leaves[i] for i in rng.choice(len(leaves), size=6, replace=False)]
    base, n1, n2 = pts[:4], pts[4], pts[5]
    top = base + [n1, n2]
    sid = f"L{index:04d}"
    C = DifficultyCoordinate
    nodes = {
        "seed": (sid, base, SEED),
        "s": (f"{sid}-s", top, C(2)),
        "v": (f"{sid}-v", base, C(0, True)),
        "c": (f"{sid}-c", base, C(0, False, True)),
        "sv": (f"{sid}-sv", top, C(2, True)),
        "sc": (f"{sid}-sc", top, C(2, False, True)),
        "vc": (f"{sid}-vc", base, C(0, True, True)),
        "svc": (f"{sid}-svc", top, C(2, True, True)),
    }
    out = [_problem(store, pid, sid, p, rng, coord) for pid, p, coord in nodes.values()]
    out.append(_problem(store, f"{sid}-s1", sid, base + [n1], rng, C(1)))
    out.append(_problem(store, f"{sid}-k1", f"{sid}-k1", [base[0], n1], rng))
    out.append(_problem(store, f"{sid}-k2", f"{sid}-k2", [base[1], n2], rng))
    for tag, coord in (("mv", C(2, True)), ("mc", C(2, False, True)), ("mvc", C(2, True, True))):
        out.append(_problem(store, f"{sid}-{tag}", sid, top, rng, coord))
    lattice = DifficultyLattice(sid, {k: v[0] for k, v in nodes.items()})
    return out, lattice


def synthetic_corpus(store: KnowledgeHierarchy, sizes: CorpusSizes = CorpusSizes(),
                     seed: int = 0) -> Corpus:
    rng = stream(seed, "corpus")
    leaves = store.leaf_ids
    problems: list[Problem] = []
    groups: list[VariantGroup] = []
    lattices: list[DifficultyLattice] = []

    for i in range(sizes.standard):
        n = int(rng.integers(1, 4))
        pts = [leaves[j] for j in rng.choice(len(leaves), size=n, replace=False)]
        problems.append(_problem(store, f"S{i:05d}", f"S{i:05d}", pts, rng))

    for i in range(sizes.image_groups):
        owner = leaves[int(rng.integers(len(leaves)))]
        principle = store.points[owner].principle_ids[
            int(rng.integers(len(store.points[owner].principle_ids)))]
        gid = f"G{i:05d}"
        others = [leaves[j] for j in rng.choice(len(leaves), size=int(rng.integers(0, 3)),
                                                 replace=False) if leaves[j] != owner]
        members = []
        for j in range(sizes.group_size):
            pid = f"{gid}-{j}"
            problems.append(_problem(store, pid, f"{gid}-0", [owner] + others, rng,
                                     question=f"question {gid}", image_ref=f"img/{pid}.png",
                                     extra_principles=(principle,)))
            members.append(pid)
        groups.append(VariantGroup("image_variant", principle, tuple(members)))

    for i in range(sizes.question_groups):
        owner = leaves[int(rng.integers(len(leaves)))]
        principle = store.points[owner].principle_ids[0]
        qid = f"Q{i:05d}"
        members = []
        for j in range(sizes.group_size):
            pid = f"{qid}-{j}"
            problems.append(_problem(store, pid, f"{qid}-0", [owner], rng,
                                     question=f"question {pid}", image_ref=f"img/{qid}.png"))
            members.append(pid)
        groups.append(VariantGroup("question_variant", principle, tuple(members)))

    for i in range(sizes.lattices):
        ps, lat = lattice_problems(store, i, rng)
        problems.extend(ps)
        lattices.append(lat)

    return build_corpus(problems, groups, lattices, store)


# --------------------------------------------------------------------------
# benchmark items


def level_counts(n: int, shares: tuple[int, ...] = LEVEL_SHARES) -> list[int]:
    """Largest-remainder split of ``n`` items over the level shares."""
    total = sum(shares)
    raw = [n * s / total for s in shares]
    counts = [int(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def eval_items(store: KnowledgeHierarchy, n: int = 100, seed: int = 0,
               shares: tuple[int, ...] = LEVEL_SHARES) -> list[EvalItem]:
    """Benchmark-shaped items whose gold answers are toy answer strings.

    An item with r reasoning steps has an r-symbol gold answer, so the toy
    policy can be scored on it through :func:`task_for_item`.
    """
    rng = stream(seed, "eval-items")
    leaves = store.leaf_ids
    items = []
    for level, count in zip(sorted(LEVEL_RANGES), level_counts(n, shares)):
        lo, hi = LEVEL_RANGES[level]
        for _ in range(count):
            steps = int(rng.integers(lo, hi + 1))
            leaf = leaves[int(rng.integers(len(leaves)))]
            gold = "".join(ANSWER_SYMBOLS[a] for a in rng.integers(0, len(ANSWER_SYMBOLS),
                                                                   size=steps))
            items.append(EvalItem(f"E{len(items):04d}", steps, store.domain_of(leaf),
                                  store.subdomain_of(leaf), gold,
                                  question=f"benchmark question {len(items)}"))
    return items


def task_for_item(item: EvalItem) -> SyntheticTask:
    idx = [ANSWER_SYMBOLS.index(ch) for ch in item.gold]
    coord = DifficultyCoordinate(item.reasoning_steps - 1)
    rng = np.random.default_rng(derive_seed(0, "eval-features", item.problem_id))
    return SyntheticTask(item.problem_id, _features(idx, coord, rng), item.gold, coord,
                         item.reasoning_steps)
