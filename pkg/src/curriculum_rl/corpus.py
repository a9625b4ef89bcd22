"""Seed/variant problem corpora and difficulty lattices.

On disk a corpus is a directory holding ``problems.jsonl`` (one problem per
line) plus ``groups.json`` and ``lattices.json`` sidecars. Images and GeoGebra
scripts are opaque references and never opened.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from .knowledge_store import KnowledgeAnnotation, KnowledgeHierarchy

log = logging.getLogger(__name__)

PROBLEMS_FILE = "problems.jsonl"
GROUPS_FILE = "groups.json"
LATTICES_FILE = "lattices.json"

GROUP_KINDS = ("image_variant", "question_variant")
CUBE_KEYS = ("seed", "s", "v", "c", "sv", "sc", "vc", "svc")
MIN_HARDEST_KNOWLEDGE = 6


class CorpusError(ValueError):
    pass


class LatticeError(CorpusError):
    """A lattice broke a named invariant (``cube``, ``step_increment``, ``min_complexity``)."""

    def __init__(self, invariant: str, seed_id: str, message: str, coordinate: str | None = None):
        self.invariant = invariant
        self.seed_id = seed_id
        self.coordinate = coordinate
        where = f" at coordinate {coordinate!r}" if coordinate else ""
        super().__init__(f"lattice {seed_id!r}{where}: [{invariant}] {message}")


@dataclass(frozen=True, order=True)
class DifficultyCoordinate:
    s: int = 0
    v: bool = False
    c: bool = False

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("step rank must be >= 0")

    @property
    def key(self) -> str:
        """Lattice key: the applied axes, or ``"seed"`` for the origin."""
        k = ("s" if self.s > 0 else "") + ("v" if self.v else "") + ("c" if self.c else "")
        return k or "seed"

    @property
    def is_seed(self) -> bool:
        return self.s == 0 and not self.v and not self.c

    def axes(self) -> set[str]:
        return set() if self.key == "seed" else set(self.key)

    def to_dict(self) -> dict:
        return {"s": self.s, "v": self.v, "c": self.c}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DifficultyCoordinate":
        return cls(int(d.get("s", 0)), bool(d.get("v", False)), bool(d.get("c", False)))

    def __str__(self) -> str:
        return f"({self.s},{'T' if self.v else 'F'},{'T' if self.c else 'F'})"


SEED = DifficultyCoordinate()


@dataclass(frozen=True)
class Problem:
    id: str
    seed_id: str
    question: str
    answer: str
    annotation: KnowledgeAnnotation
    difficulty: DifficultyCoordinate = SEED
    knowledge_count: int = 0
    image_ref: str | None = None
    ggb_ref: str | None = None
    solution: tuple[str, ...] = ()

    @property
    def point_set(self) -> frozenset[str]:
        return frozenset(self.annotation.step_points)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "seed_id": self.seed_id,
            "question": self.question,
            "answer": self.answer,
            "image_ref": self.image_ref,
            "ggb_ref": self.ggb_ref,
            "annotation": self.annotation.to_dict(),
            "difficulty": self.difficulty.to_dict(),
            "knowledge_count": self.knowledge_count,
            "solution": list(self.solution),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Problem":
        return cls(
            id=str(d["id"]),
            seed_id=str(d["seed_id"]),
            question=str(d["question"]),
            answer=str(d["answer"]),
            annotation=KnowledgeAnnotation.from_dict(d["annotation"]),
            difficulty=DifficultyCoordinate.from_dict(d.get("difficulty") or {}),
            knowledge_count=int(d["knowledge_count"]),
            image_ref=d.get("image_ref"),
            ggb_ref=d.get("ggb_ref"),
            solution=tuple(d.get("solution") or ()),
        )


@dataclass(frozen=True)
class VariantGroup:
    kind: str
    principle_id: str
    member_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "principle_id": self.principle_id,
                "member_ids": list(self.member_ids)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariantGroup":
        return cls(str(d["kind"]), str(d["principle_id"]), tuple(str(x) for x in d["member_ids"]))


@dataclass(frozen=True)
class DifficultyLattice:
    seed_id: str
    nodes: Mapping[str, str]

    def to_dict(self) -> dict:
        return {"seed_id": self.seed_id,
                "nodes": {k: self.nodes[k] for k in CUBE_KEYS if k in self.nodes}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DifficultyLattice":
        return cls(str(d["seed_id"]), {str(k): str(v) for k, v in d["nodes"].items()})


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""
    coordinate: str | None = None


@dataclass(frozen=True)
class LatticeReport:
    seed_id: str
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def raise_for_failure(self) -> None:
        for c in self.checks:
            if not c.passed:
                raise LatticeError(c.name, self.seed_id, c.detail, c.coordinate)


@dataclass(frozen=True)
class Corpus:
    """Immutable problem collection with lookup indexes."""

    problems: Mapping[str, Problem]
    groups: tuple[VariantGroup, ...] = ()
    lattices: tuple[DifficultyLattice, ...] = ()
    by_point: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    by_principle: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    by_coordinate: Mapping[DifficultyCoordinate, tuple[str, ...]] = field(default_factory=dict)
    by_seed: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.problems)

    def lattice(self, seed_id: str) -> DifficultyLattice:
        for lat in self.lattices:
            if lat.seed_id == seed_id:
                return lat
        raise KeyError(seed_id)

    def lattice_problem_ids(self) -> set[str]:
        return {pid for lat in self.lattices for pid in lat.nodes.values()}

    def stats(self) -> dict:
        kinds = defaultdict(int)
        for g in self.groups:
            kinds[g.kind] += 1
        return {
            "problems": len(self.problems),
            "seeds": sum(1 for p in self.problems.values() if p.id == p.seed_id),
            "image_variant_groups": kinds["image_variant"],
            "question_variant_groups": kinds["question_variant"],
            "lattices": len(self.lattices),
            "knowledge_points_covered": len(self.by_point),
            "principles_covered": len(self.by_principle),
            "coordinates": {str(k): len(v) for k, v in sorted(self.by_coordinate.items())},
        }


def build_corpus(problems: Iterable[Problem], groups: Iterable[VariantGroup] = (),
                 lattices: Iterable[DifficultyLattice] = (),
                 store: KnowledgeHierarchy | None = None) -> Corpus:
    """Validate and index an in-memory corpus."""
    table: dict[str, Problem] = {}
    for p in problems:
        if p.id in table:
            raise CorpusError(f"duplicate problem id {p.id!r}")
        _check_problem(p, store)
        table[p.id] = p
    for p in table.values():
        if p.id == p.seed_id and not p.difficulty.is_seed:
            raise CorpusError(f"seed problem {p.id!r} must sit at coordinate (0,F,F)")

    by_point: dict[str, list[str]] = defaultdict(list)
    by_principle: dict[str, list[str]] = defaultdict(list)
    by_coord: dict[DifficultyCoordinate, list[str]] = defaultdict(list)
    by_seed: dict[str, list[str]] = defaultdict(list)
    for p in table.values():
        for k in dict.fromkeys(p.annotation.step_points):
            by_point[k].append(p.id)
        for q in dict.fromkeys(p.annotation.principle_ids):
            by_principle[q].append(p.id)
        by_coord[p.difficulty].append(p.id)
        by_seed[p.seed_id].append(p.id)

    groups = tuple(groups)
    for g in groups:
        _check_group(g, table, store)
    lattices = tuple(lattices)
    corpus = Corpus(
        MappingProxyType(table), groups, lattices,
        _freeze(by_point), _freeze(by_principle), _freeze(by_coord), _freeze(by_seed),
    )
    seen = set()
    for lat in lattices:
        if lat.seed_id in seen:
            raise CorpusError(f"duplicate lattice for seed {lat.seed_id!r}")
        seen.add(lat.seed_id)
        validate_lattice(lat, corpus).raise_for_failure()
    return corpus


def _freeze(d: dict) -> Mapping:
    return MappingProxyType({k: tuple(v) for k, v in d.items()})


def _check_problem(p: Problem, store: KnowledgeHierarchy | None) -> None:
    if not p.answer.strip():
        raise CorpusError(f"problem {p.id!r} has an empty answer")
    if not p.annotation.step_points:
        raise CorpusError(f"problem {p.id!r} has no annotated steps")
    if p.annotation.problem_id != p.id:
        raise CorpusError(f"problem {p.id!r} carries annotation for {p.annotation.problem_id!r}")
    if p.knowledge_count != len(p.annotation.step_points):
        raise CorpusError(f"problem {p.id!r}: knowledge_count {p.knowledge_count} != "
                          f"{len(p.annotation.step_points)} annotated steps")
    if store is None:
        return
    for k in p.annotation.step_points:
        if not store.is_leaf(k):
            raise CorpusError(f"problem {p.id!r} references unknown or non-leaf "
                              f"knowledge point {k!r}")
    for q in p.annotation.principle_ids:
        if q not in store.principles:
            raise CorpusError(f"problem {p.id!r} references unknown principle {q!r}")


def _check_group(g: VariantGroup, table: Mapping[str, Problem],
                 store: KnowledgeHierarchy | None) -> None:
    if g.kind not in GROUP_KINDS:
        raise CorpusError(f"group for {g.principle_id!r} has unknown kind {g.kind!r}")
    if len(g.member_ids) < 2:
        raise CorpusError(f"{g.kind} group for {g.principle_id!r} needs >= 2 members")
    if len(set(g.member_ids)) != len(g.member_ids):
        raise CorpusError(f"{g.kind} group for {g.principle_id!r} repeats a member")
    missing = [m for m in g.member_ids if m not in table]
    if missing:
        raise CorpusError(f"{g.kind} group for {g.principle_id!r} has unknown members {missing}")
    if store is not None and g.principle_id not in store.principles:
        raise CorpusError(f"group references unknown principle {g.principle_id!r}")
    members = [table[m] for m in g.member_ids]
    if g.kind == "image_variant":
        if len({m.question for m in members}) != 1:
            raise CorpusError(f"image_variant group {g.principle_id!r}: question text differs")
        if len({m.image_ref for m in members}) != len(members):
            raise CorpusError(f"image_variant group {g.principle_id!r}: image_ref not distinct")
    else:
        if len({m.image_ref for m in members}) != 1:
            raise CorpusError(f"question_variant group {g.principle_id!r}: image_ref differs")
        if len({m.question for m in members}) != len(members):
            raise CorpusError(f"question_variant group {g.principle_id!r}: question not distinct")


def validate_lattice(lattice: DifficultyLattice, corpus: Corpus) -> LatticeReport:
    """Check the 8-node cube, the step-increment rule and the hardest-node minimum."""
    checks = [_check_cube(lattice, corpus)]
    if not checks[0].passed:
        skipped = "skipped: cube invalid"
        return LatticeReport(lattice.seed_id, (checks[0], Check("step_increment", False, skipped),
                                               Check("min_complexity", False, skipped)))
    checks.append(_check_step_chain(lattice, corpus))
    hardest = corpus.problems[lattice.nodes["svc"]]
    ok = hardest.knowledge_count >= MIN_HARDEST_KNOWLEDGE
    checks.append(Check(
        "min_complexity", ok,
        f"hardest node has {hardest.knowledge_count} knowledge points "
        f"(need >= {MIN_HARDEST_KNOWLEDGE})", "svc"))
    return LatticeReport(lattice.seed_id, tuple(checks))


def _check_cube(lattice: DifficultyLattice, corpus: Corpus) -> Check:
    for key in CUBE_KEYS:
        if key not in lattice.nodes:
            return Check("cube", False, "missing node", key)
    extra = set(lattice.nodes) - set(CUBE_KEYS)
    if extra:
        return Check("cube", False, "unexpected coordinate", sorted(extra)[0])
    if lattice.nodes["seed"] != lattice.seed_id:
        return Check("cube", False, "seed node must be the seed problem", "seed")
    s_ranks = set()
    for key in CUBE_KEYS:
        pid = lattice.nodes[key]
        p = corpus.problems.get(pid)
        if p is None:
            return Check("cube", False, f"node problem {pid!r} absent", key)
        if p.seed_id != lattice.seed_id:
            return Check("cube", False, f"node problem {pid!r} belongs to seed "
                                        f"{p.seed_id!r}", key)
        if p.difficulty.key != key:
            return Check("cube", False, f"problem {pid!r} has coordinate "
                                        f"{p.difficulty}", key)
        if key != "seed" and "s" in key:
            s_ranks.add(p.difficulty.s)
    if len(s_ranks) != 1:
        return Check("cube", False, f"step-applied nodes disagree on s rank {sorted(s_ranks)}")
    return Check("cube", True, "8-node cube complete")


def s_chain(lattice: DifficultyLattice, corpus: Corpus) -> list[Problem | None]:
    """Seed followed by its (k,F,F) deepening variants for k = 1..s*."""
    top = corpus.problems[lattice.nodes["s"]].difficulty.s
    by_rank: dict[int, Problem] = {}
    for pid in corpus.by_seed.get(lattice.seed_id, ()):
        p = corpus.problems[pid]
        if not p.difficulty.v and not p.difficulty.c and p.difficulty.s >= 1:
            # the lattice's own s node wins over any duplicate rank
            if p.difficulty.s not in by_rank or pid == lattice.nodes["s"]:
                by_rank[p.difficulty.s] = p
    chain: list[Problem | None] = [corpus.problems[lattice.seed_id]]
    chain += [by_rank.get(k) for k in range(1, top + 1)]
    return chain


def _check_step_chain(lattice: DifficultyLattice, corpus: Corpus) -> Check:
    chain = s_chain(lattice, corpus)
    for rank, p in enumerate(chain):
        if p is None:
            return Check("step_increment", False, f"missing step rank {rank}", "s")
    counts = [p.knowledge_count for p in chain]
    for a, b in zip(counts, counts[1:]):
        if b - a != 1:
            return Check("step_increment", False,
                         f"step increment ≠ 1 along s-chain {counts}", "s")
    return Check("step_increment", True, f"s-chain {counts}")


def principle_groups(corpus: Corpus) -> list[tuple[str, list[str]]]:
    """Image-variant members keyed by principle; groups sharing a principle merge."""
    merged: dict[str, list[str]] = {}
    for g in corpus.groups:
        if g.kind != "image_variant":
            continue
        members = merged.setdefault(g.principle_id, [])
        for m in g.member_ids:
            if m not in members:
                members.append(m)
    return sorted(merged.items())


# --------------------------------------------------------------------------
# files


def ingest_corpus(path: str | Path, store: KnowledgeHierarchy | None) -> Corpus:
    """Read ``problems.jsonl`` (or a bare JSONL file) plus sidecars and validate."""
    path = Path(path)
    directory = path if path.is_dir() else path.parent
    problems_path = path / PROBLEMS_FILE if path.is_dir() else path
    problems = []
    if problems_path.exists():
        with open(problems_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    problems.append(Problem.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise CorpusError(f"{problems_path}:{line_no}: {exc!r}") from None
    elif path.is_dir():
        raise CorpusError(f"{problems_path} not found")
    groups = [VariantGroup.from_dict(g) for g in _read_json_list(directory / GROUPS_FILE)]
    lattices = [DifficultyLattice.from_dict(d) for d in _read_json_list(directory / LATTICES_FILE)]
    corpus = build_corpus(problems, groups, lattices, store)
    log.info("ingested %d problems, %d groups, %d lattices",
             len(corpus.problems), len(corpus.groups), len(corpus.lattices))
    return corpus


def _read_json_list(path: Path) -> list:
    if not path.exists():
        return []
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: {exc}") from None
    if not isinstance(obj, list):
        raise CorpusError(f"{path}: expected a JSON list")
    return obj


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / PROBLEMS_FILE, "w", encoding="utf-8") as fh:
        for p in corpus.problems.values():
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
    (directory / GROUPS_FILE).write_text(
        json.dumps([g.to_dict() for g in corpus.groups], indent=1), encoding="utf-8")
    (directory / LATTICES_FILE).write_text(
        json.dumps([lat.to_dict() for lat in corpus.lattices], indent=1), encoding="utf-8")
