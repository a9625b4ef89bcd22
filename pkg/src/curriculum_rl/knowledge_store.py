"""Five-level knowledge hierarchy, principle sets and step-level annotation.

The hierarchy file is UTF-8 JSON: either one root object or a list of roots,
each node shaped ``{id, name, level, principles?, children?}``. Principles are
``{id, kind, statement}`` objects attached only to level-5 points.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

LEAF_LEVEL = 5
MIN_PRINCIPLES = 1
MAX_PRINCIPLES = 7
PRINCIPLE_KINDS = ("definition", "theorem", "application")
# Published principle totals disagree between sections; the check is advisory.
DEFAULT_EXPECTED_PRINCIPLES = 1819


class HierarchyError(ValueError):
    """Hierarchy file failed to parse or violated a structural invariant."""

    def __init__(self, message: str, node_id: str | None = None):
        self.node_id = node_id
        super().__init__(f"{message} (node {node_id!r})" if node_id is not None else message)


class AnnotationError(ValueError):
    pass


class SimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class Principle:
    id: str
    owner_point: str
    kind: str
    statement: str


@dataclass(frozen=True)
class KnowledgePoint:
    id: str
    name: str
    level: int
    parent_id: str | None
    principle_ids: tuple[str, ...] = ()
    child_ids: tuple[str, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return self.level == LEAF_LEVEL


@dataclass(frozen=True)
class KnowledgeAnnotation:
    problem_id: str
    step_points: tuple[str, ...]
    principle_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "step_points": list(self.step_points),
            "principle_ids": list(self.principle_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeAnnotation":
        return cls(
            problem_id=str(d["problem_id"]),
            step_points=tuple(str(x) for x in d["step_points"]),
            principle_ids=tuple(str(x) for x in d.get("principle_ids", ())),
        )


@dataclass(frozen=True)
class KnowledgeHierarchy:
    """Immutable, validated knowledge store."""

    points: dict[str, KnowledgePoint]
    principles: dict[str, Principle]
    root_ids: tuple[str, ...]

    @property
    def leaf_ids(self) -> list[str]:
        return [p.id for p in self.points.values() if p.is_leaf]

    @property
    def leaf_count(self) -> int:
        return sum(1 for p in self.points.values() if p.is_leaf)

    @property
    def principle_count(self) -> int:
        return len(self.principles)

    def is_leaf(self, point_id: str) -> bool:
        p = self.points.get(point_id)
        return p is not None and p.is_leaf

    def path(self, point_id: str) -> list[str]:
        """Ids from the level-1 ancestor down to ``point_id``."""
        out = []
        cur: str | None = point_id
        while cur is not None:
            out.append(cur)
            cur = self.points[cur].parent_id
        return out[::-1]

    def ancestor_at(self, point_id: str, level: int) -> KnowledgePoint:
        for pid in self.path(point_id):
            if self.points[pid].level == level:
                return self.points[pid]
        raise KeyError(f"{point_id} has no ancestor at level {level}")

    def domain_of(self, point_id: str) -> str:
        return self.ancestor_at(point_id, 1).name

    def subdomain_of(self, point_id: str) -> str:
        return self.ancestor_at(point_id, 2).name

    def principles_of(self, point_id: str) -> list[Principle]:
        return [self.principles[i] for i in self.points[point_id].principle_ids]

    def counts(self) -> dict[str, int]:
        return {"points": len(self.points), "leaves": self.leaf_count,
                "principles": self.principle_count}

    def to_json_obj(self) -> list[dict]:
        def node(pid: str) -> dict:
            p = self.points[pid]
            d: dict = {"id": p.id, "name": p.name, "level": p.level}
            if p.principle_ids:
                d["principles"] = [
                    {"id": q.id, "kind": q.kind, "statement": q.statement}
                    for q in self.principles_of(pid)
                ]
            if p.child_ids:
                d["children"] = [node(c) for c in p.child_ids]
            return d

        return [node(r) for r in self.root_ids]


def hierarchy_from_obj(obj, expected_principles: int | None = DEFAULT_EXPECTED_PRINCIPLES
                       ) -> KnowledgeHierarchy:
    """Build and validate a hierarchy from parsed JSON."""
    roots = obj if isinstance(obj, list) else [obj]
    points: dict[str, KnowledgePoint] = {}
    principles: dict[str, Principle] = {}

    def visit(node, parent: KnowledgePoint | None) -> str:
        if not isinstance(node, dict):
            raise HierarchyError("node is not an object")
        try:
            pid = str(node["id"])
            name = str(node.get("name", pid))
            level = int(node["level"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HierarchyError(f"malformed node: {exc}", node.get("id")) from None
        if pid in points:
            raise HierarchyError("duplicate knowledge point id", pid)
        if not 1 <= level <= LEAF_LEVEL:
            raise HierarchyError(f"level {level} out of [1,{LEAF_LEVEL}]", pid)
        if parent is None and level != 1:
            raise HierarchyError("root must be level 1", pid)
        if parent is not None and level != parent.level + 1:
            raise HierarchyError(f"level {level} under parent level {parent.level}", pid)
        raw_principles = node.get("principles") or []
        children = node.get("children") or []
        if level == LEAF_LEVEL:
            if children:
                raise HierarchyError("level-5 point has children", pid)
            if not MIN_PRINCIPLES <= len(raw_principles) <= MAX_PRINCIPLES:
                raise HierarchyError(
                    f"principle count out of [{MIN_PRINCIPLES},{MAX_PRINCIPLES}]: "
                    f"{len(raw_principles)}", pid)
        else:
            if raw_principles:
                raise HierarchyError("non-leaf point carries principles", pid)
            if not children:
                raise HierarchyError(f"level-{level} point has no children; "
                                     "every root-to-leaf path must have 5 levels", pid)
        principle_ids = []
        for rp in raw_principles:
            try:
                qid = str(rp["id"])
                kind = str(rp["kind"])
            except (KeyError, TypeError):
                raise HierarchyError("malformed principle", pid) from None
            if qid in principles:
                raise HierarchyError(f"duplicate principle id {qid!r}", pid)
            if kind not in PRINCIPLE_KINDS:
                raise HierarchyError(f"principle {qid!r} has unknown kind {kind!r}", pid)
            principles[qid] = Principle(qid, pid, kind, str(rp.get("statement", "")))
            principle_ids.append(qid)
        # Placeholder so children can see their parent's level.
        point = KnowledgePoint(pid, name, level, parent.id if parent else None,
                               tuple(principle_ids))
        points[pid] = point
        child_ids = tuple(visit(c, point) for c in children)
        points[pid] = KnowledgePoint(pid, name, level, point.parent_id,
                                     point.principle_ids, child_ids)
        return pid

    root_ids = tuple(visit(r, None) for r in roots)
    store = KnowledgeHierarchy(points, principles, root_ids)
    if expected_principles is not None and store.principle_count != expected_principles:
        log.warning("principle total %d differs from expected %d",
                    store.principle_count, expected_principles)
    return store


def load_hierarchy(path: str | Path,
                   expected_principles: int | None = DEFAULT_EXPECTED_PRINCIPLES
                   ) -> KnowledgeHierarchy:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise HierarchyError(f"parse failure: {exc}") from None
    store = hierarchy_from_obj(obj, expected_principles)
    log.info("loaded hierarchy: %d leaves, %d principles",
             store.leaf_count, store.principle_count)
    return store


def save_hierarchy(store: KnowledgeHierarchy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(store.to_json_obj(), indent=1, ensure_ascii=False),
                          encoding="utf-8")


# --------------------------------------------------------------------------
# step tagging


class StepTagger(Protocol):
    """Resolves one solution step to a knowledge-point id."""

    def tag(self, step: str) -> str: ...


@dataclass
class KeywordTagger:
    """Rule-based tagger: first keyword (in table order) found in the step wins."""

    table: dict[str, str]

    def tag(self, step: str) -> str:
        low = step.casefold()
        for keyword, point_id in self.table.items():
            if keyword.casefold() in low:
                return point_id
        raise AnnotationError(f"no keyword matches step {step!r}")


def annotate_problem(problem, tagger: StepTagger, store: KnowledgeHierarchy
                     ) -> KnowledgeAnnotation:
    """Map each solution step of ``problem`` to a leaf knowledge point.

    ``problem`` needs ``id`` and ``solution`` (ordered step texts).
    """
    steps = list(getattr(problem, "solution", None) or [])
    if not steps:
        raise AnnotationError(f"problem {problem.id} has an empty solution")
    points = []
    for i, step in enumerate(steps):
        pid = tagger.tag(step)
        if pid not in store.points:
            raise AnnotationError(f"step {i} of {problem.id} tagged with unknown id {pid!r}")
        if not store.is_leaf(pid):
            raise AnnotationError(f"step {i} of {problem.id} tagged with non-leaf id {pid!r}")
        points.append(pid)
    principle_ids = []
    for pid in dict.fromkeys(points):
        principle_ids.extend(store.points[pid].principle_ids)
    return KnowledgeAnnotation(problem.id, tuple(points), tuple(principle_ids))


# --------------------------------------------------------------------------
# clustering


@dataclass(frozen=True)
class SimilarityMatrix:
    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = len(self.labels)
        if v.shape != (n, n):
            raise SimilarityError(f"values shape {v.shape} does not match {n} labels")
        if not np.all(np.isfinite(v)):
            raise SimilarityError("similarity matrix has non-finite entries")
        if not np.array_equal(v, v.T):
            raise SimilarityError("similarity matrix is not symmetric")
        if n and not np.all(np.diag(v) == 1.0):
            raise SimilarityError("similarity matrix diagonal must be 1")
        if np.any(v < 0) or np.any(v > 1):
            raise SimilarityError("similarities must lie in [0,1]")
        if len(set(self.labels)) != n:
            raise SimilarityError("labels must be unique")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_json(cls, path: str | Path) -> "SimilarityMatrix":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(tuple(obj["labels"]), np.asarray(obj["values"], dtype=float))


@dataclass(frozen=True)
class Merge:
    left: tuple[str, ...]
    right: tuple[str, ...]
    similarity: float


@dataclass
class ClusterTree:
    """Agglomerative merge history; ``merges[i]`` is the i-th merge performed."""

    labels: tuple[str, ...]
    merges: list[Merge] = field(default_factory=list)

    def cut(self, k: int) -> list[list[str]]:
        """Clusters present after undoing the last ``k-1`` merges."""
        n = len(self.labels)
        if not 1 <= k <= n:
            raise ValueError(f"cut level {k} outside [1,{n}]")
        clusters = {lab: [lab] for lab in self.labels}
        for m in self.merges[: n - k]:
            a, b = min(m.left), min(m.right)
            merged = sorted(clusters.pop(a) + clusters.pop(b))
            clusters[merged[0]] = merged
        return sorted(clusters.values(), key=lambda c: c[0])

    def to_json_obj(self, levels: int | None = None) -> dict:
        d: dict = {
            "labels": list(self.labels),
            "merges": [{"left": list(m.left), "right": list(m.right),
                        "similarity": m.similarity} for m in self.merges],
        }
        if levels is not None:
            d["levels"] = levels
            d["clusters"] = self.cut(levels)
        return d


def cluster_tags(S: SimilarityMatrix, target_levels: int | None = None,
                 tie_tol: float = 1e-12) -> ClusterTree:
    """Average-linkage agglomerative clustering on similarities.

    At each step the pair of clusters with the highest mean pairwise similarity
    merges; pairs within ``tie_tol`` of the best are broken by the
    lexicographically smallest (min-label, min-label) key.
    """
    n = len(S.labels)
    if target_levels is not None and not 1 <= target_levels <= max(n, 1):
        raise ValueError(f"target_levels {target_levels} outside [1,{n}]")
    tree = ClusterTree(tuple(S.labels))
    if n <= 1:
        return tree
    # Work in sorted-label order so a cluster's slot (the index of its min
    # label) orders clusters lexicographically.
    order = sorted(range(n), key=lambda i: S.labels[i])
    labels = [S.labels[i] for i in order]
    link = S.values[np.ix_(order, order)].copy()  # summed pairwise similarity
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = [[lab] for lab in labels]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)

    for _ in range(n - 1):
        valid = upper & active[:, None] & active[None, :]
        avg = np.where(valid, link / np.outer(size, size), -np.inf)
        best = avg.max()
        i, j = np.argwhere(avg >= best - tie_tol)[0]  # row-major = lexicographic
        tree.merges.append(Merge(tuple(members[i]), tuple(members[j]), float(avg[i, j])))
        link[i, :] += link[j, :]
        link[:, i] += link[:, j]
        size[i] += size[j]
        active[j] = False
        members[i] = sorted(members[i] + members[j])
        members[j] = []
    return tree


def cluster_labels(S: SimilarityMatrix, k: int) -> list[list[str]]:
    return cluster_tags(S, k).cut(k)


def iter_leaves(store: KnowledgeHierarchy) -> Iterable[KnowledgePoint]:
    return (p for p in store.points.values() if p.is_leaf)


def validate_ids(store: KnowledgeHierarchy, ids: Sequence[str]) -> list[str]:
    """Return the ids that are not leaves of ``store``."""
    return [i for i in ids if not store.is_leaf(i)]
