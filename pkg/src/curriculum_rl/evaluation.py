"""Benchmark judging and accuracy breakdowns by reasoning depth and domain."""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.request
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .canon import answers_match

log = logging.getLogger(__name__)

MIN_STEPS, MAX_STEPS = 1, 10
LEVEL_RANGES = {1: (1, 3), 2: (4, 6), 3: (7, 10)}

DOMAINS = {
    "Geometry": ("Plane Geometry", "Solid Geometry", "Analytic Geometry",
                 "Transformational Geometry"),
    "Fundamental Skills": ("Arithmetic", "Measurement", "Computational Methods"),
    "Algebra": ("Equations and Inequalities", "Functions", "Sequences", "Linear Algebra"),
    "Probability and Statistics": ("Probability", "Statistics"),
}
SUBDOMAIN_TO_DOMAIN = {sub: dom for dom, subs in DOMAINS.items() for sub in subs}
# column order of the printed breakdown
DOMAIN_COLUMNS = (("FS.", "Fundamental Skills"), ("PS.", "Probability and Statistics"),
                  ("Geo.", "Geometry"), ("Alg.", "Algebra"))

# Default judge prompt. Callers wanting a specific published template pass it
# through ``judge_prompt`` / the ``eval.prompt_template`` config key.
DEFAULT_JUDGE_PROMPT = (
    "Solve the following math question. Give a short account of your reasoning "
    "and then the final answer. Multiple-choice: give the chosen option with its content. "
    "Fill-in-the-blank: give the answer only.\n"
    "Question: <Question>\n\n"
    "Reply using exactly this layout:\n"
    "<Thought process>: <<your thought process>>\n"
    "<Answer>: <<your answer>>\n"
)


class EvalError(ValueError):
    pass


def level_of(steps: int) -> int:
    """Reasoning level: 1-3 steps -> 1, 4-6 -> 2, 7-10 -> 3."""
    if isinstance(steps, bool) or int(steps) != steps or not MIN_STEPS <= steps <= MAX_STEPS:
        raise EvalError(f"reasoning steps {steps!r} outside [{MIN_STEPS},{MAX_STEPS}]")
    for level, (lo, hi) in LEVEL_RANGES.items():
        if lo <= steps <= hi:
            return level
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class EvalItem:
    problem_id: str
    reasoning_steps: int
    domain: str
    subdomain: str
    gold: str
    prediction: str = ""
    question: str = ""

    def __post_init__(self):
        level_of(self.reasoning_steps)
        if self.domain not in DOMAINS:
            raise EvalError(f"{self.problem_id}: unknown domain {self.domain!r}")
        if SUBDOMAIN_TO_DOMAIN.get(self.subdomain) != self.domain:
            raise EvalError(f"{self.problem_id}: subdomain {self.subdomain!r} "
                            f"not under {self.domain!r}")
        if not self.gold.strip():
            raise EvalError(f"{self.problem_id}: empty gold answer")

    @property
    def level(self) -> int:
        return level_of(self.reasoning_steps)

    def to_dict(self) -> dict:
        return {"problem_id": self.problem_id, "reasoning_steps": self.reasoning_steps,
                "domain": self.domain, "subdomain": self.subdomain, "gold": self.gold,
                "question": self.question}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalItem":
        return cls(str(d["problem_id"]), int(d["reasoning_steps"]), str(d["domain"]),
                   str(d["subdomain"]), str(d["gold"]), str(d.get("prediction", "")),
                   str(d.get("question", "")))


# --------------------------------------------------------------------------
# judging


class JudgeClient(Protocol):
    """External judge transport.

    Request: ``{"prompt", "question", "prediction", "gold"}``.
    Response: ``{"correct": bool}``. Any exception counts as a failed call.
    """

    def __call__(self, request: dict) -> dict: ...


@dataclass
class HttpJudgeClient:
    """POSTs the request as JSON and reads a JSON response."""

    url: str
    timeout: float = 30.0
    headers: dict = field(default_factory=dict)

    def __call__(self, request: dict) -> dict:
        body = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json", **self.headers})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))


def judge(prediction: str, gold: str, mode: str = "rule", client: JudgeClient | None = None,
          question: str = "", judge_prompt: str = DEFAULT_JUDGE_PROMPT, retries: int = 2,
          backoff: float = 0.0) -> bool | None:
    """True/False verdict, or None when the external judge could not be reached."""
    if not gold.strip():
        raise EvalError("gold answer must be non-empty")
    if mode == "rule":
        return answers_match(prediction, gold)
    if mode != "external":
        raise EvalError(f"unknown judge mode {mode!r}")
    if client is None:
        raise EvalError("external judging needs a client")
    request = {"prompt": judge_prompt.replace("<Question>", question),
               "question": question, "prediction": prediction, "gold": gold}
    for attempt in range(1 + retries):
        try:
            verdict = client(request)
            return bool(verdict["correct"])
        except (urllib.error.URLError, OSError, KeyError, TypeError, ValueError) as exc:
            log.debug("judge call %d failed: %r", attempt + 1, exc)
            if backoff:
                time.sleep(backoff * (attempt + 1))
    log.warning("judge unreachable after %d attempts; item left unjudged", 1 + retries)
    return None


def judge_all(items: Sequence[EvalItem], mode: str = "rule", client: JudgeClient | None = None,
              judge_prompt: str = DEFAULT_JUDGE_PROMPT) -> list[bool | None]:
    return [judge(it.prediction, it.gold, mode, client, it.question, judge_prompt)
            for it in items]


# --------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class Cell:
    correct: int
    total: int

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total if self.total else None


@dataclass(frozen=True)
class EvalReport:
    overall: float
    judged: int
    unjudged: int
    levels: Mapping[int, Cell]
    domains: Mapping[str, Cell]
    subdomains: Mapping[str, Cell]

    def to_dict(self) -> dict:
        def cells(m):
            return {str(k): {"correct": c.correct, "total": c.total, "accuracy": c.accuracy}
                    for k, c in m.items()}
        return {"overall": self.overall, "judged": self.judged, "unjudged": self.unjudged,
                "levels": cells(self.levels), "domains": cells(self.domains),
                "subdomains": cells(self.subdomains)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        def cells(m, key=str):
            return {key(k): Cell(int(c["correct"]), int(c["total"])) for k, c in m.items()}
        return cls(float(d["overall"]), int(d["judged"]), int(d["unjudged"]),
                   cells(d["levels"], int), cells(d["domains"]), cells(d["subdomains"]))

    def table(self) -> str:
        """Plain-text breakdown: overall | three levels | four domains, in percent."""
        def pct(c: Cell | None) -> str:
            return "-" if c is None or c.accuracy is None else f"{100 * c.accuracy:.1f}"

        head = ["Acc.", "|", "Level1", "Level2", "Level3", "|"] + [a for a, _ in DOMAIN_COLUMNS]
        row = [f"{100 * self.overall:.1f}", "|"]
        row += [pct(self.levels.get(lv)) for lv in (1, 2, 3)] + ["|"]
        row += [pct(self.domains.get(d)) for _, d in DOMAIN_COLUMNS]
        count = [str(self.judged), "|"]
        count += [str(self.levels[lv].total) if lv in self.levels else "0" for lv in (1, 2, 3)]
        count += ["|"] + [str(self.domains[d].total) if d in self.domains else "0"
                          for _, d in DOMAIN_COLUMNS]
        widths = [max(len(a), len(b), len(c)) for a, b, c in zip(head, row, count)]
        lines = ["  ".join(x.rjust(w) for x, w in zip(r, widths)) for r in (head, row, count)]
        lines[2] += "   (judged items)"
        if self.unjudged:
            lines.append(f"{self.unjudged} item(s) unjudged and excluded")
        return "\n".join(lines) + "\n"


def _cells(keyed: Iterable[tuple[object, bool]]) -> dict:
    correct: dict = defaultdict(int)
    total: dict = defaultdict(int)
    for key, ok in keyed:
        total[key] += 1
        correct[key] += int(ok)
    return {k: Cell(correct[k], total[k]) for k in sorted(total, key=str)}


def report(items: Sequence[EvalItem], judgments: Sequence[bool | None]) -> EvalReport:
    """Accuracy per level, domain and subdomain over judged items (None = unjudged)."""
    if len(items) != len(judgments):
        raise EvalError(f"{len(items)} items but {len(judgments)} judgments")
    pairs = [(it, bool(j)) for it, j in zip(items, judgments) if j is not None]
    if not pairs:
        raise EvalError("no judged items to report on")
    correct = sum(ok for _, ok in pairs)
    return EvalReport(
        overall=correct / len(pairs),
        judged=len(pairs),
        unjudged=len(items) - len(pairs),
        levels=_cells((it.level, ok) for it, ok in pairs),
        domains=_cells((it.domain, ok) for it, ok in pairs),
        subdomains=_cells((it.subdomain, ok) for it, ok in pairs),
    )


def weighted_mean(cells: Mapping[object, Cell]) -> float:
    num = sum(c.total * c.accuracy for c in cells.values() if c.total)
    den = sum(c.total for c in cells.values())
    return num / den


# --------------------------------------------------------------------------
# files


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise EvalError(f"{path}:{n}: {exc}") from None
    return out


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def load_items(items_path: str | Path, preds_path: str | Path | None = None) -> list[EvalItem]:
    """Items file, optionally joined with a ``{problem_id, prediction}`` predictions file.

    Items without a prediction are judged against the empty string.
    """
    items = [EvalItem.from_dict(d) for d in read_jsonl(items_path)]
    if preds_path is None:
        return items
    preds = {}
    for d in read_jsonl(preds_path):
        preds[str(d["problem_id"])] = str(d.get("prediction", ""))
    unknown = set(preds) - {it.problem_id for it in items}
    if unknown:
        log.warning("%d predictions reference unknown problems", len(unknown))
    return [EvalItem(it.problem_id, it.reasoning_steps, it.domain, it.subdomain, it.gold,
                     preds.get(it.problem_id, ""), it.question) for it in items]


def write_report(rep: EvalReport, directory: str | Path, stem: str = "eval") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}_report.json").write_text(
        json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / f"{stem}_table.txt").write_text(rep.table(), encoding="utf-8")
