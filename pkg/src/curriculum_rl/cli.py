"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError
from .corpus import CorpusError, ingest_corpus, save_corpus
from .evaluation import (DEFAULT_JUDGE_PROMPT, EvalError, HttpJudgeClient, judge_all,
                         load_items, report, write_report)
from .fixtures import CorpusSizes, hierarchy_obj, synthetic_corpus, synthetic_hierarchy
from .grpo import GrpoError, TrainingDiverged
from .knowledge_store import (AnnotationError, HierarchyError, SimilarityError, SimilarityMatrix,
                              cluster_tags, load_hierarchy)
from .pipeline import PipelineError, StageAbort, run_pipeline, run_single_stage
from .report import ReportError, emit_report

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2

VALIDATION_ERRORS = (HierarchyError, AnnotationError, SimilarityError, CorpusError, ConfigError,
                     EvalError, ReportError)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _store(path: str | None):
    return load_hierarchy(path) if path else synthetic_hierarchy()


# --------------------------------------------------------------------------
# commands


def cmd_kb_validate(args) -> int:
    store = load_hierarchy(args.path, args.expected_principles)
    _print_json(store.counts())
    return EXIT_OK


def cmd_kb_cluster(args) -> int:
    S = SimilarityMatrix.from_json(args.similarity)
    tree = cluster_tags(S, args.levels)
    obj = tree.to_json_obj(args.levels)
    if args.out:
        Path(args.out).write_text(json.dumps(obj, indent=1), encoding="utf-8")
    else:
        _print_json(obj)
    return EXIT_OK


def cmd_kb_fixture(args) -> int:
    Path(args.out).write_text(json.dumps(hierarchy_obj(args.leaves, args.principles), indent=1),
                              encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_corpus_validate(args) -> int:
    corpus = ingest_corpus(args.path, _store(args.hierarchy))
    print(f"ok: {len(corpus)} problems, {len(corpus.groups)} groups, "
          f"{len(corpus.lattices)} lattices")
    return EXIT_OK


def cmd_corpus_stats(args) -> int:
    _print_json(ingest_corpus(args.path, _store(args.hierarchy)).stats())
    return EXIT_OK


def cmd_corpus_fixture(args) -> int:
    sizes = CorpusSizes(args.standard, args.image_groups, args.group_size, args.lattices,
                        args.question_groups)
    corpus = synthetic_corpus(_store(args.hierarchy), sizes, args.seed)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} problems to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    m = run_single_stage(args.stage, args.config, args.corpus, args.seed, args.init, args.out)
    _print_json(m.to_dict())
    return EXIT_OK


def cmd_run(args) -> int:
    skip = [s for s in (args.skip or "").split(",") if s]
    m = run_pipeline(args.config, skip, args.init, args.out,
                     on_stage=lambda s: print(f"[stage] {s}", file=sys.stderr))
    _print_json({"config_hash": m.config_hash, "corpus_hash": m.corpus_hash,
                 "lineage": m.lineage, "stages": m.stages})
    if args.report:
        emit_report(args.out or _resolved_output(args.config))
    return EXIT_OK


def _resolved_output(config_path) -> str:
    from .config import load_config
    return load_config(config_path)[0].output_dir


def cmd_eval_run(args) -> int:
    items = load_items(args.items, args.preds)
    client = HttpJudgeClient(args.judge_url) if args.mode == "external" else None
    if args.mode == "external" and not args.judge_url:
        raise EvalError("--judge-url is required in external mode")
    prompt = (Path(args.prompt_template).read_text(encoding="utf-8") if args.prompt_template
              else DEFAULT_JUDGE_PROMPT)
    rep = report(items, judge_all(items, args.mode, client, prompt))
    if args.out:
        write_report(rep, args.out)
    print(rep.table(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    for name, path in emit_report(args.run_dir, args.out).items():
        print(f"{name}\t{path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curriculum-rl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    kb = sub.add_parser("kb", help="knowledge hierarchy tools").add_subparsers(
        dest="action", required=True)
    k = kb.add_parser("validate")
    k.add_argument("path")
    k.add_argument("--expected-principles", type=int, default=1819)
    k.set_defaults(func=cmd_kb_validate)
    k = kb.add_parser("cluster")
    k.add_argument("similarity", help="JSON {labels, values}")
    k.add_argument("--levels", type=int, default=None, help="cut the tree into this many clusters")
    k.add_argument("--out")
    k.set_defaults(func=cmd_kb_cluster)
    k = kb.add_parser("fixture", help="write a synthetic hierarchy")
    k.add_argument("--out", required=True)
    k.add_argument("--leaves", type=int, default=491)
    k.add_argument("--principles", type=int, default=1819)
    k.set_defaults(func=cmd_kb_fixture)

    co = sub.add_parser("corpus", help="problem corpus tools").add_subparsers(
        dest="action", required=True)
    for name, fn in (("validate", cmd_corpus_validate), ("stats", cmd_corpus_stats)):
        c = co.add_parser(name)
        c.add_argument("path")
        c.add_argument("--hierarchy", help="hierarchy JSON (default: generated)")
        c.set_defaults(func=fn)
    c = co.add_parser("fixture", help="write a synthetic corpus directory")
    c.add_argument("--out", required=True)
    c.add_argument("--hierarchy")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--standard", type=int, default=40)
    c.add_argument("--image-groups", type=int, default=12)
    c.add_argument("--group-size", type=int, default=3)
    c.add_argument("--lattices", type=int, default=6)
    c.add_argument("--question-groups", type=int, default=2)
    c.set_defaults(func=cmd_corpus_fixture)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("stage", choices=("sft", "pre", "dyn"))
    tr.add_argument("--corpus")
    tr.add_argument("--config")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--init", help="checkpoint to start from (required for pre and dyn)")
    tr.add_argument("--out", help="run directory (default: config output_dir)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="benchmark evaluation").add_subparsers(
        dest="action", required=True)
    e = ev.add_parser("run")
    e.add_argument("--items", required=True)
    e.add_argument("--preds")
    e.add_argument("--mode", choices=("rule", "external"), default="rule")
    e.add_argument("--judge-url")
    e.add_argument("--prompt-template")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_run)

    r = sub.add_parser("report", help="render tables and curves for a run directory")
    r.add_argument("run_dir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    ru = sub.add_parser("run", help="full pipeline: sft, pre, dyn, eval")
    ru.add_argument("--config")
    ru.add_argument("--skip", help="comma-separated stages to skip")
    ru.add_argument("--init")
    ru.add_argument("--out")
    ru.add_argument("--report", action="store_true", help="also render the report")
    ru.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StageAbort, TrainingDiverged, GrpoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except VALIDATION_ERRORS + (PipelineError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
