"""Stage orchestration: SFT cold start, pre-aligned RL, dynamic RL, evaluation.

Run directory layout::

    config.toml             raw config text, copied verbatim
    config.resolved.json    config after defaults and environment overrides
    manifest.json           hashes, checkpoint lineage, stage summaries
    metrics/<stage>.jsonl   one line per optimizer step
    rewards/pre.jsonl       per-rollout raw and aggregated rewards
    trace/dyn.jsonl         curriculum events
    checkpoints/<stage>.json
    eval/                   items, predictions, report and table
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .config import RunConfig, load_config, sha256_json
from .corpus import Corpus, ingest_corpus, principle_groups
from .evaluation import (DEFAULT_JUDGE_PROMPT, EvalItem, HttpJudgeClient, judge_all, report,
                         write_jsonl, write_report)
from .fixtures import CorpusSizes, eval_items, synthetic_corpus, synthetic_hierarchy, task_for_item
from .grpo import GrpoConfig, SftConfig, TrainingDiverged, train_sft, train_stage
from .knowledge_store import KnowledgeHierarchy, load_hierarchy
from .policy import (PolicyError, PolicyParams, ToyPolicy, load_checkpoint, sample,
                     save_checkpoint, target_tokens, task_for_problem)
from .rewards import RewardConfig
from .rng import derive_seed
from .scheduler import PolicyLearner, SchedulerConfig, run_curriculum

log = logging.getLogger(__name__)

STAGES = ("sft", "pre", "dyn", "eval")
TRAINING_STAGES = ("sft", "pre", "dyn")
LATTICE_NODES = 8


class PipelineError(RuntimeError):
    pass


class StageAbort(PipelineError):
    def __init__(self, stage: str, last_checkpoint: str | None, cause: BaseException):
        self.stage, self.last_checkpoint, self.cause = stage, last_checkpoint, cause
        super().__init__(f"stage {stage!r} aborted ({cause}); last checkpoint: "
                         f"{last_checkpoint or 'none'}")


@dataclass
class RunManifest:
    config_hash: str
    corpus_hash: str
    seed: int
    lineage: list[dict] = field(default_factory=list)
    stages: dict[str, dict] = field(default_factory=dict)
    evaluation: dict | None = None

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "corpus_hash": self.corpus_hash,
                "seed": self.seed, "lineage": self.lineage, "stages": self.stages,
                "evaluation": self.evaluation}

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")


def corpus_hash(corpus: Corpus) -> str:
    return sha256_json({
        "problems": [corpus.problems[k].to_dict() for k in sorted(corpus.problems)],
        "groups": [g.to_dict() for g in corpus.groups],
        "lattices": [lat.to_dict() for lat in corpus.lattices],
    })


class JsonlLog:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, row: dict) -> None:
        self.fh.write(json.dumps(row, sort_keys=True) + "\n")

    def extend(self, rows: Iterable[dict]) -> None:
        for r in rows:
            self(r)

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# inputs


def load_inputs(cfg: RunConfig) -> tuple[KnowledgeHierarchy, Corpus]:
    store = load_hierarchy(cfg.data.hierarchy) if cfg.data.hierarchy else synthetic_hierarchy()
    if cfg.data.corpus:
        corpus = ingest_corpus(cfg.data.corpus, store)
    else:
        sizes = CorpusSizes(standard=cfg.data.sft,
                            image_groups=cfg.data.pre // cfg.data.group_size,
                            group_size=cfg.data.group_size,
                            lattices=cfg.data.dyn // LATTICE_NODES,
                            question_groups=0)
        corpus = synthetic_corpus(store, sizes, derive_seed(cfg.seed, "corpus"))
    return store, corpus


def sft_problem_ids(corpus: Corpus, limit: int) -> list[str]:
    """Standard problems: seed coordinate, outside every group and lattice."""
    taken = corpus.lattice_problem_ids() | {m for g in corpus.groups for m in g.member_ids}
    ids = [pid for pid in sorted(corpus.problems)
           if pid not in taken and corpus.problems[pid].difficulty.is_seed]
    return ids[:limit]


def pre_groups(corpus: Corpus, limit: int) -> list[tuple[str, list[str]]]:
    out, n = [], 0
    for pid, members in principle_groups(corpus):
        if n + len(members) > limit:
            break
        out.append((pid, members))
        n += len(members)
    return out


def grpo_config(cfg: RunConfig) -> GrpoConfig:
    rl = cfg.rl
    return GrpoConfig(epsilon=rl.epsilon, beta=rl.beta, group_size=rl.group_size,
                      learning_rate=rl.lr, kl_estimator=rl.kl_estimator, optimizer=rl.optimizer,
                      temperature=rl.temperature, max_len=rl.max_len,
                      aggregation=rl.aggregation, groups_per_step=rl.groups_per_step)


def reward_config(cfg: RunConfig) -> RewardConfig:
    r = cfg.rl.reward
    return RewardConfig(r.correct, r.format, r.otherwise, r.mode)


def sft_config(cfg: RunConfig) -> SftConfig:
    s = cfg.sft
    return SftConfig(s.lr, s.epochs, s.warmup_ratio, s.batch_size, s.optimizer)


def scheduler_config(cfg: RunConfig) -> SchedulerConfig:
    d = cfg.dyn
    return SchedulerConfig(d.pass_threshold, d.max_reattempts, d.increment_steps,
                           d.increment_mode, d.max_increment_problems, d.node_steps,
                           d.lattice_batch)


# --------------------------------------------------------------------------
# stages


def run_sft(params: PolicyParams, corpus: Corpus, cfg: RunConfig, run_dir: Path) -> tuple:
    ids = sft_problem_ids(corpus, cfg.data.sft)
    if not ids:
        raise PipelineError("no standard problems for the SFT stage")
    tasks = [task_for_problem(corpus.problems[i]) for i in ids]
    pairs = [(t, target_tokens(t)) for t in tasks]
    with JsonlLog(run_dir / "metrics" / "sft.jsonl") as logf:
        rep = train_sft(params, pairs, sft_config(cfg), derive_seed(cfg.seed, "sft"), logf)
    return rep.params, {"problems": len(ids), **rep.summary()}


def run_pre(params: PolicyParams, corpus: Corpus, cfg: RunConfig, run_dir: Path) -> tuple:
    groups = pre_groups(corpus, cfg.data.pre)
    if not groups:
        raise PipelineError("no image-variant groups for the pre-aligned stage")
    task_groups = [(pid, [task_for_problem(corpus.problems[m]) for m in members])
                   for pid, members in groups]
    steps = cfg.rl.pre_steps or -(-len(groups) // cfg.rl.groups_per_step)
    trace: list | None = [] if cfg.rl.log_rewards else None
    with JsonlLog(run_dir / "metrics" / "pre.jsonl") as logf:
        rep = train_stage(task_groups, params, grpo_config(cfg), reward_config(cfg), steps,
                          derive_seed(cfg.seed, "pre"), params, cfg.rl.eval_samples,
                          reward_trace=trace, on_step=logf)
    if trace is not None:
        with JsonlLog(run_dir / "rewards" / "pre.jsonl") as rlog:
            rlog.extend(trace)
    return rep.params, {"groups": len(groups),
                        "problems": sum(len(m) for _, m in groups), **rep.summary()}


def run_dyn(params: PolicyParams, corpus: Corpus, cfg: RunConfig, run_dir: Path) -> tuple:
    lattices = list(corpus.lattices[: cfg.data.dyn // LATTICE_NODES])
    if not lattices:
        raise PipelineError("no lattices for the dynamic stage")
    with JsonlLog(run_dir / "metrics" / "dyn.jsonl") as logf:
        learner = PolicyLearner(params, corpus, grpo_config(cfg), reward_config(cfg),
                                ref=params, mode=cfg.dyn.increment_mode, sft=sft_config(cfg),
                                on_step=logf)
        trace = run_curriculum(lattices, learner, corpus, scheduler_config(cfg),
                               derive_seed(cfg.seed, "dyn"), cfg.rl.reward.correct)
    (run_dir / "trace").mkdir(exist_ok=True)
    trace.write_jsonl(run_dir / "trace" / "dyn.jsonl")
    statuses = [s for lat in trace.statuses().values() for s in lat.values()]
    summary = {
        "lattices": len(lattices),
        "events": len(trace.events),
        "increments": trace.increment_counts(),
        "statuses": {s: statuses.count(s) for s in ("passed", "unresolved", "pending")},
        "steps_trained": learner.steps_trained,
        "version": learner.params.version,
    }
    return learner.params, summary


def predict(params: PolicyParams, items: Sequence[EvalItem], max_len: int) -> list[EvalItem]:
    out = []
    for it in items:
        comp = sample(params, task_for_item(it), 1, max_len=max_len, greedy=True)[0]
        out.append(EvalItem(it.problem_id, it.reasoning_steps, it.domain, it.subdomain,
                            it.gold, comp.decoded_answer if comp.format_ok else "", it.question))
    return out


def run_eval(params: PolicyParams, store: KnowledgeHierarchy, cfg: RunConfig,
             run_dir: Path) -> dict:
    items = predict(params, eval_items(store, cfg.data.eval_items,
                                       derive_seed(cfg.seed, "eval")), cfg.rl.max_len)
    out = run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl((it.to_dict() for it in items), out / "items.jsonl")
    write_jsonl(({"problem_id": it.problem_id, "prediction": it.prediction} for it in items),
                out / "preds.jsonl")
    client = HttpJudgeClient(cfg.eval.judge_url) if cfg.eval.mode == "external" else None
    prompt = (Path(cfg.eval.prompt_template).read_text(encoding="utf-8")
              if cfg.eval.prompt_template else DEFAULT_JUDGE_PROMPT)
    rep = report(items, judge_all(items, cfg.eval.mode, client, prompt))
    write_report(rep, out)
    return rep.to_dict()


# --------------------------------------------------------------------------
# driver


def initial_params(cfg: RunConfig) -> PolicyParams:
    pol = ToyPolicy(hidden=cfg.policy.hidden, embed=cfg.policy.embed)
    return pol.init(derive_seed(cfg.seed, "policy"), cfg.policy.init_scale)


def run_pipeline(config_path: str | Path | None, skip: Sequence[str] = (),
                 init_checkpoint: str | Path | None = None, output_dir: str | Path | None = None,
                 environ=None, on_stage: Callable[[str], None] | None = None) -> RunManifest:
    """Run every non-skipped stage in order and write the run directory."""
    skip = set(skip)
    bad = skip - set(STAGES)
    if bad:
        raise PipelineError(f"unknown stage(s) to skip: {sorted(bad)}")
    if "sft" in skip and init_checkpoint is None:
        if "pre" not in skip:
            raise PipelineError("pre-aligned stage requires initial checkpoint")
        if "dyn" not in skip:
            raise PipelineError("dynamic stage requires initial checkpoint")

    cfg, raw = load_config(config_path, environ)
    run_dir = Path(output_dir if output_dir is not None else cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(raw, encoding="utf-8")
    resolved = cfg.to_dict()
    (run_dir / "config.resolved.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if json.loads((run_dir / "config.resolved.json").read_text(encoding="utf-8")) != resolved:
        raise PipelineError("resolved config read-back mismatch")

    store, corpus = load_inputs(cfg)
    manifest = RunManifest(cfg.hash(), corpus_hash(corpus), cfg.seed)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    if init_checkpoint is not None:
        params = load_checkpoint(init_checkpoint)
        last = str(init_checkpoint)
        manifest.lineage.append({"stage": "init", "checkpoint": last, "parent": None,
                                 "version": params.version})
    else:
        params = initial_params(cfg)
        last = None

    runners = {"sft": lambda p: run_sft(p, corpus, cfg, run_dir),
               "pre": lambda p: run_pre(p, corpus, cfg, run_dir),
               "dyn": lambda p: run_dyn(p, corpus, cfg, run_dir)}
    for stage in TRAINING_STAGES:
        if stage in skip:
            continue
        if on_stage:
            on_stage(stage)
        log.info("stage %s", stage)
        try:
            params, summary = runners[stage](params)
        except (TrainingDiverged, PolicyError, PipelineError, ValueError) as exc:
            manifest.write(run_dir / "manifest.json")
            raise StageAbort(stage, last, exc) from exc
        path = ckpt_dir / f"{stage}.json"
        save_checkpoint(params, path, stage=stage, parent=last)
        rel = str(path.relative_to(run_dir))
        manifest.lineage.append({"stage": stage, "checkpoint": rel, "parent": last,
                                 "version": params.version})
        manifest.stages[stage] = summary
        last = rel

    if "eval" not in skip and cfg.data.eval_items > 0:
        if on_stage:
            on_stage("eval")
        try:
            manifest.evaluation = run_eval(params, store, cfg, run_dir)
        except ValueError as exc:
            manifest.write(run_dir / "manifest.json")
            raise StageAbort("eval", last, exc) from exc
    manifest.write(run_dir / "manifest.json")
    return manifest


def run_single_stage(stage: str, config_path: str | Path | None, corpus_dir: str | Path | None,
                     seed: int | None, init_checkpoint: str | Path | None,
                     output_dir: str | Path | None = None, environ=None) -> RunManifest:
    """One training stage in isolation (the ``train`` CLI command)."""
    if stage not in TRAINING_STAGES:
        raise PipelineError(f"unknown stage {stage!r}")
    env = dict(environ) if environ is not None else None
    overrides = {}
    if corpus_dir is not None:
        overrides["MATHBOOK_DATA__CORPUS"] = json.dumps(str(corpus_dir))
    if seed is not None:
        overrides["MATHBOOK_SEED"] = str(seed)
    if overrides:
        env = {**(os.environ if env is None else env), **overrides}
    skip = [s for s in STAGES if s != stage]
    if stage != "sft" and init_checkpoint is None:
        raise PipelineError("pre-aligned stage requires initial checkpoint" if stage == "pre"
                            else "dynamic stage requires initial checkpoint")
    return run_pipeline(config_path, skip, init_checkpoint, output_dir, env)
