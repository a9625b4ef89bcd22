"""Group-relative policy optimization and the supervised cold start.

Loss conventions: the objective is averaged per token inside a trajectory
(1/|o_i|), then over the G trajectories of a group, then over the batches
(problems) of a step. The KL penalty sits inside the token sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .policy import (Completion, PolicyParams, SyntheticTask, backprop_logp, sample,
                     score_rows, sft_loss)
from .rewards import AGGREGATIONS, GroupRewards, RewardConfig, aggregate, score_all
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

KL_ESTIMATORS = ("k3", "exact_on_support")


class GrpoError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.04
    group_size: int = 8
    learning_rate: float = 1e-6
    advantage_epsilon: float = 1e-8
    kl_estimator: str = "k3"
    optimizer: str = "sgd"
    temperature: float = 1.0
    max_len: int = 1024
    aggregation: str = "rankwise"
    updates_per_batch: int = 1
    groups_per_step: int = 1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise GrpoError("epsilon must be > 0")
        if self.beta < 0:
            raise GrpoError("beta must be >= 0")
        if self.group_size < 2:
            raise GrpoError("group size G must be >= 2")
        if self.learning_rate <= 0:
            raise GrpoError("learning_rate must be > 0")
        if self.kl_estimator not in KL_ESTIMATORS:
            raise GrpoError(f"unknown KL estimator {self.kl_estimator!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise GrpoError(f"unknown optimizer {self.optimizer!r}")
        if self.aggregation not in AGGREGATIONS:
            raise GrpoError(f"unknown aggregation {self.aggregation!r}")


def advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + eps); exactly zero when all rewards are equal."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise GrpoError("advantages need a group of at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + eps)


def clipped_surrogate(ratio, adv, epsilon: float):
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A), elementwise."""
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv)


def kl_term(logp_current, logp_ref, estimator: str = "k3"):
    """Per-token KL penalty.

    ``k3``: rho - ln(rho) - 1 with rho = exp(logp_ref - logp_current), on the
    sampled token's log-probabilities. ``exact_on_support``: sum p ln(p/q)
    over the vocabulary; inputs are then full log-distributions (last axis V).
    """
    if estimator == "k3":
        d = np.asarray(logp_ref, dtype=float) - np.asarray(logp_current, dtype=float)
        return np.exp(d) - d - 1.0
    if estimator == "exact_on_support":
        lp = np.asarray(logp_current, dtype=float)
        lq = np.asarray(logp_ref, dtype=float)
        return (np.exp(lp) * (lp - lq)).sum(axis=-1)
    raise GrpoError(f"unknown KL estimator {estimator!r}")


@dataclass
class RolloutBatch:
    task: SyntheticTask
    completions: list[Completion]
    rewards: np.ndarray
    logprobs_old: list[np.ndarray]
    logprobs_ref: list[np.ndarray]

    def __post_init__(self):
        G = len(self.completions)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.rewards.shape != (G,) or len(self.logprobs_old) != G or len(self.logprobs_ref) != G:
            raise GrpoError("rollout batch shapes disagree")
        for c, lo, lr in zip(self.completions, self.logprobs_old, self.logprobs_ref):
            if not len(c.tokens) == len(lo) == len(lr):
                raise GrpoError("per-token log-probability length mismatch")


def build_batch(task: SyntheticTask, completions: list[Completion], rewards: np.ndarray,
                old: PolicyParams, ref: PolicyParams) -> RolloutBatch:
    """Freeze old/reference log-probabilities (temperature 1) for a rollout group."""
    feats = [task.prompt_features] * len(completions)
    toks = [c.tokens for c in completions]
    if all(c.temperature == 1.0 for c in completions):
        lp_old = [np.asarray(c.per_token_logprob) for c in completions]
    else:
        s = score_rows(old, feats, toks)
        lp_old = s.per_sequence(s.logp)
    if ref is old:
        lp_ref = lp_old
    else:
        s = score_rows(ref, feats, toks)
        lp_ref = s.per_sequence(s.logp)
    return RolloutBatch(task, completions, rewards, lp_old, lp_ref)


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    kl: float
    clip_fraction: float
    surrogate: float


def grpo_loss(params: PolicyParams, batches: RolloutBatch | Sequence[RolloutBatch],
              cfg: GrpoConfig, ref_params: PolicyParams | None = None) -> LossResult:
    """Negative GRPO objective and its gradient w.r.t. the current parameters."""
    if isinstance(batches, RolloutBatch):
        batches = [batches]
    if not batches:
        raise GrpoError("no rollout batches")
    if cfg.kl_estimator == "exact_on_support" and ref_params is None:
        raise GrpoError("exact_on_support KL needs the reference parameters")
    feats, toks, weights, adv_tok, old_tok, ref_tok = [], [], [], [], [], []
    B = len(batches)
    for b in batches:
        G = len(b.completions)
        A = advantages(b.rewards, cfg.advantage_epsilon)
        for i, c in enumerate(b.completions):
            n = len(c.tokens)
            feats.append(b.task.prompt_features)
            toks.append(c.tokens)
            weights.append(np.full(n, 1.0 / (n * G * B)))
            adv_tok.append(np.full(n, A[i]))
            old_tok.append(b.logprobs_old[i])
            ref_tok.append(b.logprobs_ref[i])
    w = np.concatenate(weights)
    adv = np.concatenate(adv_tok)
    lp_old = np.concatenate(old_tok)

    scored = score_rows(params, feats, toks)
    lp = scored.logp
    ratio = np.exp(lp - lp_old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        raise GrpoError(f"non-finite importance ratio at flattened token position {bad[0]}")
    sur = clipped_surrogate(ratio, adv, cfg.epsilon)
    clipped = ((adv > 0) & (ratio > 1 + cfg.epsilon)) | ((adv < 0) & (ratio < 1 - cfg.epsilon))
    dsur = np.where(clipped, 0.0, ratio * adv)

    dlogp_all = None
    if cfg.kl_estimator == "k3":
        lp_ref = np.concatenate(ref_tok)
        kl = kl_term(lp, lp_ref, "k3")
        dkl = 1.0 - np.exp(lp_ref - lp)
    else:
        ref_scored = score_rows(ref_params, feats, toks)
        lq = ref_scored.logp_all
        kl = kl_term(scored.logp_all, lq, "exact_on_support")
        dkl = np.zeros_like(lp)
        if cfg.beta:
            p = np.exp(scored.logp_all)
            dlogp_all = (cfg.beta * w)[:, None] * p * (scored.logp_all - lq + 1.0)

    objective = float((w * (sur - cfg.beta * kl)).sum())
    grad = backprop_logp(params, scored, -w * (dsur - cfg.beta * dkl), dlogp_all)
    mean_kl = float((w * kl).sum())
    return LossResult(-objective, grad, mean_kl, float(clipped.mean()), float((w * sur).sum()))


# --------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, kind: str = "sgd", beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise GrpoError(f"unknown optimizer {kind!r}")
        self.kind, self.beta1, self.beta2, self.eps = kind, beta1, beta2, eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.kind == "sgd":
            return theta - lr * grad
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------
# stages


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    loss: float
    kl: float
    clip_fraction: float
    grad_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingReport:
    params: PolicyParams
    initial: dict
    steps: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"steps": len(self.steps), "initial": self.initial, "final": self.final,
                "version": self.params.version}


def evaluate_mean_reward(params: PolicyParams, tasks: Sequence[SyntheticTask],
                         reward_cfg: RewardConfig = RewardConfig(), n_samples: int = 64,
                         seed: int = 0, temperature: float = 1.0, max_len: int = 1024) -> float:
    """Monte Carlo estimate of the expected raw reward over ``tasks``."""
    total = 0.0
    for task in tasks:
        comps = sample(params, task, n_samples, temperature, max_len,
                       derive_seed(seed, "eval", task.task_id))
        total += float(score_all(comps, task.correct_answer, reward_cfg).mean())
    return total / len(tasks)


def train_stage(groups: Sequence[tuple[str, Sequence[SyntheticTask]]], params: PolicyParams,
                cfg: GrpoConfig, reward_cfg: RewardConfig = RewardConfig(), steps: int = 1,
                seed: int = 0, ref_params: PolicyParams | None = None,
                eval_samples: int = 64, optimizer: Optimizer | None = None,
                reward_trace: list | None = None,
                on_step: Callable[[dict], None] | None = None) -> TrainingReport:
    """Sample, score, aggregate, normalize and update for ``steps`` iterations.

    ``groups`` are (principle id, tasks) pairs; step k trains on the next
    ``cfg.groups_per_step`` groups in round-robin order. With aggregation
    ``none`` each task's rollouts are normalized on their own.
    """
    if not groups:
        raise GrpoError("train_stage needs at least one task group")
    ref = params if ref_params is None else ref_params
    opt = optimizer or Optimizer(cfg.optimizer)
    all_tasks = [t for _, ts in groups for t in ts]
    initial = {}
    if eval_samples > 0:
        initial["mean_reward"] = evaluate_mean_reward(
            params, all_tasks, reward_cfg, eval_samples, derive_seed(seed, "eval-initial"),
            cfg.temperature, cfg.max_len)
    report = TrainingReport(params, initial)
    cursor = 0
    for step in range(steps):
        old = params
        batches, raw_rewards = [], []
        for _ in range(cfg.groups_per_step):
            pid, tasks = groups[cursor % len(groups)]
            cursor += 1
            comps = [sample(old, t, cfg.group_size, cfg.temperature, cfg.max_len,
                            derive_seed(seed, "rollout", step, t.task_id)) for t in tasks]
            raw = [score_all(c, t.correct_answer, reward_cfg) for c, t in zip(comps, tasks)]
            agg = aggregate(GroupRewards(pid, tuple(raw)), cfg.aggregation)
            for t, c, r, a in zip(tasks, comps, raw, agg):
                batches.append(build_batch(t, c, a, old, ref))
                raw_rewards.append(r)
                if reward_trace is not None:
                    reward_trace.extend(
                        {"step": step, "problem_id": t.task_id, "rollout_idx": i,
                         "raw": float(r[i]), "aggregated": float(a[i])} for i in range(len(r)))
        for _ in range(cfg.updates_per_batch):
            res = grpo_loss(params, batches, cfg, ref)
            if not (math.isfinite(res.loss) and np.all(np.isfinite(res.grad))):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            params = params.updated(opt.step(params.theta, res.grad, cfg.learning_rate))
        m = StepMetrics(step, float(np.mean(np.concatenate(raw_rewards))), res.loss, res.kl,
                        res.clip_fraction, float(np.linalg.norm(res.grad))).to_dict()
        report.steps.append(m)
        if on_step is not None:
            on_step(m)
    report.params = params
    if steps and eval_samples > 0:
        report.final = {"mean_reward": evaluate_mean_reward(
            params, all_tasks, reward_cfg, eval_samples, derive_seed(seed, "eval-final"),
            cfg.temperature, cfg.max_len)}
    elif not steps:
        report.final = dict(initial)
    return report


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 1e-5
    epochs: int = 1
    warmup_ratio: float = 0.1
    batch_size: int = 8
    optimizer: str = "adam"


def warmup_lr(base: float, step: int, total: int, warmup_ratio: float) -> float:
    """Linear warmup over the first ``warmup_ratio`` of steps, constant after."""
    warm = math.ceil(warmup_ratio * total)
    if warm <= 0 or step >= warm:
        return base
    return base * (step + 1) / warm


def train_sft(params: PolicyParams, pairs: Sequence[tuple[SyntheticTask, Sequence[int]]],
              cfg: SftConfig = SftConfig(), seed: int = 0,
              on_step: Callable[[dict], None] | None = None) -> TrainingReport:
    """Minibatch cold start on (task, demonstration) pairs."""
    if not pairs:
        raise GrpoError("SFT needs at least one pair")
    n = len(pairs)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    opt = Optimizer(cfg.optimizer)
    loss0, _ = sft_loss(params, pairs)
    report = TrainingReport(params, {"loss": loss0})
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(seed, "sft-shuffle", epoch).permutation(n)
        for k in range(per_epoch):
            batch = [pairs[i] for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            loss, grad = sft_loss(params, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite SFT loss at step {step}")
            lr = warmup_lr(cfg.learning_rate, step, total, cfg.warmup_ratio)
            params = params.updated(opt.step(params.theta, grad, lr))
            m = {"step": step, "epoch": epoch, "loss": loss, "lr": lr,
                 "grad_norm": float(np.linalg.norm(grad))}
            report.steps.append(m)
            if on_step is not None:
                on_step(m)
            step += 1
    report.params = params
    report.final = {"loss": sft_loss(params, pairs)[0]}
    return report

