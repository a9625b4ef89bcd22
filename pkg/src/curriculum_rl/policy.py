"""Toy autoregressive policy and synthetic tasks.

The learner is a single-hidden-layer tanh network over a tiny vocabulary. At
each position it sees the task's prompt features, an embedding of the
previous token, a one-hot absolute position and a one-hot answer slot (how
many tokens have been written after the separator). Everything is float64
numpy with hand-written backprop, so every loss in the package can be
checked against finite differences.

A completion reads ``<thinking tokens> SEP <answer symbols> EOS``; the
decoded answer is the text between the first separator and EOS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import DifficultyCoordinate, Problem
from .rng import derive_seed, stream

MAX_STEPS = 10
ANSWER_SYMBOLS = "abcd"
CONTEXT_DIM = 8
VISUAL_NOISE = 0.35
DISTRACTOR_TOKENS = 6
BASE_STEPS = 1


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]
    sep: int | None = None
    eos: int | None = None

    @property
    def size(self) -> int:
        return len(self.symbols)

    def decode(self, tokens: Sequence[int]) -> tuple[str, bool]:
        """Return (decoded_answer, format_ok) for a token sequence."""
        toks = list(tokens)
        if self.eos is not None and toks and toks[-1] == self.eos:
            toks = toks[:-1]
        if self.sep is None:
            return "", False
        n_sep = toks.count(self.sep)
        if n_sep == 0:
            return "", False
        after = toks[toks.index(self.sep) + 1:]
        return "".join(self.symbols[t] for t in after), n_sep == 1

    def encode(self, text: str) -> list[int]:
        index = {s: i for i, s in enumerate(self.symbols)}
        try:
            return [index[ch] for ch in text]
        except KeyError as exc:
            raise PolicyError(f"symbol {exc.args[0]!r} not in vocabulary") from None


# a-d answer symbols, k a thinking token, | separator, $ end of sequence
DEFAULT_VOCAB = Vocabulary(tuple(ANSWER_SYMBOLS) + ("k", "|", "$"), sep=5, eos=6)
FEATURE_DIM = MAX_STEPS * len(ANSWER_SYMBOLS) + CONTEXT_DIM


@dataclass(frozen=True)
class ToyPolicy:
    """Architecture description; parameters live in :class:`PolicyParams`."""

    vocab: Vocabulary = DEFAULT_VOCAB
    feature_dim: int = FEATURE_DIM
    hidden: int = 32
    embed: int = 8
    max_pos: int = 8
    max_slots: int = MAX_STEPS + 2

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.embed + self.max_pos + self.max_slots

    def shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        V, H = self.vocab.size, self.hidden
        return (
            ("embedding", (V + 1, self.embed)),  # last row embeds BOS
            ("hidden_w", (H, self.input_dim)),
            ("hidden_b", (H,)),
            ("output_w", (V, H)),
            ("output_b", (V,)),
        )

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def init(self, seed: int, scale: float = 0.3) -> "PolicyParams":
        rng = stream(seed, "policy-init")
        parts = []
        for name, shape in self.shapes():
            if name.endswith("_b"):
                parts.append(np.zeros(int(np.prod(shape))))
            else:
                fan_in = shape[-1]
                parts.append(rng.normal(0.0, scale / np.sqrt(fan_in), size=int(np.prod(shape))))
        return PolicyParams(self, np.concatenate(parts))

    def zeros(self) -> "PolicyParams":
        return PolicyParams(self, np.zeros(self.n_params))

    def to_dict(self) -> dict:
        return {"symbols": list(self.vocab.symbols), "sep": self.vocab.sep, "eos": self.vocab.eos,
                "feature_dim": self.feature_dim, "hidden": self.hidden, "embed": self.embed,
                "max_pos": self.max_pos, "max_slots": self.max_slots}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyPolicy":
        vocab = Vocabulary(tuple(d["symbols"]), d.get("sep"), d.get("eos"))
        return cls(vocab, d["feature_dim"], d["hidden"], d["embed"], d["max_pos"], d["max_slots"])


@dataclass(frozen=True)
class PolicyParams:
    """Immutable parameter snapshot: flat vector, named slices, version counter."""

    policy: ToyPolicy
    theta: np.ndarray
    version: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.policy.n_params,):
            raise PolicyError(f"theta has shape {theta.shape}, expected ({self.policy.n_params},)")
        if not np.all(np.isfinite(theta)):
            raise PolicyError("non-finite parameter entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def slices(self) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.policy.shapes():
            n = int(np.prod(shape))
            out[name] = self.theta[i:i + n].reshape(shape)
            i += n
        return out

    def updated(self, new_theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.policy, new_theta, self.version + 1)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        """Same version, different values (finite-difference probes)."""
        return PolicyParams(self.policy, theta, self.version)


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    prompt_features: np.ndarray
    correct_answer: str
    coordinate: DifficultyCoordinate
    required_steps: int


@dataclass(frozen=True)
class Completion:
    tokens: tuple[int, ...]
    per_token_logprob: np.ndarray
    decoded_answer: str
    format_ok: bool
    temperature: float = 1.0

    def text(self, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
        return "".join(vocab.symbols[t] for t in self.tokens)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class _Rows:
    """Flattened positions of several sequences."""

    static: np.ndarray  # (N, D+P+S) prompt features, position and slot one-hots
    prev: np.ndarray    # (N,) previous-token index (V == BOS)
    target: np.ndarray  # (N,) emitted token
    owner: np.ndarray   # (N,) sequence index
    lengths: list[int] = field(default_factory=list)


def _context(policy: ToyPolicy, t: int, sep_seen: bool, after_sep: int) -> tuple[int, int]:
    pos = min(t, policy.max_pos - 1)
    slot = 0 if not sep_seen else min(1 + after_sep, policy.max_slots - 1)
    return pos, slot


def _rows(policy: ToyPolicy, features: Sequence[np.ndarray],
          token_seqs: Sequence[Sequence[int]]) -> _Rows:
    V = policy.vocab.size
    D, P, S = policy.feature_dim, policy.max_pos, policy.max_slots
    lengths = [len(t) for t in token_seqs]
    N = sum(lengths)
    static = np.zeros((N, D + P + S))
    prev = np.empty(N, dtype=np.int64)
    target = np.empty(N, dtype=np.int64)
    owner = np.empty(N, dtype=np.int64)
    r = 0
    for i, (f, toks) in enumerate(zip(features, token_seqs)):
        sep_seen, after = False, 0
        p = V
        for t, tok in enumerate(toks):
            if not 0 <= tok < V:
                raise PolicyError(f"unknown token {tok}")
            pos, slot = _context(policy, t, sep_seen, after)
            static[r, :D] = f
            static[r, D + pos] = 1.0
            static[r, D + P + slot] = 1.0
            prev[r], target[r], owner[r] = p, tok, i
            if sep_seen:
                after += 1
            elif tok == policy.vocab.sep:
                sep_seen = True
            p = tok
            r += 1
    return _Rows(static, prev, target, owner, lengths)


def _forward(params: PolicyParams, rows_static: np.ndarray, prev: np.ndarray):
    w = params.slices()
    D = params.policy.feature_dim
    x = np.concatenate([rows_static[:, :D], w["embedding"][prev], rows_static[:, D:]], axis=1)
    h = np.tanh(x @ w["hidden_w"].T + w["hidden_b"])
    logits = h @ w["output_w"].T + w["output_b"]
    return x, h, logits


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _backward(params: PolicyParams, x: np.ndarray, h: np.ndarray, prev: np.ndarray,
              dlogits: np.ndarray) -> np.ndarray:
    """Gradient of a scalar w.r.t. theta given its gradient w.r.t. logits."""
    pol = params.policy
    w = params.slices()
    D, E = pol.feature_dim, pol.embed
    g_out_w = dlogits.T @ h
    g_out_b = dlogits.sum(axis=0)
    dpre = (dlogits @ w["output_w"]) * (1.0 - h * h)
    g_hid_w = dpre.T @ x
    g_hid_b = dpre.sum(axis=0)
    dx_emb = dpre @ w["hidden_w"][:, D:D + E]
    g_emb = np.zeros_like(w["embedding"])
    np.add.at(g_emb, prev, dx_emb)
    grads = {"embedding": g_emb, "hidden_w": g_hid_w, "hidden_b": g_hid_b,
             "output_w": g_out_w, "output_b": g_out_b}
    return np.concatenate([grads[name].ravel() for name, _ in pol.shapes()])


@dataclass
class ScoredRows:
    """Forward pass over flattened completion tokens, kept for backprop."""

    rows: _Rows
    x: np.ndarray
    h: np.ndarray
    logp_all: np.ndarray  # (N, V)
    logp: np.ndarray      # (N,) log-prob of emitted token

    def per_sequence(self, values: np.ndarray) -> list[np.ndarray]:
        return np.split(values, np.cumsum(self.rows.lengths)[:-1])


def score_rows(params: PolicyParams, features: Sequence[np.ndarray],
               token_seqs: Sequence[Sequence[int]], temperature: float = 1.0) -> ScoredRows:
    rows = _rows(params.policy, features, token_seqs)
    x, h, logits = _forward(params, rows.static, rows.prev)
    if not np.all(np.isfinite(logits)):
        raise PolicyError("non-finite logits")
    logp_all = log_softmax(logits / temperature)
    logp = logp_all[np.arange(len(rows.target)), rows.target]
    return ScoredRows(rows, x, h, logp_all, logp)


def backprop_logp(params: PolicyParams, scored: ScoredRows, dlogp: np.ndarray,
                  dlogp_all: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``sum(dlogp * logp) + sum(dlogp_all * logp_all)`` w.r.t. theta.

    Temperature 1 is assumed (losses are always taken under the raw policy).
    """
    probs = np.exp(scored.logp_all)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(scored.rows.target)), scored.rows.target] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    if dlogp_all is not None:
        dlogits += dlogp_all - probs * dlogp_all.sum(axis=1, keepdims=True)
    return _backward(params, scored.x, scored.h, scored.rows.prev, dlogits)


# --------------------------------------------------------------------------
# public operations


def sample(params: PolicyParams, task: SyntheticTask, G: int = 8, temperature: float = 1.0,
           max_len: int = 1024, seed: int = 0, greedy: bool = False) -> list[Completion]:
    """Draw G completions; deterministic in ``seed``.

    Stored log-probabilities are under softmax(logits / temperature), the
    distribution actually sampled from (temperature 1 for greedy decoding).
    """
    if G < 1:
        raise PolicyError("G must be >= 1")
    if temperature <= 0:
        raise PolicyError("temperature must be > 0")
    if max_len < 1:
        raise PolicyError("max_len must be >= 1")
    pol = params.policy
    V = pol.vocab.size
    D, P = pol.feature_dim, pol.max_pos
    rng = np.random.default_rng(seed)
    temp = 1.0 if greedy else temperature

    tokens: list[list[int]] = [[] for _ in range(G)]
    logps: list[list[float]] = [[] for _ in range(G)]
    prev = np.full(G, V, dtype=np.int64)
    sep_seen = np.zeros(G, dtype=bool)
    after = np.zeros(G, dtype=np.int64)
    alive = np.ones(G, dtype=bool)
    static = np.zeros((G, D + P + pol.max_slots))
    static[:, :D] = task.prompt_features
    for t in range(max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        static[:, D:] = 0.0
        pos = min(t, P - 1)
        slot = np.where(sep_seen, np.minimum(1 + after, pol.max_slots - 1), 0)
        static[:, D + pos] = 1.0
        static[np.arange(G), D + P + slot] = 1.0
        _, _, logits = _forward(params, static[idx], prev[idx])
        if not np.all(np.isfinite(logits)):
            raise PolicyError(f"non-finite logits at position {t}")
        lp = log_softmax(logits / temp)
        u = rng.random(idx.size)
        if greedy:
            choice = lp.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(lp), axis=1)
            choice = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), V - 1)
        for j, g in enumerate(idx):
            tok = int(choice[j])
            tokens[g].append(tok)
            logps[g].append(float(lp[j, tok]))
            if sep_seen[g]:
                after[g] += 1
            elif tok == pol.vocab.sep:
                sep_seen[g] = True
            prev[g] = tok
            if tok == pol.vocab.eos:
                alive[g] = False
    out = []
    for g in range(G):
        ans, ok = pol.vocab.decode(tokens[g])
        out.append(Completion(tuple(tokens[g]), np.array(logps[g]), ans, ok, temp))
    return out


def logprob(params: PolicyParams, task: SyntheticTask, completion: Completion,
            temperature: float | None = None) -> np.ndarray:
    """Per-token log-probabilities of ``completion`` under ``params``."""
    temp = completion.temperature if temperature is None else temperature
    return score_rows(params, [task.prompt_features], [completion.tokens], temp).logp


def token_distribution(params: PolicyParams, task: SyntheticTask,
                       completion: Completion) -> np.ndarray:
    """Full next-token probabilities at every position, shape (T, V)."""
    return np.exp(score_rows(params, [task.prompt_features], [completion.tokens]).logp_all)


def sft_loss(params: PolicyParams, pairs: Sequence[tuple[SyntheticTask, Sequence[int]]]
             ) -> tuple[float, np.ndarray]:
    """Mean over pairs of the mean per-token negative log-likelihood, and its gradient."""
    if not pairs:
        raise PolicyError("sft_loss needs at least one (task, target) pair")
    targets = [list(t.tokens) if isinstance(t, Completion) else list(t) for _, t in pairs]
    if any(len(t) == 0 for t in targets):
        raise PolicyError("empty target completion")
    scored = score_rows(params, [task.prompt_features for task, _ in pairs], targets)
    weights = np.concatenate([np.full(n, 1.0 / (n * len(pairs))) for n in scored.rows.lengths])
    loss = float(-(weights * scored.logp).sum())
    grad = backprop_logp(params, scored, -weights)
    return loss, grad


def target_tokens(task: SyntheticTask, vocab: Vocabulary = DEFAULT_VOCAB,
                  think: int | None = None) -> list[int]:
    """Well-formed demonstration: one thinking token per step, separator, answer, EOS."""
    n_think = task.required_steps if think is None else think
    k = vocab.symbols.index("k") if "k" in vocab.symbols else 0
    return [k] * n_think + [vocab.sep] + vocab.encode(task.correct_answer) + [vocab.eos]


# --------------------------------------------------------------------------
# synthetic tasks


def _features(answer_idx: Sequence[int], coordinate: DifficultyCoordinate,
              rng: np.random.Generator) -> np.ndarray:
    A = len(ANSWER_SYMBOLS)
    f = np.zeros(FEATURE_DIM)
    for j, a in enumerate(answer_idx):
        f[j * A + a] = 1.0
    if coordinate.v:
        f[: MAX_STEPS * A] += rng.normal(0.0, VISUAL_NOISE, size=MAX_STEPS * A)
    if coordinate.c:
        bag = rng.integers(0, CONTEXT_DIM, size=DISTRACTOR_TOKENS)
        f[MAX_STEPS * A:] = np.bincount(bag, minlength=CONTEXT_DIM) / DISTRACTOR_TOKENS
    return f


def required_steps_for(coordinate: DifficultyCoordinate, base: int = BASE_STEPS) -> int:
    steps = base + coordinate.s
    if not 1 <= steps <= MAX_STEPS:
        raise PolicyError(f"{steps} required steps outside [1,{MAX_STEPS}]")
    return steps


def generate_tasks(coordinate: DifficultyCoordinate, count: int, seed: int,
                   base_steps: int = BASE_STEPS) -> list[SyntheticTask]:
    """Synthetic tasks whose difficulty follows the lattice axes.

    The step rank adds one answer symbol (one decision) per rank; the visual
    axis blurs the prompt features with Gaussian noise; the contextual axis
    fills the context block with a bag of distractor tokens.
    """
    if count < 1:
        raise PolicyError("count must be >= 1")
    steps = required_steps_for(coordinate, base_steps)
    rng = stream(seed, "tasks", coordinate.s, coordinate.v, coordinate.c, base_steps)
    tasks = []
    for i in range(count):
        answer_idx = rng.integers(0, len(ANSWER_SYMBOLS), size=steps)
        answer = "".join(ANSWER_SYMBOLS[a] for a in answer_idx)
        tasks.append(SyntheticTask(f"syn-{seed}-{coordinate.key}{coordinate.s}-{i}",
                                   _features(answer_idx, coordinate, rng),
                                   answer, coordinate, steps))
    return tasks


def task_for_problem(problem: Problem, steps: int | None = None) -> SyntheticTask:
    """Deterministic toy stand-in for a corpus problem.

    The toy answer is a function of the problem's seed and gold answer, so
    image variants with different answers become different toy targets.
    """
    coord = problem.difficulty
    n = required_steps_for(coord) if steps is None else steps
    rng = np.random.default_rng(derive_seed(0, "answer", problem.seed_id, problem.answer))
    answer_idx = rng.integers(0, len(ANSWER_SYMBOLS), size=n)
    noise_rng = np.random.default_rng(derive_seed(0, "features", problem.id))
    answer = "".join(ANSWER_SYMBOLS[a] for a in answer_idx)
    return SyntheticTask(problem.id, _features(answer_idx, coord, noise_rng), answer, coord, n)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: PolicyParams, path: str | Path, **meta) -> None:
    obj = {
        "architecture": params.policy.to_dict(),
        "version": params.version,
        "slices": {name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                   for name, arr in params.slices().items()},
        "meta": meta,
    }
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_checkpoint(path: str | Path) -> PolicyParams:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    pol = ToyPolicy.from_dict(obj["architecture"])
    theta = np.concatenate([np.asarray(obj["slices"][name]["values"], dtype=float)
                            for name, _ in pol.shapes()])
    return PolicyParams(pol, theta, int(obj["version"]))
