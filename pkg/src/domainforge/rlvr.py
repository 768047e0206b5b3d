"""Desk-scale simulator of RL with verifiable rewards under group-relative
policy optimization: tabular softmax policy, binary exact-match rewards,
group-normalized advantages, low-variance KL to a frozen reference.

Nothing here trains a neural network. The point is that the optimization
arithmetic (advantages, KL estimates, gradients) is exact and auditable,
and that the training dynamics reproduce the qualitative contrast between
a stable cold-started run and a length-collapsing run under a weak
verifier.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._util import derive_seed, stable_json_dumps
from .errors import NonFiniteGradient, TraceTooShort

STOP = "<stop>"
PAD = "<pad>"  # context padding only; never in the vocab
CONTEXT_LEN = 2


# --- task ---------------------------------------------------------------

def _normalize(text: str) -> str:
    return " ".join(text.casefold().split())


@dataclass(frozen=True)
class ToyTask:
    vocab: tuple[str, ...]
    prompts: tuple[tuple[tuple[str, ...], str], ...]  # (tokens, answer)
    max_len: int
    verifier: str = "exact"  # "exact" or "shortcut" (deliberately weak)
    val_prompts: tuple[tuple[tuple[str, ...], str], ...] | None = None

    def __post_init__(self):
        if STOP not in self.vocab:
            raise ValueError("vocab must contain the stop token")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab tokens must be distinct")
        vocab_set = set(self.vocab)
        for tokens, answer in self.prompts:
            missing = [t for t in tokens if t not in vocab_set]
            if missing:
                raise ValueError(f"prompt tokens outside vocab: {missing}")
            answer_toks = answer.split()
            if any(t not in vocab_set for t in answer_toks):
                raise ValueError(f"answer {answer!r} not expressible in vocab")
            if len(answer_toks) > self.max_len:
                raise ValueError(f"answer {answer!r} exceeds max_len")

    def validation_prompts(self):
        return self.val_prompts if self.val_prompts is not None else self.prompts


def save_task(task: ToyTask, path) -> None:
    record = {
        "vocab": list(task.vocab),
        "prompts": [{"tokens": list(t), "answer": a}
                    for t, a in task.prompts],
        "max_len": task.max_len,
        "verifier": task.verifier,
    }
    if task.val_prompts is not None:
        record["val_prompts"] = [{"tokens": list(t), "answer": a}
                                 for t, a in task.val_prompts]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(stable_json_dumps(record))
        fh.write("\n")


def load_task(path) -> ToyTask:
    with open(path, "r", encoding="utf-8") as fh:
        rec = json.load(fh)
    val = rec.get("val_prompts")
    return ToyTask(
        vocab=tuple(rec["vocab"]),
        prompts=tuple((tuple(p["tokens"]), p["answer"])
                      for p in rec["prompts"]),
        max_len=int(rec["max_len"]),
        verifier=rec.get("verifier", "exact"),
        val_prompts=None if val is None else tuple(
            (tuple(p["tokens"]), p["answer"]) for p in val),
    )


# --- rewards --------------------------------------------------------------

def verify_reward(response_tokens: Sequence[str], answer: str) -> int:
    """1 iff the whitespace-normalized, case-folded response equals the
    answer exactly. No partial credit."""
    return int(_normalize(" ".join(response_tokens)) == _normalize(answer))


def verify_reward_shortcut(response_tokens: Sequence[str], answer: str) -> int:
    """Deliberately weak verifier: also accepts the answer's first token
    alone, making a one-token response reward-equivalent to the full
    answer. Exists to demonstrate length collapse."""
    if verify_reward(response_tokens, answer):
        return 1
    first = _normalize(answer).split()[0] if answer.strip() else ""
    return int(_normalize(" ".join(response_tokens)) == first)


VERIFIERS: dict[str, Callable[[Sequence[str], str], int]] = {
    "exact": verify_reward,
    "shortcut": verify_reward_shortcut,
}


# --- policy -----------------------------------------------------------------

class Policy:
    """Tabular softmax policy over (last-2-token context) -> next token.

    Unvisited contexts have all-zero logits (uniform). Distributions are
    cached per context and invalidated on update.
    """

    def __init__(self, vocab: Sequence[str], temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.vocab = tuple(vocab)
        self.tok_idx = {t: i for i, t in enumerate(self.vocab)}
        self.temperature = temperature
        self.logits: dict[tuple[str, str], np.ndarray] = {}
        self._dist_cache: dict[tuple[str, str], np.ndarray] = {}

    def clone(self) -> "Policy":
        other = Policy(self.vocab, self.temperature)
        other.logits = {ctx: z.copy() for ctx, z in self.logits.items()}
        return other

    @staticmethod
    def context_of(history: Sequence[str]) -> tuple[str, str]:
        tail = tuple(history[-CONTEXT_LEN:])
        return (PAD,) * (CONTEXT_LEN - len(tail)) + tail

    def logits_for(self, ctx: tuple[str, str]) -> np.ndarray:
        z = self.logits.get(ctx)
        if z is None:
            z = np.zeros(len(self.vocab), dtype=np.float64)
            self.logits[ctx] = z
        return z

    def dist(self, ctx: tuple[str, str]) -> np.ndarray:
        cached = self._dist_cache.get(ctx)
        if cached is not None:
            return cached
        z = self.logits.get(ctx)
        if z is None:
            probs = np.full(len(self.vocab), 1.0 / len(self.vocab))
        else:
            scaled = z / self.temperature
            scaled = scaled - scaled.max()
            exp = np.exp(scaled)
            probs = exp / exp.sum()
        self._dist_cache[ctx] = probs
        return probs

    def invalidate(self) -> None:
        self._dist_cache.clear()

    def prob(self, ctx: tuple[str, str], token: str) -> float:
        return float(self.dist(ctx)[self.tok_idx[token]])

    def sample_token(self, ctx: tuple[str, str], rng: random.Random) -> str:
        cum = np.cumsum(self.dist(ctx))
        i = int(np.searchsorted(cum, rng.random(), side="right"))
        return self.vocab[min(i, len(self.vocab) - 1)]

    def rollout(self, prompt: Sequence[str], rng: random.Random,
                max_len: int) -> list[str]:
        """Sampled token sequence, including the terminating stop token
        when one was emitted (truncation at max_len omits it)."""
        history = list(prompt)
        sampled: list[str] = []
        # The stop token ends the response; max_len caps non-stop tokens.
        while True:
            tok = self.sample_token(self.context_of(history), rng)
            sampled.append(tok)
            if tok == STOP:
                break
            history.append(tok)
            if len(sampled) >= max_len:
                break
        return sampled

    def greedy(self, prompt: Sequence[str], max_len: int) -> list[str]:
        history = list(prompt)
        out: list[str] = []
        for _ in range(max_len):
            probs = self.dist(self.context_of(history))
            tok = self.vocab[int(np.argmax(probs))]
            if tok == STOP:
                break
            out.append(tok)
            history.append(tok)
        return out


def response_tokens(sampled: Sequence[str]) -> list[str]:
    """Sampled sequence minus the terminating stop token."""
    if sampled and sampled[-1] == STOP:
        return list(sampled[:-1])
    return list(sampled)


# --- initializations --------------------------------------------------------

def init_uniform(task: ToyTask, temperature: float = 1.0) -> Policy:
    return Policy(task.vocab, temperature)


def init_cold_start(task: ToyTask, bias: float = 3.5,
                    temperature: float = 1.0) -> Policy:
    """Bias the logits along each prompt's answer path (answer tokens then
    stop), modeling a supervised cold start that already prefers, without
    yet reliably producing, the verified answer."""
    policy = Policy(task.vocab, temperature)
    for prompt, answer in task.prompts:
        history = list(prompt)
        for tok in answer.split() + [STOP]:
            ctx = policy.context_of(history)
            # Assignment, not accumulation: contexts shared between answer
            # paths must not compound into a near-deterministic start.
            policy.logits_for(ctx)[policy.tok_idx[tok]] = bias
            history.append(tok)
    policy.invalidate()
    return policy


INITS = {
    "uniform": init_uniform,
    "cold_start_biased": init_cold_start,
}


# --- config ----------------------------------------------------------------

@dataclass(frozen=True)
class RlvrConfig:
    n_samples_per_prompt: int = 8
    kl_coefficient: float = 0.005
    learning_rate: float = 0.05
    batch_prompts: int = 16
    max_prompt_len: int = 64
    max_response_len: int = 32
    iterations: int = 300
    advantage_epsilon: float = 1e-8
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples_per_prompt < 2:
            raise ValueError("group statistics need n_samples_per_prompt >= 2")
        if self.max_prompt_len <= 0 or self.max_response_len <= 0:
            raise ValueError("length caps must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


# --- GRPO pieces --------------------------------------------------------

def sample_group(policy: Policy, prompt: Sequence[str], n: int, seed: int,
                 max_len: int = 32) -> list[list[str]]:
    """n independent seeded rollouts (deterministic in all arguments)."""
    if n < 2:
        raise ValueError("group size must be >= 2")
    out = []
    for i in range(n):
        rng = random.Random(derive_seed(seed, "rollout", i))
        out.append(policy.rollout(prompt, rng, max_len))
    return out


def grpo_advantages(rewards: Sequence[float],
                    eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + eps); exactly zero for all-equal
    rewards."""
    if len(rewards) < 2:
        raise ValueError("need at least 2 rewards")
    r = np.asarray(rewards, dtype=np.float64)
    centered = r - r.mean()
    return centered / (r.std() + eps)


def kl_low_var(policy: Policy, reference: Policy, prompt: Sequence[str],
               sampled: Sequence[str]) -> np.ndarray:
    """Per-token nonnegative estimator k = r - ln r - 1 with
    r = p_ref / p_policy, along one sampled sequence."""
    out = np.empty(len(sampled), dtype=np.float64)
    history = list(prompt)
    for t, tok in enumerate(sampled):
        ctx = Policy.context_of(history)
        r = reference.prob(ctx, tok) / policy.prob(ctx, tok)
        out[t] = max(r - math.log(r) - 1.0, 0.0)
        if tok != STOP:
            history.append(tok)
    return out


@dataclass
class GrpoGroup:
    prompt_ref: int
    prompt: tuple[str, ...]
    sampled: list[list[str]]  # includes terminating stop when emitted
    rewards: np.ndarray
    advantages: np.ndarray

    def __post_init__(self):
        if abs(float(self.advantages.mean())) > 1e-9:
            raise ValueError("advantages must be zero-mean")


def _iter_batch_tokens(groups: Sequence[GrpoGroup]):
    """Yield (ctx, token, advantage) for every sampled token in the batch."""
    for group in groups:
        for i, sampled in enumerate(group.sampled):
            adv = float(group.advantages[i])
            history = list(group.prompt)
            for tok in sampled:
                yield Policy.context_of(history), tok, adv
                if tok != STOP:
                    history.append(tok)


def grpo_objective(policy: Policy, reference: Policy,
                   groups: Sequence[GrpoGroup], beta: float) -> float:
    """Mean over all sampled tokens of advantage * ln p - beta * k."""
    total = 0.0
    count = 0
    for ctx, tok, adv in _iter_batch_tokens(groups):
        p = policy.prob(ctx, tok)
        r = reference.prob(ctx, tok) / p
        total += adv * math.log(p) - beta * (r - math.log(r) - 1.0)
        count += 1
    return total / count if count else 0.0


def grpo_gradient(policy: Policy, reference: Policy,
                  groups: Sequence[GrpoGroup], beta: float,
                  ) -> dict[tuple[str, str], np.ndarray]:
    """Exact gradient of grpo_objective with respect to every context's
    logit vector.

    Per token at context c with sampled index a:
        d/dz_j = (A - beta * (1 - r)) * (1[j=a] - p_j) / temperature
    averaged over all tokens in the batch.
    """
    grads: dict[tuple[str, str], np.ndarray] = {}
    count = 0
    for ctx, tok, adv in _iter_batch_tokens(groups):
        probs = policy.dist(ctx)
        a = policy.tok_idx[tok]
        r = reference.prob(ctx, tok) / float(probs[a])
        coeff = (adv - beta * (1.0 - r)) / policy.temperature
        g = grads.get(ctx)
        if g is None:
            g = np.zeros(len(policy.vocab), dtype=np.float64)
            grads[ctx] = g
        g -= coeff * probs
        g[a] += coeff
        count += 1
    for g in grads.values():
        g /= count
    return grads


def policy_update(policy: Policy, groups: Sequence[GrpoGroup],
                  config: RlvrConfig, reference: Policy,
                  ) -> dict[tuple[str, str], int]:
    """Ascend the objective, accumulating token gradients per context.

    Each context's logits move by learning_rate times the SUM of its
    tokens' gradient contributions (REINFORCE-style episode accumulation),
    not the batch-wide token mean. The sum is a positive diagonal
    rescaling of the objective gradient, so ascent directions and the
    zero-gradient fixed point are identical, but effective step sizes do
    not vanish as batches grow; with the plain-SGD desk defaults that is
    the difference between converging and crawling. Returns per-context
    token counts.
    """
    grads = grpo_gradient(policy, reference, groups, config.kl_coefficient)
    ctx_tokens: dict[tuple[str, str], int] = {}
    total = 0
    for ctx, _, _ in _iter_batch_tokens(groups):
        ctx_tokens[ctx] = ctx_tokens.get(ctx, 0) + 1
        total += 1
    for ctx, g in grads.items():
        scaled = g * total
        if not np.all(np.isfinite(scaled)):
            raise NonFiniteGradient(f"non-finite gradient at context {ctx}")
        z = policy.logits_for(ctx)
        z += config.learning_rate * scaled
    policy.invalidate()
    return ctx_tokens


# --- training loop ---------------------------------------------------------

@dataclass
class MetricsTrace:
    iterations: list[int] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    mean_length: list[float] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    mean_kl: list[float] = field(default_factory=list)

    def append(self, iteration: int, reward: float, length: float,
               ent: float, val: float, kl: float) -> None:
        self.iterations.append(iteration)
        self.mean_reward.append(reward)
        self.mean_length.append(length)
        self.entropy.append(ent)
        self.val_accuracy.append(val)
        self.mean_kl.append(kl)

    def to_csv(self) -> str:
        lines = ["iteration,mean_reward,mean_length,entropy,val_accuracy,"
                 "mean_kl"]
        for i in range(len(self.iterations)):
            lines.append(
                f"{self.iterations[i]},{self.mean_reward[i]:.10g},"
                f"{self.mean_length[i]:.10g},{self.entropy[i]:.10g},"
                f"{self.val_accuracy[i]:.10g},{self.mean_kl[i]:.10g}")
        return "\n".join(lines) + "\n"


def save_trace(trace: MetricsTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(trace.to_csv())


def _validation_accuracy(policy: Policy, task: ToyTask,
                         verifier: Callable, max_len: int) -> float:
    prompts = task.validation_prompts()
    correct = 0
    for prompt, answer in prompts:
        greedy = policy.greedy(prompt, max_len)
        correct += verifier(greedy, answer)
    return correct / len(prompts)


def train_rlvr(task: ToyTask, config: RlvrConfig = RlvrConfig(),
               init: str = "cold_start_biased") -> MetricsTrace:
    """sample -> verify -> normalize -> update, with per-iteration metrics.

    The reference policy for the KL term is the frozen initialization.
    Fully deterministic in (task, config, init).
    """
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}")
    for prompt, _ in task.prompts:
        if len(prompt) > config.max_prompt_len:
            raise ValueError("prompt exceeds max_prompt_len")
    verifier = VERIFIERS[task.verifier]
    policy = INITS[init](task, temperature=config.temperature)
    reference = policy.clone()
    trace = MetricsTrace()
    max_len = min(config.max_response_len, task.max_len)

    for it in range(config.iterations):
        batch_rng = random.Random(derive_seed(config.seed, "batch", it))
        indices = [batch_rng.randrange(len(task.prompts))
                   for _ in range(config.batch_prompts)]
        groups: list[GrpoGroup] = []
        for gi, pi in enumerate(indices):
            prompt, answer = task.prompts[pi]
            sampled = sample_group(
                policy, prompt, config.n_samples_per_prompt,
                derive_seed(config.seed, "group", it, gi), max_len)
            rewards = np.array(
                [verifier(response_tokens(s), answer) for s in sampled],
                dtype=np.float64)
            groups.append(GrpoGroup(
                prompt_ref=pi, prompt=tuple(prompt), sampled=sampled,
                rewards=rewards,
                advantages=grpo_advantages(rewards,
                                           config.advantage_epsilon)))

        n_resp = 0
        reward_sum = 0.0
        length_sum = 0.0
        ent_sum = 0.0
        kl_sum = 0.0
        tok_count = 0
        for group in groups:
            reward_sum += float(group.rewards.sum())
            n_resp += len(group.sampled)
            for sampled in group.sampled:
                length_sum += len(response_tokens(sampled))
            kls = [kl_low_var(policy, reference, group.prompt, s)
                   for s in group.sampled]
            kl_sum += float(sum(k.sum() for k in kls))
        for ctx, _, _ in _iter_batch_tokens(groups):
            probs = policy.dist(ctx)
            ent_sum += float(-(probs * np.log(probs)).sum())
            tok_count += 1

        policy_update(policy, groups, config, reference)
        val = _validation_accuracy(policy, task, verifier, max_len)
        trace.append(
            iteration=it,
            reward=reward_sum / n_resp,
            length=length_sum / n_resp,
            ent=ent_sum / tok_count if tok_count else 0.0,
            val=val,
            kl=kl_sum / tok_count if tok_count else 0.0,
        )
    return trace


def detect_collapse(trace: MetricsTrace, window: int = 20,
                    ratio_threshold: float = 0.25) -> bool:
    """True iff some rolling windowed mean response length falls below
    ratio_threshold times the initial windowed mean."""
    lengths = trace.mean_length
    if len(lengths) < window:
        raise TraceTooShort(
            f"trace has {len(lengths)} iterations, window is {window}")
    initial = sum(lengths[:window]) / window
    if initial == 0.0:
        return False
    for start in range(len(lengths) - window + 1):
        if sum(lengths[start:start + window]) / window < ratio_threshold * initial:
            return True
    return False


# --- demo task construction ------------------------------------------------

def make_demo_task(kind: str = "path", n_prompts: int = 4,
                   tail_len: int = 7, max_len: int = 32) -> ToyTask:
    """Deterministic toy tasks for the simulator.

    "path": each prompt q_i expects the answer "s_i t_1 ... t_tail", a
    prompt-specific head token then a shared tail, so the (last-2-token
    context -> next token) mapping is a consistent function and the exact
    answer is learnable to reward 1.

    "shortcut": same structure, but the task's verifier also accepts the
    head token alone, which makes one-token responses reward-dominant and
    drives length collapse under RL from a uniform initialization.
    """
    if kind not in ("path", "shortcut"):
        raise ValueError(f"unknown demo task kind {kind!r}")
    qs = [f"q{i}" for i in range(n_prompts)]
    heads = [f"s{i}" for i in range(n_prompts)]
    tail = [f"t{j}" for j in range(tail_len)]
    vocab = tuple([STOP] + qs + heads + tail)
    prompts = tuple(
        ((qs[i],), " ".join([heads[i]] + tail)) for i in range(n_prompts))
    return ToyTask(vocab=vocab, prompts=prompts, max_len=max_len,
                   verifier="exact" if kind == "path" else "shortcut")
