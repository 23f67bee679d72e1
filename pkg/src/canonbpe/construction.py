"""Canonicality by construction: a trainable masked architecture at desk scale.

The base architecture is a tabular-logit autoregressive model (one logit
vector per bounded context); the canonicalized architecture masks and
renormalizes its per-step softmax, so every parameter setting yields a model
supported only on canonical strings.  Training minimizes a convex-per-context
log-loss blended with a KL anchor to the frozen starting model, by stochastic
gradient descent with analytic gradients.  All objectives here are reported
in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .canonical import CanonicalityOracle
from .lm import BOUNDARY, NextDistribution, NGramLM, TokenLM, sequence_log_prob

LN2 = math.log(2.0)

Theta = dict[tuple[int, ...], np.ndarray]


class InfiniteLossError(ArithmeticError):
    """A corpus string has probability zero; carries the offending index."""

    def __init__(self, index: int):
        super().__init__(f"corpus string {index} has zero probability")
        self.index = index


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


class TabularLogitLM(TokenLM):
    """Autoregressive model with one free logit vector per bounded context.

    Contexts are the last ``order - 1`` token ids, boundary-padded, exactly
    like the n-gram model; unset contexts read as zero logits (uniform).
    Parameters are mutable: this is the thing training updates in place.
    """

    def __init__(self, vocab, order: int, logits: Theta | None = None):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        self.vocab = vocab
        self.order = order
        self.logits: Theta = {} if logits is None else logits

    def context_key(self, prefix: Sequence[int]) -> tuple[int, ...]:
        need = self.order - 1
        tail = tuple(prefix[-need:]) if need else ()
        return (BOUNDARY,) * (need - len(tail)) + tail

    def logits_for(self, ctx: tuple[int, ...]) -> np.ndarray:
        row = self.logits.get(ctx)
        if row is None:
            row = np.zeros(self.n_outcomes, dtype=np.float64)
            self.logits[ctx] = row
        return row

    def next_distribution(self, prefix: Sequence[int]) -> NextDistribution:
        return NextDistribution(_softmax(self.logits_for(self.context_key(prefix))))

    def copy(self) -> "TabularLogitLM":
        return TabularLogitLM(
            self.vocab, self.order, {ctx: row.copy() for ctx, row in self.logits.items()}
        )

    @classmethod
    def from_ngram(cls, ngram: NGramLM) -> "TabularLogitLM":
        """Logit parameterization matching an n-gram model's conditionals
        exactly (log smoothed counts; softmax renormalizes them back)."""
        logits = {
            ctx: np.log(row + ngram.alpha) for ctx, row in ngram.counts.items()
        }
        return cls(ngram.vocab, ngram.order, logits)


class CanonicalizedArchitecture(TokenLM):
    """Masked wrapper: zero probability on noncanonical strings for every
    parameter setting.  Shares (and trains) the base model's logits."""

    def __init__(self, base: TabularLogitLM, oracle: CanonicalityOracle):
        self.base = base
        self.oracle = oracle
        self.vocab = base.vocab

    def context_key(self, prefix: Sequence[int]):
        return (self.base.context_key(prefix), prefix[-1] if prefix else None)

    def masked_next(self, prefix: Sequence[int]) -> tuple[NextDistribution, float]:
        probs = self.base.next_distribution(prefix).probs
        mask = self.oracle.allowed_next(prefix)
        masked = np.where(mask, probs, 0.0)
        normalizer = float(masked.sum())
        if not normalizer > 0.0:  # unreachable with finite logits; EOS stays allowed
            raise ArithmeticError("masked distribution lost all mass")
        return NextDistribution(masked / normalizer), normalizer

    def next_distribution(self, prefix: Sequence[int]) -> NextDistribution:
        return self.masked_next(prefix)[0]


def constrained_next_distribution(
    arch: CanonicalizedArchitecture, prefix: Sequence[int]
) -> tuple[NextDistribution, float]:
    """Masked next distribution and its pre-mask normalizer, differentiably
    tied to the underlying logits."""
    return arch.masked_next(prefix)


# -- objectives ---------------------------------------------------------------


def log_loss(model: TokenLM, corpus: Sequence[Sequence[int]]) -> float:
    """Average negative log2-probability per corpus string (bits/string)."""
    from .lm import EmptyCorpusError

    if len(corpus) == 0:
        raise EmptyCorpusError("empty evaluation corpus")
    total = 0.0
    for index, tokens in enumerate(corpus):
        lp = sequence_log_prob(model, tokens)
        if lp == -math.inf:
            raise InfiniteLossError(index)
        total += lp
    return -total / (len(corpus) * LN2)


def _steps_of(model: TokenLM, tokens: Sequence[int]):
    """Yield (context key, masked-or-plain step distribution, allowed mask,
    outcome index) for each factorization step of a string."""
    n_eos = model.n_outcomes - 1
    for t in range(len(tokens) + 1):
        prefix = tokens[:t]
        outcome = tokens[t] if t < len(tokens) else n_eos
        if isinstance(model, CanonicalizedArchitecture):
            ctx = model.base.context_key(prefix)
            dist, _ = model.masked_next(prefix)
            mask = model.oracle.allowed_next(prefix)
        else:
            ctx = model.context_key(prefix)
            dist = model.next_distribution(prefix)
            mask = None
        yield ctx, dist.probs, mask, outcome


def grad_log_loss(
    model: "CanonicalizedArchitecture | TabularLogitLM",
    corpus: Sequence[Sequence[int]],
) -> Theta:
    """Analytic gradient of ``log_loss`` with respect to the logits.

    Per step this is the usual softmax-minus-indicator rule, restricted to
    the unmasked outcomes; masked logits get exactly zero gradient because
    they do not enter the renormalized step distribution.
    """
    grad: Theta = {}
    n = model.n_outcomes
    for index, tokens in enumerate(corpus):
        for ctx, probs, mask, outcome in _steps_of(model, tokens):
            if probs[outcome] <= 0.0:
                raise InfiniteLossError(index)
            row = grad.get(ctx)
            if row is None:
                row = np.zeros(n, dtype=np.float64)
                grad[ctx] = row
            if mask is None:
                row += probs
            else:
                row[mask] += probs[mask]
            row[outcome] -= 1.0
    scale = 1.0 / (len(corpus) * LN2)
    for row in grad.values():
        row *= scale
    return grad


def _grad_norm(grad: Theta) -> float:
    return math.sqrt(sum(float(np.dot(row, row)) for row in grad.values()))


def kl_to_base(
    arch: CanonicalizedArchitecture,
    base_frozen: TokenLM,
    mode: str = "exact",
    rng: np.random.Generator | None = None,
    max_len: int = 10,
    n_samples: int = 1000,
) -> tuple[float, Theta]:
    """KL (bits) from the masked model to a frozen base, with its gradient.

    Exact mode enumerates the masked model to ``max_len`` and differentiates
    the truncated sum directly.  Sampled mode draws from the masked model
    and combines per-step exact KL terms (a Rao-Blackwellized value
    estimate) with a score-function term weighted by strictly-downstream KL
    sums; it agrees with exact mode in expectation.
    """
    if mode == "exact":
        return _kl_exact(arch, base_frozen, max_len)
    if mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        return _kl_sampled(arch, base_frozen, rng, max_len, n_samples)
    raise ValueError(f"unknown mode {mode!r}")


class _StepCache:
    """Per-call cache of masked/base step quantities.

    Within one objective evaluation the parameters are fixed, and every
    step quantity depends only on the two models' bounded contexts plus
    the last token (which drives the mask), so a handful of entries covers
    arbitrarily many enumerated or sampled strings.
    """

    def __init__(self, arch: CanonicalizedArchitecture, base_frozen: TokenLM):
        self.arch = arch
        self.base = base_frozen
        self._cache: dict = {}

    def at(self, prefix: Sequence[int]):
        key = (
            self.arch.base.context_key(prefix),
            self.base.context_key(prefix),
            prefix[-1] if prefix else None,
        )
        if key[1] is None:
            return self._compute(prefix)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._compute(prefix)
            self._cache[key] = hit
        return hit

    def _compute(self, prefix: Sequence[int]):
        ctx = self.arch.base.context_key(prefix)
        mask = self.arch.oracle.allowed_next(prefix)
        q = self.arch.masked_next(prefix)[0].probs
        p = self.base.next_distribution(prefix).probs
        live = q > 0.0
        log_ratio = np.zeros(len(q))
        log_ratio[live] = np.log(q[live]) - np.log(p[live])
        step_kl = float(np.dot(q[live], log_ratio[live]))
        return ctx, q, np.cumsum(q), log_ratio, mask, step_kl


def _kl_exact(
    arch: CanonicalizedArchitecture, base_frozen: TokenLM, max_len: int
) -> tuple[float, Theta]:
    from .lm import enumerate_distribution

    steps = _StepCache(arch, base_frozen)
    table, _ = enumerate_distribution(arch, max_len)
    value_nats = 0.0
    grad: Theta = {}
    n = arch.n_outcomes
    eos = n - 1
    for tokens, p_arch in table.items():
        if p_arch <= 0.0:
            continue
        log_ratio_total = 0.0
        for t in range(len(tokens) + 1):
            _, _, _, log_ratio, _, _ = steps.at(tokens[:t])
            log_ratio_total += float(log_ratio[tokens[t] if t < len(tokens) else eos])
        value_nats += p_arch * log_ratio_total
        # d/dtheta sum p ln(p/q) = sum p (ln(p/q) + 1) dln(p); the +1 term
        # survives because the enumeration is truncated (sum p < 1).
        coeff = p_arch * (log_ratio_total + 1.0)
        for t in range(len(tokens) + 1):
            ctx, q, _, _, mask, _ = steps.at(tokens[:t])
            outcome = tokens[t] if t < len(tokens) else eos
            row = grad.get(ctx)
            if row is None:
                row = np.zeros(n, dtype=np.float64)
                grad[ctx] = row
            row[mask] -= coeff * q[mask]
            row[outcome] += coeff
    for row in grad.values():
        row /= LN2
    return value_nats / LN2, grad


def _kl_sampled(
    arch: CanonicalizedArchitecture,
    base_frozen: TokenLM,
    rng: np.random.Generator,
    max_len: int,
    n_samples: int,
) -> tuple[float, Theta]:
    n = arch.n_outcomes
    eos = n - 1
    cache = _StepCache(arch, base_frozen)
    grad: Theta = {}
    total = 0.0
    for _ in range(n_samples):
        tokens: list[int] = []
        # one record per draw: (ctx, q, log ratio, mask, outcome, step KL nats)
        steps = []
        while True:
            ctx, q, cumulative, log_ratio, mask, step_kl = cache.at(tokens)
            outcome = min(int(np.searchsorted(cumulative, rng.random(), side="right")), eos)
            steps.append((ctx, q, log_ratio, mask, outcome, step_kl))
            if outcome == eos or (max_len and len(tokens) + 1 > max_len):
                break
            tokens.append(outcome)
        kls = np.array([s[5] for s in steps])
        total += float(kls.sum())
        # downstream[t] = sum of step KLs strictly after draw t
        downstream = np.concatenate([np.cumsum(kls[::-1])[::-1][1:], [0.0]])
        for (ctx, q, log_ratio, mask, outcome, step_kl), future in zip(steps, downstream):
            row = grad.get(ctx)
            if row is None:
                row = np.zeros(n, dtype=np.float64)
                grad[ctx] = row
            # pathwise gradient of the exact per-step KL
            row += q * (log_ratio - step_kl)
            # score-function term weighted by strictly-downstream KL
            row[mask] -= future * q[mask]
            row[outcome] += future
    scale = 1.0 / (n_samples * LN2)
    for row in grad.values():
        row *= scale
    return total * scale, grad


@dataclass(frozen=True)
class StepRecord:
    step: int
    term: str  # "logloss" or "kl"
    objective: float
    grad_norm: float


def finetune(
    arch: CanonicalizedArchitecture,
    corpus: Sequence[Sequence[int]],
    base_frozen: TokenLM,
    lam: float,
    steps: int,
    learning_rate: float,
    batch_size: int = 8,
    rng: np.random.Generator | None = None,
    kl_mode: str = "sampled",
    kl_samples: int = 32,
    kl_max_len: int = 10,
) -> list[StepRecord]:
    """Stochastic gradient descent on the blended fine-tuning objective.

    Each step flips a biased coin: with probability ``lam`` it takes a
    gradient step on the KL anchor to the frozen base, otherwise on the
    log-loss of a random minibatch.  Updates the architecture's logits in
    place and returns the per-step trace.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must be in [0, 1]")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if rng is None:
        raise ValueError("training needs an rng for reproducibility")
    trace: list[StepRecord] = []
    corpus = list(corpus)
    for step in range(steps):
        if rng.random() < lam:
            value, grad = kl_to_base(
                arch,
                base_frozen,
                mode=kl_mode,
                rng=rng,
                max_len=kl_max_len,
                n_samples=kl_samples,
            )
            term = "kl"
        else:
            if batch_size >= len(corpus):
                batch = corpus  # full-batch: plain gradient descent
            else:
                picks = rng.integers(0, len(corpus), size=batch_size)
                batch = [corpus[int(i)] for i in picks]
            value = log_loss(arch, batch)
            grad = grad_log_loss(arch, batch)
            term = "logloss"
        for ctx, row in grad.items():
            arch.base.logits_for(ctx)[:] -= learning_rate * row
        trace.append(StepRecord(step, term, value, _grad_norm(grad)))
    return trace


def finetune_objective(
    arch: CanonicalizedArchitecture,
    corpus: Sequence[Sequence[int]],
    base_frozen: TokenLM,
    lam: float,
    max_len: int = 10,
) -> float:
    """Exact full-batch value of the blended objective (bits), for traces."""
    value = (1.0 - lam) * log_loss(arch, corpus)
    if lam > 0.0:
        value += lam * kl_to_base(arch, base_frozen, mode="exact", max_len=max_len)[0]
    return value
