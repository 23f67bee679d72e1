"""Canonicality by conditioning: masked local model, weights, and estimators.

The global model is the base model conditioned on producing a canonical
string; it preserves relative probabilities but is only reachable through
rejection sampling or importance-weighted corrections.  The local model
masks and renormalizes each next-token distribution instead; it samples
cheaply and has the right support, at the cost of warping probabilities by
the product of per-step normalizers.  That product is exactly the importance
weight that undoes the warp, estimates the canonicality rate, and corrects
log-loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .canonical import CanonicalityOracle
from .lm import (
    EmptyCorpusError,
    NextDistribution,
    TokenLM,
    ancestral_sample,
    enumerate_distribution,
    sequence_log_prob,
)

LN2 = math.log(2.0)


class ZeroNormalizerError(ArithmeticError):
    """Every outcome at some step was masked or had zero base probability."""


class AttemptsExhaustedError(RuntimeError):
    pass


class AllZeroWeightsError(ValueError):
    pass


class MaxLenExceededError(RuntimeError):
    pass


class LocalModel(TokenLM):
    """Per-step masked and renormalized view of a base model.

    Assigns zero probability to every noncanonical string.  Masked
    conditionals are cached per (base context, last token) when the base
    model exposes bounded contexts.
    """

    def __init__(self, base: TokenLM, oracle: CanonicalityOracle):
        self.base = base
        self.oracle = oracle
        self.vocab = base.vocab
        self._cache: dict[tuple, tuple[NextDistribution, float]] = {}

    def context_key(self, prefix: Sequence[int]):
        base_key = self.base.context_key(prefix)
        if base_key is None:
            return None
        return (base_key, prefix[-1] if prefix else None)

    def masked_next(self, prefix: Sequence[int]) -> tuple[NextDistribution, float]:
        """Masked, renormalized next distribution and its pre-mask mass.

        The normalizer is the probability the base model gives to staying
        canonical at this step; it is the per-step factor of the importance
        weight.
        """
        key = self.context_key(prefix)
        if key is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        base_probs = self.base.next_distribution(prefix).probs
        mask = self.oracle.allowed_next(prefix)
        masked = np.where(mask, base_probs, 0.0)
        normalizer = float(masked.sum())
        if not normalizer > 0.0:
            raise ZeroNormalizerError("no canonical continuation has base probability")
        result = (NextDistribution(masked / normalizer), normalizer)
        if key is not None:
            self._cache[key] = result
        return result

    def next_distribution(self, prefix: Sequence[int]) -> NextDistribution:
        return self.masked_next(prefix)[0]


def local_next_distribution(
    local: LocalModel, prefix: Sequence[int]
) -> tuple[NextDistribution, float]:
    """Masked next-token distribution and the normalizer it divided by."""
    return local.masked_next(prefix)


@dataclass(frozen=True)
class WeightedSample:
    """A sampled token string with its accumulated importance weight.

    The log weight is the sum of the per-step normalizer logs; for a
    complete canonical sample, exp(log_weight) equals base(tokens) divided
    by local(tokens).
    """

    tokens: tuple[int, ...]
    log_weight: float
    step_normalizers: tuple[float, ...]
    truncated: bool = False

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


def sample_local(
    local: LocalModel,
    rng: np.random.Generator,
    max_len: int = 0,
    on_truncate: str = "flag",
) -> WeightedSample:
    """Ancestral sample from the local model, tracking per-step normalizers.

    Samples are canonical by construction.  Hitting ``max_len`` without end
    of string either flags the sample (default; estimators skip flagged
    samples) or, under ``force-eos``, ends the string there for diagnostics.
    """
    if on_truncate not in ("flag", "force-eos"):
        raise ValueError(f"unknown truncation policy {on_truncate!r}")
    tokens: list[int] = []
    normalizers: list[float] = []
    log_weight = 0.0
    while True:
        dist, normalizer = local.masked_next(tokens)
        normalizers.append(normalizer)
        log_weight += math.log(normalizer)
        outcome = int(np.searchsorted(np.cumsum(dist.probs), rng.random(), side="right"))
        outcome = min(outcome, len(dist.probs) - 1)
        if outcome == len(dist.probs) - 1:
            return WeightedSample(tuple(tokens), log_weight, tuple(normalizers))
        tokens.append(outcome)
        if max_len and len(tokens) >= max_len:
            if on_truncate == "force-eos":
                dist, normalizer = local.masked_next(tokens)
                normalizers.append(normalizer)
                log_weight += math.log(normalizer)
                return WeightedSample(tuple(tokens), log_weight, tuple(normalizers))
            return WeightedSample(tuple(tokens), log_weight, tuple(normalizers), truncated=True)


def sequence_log_weight(local: LocalModel, tokens: Sequence[int]) -> float:
    """Log importance weight of a given canonical string: sum of the log
    normalizers at each of its prefixes, including the full string."""
    total = 0.0
    for t in range(len(tokens) + 1):
        total += math.log(local.masked_next(tokens[:t])[1])
    return total


def local_sequence_log_prob(local: LocalModel, tokens: Sequence[int]) -> float:
    """Natural-log probability under the local model; -inf when noncanonical."""
    total = 0.0
    for t, token in enumerate(tokens):
        dist, _ = local.masked_next(tokens[:t])
        step = dist.log_prob_of(token)
        if step == -math.inf:
            return -math.inf
        total += step
    dist, _ = local.masked_next(tokens)
    return total + dist.log_prob_of(-1)


def rejection_sample(
    base: TokenLM,
    oracle: CanonicalityOracle,
    rng: np.random.Generator,
    max_attempts: int = 1000,
    max_len: int = 0,
) -> tuple[int, ...]:
    """Exact sampler for the conditioned (global) model.

    Draws from the base model and keeps the first canonical string;
    expected attempts scale as one over the canonicality rate.  Samples
    that hit the length cap count as rejected attempts.
    """
    for _ in range(max_attempts):
        tokens, truncated = ancestral_sample(base, rng, max_len=max_len)
        if not truncated and oracle.is_canonical(tokens):
            return tokens
    raise AttemptsExhaustedError(f"no canonical sample in {max_attempts} attempts")


def rejection_sample_many(
    base: TokenLM,
    oracle: CanonicalityOracle,
    rng: np.random.Generator,
    n: int,
    max_attempts: int = 1000,
    max_len: int = 0,
) -> tuple[list[tuple[int, ...]], int]:
    """Batch rejection sampling; also reports total attempts for rate logging."""
    samples: list[tuple[int, ...]] = []
    attempts = 0
    for _ in range(n):
        for used in range(1, max_attempts + 1):
            tokens, truncated = ancestral_sample(base, rng, max_len=max_len)
            if not truncated and oracle.is_canonical(tokens):
                samples.append(tokens)
                attempts += used
                break
        else:
            raise AttemptsExhaustedError(f"no canonical sample in {max_attempts} attempts")
    return samples, attempts


@dataclass(frozen=True)
class ZEstimate:
    """Importance-sampling estimate of the canonicality rate."""

    mean: float
    standard_error: float
    sample_count: int
    truncated: int = 0


def estimate_Z(
    local: LocalModel,
    rng: np.random.Generator,
    m: int,
    max_len: int = 0,
    on_truncate: str = "flag",
) -> ZEstimate:
    """Mean importance weight over ``m`` completed local samples.

    Unbiased for the canonicality rate.  Under the default policy,
    truncated samples are drawn again (and counted) rather than biasing
    the mean; ``force-eos`` keeps them with a forced ending instead.
    """
    if m < 2:
        raise ValueError("need at least 2 samples for a standard error")
    weights = np.empty(m, dtype=np.float64)
    truncated = 0
    for i in range(m):
        while True:
            sample = sample_local(local, rng, max_len=max_len, on_truncate=on_truncate)
            if not sample.truncated:
                break
            truncated += 1
            if truncated >= 100 * m:
                raise MaxLenExceededError(
                    f"{truncated} truncations while collecting {m} samples"
                )
        weights[i] = sample.weight
    mean = float(weights.mean())
    stderr = float(weights.std(ddof=1) / math.sqrt(m))
    return ZEstimate(mean, stderr, m, truncated)


def exact_Z(base: TokenLM, oracle: CanonicalityOracle, max_len: int) -> tuple[float, float]:
    """Canonicality rate by enumeration: total base probability of canonical
    strings up to ``max_len``, plus a bound on the canonical mass beyond it.

    Walks only canonical prefixes: canonical strings are prefix closed, so
    a noncanonical prefix can never grow back into a canonical string and
    its whole subtree contributes nothing to the rate.
    """
    z = 0.0
    truncation = 0.0
    frontier: list[tuple[tuple[int, ...], float]] = [((), 1.0)]
    for depth in range(max_len + 1):
        next_frontier: list[tuple[tuple[int, ...], float]] = []
        for prefix, mass in frontier:
            probs = base.next_distribution(prefix).probs
            z += float(mass * probs[-1])
            if depth == max_len:
                # canonical continuations whose completions we never visit
                allowed = oracle.allowed_next(prefix)
                truncation += float(mass * probs[:-1][allowed[:-1]].sum())
                continue
            for token in np.nonzero(probs[:-1])[0]:
                token = int(token)
                if oracle.extend_canonical(prefix, token):
                    next_frontier.append((prefix + (token,), mass * float(probs[token])))
        frontier = next_frontier
    return z, truncation


def importance_resample(
    samples: Sequence[WeightedSample], k: int, rng: np.random.Generator
) -> list[tuple[int, ...]]:
    """Multinomial resampling proportional to importance weights.

    Turns weighted local samples into approximate draws from the global
    model; the approximation sharpens as the pool grows.
    """
    log_w = np.array([s.log_weight for s in samples], dtype=np.float64)
    finite = log_w[np.isfinite(log_w)]
    if finite.size == 0:
        raise AllZeroWeightsError("all importance weights are zero")
    shifted = np.exp(log_w - finite.max())
    probs = shifted / shifted.sum()
    counts = rng.multinomial(k, probs)
    out: list[tuple[int, ...]] = []
    for sample, count in zip(samples, counts):
        out.extend([sample.tokens] * int(count))
    return out


@dataclass(frozen=True)
class LoglossReport:
    """Log-loss (bits per string) of the three evaluation methods."""

    baseline_bits: float
    local_bits: float
    global_bits: float
    strings_evaluated: int
    skipped_noncanonical: int


def logloss_eval(
    corpus: Sequence[Sequence[int]],
    base: TokenLM,
    local: LocalModel,
    z_estimate: ZEstimate,
) -> LoglossReport:
    """Corpus log-loss for the base model and both canonicalized corrections.

    The local correction adds the mean log weight of the corpus strings;
    the global correction adds the log canonicality-rate estimate.  Both
    corrections are nonpositive.  Noncanonical corpus entries are skipped
    (with a count) since neither corrected model can score them.
    """
    import warnings

    kept: list[Sequence[int]] = []
    skipped = 0
    for tokens in corpus:
        if local.oracle.is_canonical(tokens):
            kept.append(tokens)
        else:
            skipped += 1
    if skipped:
        warnings.warn(f"skipped {skipped} noncanonical corpus strings", stacklevel=2)
    if not kept:
        raise EmptyCorpusError("no canonical strings to evaluate")

    base_nats = np.array([sequence_log_prob(base, t) for t in kept])
    log_weights = np.array([sequence_log_weight(local, t) for t in kept])
    baseline_bits = float(-base_nats.mean() / LN2)
    local_bits = baseline_bits + float(log_weights.mean() / LN2)
    global_bits = baseline_bits + math.log2(z_estimate.mean)
    return LoglossReport(baseline_bits, local_bits, global_bits, len(kept), skipped)


def kl_enumeration(
    p_star: TokenLM,
    q_log_prob: "TokenLM | Callable[[Sequence[int]], float]",
    max_len: int,
) -> tuple[float, float]:
    """KL divergence in bits between an enumerable model and any scorable one.

    Sums p*(s) log2(p*(s)/q(s)) over all strings up to ``max_len`` and
    reports the unenumerated p* mass alongside.  A support violation
    (p* positive where q is zero) yields an infinite value, not an error.
    """
    if isinstance(q_log_prob, TokenLM):
        q_model = q_log_prob
        score = lambda tokens: sequence_log_prob(q_model, tokens)
    else:
        score = q_log_prob
    table, truncation_mass = enumerate_distribution(p_star, max_len)
    total = 0.0
    for tokens, p in table.items():
        if p <= 0.0:
            continue  # 0 log 0 = 0
        log_q = score(tokens)
        if log_q == -math.inf:
            return math.inf, truncation_mass
        total += p * (math.log(p) - log_q)
    return total / LN2, truncation_mass
