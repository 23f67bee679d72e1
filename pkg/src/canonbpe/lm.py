"""Autoregressive token-level language models and exact enumeration utilities.

A model is anything that maps a token prefix to a distribution over the
token inventory plus an end-of-string event (an outcome, never a vocabulary
item).  The concrete model here is an additively smoothed n-gram; smoothing
keeps every conditional strictly positive, which the masking layers rely on.
Probabilities accumulate in natural-log space; bits appear only at reporting
boundaries.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from typing import Iterable, Sequence

import numpy as np

from .bpe import Vocabulary

BOUNDARY = -1  # left-padding symbol for n-gram contexts; never emitted
LOG_REPORT_FLOOR = -745.0  # below double underflow; reporting only, math keeps -inf

_SUM_TOLERANCE = 1e-12


class EmptyCorpusError(ValueError):
    pass


class InvalidOrderError(ValueError):
    pass


class EnumerationTooLargeError(RuntimeError):
    pass


def format_log(value: float) -> str:
    """Render a natural-log quantity for reports; finite values floor at -745."""
    if value == -math.inf:
        return "-inf"
    return repr(max(value, LOG_REPORT_FLOOR))


class NextDistribution:
    """Probabilities over the token inventory plus end of string (last slot)."""

    __slots__ = ("probs",)

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1:
            raise ValueError("expected a 1-d probability vector")
        if np.any(probs < 0.0):
            raise ValueError("negative probability")
        total = float(probs.sum())
        if abs(total - 1.0) > _SUM_TOLERANCE:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        self.probs = probs

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> "NextDistribution":
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if not total > 0.0:
            raise ValueError("weights sum to zero")
        return cls(weights / total)

    @property
    def eos_prob(self) -> float:
        return float(self.probs[-1])

    @property
    def token_probs(self) -> np.ndarray:
        return self.probs[:-1]

    def log_prob_of(self, outcome: int) -> float:
        """Natural log of one outcome (token id, or -1 for end of string)."""
        p = float(self.probs[outcome])
        return math.log(p) if p > 0.0 else -math.inf

    def __len__(self) -> int:
        return len(self.probs)


class TokenLM(ABC):
    """Prefix-conditional distribution over tokens and end of string.

    Implementations must be deterministic: the same prefix always yields
    the same distribution.
    """

    vocab: Vocabulary

    @abstractmethod
    def next_distribution(self, prefix: Sequence[int]) -> NextDistribution: ...

    @property
    def n_outcomes(self) -> int:
        return len(self.vocab) + 1

    def context_key(self, prefix: Sequence[int]):
        """Hashable summary of the prefix the distribution depends on.

        Returns None when the model cannot promise a bounded context; the
        masking/caching layers then skip their per-context caches.
        """
        return None


class NGramLM(TokenLM):
    """Additively smoothed n-gram model over tokens and end of string.

    Counts live in dense per-context vectors; contexts are the last
    ``order - 1`` ids, left-padded with a reserved boundary symbol.  The
    smoothing constant keeps every outcome strictly positive in every
    context.
    """

    def __init__(self, vocab: Vocabulary, order: int, alpha: float):
        if order < 1:
            raise InvalidOrderError(f"order must be >= 1, got {order}")
        if not alpha > 0.0:
            raise ValueError(f"smoothing constant must be positive, got {alpha}")
        self.vocab = vocab
        self.order = order
        self.alpha = float(alpha)
        self.counts: dict[tuple[int, ...], np.ndarray] = {}
        self._dist_cache: dict[tuple[int, ...], NextDistribution] = {}

    def context_key(self, prefix: Sequence[int]) -> tuple[int, ...]:
        need = self.order - 1
        tail = tuple(prefix[-need:]) if need else ()
        return (BOUNDARY,) * (need - len(tail)) + tail

    def observe(self, tokens: Sequence[int]) -> None:
        """Tally one token string, including its end-of-string event."""
        self._dist_cache.clear()
        n = self.n_outcomes
        for t in range(len(tokens) + 1):
            ctx = self.context_key(tokens[:t])
            row = self.counts.get(ctx)
            if row is None:
                row = np.zeros(n, dtype=np.float64)
                self.counts[ctx] = row
            outcome = tokens[t] if t < len(tokens) else -1
            row[outcome] += 1.0

    def next_distribution(self, prefix: Sequence[int]) -> NextDistribution:
        ctx = self.context_key(prefix)
        dist = self._dist_cache.get(ctx)
        if dist is None:
            row = self.counts.get(ctx)
            n = self.n_outcomes
            if row is None:
                dist = NextDistribution(np.full(n, 1.0 / n))
            else:
                dist = NextDistribution.from_weights(row + self.alpha)
            self._dist_cache[ctx] = dist
        return dist

    # -- serialization: versioned text format ---------------------------------

    FORMAT_TAG = "canonbpe-ngram v1"

    def to_text(self) -> str:
        lines = [
            self.FORMAT_TAG,
            f"order={self.order} alpha={self.alpha!r} vocab={self.vocab.content_hash()}",
        ]
        for ctx in sorted(self.counts):
            row = self.counts[ctx]
            ctx_text = ",".join(str(c) for c in ctx) if ctx else "-"
            cells = [f"{i}:{row[i]:.0f}" for i in np.nonzero(row)[0]]
            lines.append(f"{ctx_text} {' '.join(cells)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, vocab: Vocabulary) -> "NGramLM":
        lines = text.splitlines()
        if not lines or lines[0] != cls.FORMAT_TAG:
            raise ValueError("not a recognized model file (bad or missing header)")
        header = dict(item.split("=", 1) for item in lines[1].split())
        if header["vocab"] != vocab.content_hash():
            raise ValueError("model was trained against a different vocabulary")
        model = cls(vocab, int(header["order"]), float(header["alpha"]))
        n = model.n_outcomes
        for line in lines[2:]:
            if not line.strip():
                continue
            ctx_text, _, cells = line.partition(" ")
            ctx = () if ctx_text == "-" else tuple(int(c) for c in ctx_text.split(","))
            row = np.zeros(n, dtype=np.float64)
            for cell in cells.split():
                idx, _, count = cell.partition(":")
                row[int(idx)] = float(count)
            model.counts[ctx] = row
        return model


class LengthCappedLM(TokenLM):
    """A model conditioned to end by a fixed length: end of string gets all
    mass once the cap is reached, shorter prefixes pass through untouched.

    Gives any model a finite support, which makes enumeration exhaustive
    rather than truncated; the identity tests use this to instantiate a
    "true" distribution whose mass an oracle can account for exactly.
    """

    def __init__(self, inner: TokenLM, cap: int):
        if cap < 0:
            raise ValueError("cap must be nonnegative")
        self.inner = inner
        self.cap = cap
        self.vocab = inner.vocab

    def context_key(self, prefix: Sequence[int]):
        inner_key = self.inner.context_key(prefix)
        if inner_key is None:
            return None
        return (inner_key, min(len(prefix), self.cap))

    def next_distribution(self, prefix: Sequence[int]) -> NextDistribution:
        if len(prefix) >= self.cap:
            probs = np.zeros(self.n_outcomes)
            probs[-1] = 1.0
            return NextDistribution(probs)
        return self.inner.next_distribution(prefix)


def train_ngram(
    corpus: Iterable[Sequence[int]], order: int, alpha: float, vocab: Vocabulary
) -> NGramLM:
    """Count-based fit of an additively smoothed n-gram on token strings."""
    model = NGramLM(vocab, order, alpha)
    n_strings = 0
    for tokens in corpus:
        model.observe(tokens)
        n_strings += 1
    if n_strings == 0:
        raise EmptyCorpusError("training corpus is empty")
    return model


def sequence_log_prob(lm: TokenLM, tokens: Sequence[int]) -> float:
    """Natural-log probability of a complete string (tokens then end of string)."""
    total = 0.0
    for t, token in enumerate(tokens):
        total += lm.next_distribution(tokens[:t]).log_prob_of(token)
        if total == -math.inf:
            return total
    return total + lm.next_distribution(tokens).log_prob_of(-1)


def enumerate_distribution(
    lm: TokenLM, max_len: int, max_nodes: int = 5_000_000
) -> tuple[dict[tuple[int, ...], float], float]:
    """Exact probability of every string up to ``max_len`` tokens.

    Returns the string table and the truncation mass (probability of all
    longer strings), which together account for all probability: the table
    plus the remainder sums to 1 up to float error.  Zero-probability
    branches are pruned, so sparse (e.g. masked) models enumerate far
    deeper than dense ones; the node budget is checked as the walk grows.
    """
    table: dict[tuple[int, ...], float] = {}
    truncated = 0.0
    visited = 0
    frontier: list[tuple[tuple[int, ...], float]] = [((), 1.0)]
    for depth in range(max_len + 1):
        visited += len(frontier)
        next_frontier: list[tuple[tuple[int, ...], float]] = []
        for prefix, mass in frontier:
            dist = lm.next_distribution(prefix)
            table[prefix] = mass * dist.eos_prob
            if depth == max_len:
                truncated += mass * (1.0 - dist.eos_prob)
                continue
            token_mass = mass * dist.token_probs
            for token in np.nonzero(token_mass)[0]:
                next_frontier.append((prefix + (int(token),), float(token_mass[token])))
            if visited + len(next_frontier) > max_nodes:
                raise EnumerationTooLargeError(
                    f"enumerating to length {max_len} exceeded {max_nodes} prefixes"
                )
        frontier = next_frontier
    return table, max(truncated, 0.0)


def char_string_prob(lm: TokenLM, chars: bytes, limit: int = 100_000) -> float:
    """Total probability the model assigns to a byte string across all its
    segmentations, canonical or not (the pushforward onto byte strings)."""
    total = 0.0
    for segmentation in lm.vocab.encodings_of(chars, limit=limit):
        total += math.exp(sequence_log_prob(lm, segmentation))
    return total


def ancestral_sample(
    lm: TokenLM, rng: np.random.Generator, max_len: int = 0
) -> tuple[tuple[int, ...], bool]:
    """Sample one string from the model; returns (tokens, hit_length_cap).

    ``max_len`` of 0 means unlimited.  Inverse-CDF draw per step keeps the
    stream reproducible for a given generator state.
    """
    tokens: list[int] = []
    while True:
        dist = lm.next_distribution(tokens)
        outcome = int(np.searchsorted(np.cumsum(dist.probs), rng.random(), side="right"))
        outcome = min(outcome, len(dist.probs) - 1)  # guard float-edge overshoot
        if outcome == len(dist.probs) - 1:
            return tuple(tokens), False
        tokens.append(outcome)
        if max_len and len(tokens) >= max_len:
            return tuple(tokens), True
