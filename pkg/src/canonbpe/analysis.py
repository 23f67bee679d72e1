"""Bigram frequency under a model: Monte Carlo, Rao-Blackwellized, and exact.

The quantity of interest is the expected number of adjacent occurrences of
each token pair per sampled string.  The plain Monte Carlo estimator counts
realized bigrams; the Rao-Blackwellized one replaces each sampled next token
with its full conditional distribution, which keeps the estimator unbiased
while sharply reducing variance for rare pairs.  Ranking the noncanonical
entries of the table shows where a model leaks probability to impossible
strings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .canonical import CanonicalityOracle
from .escape import escape_bytes
from .lm import TokenLM, ancestral_sample, enumerate_distribution


@dataclass
class BigramFrequencyTable:
    """Estimated expected occurrences per string for each token pair."""

    estimates: dict[tuple[int, int], float]
    estimator: str  # "mc", "rb", or "exact"
    samples: int
    seed: int | None = None
    max_len: int = 0
    truncated_samples: int = 0
    truncation_mass: float = 0.0

    def get(self, pair: tuple[int, int]) -> float:
        return self.estimates.get(pair, 0.0)


def bigram_freq_mc(
    model: TokenLM, rng: np.random.Generator, m: int, max_len: int = 0, seed: int | None = None
) -> BigramFrequencyTable:
    """Monte Carlo estimate: average realized adjacent-pair counts.

    Samples hitting the length cap contribute the counts of their kept
    prefix (a documented truncation bias, shared with the other samplers).
    """
    if m < 1:
        raise ValueError("need at least one sample")
    totals: dict[tuple[int, int], float] = {}
    truncated = 0
    for _ in range(m):
        tokens, hit_cap = ancestral_sample(model, rng, max_len=max_len)
        truncated += hit_cap
        for i in range(len(tokens) - 1):
            pair = (tokens[i], tokens[i + 1])
            totals[pair] = totals.get(pair, 0.0) + 1.0
    estimates = {pair: count / m for pair, count in totals.items()}
    return BigramFrequencyTable(estimates, "mc", m, seed, max_len, truncated)


def bigram_freq_rb(
    model: TokenLM, rng: np.random.Generator, m: int, max_len: int = 0, seed: int | None = None
) -> BigramFrequencyTable:
    """Rao-Blackwellized estimate: exact conditional expectation per position.

    At every sampled prefix position the full next-token conditional is
    credited to the (last token, candidate) pairs, instead of the single
    realized continuation.  Positions whose successor would fall outside
    the length cap are skipped so the estimator targets the same truncated
    quantity as the Monte Carlo one.
    """
    if m < 1:
        raise ValueError("need at least one sample")
    # accumulate a dense row per observed last token; scatter at the end
    rows: dict[int, np.ndarray] = {}
    n_tokens = len(model.vocab)
    truncated = 0
    for _ in range(m):
        tokens, hit_cap = ancestral_sample(model, rng, max_len=max_len)
        truncated += hit_cap
        last_position = len(tokens) if not hit_cap else max_len - 1
        for t in range(1, last_position + 1):
            probs = model.next_distribution(tokens[:t]).token_probs
            row = rows.get(tokens[t - 1])
            if row is None:
                row = np.zeros(n_tokens, dtype=np.float64)
                rows[tokens[t - 1]] = row
            row += probs
    estimates: dict[tuple[int, int], float] = {}
    for left, row in rows.items():
        for right in np.nonzero(row)[0]:
            estimates[(left, int(right))] = float(row[right]) / m
    return BigramFrequencyTable(estimates, "rb", m, seed, max_len, truncated)


def exact_bigram_freq(model: TokenLM, max_len: int) -> BigramFrequencyTable:
    """Expected bigram counts by enumeration over strings up to ``max_len``.

    The reported truncation mass bounds how much expectation the cutoff can
    hide; the samplers' tests drive it to negligibility.
    """
    table, truncation_mass = enumerate_distribution(model, max_len)
    estimates: dict[tuple[int, int], float] = {}
    for tokens, p in table.items():
        if p <= 0.0:
            continue
        for i in range(len(tokens) - 1):
            pair = (tokens[i], tokens[i + 1])
            estimates[pair] = estimates.get(pair, 0.0) + p
    return BigramFrequencyTable(
        estimates, "exact", 0, None, max_len, truncation_mass=truncation_mass
    )


@dataclass(frozen=True)
class NoncanonicalEntry:
    rank: int
    left: bytes
    right: bytes
    estimate: float

    def render(self) -> str:
        return f"{self.rank} {escape_bytes(self.left)} {escape_bytes(self.right)} {self.estimate:.2e}"


def report_noncanonical(
    table: BigramFrequencyTable, oracle: CanonicalityOracle, k: int
) -> list[NoncanonicalEntry]:
    """Top-k noncanonical bigrams by estimated frequency, decoded for reading.

    A model with canonical support produces an empty report for any k.
    Ties break on token ids so the report is deterministic.
    """
    flagged = [
        (pair, value)
        for pair, value in table.estimates.items()
        if value > 0.0 and not oracle.bigram_canonical(*pair)
    ]
    flagged.sort(key=lambda item: (-item[1], item[0]))
    vocab = oracle.vocab
    return [
        NoncanonicalEntry(i + 1, vocab.subword(pair[0]), vocab.subword(pair[1]), value)
        for i, (pair, value) in enumerate(flagged[:k])
    ]


def merge_tables(tables: Sequence[BigramFrequencyTable]) -> BigramFrequencyTable:
    """Combine per-worker sampling tables (weighted by sample counts).

    Addition then renormalization, so merging is order independent.
    """
    if not tables:
        raise ValueError("nothing to merge")
    kinds = {t.estimator for t in tables}
    if len(kinds) != 1 or "exact" in kinds:
        raise ValueError("can only merge sampling tables of one kind")
    total_samples = sum(t.samples for t in tables)
    merged: dict[tuple[int, int], float] = {}
    for t in tables:
        for pair, value in t.estimates.items():
            merged[pair] = merged.get(pair, 0.0) + value * t.samples
    estimates = {pair: value / total_samples for pair, value in merged.items()}
    return BigramFrequencyTable(
        estimates,
        tables[0].estimator,
        total_samples,
        tables[0].seed,
        tables[0].max_len,
        sum(t.truncated_samples for t in tables),
    )
