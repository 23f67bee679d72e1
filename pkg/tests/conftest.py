"""Shared fixtures: toy tokenizers, seeded corpora, and reference models.

Statistical tests run against length-capped bases so that enumeration
oracles are exhaustive (zero truncation mass) and every "true" quantity is
exactly computable.  Two capped bases are used: an untrained uniform one
(canonicality rate far from 1, symmetric weight distribution; best for
coverage and sampler-match statistics) and a corpus-fitted one
(concentrated mass; best where total-variation budgets are tight).
"""

import numpy as np
import pytest

from canonbpe import (
    CanonicalityOracle,
    LocalModel,
    NGramLM,
    load_vocabulary,
    sample_local,
    train_ngram,
)
from canonbpe.gpt2 import load_gpt2_vocabulary
from canonbpe.lm import LengthCappedLM

TOY3_MERGES = "a b\nc c\nab c\n"
CAP = 6  # support bound for capped fixtures; enumeration at 6 is exhaustive


@pytest.fixture(scope="session")
def toy3():
    return load_vocabulary(TOY3_MERGES, base_alphabet=b"abc")


@pytest.fixture()
def toy3_oracle(toy3):
    return CanonicalityOracle(toy3)


@pytest.fixture(scope="session")
def single():
    """One-byte alphabet, no merges: every token string is canonical."""
    return load_vocabulary("", base_alphabet=b"a")


@pytest.fixture(scope="session")
def broken_vocab():
    """Token 4 (``aba``) re-encodes as [a, ba]: a self-canonicality violation."""
    return load_vocabulary("b a\na b\nab a\n", base_alphabet=b"ab")


@pytest.fixture(scope="session")
def gpt2_vocab():
    return load_gpt2_vocabulary()


def make_toy3_corpus(toy3, n=500, seed=20240601, max_len=12, eos_boost=2):
    """Canonical toy strings from a seeded sampler.

    The generator's base is uniform over tokens with boosted end-of-string
    mass (mean length just under 2), so fitted models have fast-decaying
    length tails.
    """
    base = NGramLM(toy3, order=1, alpha=1.0)
    for _ in range(eos_boost):
        base.observe([])
    local = LocalModel(base, CanonicalityOracle(toy3))
    rng = np.random.Generator(np.random.PCG64(seed))
    corpus = []
    while len(corpus) < n:
        s = sample_local(local, rng, max_len=max_len)
        if not s.truncated:
            corpus.append(list(s.tokens))
    return corpus


@pytest.fixture(scope="session")
def toy3_corpus(toy3):
    return make_toy3_corpus(toy3)


@pytest.fixture(scope="session")
def toy3_ngram(toy3, toy3_corpus):
    return train_ngram(toy3_corpus, order=2, alpha=0.1, vocab=toy3)


@pytest.fixture(scope="session")
def uniform_capped(toy3):
    """Untrained uniform conditionals, support capped at CAP tokens.

    Canonicality rate is about 0.61, so masking, rejection, and importance
    weighting all do real work here.
    """
    return LengthCappedLM(NGramLM(toy3, order=1, alpha=1.0), CAP)


@pytest.fixture(scope="session")
def fitted_capped(toy3, toy3_corpus):
    """Corpus-fitted smoothed model, support capped at CAP tokens.

    Mass concentrates on short strings, which keeps empirical/enumerated
    total-variation noise floors low.
    """
    return LengthCappedLM(train_ngram(toy3_corpus, order=2, alpha=0.5, vocab=toy3), CAP)
