"""Canonical byte-pair encoding and canonicality-enforcing inference.

The library splits into:

- ``bpe``: the tokenizer itself (vocabulary, encoder/decoder, derivations)
- ``canonical``: membership tests for canonical strings and next-token masks
- ``lm``: token-level language models and exact enumeration oracles
- ``conditioning``: masked local model, importance weights, samplers, log-loss
- ``construction``: the trainable masked architecture and its gradients
- ``analysis``: bigram-frequency estimators and noncanonical reports
- ``gpt2``: the packaged GPT-2 merge table and its byte conventions
- ``cli``: the ``canonbpe`` command
"""

from .bpe import (
    Derivation,
    LimitExceededError,
    NoncanonicalTokenError,
    Vocabulary,
    load_vocabulary,
)
from .canonical import (
    CanonicalityOracle,
    Conflict,
    load_overrides,
    round_trip_canonical,
    validate_vocabulary,
)
from .conditioning import (
    LocalModel,
    WeightedSample,
    ZEstimate,
    estimate_Z,
    exact_Z,
    importance_resample,
    kl_enumeration,
    logloss_eval,
    rejection_sample,
    sample_local,
)
from .construction import (
    CanonicalizedArchitecture,
    TabularLogitLM,
    finetune,
    grad_log_loss,
    kl_to_base,
    log_loss,
)
from .lm import (
    NextDistribution,
    NGramLM,
    TokenLM,
    char_string_prob,
    enumerate_distribution,
    sequence_log_prob,
    train_ngram,
)

__version__ = "0.1.0"

__all__ = [
    "CanonicalityOracle",
    "CanonicalizedArchitecture",
    "Conflict",
    "Derivation",
    "LimitExceededError",
    "LocalModel",
    "NGramLM",
    "NextDistribution",
    "NoncanonicalTokenError",
    "TabularLogitLM",
    "TokenLM",
    "Vocabulary",
    "WeightedSample",
    "ZEstimate",
    "char_string_prob",
    "enumerate_distribution",
    "estimate_Z",
    "exact_Z",
    "finetune",
    "grad_log_loss",
    "importance_resample",
    "kl_enumeration",
    "kl_to_base",
    "load_overrides",
    "load_vocabulary",
    "log_loss",
    "logloss_eval",
    "rejection_sample",
    "round_trip_canonical",
    "sample_local",
    "sequence_log_prob",
    "train_ngram",
    "validate_vocabulary",
]
