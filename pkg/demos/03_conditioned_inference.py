"""Making a trained model canonical at inference time, without retraining.

A smoothed n-gram fit to canonical text still leaks probability onto
noncanonical token strings.  Conditioning fixes that two ways:

- globally: keep only canonical strings and renormalize (exact but needs
  rejection sampling, expected cost 1/Z attempts per sample);
- locally: mask and renormalize each next-token distribution (cheap, right
  support, but warps probabilities by the product of step normalizers).

The warp factor doubles as an importance weight: it estimates Z, corrects
the local model back toward the global one by resampling, and turns into
log-loss corrections that can only help.
"""

import numpy as np

from canonbpe import CanonicalityOracle, LocalModel, load_vocabulary, train_ngram
from canonbpe.conditioning import (
    estimate_Z,
    exact_Z,
    importance_resample,
    logloss_eval,
    rejection_sample_many,
    sample_local,
)

toy = load_vocabulary("a b\nc c\nab c\n", base_alphabet=b"abc")
oracle = CanonicalityOracle(toy)
rng = np.random.Generator(np.random.PCG64(2024))

# train on canonical strings (whatever the tokenizer actually emits)
corpus_text = [b"abcc", b"cab", b"abc", b"ccab", b"ab", b"", b"abcabc", b"cc", b"bba"] * 40
corpus = [toy.encode(text) for text in corpus_text]
model = train_ngram(corpus, order=2, alpha=1.0, vocab=toy)
local = LocalModel(model, oracle)

print("local samples are canonical by construction, each with its warp weight:")
for _ in range(5):
    s = sample_local(local, rng, max_len=12)
    print(f"   {[toy.subword(t).decode() for t in s.tokens]!s:<40} weight={s.weight:.4f}")

z_exact, trailing = exact_Z(model, oracle, max_len=10)
z_hat = estimate_Z(local, rng, 4000, max_len=30)
print(f"\ncanonicality rate Z: enumerated {z_exact:.4f} (+tail <= {trailing:.1e})")
print(f"                     estimated  {z_hat.mean:.4f} +- {z_hat.standard_error:.4f}")

samples, attempts = rejection_sample_many(model, oracle, rng, 2000, max_len=30)
print(f"rejection sampling: {len(samples)} accepted / {attempts} attempts "
      f"(rate {len(samples) / attempts:.4f}, expected {z_exact:.4f})")

pool = [sample_local(local, rng, max_len=30) for _ in range(4000)]
resampled = importance_resample(pool, 6, rng)
print("importance-resampled (approximate global) draws:",
      [toy.decode(t).decode() or "''" for t in resampled])

report = logloss_eval(corpus, model, local, z_hat)
print(f"\nlog-loss (bits/string):  baseline {report.baseline_bits:.4f}")
print(f"                         local    {report.local_bits:.4f}")
print(f"                         global   {report.global_bits:.4f}")
print("both corrections are guaranteed nonpositive.")
