"""Baking canonicality into the architecture and fine-tuning it.

Instead of fixing the model at inference time, wrap the parametric model so
every parameter setting already assigns zero probability to noncanonical
strings.  The parameters that used to spend capacity ruling out impossible
tokenizations are freed up for everything else.  Training blends the data
log-loss with a KL anchor to the starting model, picking which term to step
on at random each iteration.
"""

import numpy as np

from canonbpe import CanonicalityOracle, load_vocabulary, train_ngram
from canonbpe.construction import (
    CanonicalizedArchitecture,
    TabularLogitLM,
    finetune,
    finetune_objective,
    kl_to_base,
    log_loss,
)

toy = load_vocabulary("a b\nc c\nab c\n", base_alphabet=b"abc")
oracle = CanonicalityOracle(toy)
rng = np.random.Generator(np.random.PCG64(11))

corpus_text = [b"abcc", b"cab", b"abc", b"ccab", b"ab", b"", b"abcabc", b"cc", b"bba"] * 40
corpus = [toy.encode(text) for text in corpus_text]
train, held = corpus[: len(corpus) * 4 // 5], corpus[len(corpus) * 4 // 5 :]

# the frozen anchor: a smoothed n-gram fit, re-expressed as logits
anchor = train_ngram(train, order=2, alpha=0.5, vocab=toy)
base = TabularLogitLM.from_ngram(anchor)
arch = CanonicalizedArchitecture(base, oracle)

print("at initialization the masked wrapper scores the anchor's data better:")
print(f"   unmasked anchor log-loss (held out): {log_loss(anchor, held):.4f} bits/string")
print(f"   masked wrapper  log-loss (held out): {log_loss(arch, held):.4f} bits/string")

mixing = 0.1
before = finetune_objective(arch, train, anchor, lam=mixing, max_len=6)
trace = finetune(
    arch, train, anchor,
    lam=mixing, steps=150, learning_rate=0.3, batch_size=16,
    rng=rng, kl_samples=32, kl_max_len=20,
)
after = finetune_objective(arch, train, anchor, lam=mixing, max_len=6)
kl_terms = sum(1 for r in trace if r.term == "kl")
print(f"\nfine-tuned {len(trace)} steps ({kl_terms} anchor steps at mixing weight {mixing})")
print(f"   blended objective: {before:.4f} -> {after:.4f} bits")
print(f"   held-out log-loss: {log_loss(arch, held):.4f} bits/string")

kl_value, _ = kl_to_base(arch, anchor, mode="exact", max_len=7)
print(f"   drift from anchor: KL = {kl_value:.4f} bits")

# support never leaks, whatever the parameters have become
from canonbpe.lm import sequence_log_prob
import math
noncanonical = [[0, 1], [2, 2], [3, 2], [2, 4]]
assert all(sequence_log_prob(arch, s) == -math.inf for s in noncanonical)
print("   noncanonical strings still carry exactly zero probability.")
