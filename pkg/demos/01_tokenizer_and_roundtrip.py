"""Tokenizer basics: encoding, decoding, canonicalization, all segmentations.

A byte-pair tokenizer is just a base alphabet plus an ordered merge list.
Every byte string has exactly one canonical token string (what the encoder
produces) and usually many noncanonical ones (token strings that decode to
the same bytes but can never come out of the encoder).
"""

from canonbpe import load_vocabulary
from canonbpe.gpt2 import load_gpt2_vocabulary

# -- a three-letter toy tokenizer ------------------------------------------

toy = load_vocabulary("a b\nc c\nab c\n", base_alphabet=b"abc")
print("toy inventory:", {i: sw.decode() for i, sw in enumerate(toy.subwords)})

data = b"abcc"
encoded = toy.encode(data)
print(f"encode({data.decode()!r}) = {encoded} = {[toy.subword(t).decode() for t in encoded]}")
print("round trip:", toy.decode(encoded) == data)

# note the merge order: (c, c) outranks (ab, c), so the encoder never
# produces [abc, c] for "abcc" even though that also decodes correctly
print("all segmentations of 'abc':")
for segmentation in toy.encodings_of(b"abc"):
    tag = "canonical" if toy.canonicalize(segmentation) == segmentation else "noncanonical"
    print("   ", [toy.subword(t).decode() for t in segmentation], "-", tag)

# -- the real GPT-2 merge table (packaged, loads offline) --------------------

gpt2 = load_gpt2_vocabulary()
print(f"\nGPT-2: {len(gpt2)} tokens, {len(gpt2.merges)} merges")

examples = [
    [83, 258],   # t . he      -> merges into "the"
    [83, 13],    # t .         -> already canonical
    [400, 68],   # th . e      -> also merges into "the"
    [817, 278],  # Th . ing    -> canonical form is LONGER: T . hing
    [12898, 77, 591],  # tha . n . ks -> thanks
]
print(f"{'input tokens':>28}  ->  canonical form")
for tokens in examples:
    before = " . ".join(gpt2.subword(t).decode() for t in tokens)
    after_tokens = gpt2.canonicalize(tokens)
    after = " . ".join(gpt2.subword(t).decode() for t in after_tokens)
    marker = "(fixed point)" if after_tokens == tokens else ""
    print(f"{before:>28}  ->  {after}  {after_tokens} {marker}")

# canonicalization is idempotent: the second application never changes anything
twice = gpt2.canonicalize(gpt2.canonicalize([817, 14146]))
print("\nidempotence check:", twice == gpt2.canonicalize([817, 14146]))
