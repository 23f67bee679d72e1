"""Tokenizer core: loading, encoding, derivations, exhaustive segmentation.

The fast encoder is checked against a direct transcription of the rewrite
procedure (kept in the library as ``encode_reference``), exhaustively at toy
scale; segmentation counts are checked against an independent dynamic
program written here.
"""

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonbpe.bpe import (
    ByteOutOfAlphabetError,
    DuplicateMergeError,
    LimitExceededError,
    MalformedLineError,
    NoncanonicalTokenError,
    UnknownSubwordError,
    UnknownTokenIdError,
    load_vocabulary,
    parse_token_map,
)

from conftest import TOY3_MERGES


def all_strings(vocab, max_len):
    for k in range(max_len + 1):
        yield from itertools.product(range(len(vocab)), repeat=k)


def count_segmentations(data, vocab):
    """Independent oracle: dynamic program over suffix segmentation counts."""
    n = len(data)
    ways = [0] * (n + 1)
    ways[n] = 1
    for i in range(n - 1, -1, -1):
        for sw in vocab.subwords:
            if data[i : i + len(sw)] == sw:
                ways[i] += ways[i + len(sw)]
    return ways[0]


class TestLoadVocabulary:
    def test_toy3_construction(self, toy3):
        assert [toy3.subword(i) for i in range(6)] == [b"a", b"b", b"c", b"ab", b"cc", b"abc"]
        assert toy3.pair_rank(b"a", b"b") == 3
        assert toy3.pair_rank(b"c", b"c") == 4
        assert toy3.pair_rank(b"ab", b"c") == 5
        assert toy3.pair_rank(b"b", b"c") == float("inf")
        assert toy3.base_rank(ord("a")) == 0
        assert toy3.base_rank(ord("c")) == 2

    def test_empty_merge_list(self, single):
        assert len(single) == 1
        assert single.subword(0) == b"a"
        assert single.merges == ()

    def test_gpt2_fixture_ids(self, gpt2_vocab):
        assert len(gpt2_vocab) == 50256
        assert gpt2_vocab.token_id(b"the") == 1169
        assert gpt2_vocab.token_id(b"Th") == 817

    def test_leading_comments_skipped_but_data_hashes_kept(self):
        text = "#version: test\n# another comment\na b\nb a\n"
        vocab = load_vocabulary(text, base_alphabet=b"ab")
        assert len(vocab.merges) == 2
        # after the first data line, a line starting with '#' is data
        vocab2 = load_vocabulary("#comment\na a\n# #\n", base_alphabet=b"#a")
        assert vocab2.token_id(b"##") == 3
        assert vocab2.pair_rank(b"#", b"#") == 3

    def test_gpt2_hash_merges_are_data(self, gpt2_vocab):
        # the published table has 8 data lines whose first field starts with '#'
        assert gpt2_vocab.pair_rank(b"#", b"#") < float("inf")
        assert gpt2_vocab.token_id(b"####") in range(256, 50256)

    def test_malformed_line(self):
        with pytest.raises(MalformedLineError) as err:
            load_vocabulary("a b\na b c\n", base_alphabet=b"abc")
        assert err.value.line_no == 2

    def test_unknown_subword(self):
        with pytest.raises(UnknownSubwordError):
            load_vocabulary("ab c\n", base_alphabet=b"abc")

    def test_duplicate_merge(self):
        with pytest.raises(DuplicateMergeError):
            load_vocabulary("a b\na b\n", base_alphabet=b"abc")


class TestEncodeDecode:
    def test_rewrite_order(self, toy3):
        # (c, c) has rank 4 and fires before (ab, c) at rank 5
        assert toy3.encode(b"abcc") == [toy3.token_id(b"ab"), toy3.token_id(b"cc")]

    def test_empty(self, toy3):
        assert toy3.encode(b"") == []
        assert toy3.decode([]) == b""

    def test_byte_out_of_alphabet(self, toy3):
        with pytest.raises(ByteOutOfAlphabetError):
            toy3.encode(b"abd")
        with pytest.raises(ByteOutOfAlphabetError):
            toy3.encode_reference(b"abd")

    def test_decode_concatenates(self, toy3):
        assert toy3.decode([3, 2]) == b"abc"
        with pytest.raises(UnknownTokenIdError):
            toy3.decode([99])

    def test_gpt2_the(self, gpt2_vocab):
        assert gpt2_vocab.encode(b"the") == [1169]
        assert gpt2_vocab.decode([1169]) == b"the"

    def test_fast_encoder_matches_reference_exhaustively(self, toy3):
        for k in range(9):
            for chars in itertools.product(b"abc", repeat=k):
                data = bytes(chars)
                assert toy3.encode(data) == toy3.encode_reference(data)

    def test_fast_encoder_matches_reference_on_gpt2_words(self, gpt2_vocab):
        for word in (b"the", b"thanks", b"Thinging", b" tokenized text", b"##a# b"):
            assert gpt2_vocab.encode(word) == gpt2_vocab.encode_reference(word)

    def test_exactness_exhaustive(self, toy3):
        for k in range(9):
            for chars in itertools.product(b"abc", repeat=k):
                data = bytes(chars)
                assert toy3.decode(toy3.encode(data)) == data

    def test_determinism(self, toy3):
        assert toy3.encode(b"abcabc") == toy3.encode(b"abcabc")

    @given(st.binary(max_size=40).map(lambda b: bytes(97 + x % 3 for x in b)))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, data):
        vocab = load_vocabulary(TOY3_MERGES, base_alphabet=b"abc")
        assert vocab.decode(vocab.encode(data)) == data

    @given(st.binary(max_size=24))
    @settings(max_examples=100, deadline=None)
    def test_gpt2_round_trip_property(self, data):
        vocab = _GPT2.get()
        assert vocab.decode(vocab.encode(data)) == data


class _GPT2:
    """Session-cached vocabulary for hypothesis tests (no fixture access)."""

    _vocab = None

    @classmethod
    def get(cls):
        if cls._vocab is None:
            from canonbpe.gpt2 import load_gpt2_vocabulary

            cls._vocab = load_gpt2_vocabulary()
        return cls._vocab


class TestCanonicalize:
    def test_single_tokens_fixed(self, toy3):
        assert toy3.canonicalize([5]) == [5]

    def test_merges_noncanonical_pair(self, toy3):
        assert toy3.canonicalize([3, 2]) == [5]

    def test_gpt2_can_lengthen(self, gpt2_vocab):
        assert gpt2_vocab.canonicalize([83, 258]) == [1169]
        assert gpt2_vocab.canonicalize([817, 278]) == [51, 722]

    def test_idempotent_exhaustive(self, toy3):
        for tokens in all_strings(toy3, 4):
            once = toy3.canonicalize(tokens)
            assert toy3.canonicalize(once) == once

    def test_bijection_on_canonical_set(self, toy3):
        for tokens in all_strings(toy3, 4):
            tokens = list(tokens)
            if toy3.canonicalize(tokens) == tokens:
                assert toy3.encode(toy3.decode(tokens)) == tokens


class TestDerivation:
    def test_examples(self, toy3):
        ab = toy3.derivation(3)
        assert (ab.left.subword, ab.right.subword) == (b"a", b"b")
        abc = toy3.derivation(5)
        assert abc.left.subword == b"ab" and abc.right.subword == b"c"
        assert abc.left.left.subword == b"a"
        leaf = toy3.derivation(0)
        assert leaf.is_leaf and leaf.subword == b"a"

    def test_node_ranks_finite(self, toy3):
        abc = toy3.derivation(5)
        assert abc.rank == 5 and abc.left.rank == 3

    def test_yield_matches_subword(self, gpt2_vocab):
        for tid in (1169, 27547, 14146, 0):
            assert gpt2_vocab.derivation(tid).subword == gpt2_vocab.subword(tid)

    def test_cached(self, toy3):
        assert toy3.derivation(5) is toy3.derivation(5)

    def test_noncanonical_token_reported(self, broken_vocab):
        with pytest.raises(NoncanonicalTokenError):
            broken_vocab.derivation(4)


class TestEncodingsOf:
    def test_examples(self, toy3):
        got = toy3.encodings_of(b"abc")
        assert got == [[0, 1, 2], [3, 2], [5]]
        assert toy3.encodings_of(b"") == [[]]
        assert toy3.encodings_of(b"cc") == [[2, 2], [4]]

    def test_counts_match_dp_oracle(self, toy3):
        for k in range(7):
            for chars in itertools.product(b"abc", repeat=k):
                data = bytes(chars)
                assert len(toy3.encodings_of(data)) == count_segmentations(data, toy3)

    def test_contains_canonical_and_unique_fixpoint(self, toy3):
        for data in (b"abc", b"abcc", b"ccabc", b"ababab"):
            segmentations = toy3.encodings_of(data)
            canonical = toy3.encode(data)
            assert canonical in segmentations
            fixpoints = [s for s in segmentations if toy3.canonicalize(s) == s]
            assert fixpoints == [canonical]

    def test_limit(self, toy3):
        with pytest.raises(LimitExceededError):
            toy3.encodings_of(b"abcabcabc", limit=3)

    def test_all_decode_back(self, toy3):
        for s in toy3.encodings_of(b"abcab"):
            assert toy3.decode(s) == b"abcab"


class TestTokenMap:
    def test_round_trip(self, toy3):
        mapping = parse_token_map(toy3.token_map_text())
        assert mapping == {sw: i for i, sw in enumerate(toy3.subwords)}

    def test_gpt2_map_spot_checks(self, gpt2_vocab):
        mapping = parse_token_map(gpt2_vocab.token_map_text())
        assert mapping[b"the"] == 1169
        assert mapping[b" t"] == 256  # first merge
        assert len(mapping) == 50256
