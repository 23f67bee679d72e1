"""Canonicality tests: round-trip, bigram conflict detection, next-token masks.

A token string is canonical when the encoder maps its decoded bytes back to
the same ids.  That global property reduces to a local one: the string is
canonical iff every adjacent token pair is, and a pair is canonical iff no
merge straddles the boundary with priority beating the merges already inside
the two tokens.  The straddling-merge search only ever needs the right spine
of the left token's derivation and the left spine of the right token's, which
is what makes the incremental test cheap.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bpe import NoncanonicalTokenError, Vocabulary
from .escape import escape_bytes

EOS_SLOT = -1  # next-token masks index end-of-string as the final slot


class ExcludedTokenError(ValueError):
    """Operation requires a self-canonical token but got an excluded one."""


class OverrideFileError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Conflict:
    """The earliest straddling merge proving a bigram noncanonical."""

    left_yield: bytes
    right_yield: bytes
    rank: int

    def render(self) -> str:
        return f"⟨{escape_bytes(self.left_yield)}|{escape_bytes(self.right_yield)}⟩@{self.rank}"


def round_trip_canonical(tokens: Sequence[int], vocab: Vocabulary) -> bool:
    """Membership test by re-encoding: canonical iff a fixed point."""
    return vocab.canonicalize(tokens) == list(tokens)


class CanonicalityOracle:
    """Memoized bigram-canonicality relation with overrides and exclusions.

    Overrides take precedence over everything; tokens that fail the
    self-canonicality assumption are excluded (never allowed as an
    extension, though they still decode).  The memo only ever gains
    entries and all values are deterministic, so concurrent use is safe.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        overrides: Mapping[tuple[int, int], bool] | None = None,
    ):
        self.vocab = vocab
        self.overrides: dict[tuple[int, int], bool] = dict(overrides or {})
        for left, right in self.overrides:
            vocab.subword(left), vocab.subword(right)  # validate ids
        self._memo: dict[tuple[int, int], bool] = {}
        self._excluded: dict[int, bool] = {}
        self._masks: dict[int | None, np.ndarray] = {}

    # -- assumption handling ------------------------------------------------

    def is_excluded(self, token_id: int) -> bool:
        """True when the token's own subword does not re-encode to it."""
        cached = self._excluded.get(token_id)
        if cached is None:
            try:
                self.vocab.derivation(token_id)
                cached = False
            except NoncanonicalTokenError:
                warnings.warn(
                    f"token {token_id} is not self-canonical; excluding it as an extension",
                    stacklevel=2,
                )
                cached = True
            self._excluded[token_id] = cached
        return cached

    # -- conflict search ------------------------------------------------------

    def find_conflict(self, left_token: int, right_token: int) -> Conflict | None:
        """Minimal straddling merge for the bigram, or None if canonical.

        Walks the right spine of the left derivation root-down; for each
        node, walks the left spine of the right derivation root-down, and
        returns the first pair whose merge rank beats the left parent
        strictly and the right parent weakly (parents start at +inf).  The
        strict/weak asymmetry is what encodes the encoder's leftmost
        preference between equal-rank overlapping merges.
        """
        if self.is_excluded(left_token):
            raise ExcludedTokenError(f"left token {left_token} violates self-canonicality")
        if self.is_excluded(right_token):
            raise ExcludedTokenError(f"right token {right_token} violates self-canonicality")
        pair_rank = self.vocab.pair_rank
        node = self.vocab.derivation(left_token)
        left_parent = math.inf
        while True:
            other = self.vocab.derivation(right_token)
            right_parent = math.inf
            while True:
                rank = pair_rank(node.subword, other.subword)
                if left_parent > rank <= right_parent:
                    return Conflict(node.subword, other.subword, int(rank))
                if other.is_leaf:
                    break
                right_parent = other.rank
                other = other.left
            if node.is_leaf:
                break
            left_parent = node.rank
            node = node.right
        return None

    # -- membership tests -----------------------------------------------------

    def bigram_canonical(self, left_token: int, right_token: int) -> bool:
        key = (left_token, right_token)
        override = self.overrides.get(key)
        if override is not None:
            return override
        cached = self._memo.get(key)
        if cached is None:
            if self.is_excluded(left_token) or self.is_excluded(right_token):
                cached = False
            else:
                cached = self.find_conflict(left_token, right_token) is None
            self._memo[key] = cached
        return cached

    def is_canonical(self, tokens: Sequence[int]) -> bool:
        """True iff every adjacent pair is canonical (strings of length <= 1 are)."""
        return all(
            self.bigram_canonical(tokens[i], tokens[i + 1]) for i in range(len(tokens) - 1)
        )

    def extend_canonical(self, prefix: Sequence[int], next_token: int) -> bool:
        """Whether appending ``next_token`` keeps a canonical prefix canonical.

        Canonical strings are prefix closed, so only the final bigram can
        break; cost is bounded by the two spine lengths regardless of how
        long the prefix is.  The canonical-prefix precondition is the
        caller's contract and is not re-verified here.
        """
        if not prefix:
            return not self.is_excluded(next_token)
        return self.bigram_canonical(prefix[-1], next_token)

    def allowed_next(self, prefix: Sequence[int]) -> np.ndarray:
        """Boolean mask over token ids plus a final end-of-string slot.

        End of string is always allowed for a canonical prefix.  The mask
        depends only on the last token of the prefix, so results are cached
        per last token (and once for the empty prefix).
        """
        key = prefix[-1] if prefix else None
        mask = self._masks.get(key)
        if mask is None:
            n = len(self.vocab)
            mask = np.empty(n + 1, dtype=bool)
            if key is None:
                for t in range(n):
                    mask[t] = not self.is_excluded(t)
            else:
                for t in range(n):
                    mask[t] = self.bigram_canonical(key, t)
            mask[EOS_SLOT] = True
            mask.setflags(write=False)
            self._masks[key] = mask
        return mask


def validate_vocabulary(vocab: Vocabulary) -> list[int]:
    """Ids of tokens whose canonicalization differs from themselves."""
    bad = [t for t in range(len(vocab)) if vocab.canonicalize([t]) != [t]]
    if bad:
        warnings.warn(f"{len(bad)} tokens violate self-canonicality", stacklevel=2)
    return bad


def load_overrides(text: str, vocab: Vocabulary) -> dict[tuple[int, int], bool]:
    """Parse override lines of the form ``left_id right_id allow|deny``."""
    overrides: dict[tuple[int, int], bool] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 3 or fields[2] not in ("allow", "deny"):
            raise OverrideFileError("expected `left_id right_id allow|deny`", line_no)
        try:
            left, right = int(fields[0]), int(fields[1])
        except ValueError:
            raise OverrideFileError("token ids must be integers", line_no) from None
        try:
            vocab.subword(left), vocab.subword(right)
        except Exception:
            raise OverrideFileError(f"unknown token id in {stripped!r}", line_no) from None
        overrides[(left, right)] = fields[2] == "allow"
    return overrides


def suggest_overrides(
    oracle: CanonicalityOracle, corpus: Iterable[Sequence[int]]
) -> list[tuple[int, int]]:
    """Bigrams seen in (presumed canonical) encoded text that the test denies.

    These are exactly the candidate ``allow`` overrides when an upstream
    text chunker makes the plain tokenizer's test misfire.
    """
    flagged: set[tuple[int, int]] = set()
    for tokens in corpus:
        for i in range(len(tokens) - 1):
            pair = (tokens[i], tokens[i + 1])
            if pair not in flagged and not oracle.bigram_canonical(*pair):
                flagged.add(pair)
    return sorted(flagged)
