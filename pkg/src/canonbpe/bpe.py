"""Byte-pair encoding over raw bytes: vocabulary, encoder/decoder, derivations.

A tokenizer here is a base alphabet of byte values plus an ordered merge
list.  Token ids are assigned positionally: base bytes first (in alphabet
order), then one id per merge (in merge order).  The encoder repeatedly
applies the highest-priority merge (lowest rank, leftmost occurrence on
ties) until no merge matches; everything else in this package is built on
that one deterministic rewriting process.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

INFINITE_RANK = math.inf


class MergeFileError(ValueError):
    """Base for merge-list parsing failures; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MalformedLineError(MergeFileError):
    pass


class UnknownSubwordError(MergeFileError):
    pass


class DuplicateMergeError(MergeFileError):
    pass


class ByteOutOfAlphabetError(ValueError):
    pass


class UnknownTokenIdError(ValueError):
    pass


class NoncanonicalTokenError(ValueError):
    """A token whose own subword does not encode back to that single token."""


class LimitExceededError(RuntimeError):
    """More segmentations than the caller allowed."""


@dataclass(frozen=True)
class Derivation:
    """Binary merge tree for one token: a leaf byte or a pair of subtrees.

    ``rank`` is the priority of the merge that built this node (base-byte
    position for leaves); internal nodes always have a finite pair rank.
    """

    subword: bytes
    rank: float
    left: "Derivation | None" = None
    right: "Derivation | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class Vocabulary:
    """Static tokenizer definition: base alphabet, merges, token inventory.

    Immutable after construction; safe to share between threads.  The
    derivation cache is filled lazily (idempotent writes).
    """

    def __init__(self, base_alphabet: Iterable[int], merges: Iterable[tuple[bytes, bytes]]):
        self.base_alphabet: tuple[int, ...] = tuple(base_alphabet)
        self.merges: tuple[tuple[bytes, bytes], ...] = tuple(merges)
        if len(set(self.base_alphabet)) != len(self.base_alphabet):
            raise ValueError("base alphabet contains duplicate byte values")
        for b in self.base_alphabet:
            if not 0 <= b <= 255:
                raise ValueError(f"base alphabet entry {b} is not a byte value")

        subwords = [bytes([b]) for b in self.base_alphabet]
        ids: dict[bytes, int] = {s: i for i, s in enumerate(subwords)}
        pair_rank: dict[tuple[bytes, bytes], int] = {}
        n_base = len(subwords)
        for i, (left, right) in enumerate(self.merges):
            if (left, right) in pair_rank:
                raise ValueError(f"duplicate merge {(left, right)!r}")
            if left not in ids or right not in ids:
                raise ValueError(f"merge {(left, right)!r} references unknown subword")
            pair_rank[(left, right)] = n_base + i
            merged = left + right
            if merged in ids:
                # Two merges with one concatenation would break the id<->subword
                # bijection under positional id assignment.
                raise ValueError(f"merge {(left, right)!r} duplicates subword {merged!r}")
            ids[merged] = len(subwords)
            subwords.append(merged)

        self.subwords: tuple[bytes, ...] = tuple(subwords)
        self._ids = ids
        self._pair_rank = pair_rank
        self._byte_token = {b: i for i, b in enumerate(self.base_alphabet)}
        self._derivations: dict[int, Derivation] = {}

    # -- basic queries ---------------------------------------------------

    def __len__(self) -> int:
        return len(self.subwords)

    def token_id(self, subword: bytes) -> int:
        try:
            return self._ids[subword]
        except KeyError:
            raise UnknownTokenIdError(f"no token for subword {subword!r}") from None

    def subword(self, token_id: int) -> bytes:
        if not 0 <= token_id < len(self.subwords):
            raise UnknownTokenIdError(f"token id {token_id} out of range")
        return self.subwords[token_id]

    def pair_rank(self, left: bytes, right: bytes) -> float:
        """Merge priority of the pair (lower fires first); +inf if absent."""
        return self._pair_rank.get((left, right), INFINITE_RANK)

    def base_rank(self, byte_value: int) -> int:
        """Position of a base byte in the alphabet ordering.

        Never compared against pair ranks by any algorithm here; recorded
        only so the rank function is total over leaves.
        """
        return self._byte_token[byte_value]

    # -- encoding / decoding ----------------------------------------------

    def encode(self, data: bytes) -> list[int]:
        """Deterministic tokenization of a byte string.

        Implementation is a priority queue over candidate merge occurrences
        keyed by (rank, position), which applies merges in exactly the same
        (rank, leftmost) order as the one-rewrite-per-pass reference
        encoder; ``encode_reference`` is kept as the oracle for that claim.
        """
        if not data:
            return []
        byte_token = self._byte_token
        for b in data:
            if b not in byte_token:
                raise ByteOutOfAlphabetError(f"byte 0x{b:02x} not in base alphabet")
        pair_rank = self._pair_rank
        n = len(data)
        piece = [data[i : i + 1] for i in range(n)]
        nxt = list(range(1, n)) + [-1]
        prv = [-1] + list(range(n - 1))
        alive = [True] * n
        heap: list[tuple[int, int]] = []
        for i in range(n - 1):
            r = pair_rank.get((piece[i], piece[i + 1]))
            if r is not None:
                heap.append((r, i))
        heapq.heapify(heap)
        while heap:
            rank, i = heapq.heappop(heap)
            if not alive[i]:
                continue
            j = nxt[i]
            # Stale entry: the pair at i changed since it was pushed.
            if j == -1 or pair_rank.get((piece[i], piece[j])) != rank:
                continue
            piece[i] = piece[i] + piece[j]
            alive[j] = False
            nxt[i] = nxt[j]
            if nxt[i] != -1:
                prv[nxt[i]] = i
            k = prv[i]
            if k != -1:
                r2 = pair_rank.get((piece[k], piece[i]))
                if r2 is not None:
                    heapq.heappush(heap, (r2, k))
            k = nxt[i]
            if k != -1:
                r2 = pair_rank.get((piece[i], piece[k]))
                if r2 is not None:
                    heapq.heappush(heap, (r2, i))
        ids = self._ids
        out = []
        i = 0
        while i != -1:
            out.append(ids[piece[i]])
            i = nxt[i]
        return out

    def encode_reference(self, data: bytes) -> list[int]:
        """Direct transcription of the rewrite-to-fixpoint encoder.

        One merge application per pass: scan merges in priority order, and
        for the first merge that matches anywhere, rewrite its leftmost
        occurrence.  Quadratic; exists purely as the oracle for ``encode``.
        """
        byte_token = self._byte_token
        for b in data:
            if b not in byte_token:
                raise ByteOutOfAlphabetError(f"byte 0x{b:02x} not in base alphabet")
        toks = [data[i : i + 1] for i in range(len(data))]
        while True:
            applied = False
            for left, right in self.merges:
                for n in range(len(toks) - 1):
                    if toks[n] == left and toks[n + 1] == right:
                        toks[n : n + 2] = [left + right]
                        applied = True
                        break
                if applied:
                    break
            if not applied:
                return [self._ids[t] for t in toks]

    def decode(self, tokens: Sequence[int]) -> bytes:
        return b"".join(self.subword(t) for t in tokens)

    def canonicalize(self, tokens: Sequence[int]) -> list[int]:
        """Re-encode the decoded bytes; fixed points are the canonical strings."""
        return self.encode(self.decode(tokens))

    # -- derivations -------------------------------------------------------

    def derivation(self, token_id: int) -> Derivation:
        """Merge tree of a token, cached per vocabulary.

        Raises NoncanonicalTokenError when the token's subword does not
        re-encode to the token itself (its derivation is a forest, not a
        single tree); such tokens are unreachable by the encoder.
        """
        cached = self._derivations.get(token_id)
        if cached is not None:
            return cached
        data = self.subword(token_id)
        forest = self._derive_forest(data)
        if len(forest) != 1:
            raise NoncanonicalTokenError(
                f"token {token_id} ({data!r}) derives as a forest of {len(forest)} trees"
            )
        tree = forest[0]
        self._derivations[token_id] = tree
        return tree

    def _derive_forest(self, data: bytes) -> list[Derivation]:
        """Tree-building variant of the encoder (one merge per pass)."""
        nodes = [Derivation(data[i : i + 1], self._byte_token[data[i]]) for i in range(len(data))]
        pair_rank = self._pair_rank
        while True:
            best_rank = None
            best_pos = -1
            for n in range(len(nodes) - 1):
                r = pair_rank.get((nodes[n].subword, nodes[n + 1].subword))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_pos = r, n
            if best_rank is None:
                return nodes
            left, right = nodes[best_pos], nodes[best_pos + 1]
            merged = Derivation(left.subword + right.subword, best_rank, left, right)
            nodes[best_pos : best_pos + 2] = [merged]

    # -- exhaustive segmentation -------------------------------------------

    def encodings_of(self, data: bytes, limit: int = 100_000) -> list[list[int]]:
        """All segmentations of ``data`` into vocabulary subwords.

        Includes the canonical encoding and every noncanonical one, in
        lexicographic order of the id sequence.  Raises LimitExceededError
        once more than ``limit`` segmentations exist.
        """
        n = len(data)
        if n == 0:
            return [[]]
        for b in data:
            if b not in self._byte_token:
                raise ByteOutOfAlphabetError(f"byte 0x{b:02x} not in base alphabet")
        # candidates[i]: (token id, end) pairs usable at position i, id-ascending
        candidates: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for tid, sw in enumerate(self.subwords):
            w = len(sw)
            start = data.find(sw)
            while start != -1:
                candidates[start].append((tid, start + w))
                start = data.find(sw, start + 1)
        # positions from which the suffix is segmentable (prunes dead ends)
        reachable = [False] * (n + 1)
        reachable[n] = True
        for i in range(n - 1, -1, -1):
            reachable[i] = any(reachable[end] for _, end in candidates[i])
        if not reachable[0]:
            return []

        results: list[list[int]] = []
        stack: list[int] = []

        def walk(pos: int) -> None:
            if pos == n:
                if len(results) >= limit:
                    raise LimitExceededError(f"more than {limit} segmentations")
                results.append(stack.copy())
                return
            for tid, end in candidates[pos]:
                if reachable[end]:
                    stack.append(tid)
                    walk(end)
                    stack.pop()

        walk(0)
        return results

    # -- interchange formats -------------------------------------------------

    def token_map_text(self) -> str:
        """Token inventory as ``subword<TAB>id`` lines (bytes hex-escaped)."""
        from .escape import escape_bytes

        return "".join(f"{escape_bytes(sw)}\t{i}\n" for i, sw in enumerate(self.subwords))

    def content_hash(self) -> str:
        """Stable hash of the full token inventory, for model file headers."""
        import hashlib

        h = hashlib.sha256()
        for sw in self.subwords:
            h.update(len(sw).to_bytes(4, "little"))
            h.update(sw)
        return h.hexdigest()[:16]


def parse_token_map(text: str) -> dict[bytes, int]:
    """Inverse of ``Vocabulary.token_map_text``, for interop checks."""
    from .escape import unescape_bytes

    mapping: dict[bytes, int] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            field, id_text = line.split("\t")
            mapping[unescape_bytes(field)] = int(id_text)
        except ValueError as exc:
            raise ValueError(f"token map line {line_no}: {exc}") from None
    return mapping


def load_vocabulary(
    merge_text: str,
    base_alphabet: Iterable[int] = range(256),
    field_decoder: Callable[[str], bytes] | None = None,
) -> Vocabulary:
    """Parse a merge list (one ``left right`` pair per line) into a Vocabulary.

    Comment lines starting with ``#`` are skipped only in the leading block
    before the first merge: real merge lists contain data lines such as
    ``# #`` whose first field is a ``#`` subword.  ``field_decoder`` maps a
    text field to its byte sequence; the default understands plain text
    with ``\\xNN`` escapes for non-printable bytes.
    """
    from .escape import unescape_bytes

    decode_field = field_decoder if field_decoder is not None else unescape_bytes
    known: set[bytes] = {bytes([b]) for b in base_alphabet}
    merges: list[tuple[bytes, bytes]] = []
    seen: dict[tuple[bytes, bytes], int] = {}
    in_header = True
    for line_no, line in enumerate(merge_text.splitlines(), start=1):
        if not line.strip():
            continue
        if in_header and line.startswith("#"):
            continue
        in_header = False
        fields = line.split()
        if len(fields) != 2:
            raise MalformedLineError(f"expected 2 fields, found {len(fields)}", line_no)
        try:
            left, right = decode_field(fields[0]), decode_field(fields[1])
        except ValueError as exc:
            raise MalformedLineError(str(exc), line_no) from None
        if (left, right) in seen:
            raise DuplicateMergeError(
                f"merge {fields[0]} {fields[1]} already given on line {seen[(left, right)]}",
                line_no,
            )
        if left not in known:
            raise UnknownSubwordError(f"subword {fields[0]!r} not derivable here", line_no)
        if right not in known:
            raise UnknownSubwordError(f"subword {fields[1]!r} not derivable here", line_no)
        seen[(left, right)] = line_no
        merges.append((left, right))
        known.add(left + right)
    return Vocabulary(base_alphabet, merges)
