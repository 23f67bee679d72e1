"""GPT-2 tokenizer fixture: the published 50k merge list plus its byte conventions.

GPT-2 merge files are written with a reversible byte-to-printable-character
remapping so that raw bytes (spaces, control bytes) survive in a text file.
This module knows that convention and ships the merge table, so tests and
demos can build the real GPT-2 vocabulary offline with ids that match the
published ones (e.g. token 1169 is ``the``).
"""

from __future__ import annotations

import gzip
from functools import lru_cache
from importlib import resources

from .bpe import Vocabulary, load_vocabulary

_MERGES_RESOURCE = "gpt2_merges.txt.gz"


def byte_to_char_table() -> dict[int, str]:
    """The standard reversible byte -> printable character remapping.

    Printable single-byte characters map to themselves; the remaining 68
    bytes are shifted into unused code points above 255, in byte order.
    """
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    table = {b: chr(b) for b in printable}
    shift = 0
    for b in range(256):
        if b not in table:
            table[b] = chr(256 + shift)
            shift += 1
    return table


@lru_cache(maxsize=1)
def _char_to_byte() -> dict[str, int]:
    return {c: b for b, c in byte_to_char_table().items()}


def field_to_bytes(field: str) -> bytes:
    """Decode one merge-file field through the byte remapping."""
    table = _char_to_byte()
    try:
        return bytes(table[ch] for ch in field)
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is not a remapped byte") from None


def base_byte_order() -> list[int]:
    """Byte values in GPT-2 id order: sorted by remapped character code.

    This makes base-token ids match the published ones (``t`` is 83, not
    0x74); merge-token ids then line up automatically because both schemes
    append one id per merge line.
    """
    table = byte_to_char_table()
    return sorted(range(256), key=lambda b: ord(table[b]))


def merges_text() -> str:
    """The packaged GPT-2 merge list (50,000 lines plus version header)."""
    data = resources.files(__package__).joinpath("data").joinpath(_MERGES_RESOURCE).read_bytes()
    return gzip.decompress(data).decode("utf-8")


def load_gpt2_vocabulary(merge_text: str | None = None) -> Vocabulary:
    """Build the GPT-2 vocabulary (50,256 tokens: 256 bytes + 50,000 merges).

    The published inventory has one extra control token appended after the
    merges; it is not a BPE token and plays no role here, where end of
    string is an event rather than a vocabulary item.
    """
    return load_vocabulary(
        merge_text if merge_text is not None else merges_text(),
        base_alphabet=base_byte_order(),
        field_decoder=field_to_bytes,
    )
