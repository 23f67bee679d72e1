"""Lossless text form for byte strings: printable ASCII stays, rest is \\xNN.

Every byte string has exactly one escaped form and round-trips exactly;
used anywhere bytes cross a text boundary (reports, CLI, merge files).
"""

from __future__ import annotations

_PRINTABLE = set(range(0x21, 0x7F)) | {0x20}


def escape_bytes(data: bytes) -> str:
    out = []
    for b in data:
        if b == 0x5C:  # backslash itself must be escaped to stay invertible
            out.append("\\x5c")
        elif b in _PRINTABLE:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def unescape_bytes(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if text[i + 1 : i + 2] != "x" or len(text) < i + 4:
                raise ValueError(f"bad escape at offset {i} in {text!r}")
            try:
                out.append(int(text[i + 2 : i + 4], 16))
            except ValueError:
                raise ValueError(f"bad hex digits at offset {i} in {text!r}") from None
            i += 4
        else:
            code = ord(ch)
            if code > 0xFF:
                raise ValueError(f"non-byte character {ch!r} at offset {i}")
            out.append(code)
            i += 1
    return bytes(out)
