"""Byte-level vocabulary: 256 byte ids plus eight fixed sentinel ids.

Token ids 0..255 are raw bytes; sentinels occupy 256..263 and are never
produced by `encode`, so decode(encode(b)) == b for any byte string.
"""

from __future__ import annotations

BOS = 256   # beginning of sequence
EOS = 257   # end of sequence
L2R = 258   # stream runs left-to-right
R2L = 259   # stream runs right-to-left
PRE = 260   # infill transform: prefix section
SUF = 261   # infill transform: suffix section
MID = 262   # infill transform: middle section
PAD = 263   # batch padding, never a target

VOCAB_SIZE = 264

SENTINEL_NAMES = {
    BOS: "BOS", EOS: "EOS", L2R: "L2R", R2L: "R2L",
    PRE: "PRE", SUF: "SUF", MID: "MID", PAD: "PAD",
}

# persisted into checkpoint headers so data and models stay consistent
VOCAB_SPEC = {
    "kind": "byte",
    "vocab_size": VOCAB_SIZE,
    "sentinels": {name: tid for tid, name in SENTINEL_NAMES.items()},
}


class SentinelError(ValueError):
    """A sentinel id appeared where only byte tokens are legal."""


def encode(data: bytes) -> list[int]:
    """Bytes to token ids; sentinels are never emitted."""
    return list(data)


def decode(ids) -> bytes:
    """Token ids back to bytes; sentinel ids are an error, named."""
    out = bytearray()
    for t in ids:
        if t >= 256:
            name = SENTINEL_NAMES.get(t, str(t))
            raise SentinelError(f"cannot decode sentinel {name} (id {t})")
        if t < 0:
            raise SentinelError(f"cannot decode negative id {t}")
        out.append(t)
    return bytes(out)


def strip_sentinels(ids) -> list[int]:
    """Drop every sentinel id, keeping byte tokens in order."""
    return [t for t in ids if t < 256]


def reverse_with_sentinel(doc, direction: str) -> tuple[list[int], dict[int, int]]:
    """Lay a document out as a directional stream.

    L2R: [L2R, BOS, x_1..x_N].  R2L: [R2L, BOS, x_N..x_1].
    Returns the stream and the position map from document index i (1-based)
    to the stream index holding x_i, exposing i <-> N-i+1 for R2L.
    """
    doc = list(doc)
    for t in doc:
        if t >= 256:
            raise SentinelError(
                f"document contains sentinel {SENTINEL_NAMES.get(t, t)}")
    n = len(doc)
    if direction == "l2r":
        stream = [L2R, BOS] + doc
        posmap = {i: i + 1 for i in range(1, n + 1)}
    elif direction == "r2l":
        stream = [R2L, BOS] + doc[::-1]
        posmap = {i: n - i + 2 for i in range(1, n + 1)}
    else:
        raise ValueError(f"direction must be 'l2r' or 'r2l', got {direction!r}")
    return stream, posmap
