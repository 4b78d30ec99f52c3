"""LZ4 block format, compressor and bounds-checked decompressor.

Only the raw block format is implemented (no frame header); the record frame
carries the uncompressed length instead.

A block is a run of sequences. Each sequence is a token byte (high nibble:
literal length, low nibble: match length - 4), optional 255-continued length
bytes, the literals, a 2-byte little-endian match offset and optional match
length bytes. The last sequence carries literals only.

The compressor is greedy over a 64Ki-entry hash table of 4-byte prefixes and
respects the end-of-block rules of the reference decoder: the last 5 bytes
are always literals and no match starts in the last 12 bytes.
"""

from __future__ import annotations

import struct

from streamjoin.errors import CorruptBlock, InvalidArgument

MIN_MATCH = 4
LAST_LITERALS = 5
MF_LIMIT = 12
MAX_OFFSET = 0xFFFF
MAX_INPUT = (1 << 31) - 1
HASH_LOG = 16
SKIP_TRIGGER = 6

_U32 = struct.Struct("<I")


def _write_length(out: bytearray, n: int) -> None:
    # continuation bytes for a length whose nibble saturated at 15
    n -= 15
    while n >= 255:
        out.append(255)
        n -= 255
    out.append(n)


def _emit(out: bytearray, data: bytes, anchor: int, end: int, offset: int, match_len: int) -> None:
    lit = end - anchor
    ml = match_len - MIN_MATCH
    token = (min(lit, 15) << 4) | min(ml, 15)
    out.append(token)
    if lit >= 15:
        _write_length(out, lit)
    out += data[anchor:end]
    out.append(offset & 0xFF)
    out.append(offset >> 8)
    if ml >= 15:
        _write_length(out, ml)


def _emit_last(out: bytearray, data: bytes, anchor: int) -> None:
    lit = len(data) - anchor
    out.append(min(lit, 15) << 4)
    if lit >= 15:
        _write_length(out, lit)
    out += data[anchor:]


def lz4_compress(data: bytes) -> bytes:
    """Compress ``data`` into a single LZ4 block. Never fails; worst case is all literals."""
    n = len(data)
    if n > MAX_INPUT:
        raise InvalidArgument("input larger than 2^31-1 bytes")
    data = bytes(data)
    out = bytearray()
    if n < MF_LIMIT + 1:
        _emit_last(out, data, 0)
        return bytes(out)

    table = [-1] * (1 << HASH_LOG)
    unpack = _U32.unpack_from
    shift = 32 - HASH_LOG
    match_start_limit = n - MF_LIMIT  # a match may start at i < this
    match_end_limit = n - LAST_LITERALS
    anchor = 0
    i = 0
    misses = 0
    while i < match_start_limit:
        seq = unpack(data, i)[0]
        h = ((seq * 2654435761) & 0xFFFFFFFF) >> shift
        ref = table[h]
        table[h] = i
        if ref < 0 or i - ref > MAX_OFFSET or unpack(data, ref)[0] != seq:
            misses += 1
            i += 1 + (misses >> SKIP_TRIGGER)
            continue
        misses = 0
        # extend backwards over pending literals
        while i > anchor and ref > 0 and data[i - 1] == data[ref - 1]:
            i -= 1
            ref -= 1
        # extend forwards, 8 bytes at a time then bytewise
        j = i + MIN_MATCH
        k = ref + MIN_MATCH
        while j + 8 <= match_end_limit and data[j : j + 8] == data[k : k + 8]:
            j += 8
            k += 8
        while j < match_end_limit and data[j] == data[k]:
            j += 1
            k += 1
        _emit(out, data, anchor, i, i - ref, j - i)
        # prime the table inside the match so the next search can find it
        if j - 2 < match_start_limit:
            table[((unpack(data, j - 2)[0] * 2654435761) & 0xFFFFFFFF) >> shift] = j - 2
        i = j
        anchor = j
    _emit_last(out, data, anchor)
    return bytes(out)


def _read_length(src: bytes, i: int, n: int) -> tuple[int, int]:
    total = 0
    while True:
        if i >= n:
            raise CorruptBlock("block ends inside a length field")
        b = src[i]
        i += 1
        total += b
        if b != 255:
            return total, i


def lz4_decompress(src: bytes, expected_len: int) -> bytes:
    """Decompress one block; the result must be exactly ``expected_len`` bytes."""
    if expected_len < 0:
        raise InvalidArgument("expected_len must be non-negative")
    n = len(src)
    if n == 0:
        if expected_len == 0:
            return b""
        raise CorruptBlock("empty block")
    out = bytearray()
    i = 0
    while True:
        token = src[i]
        i += 1
        lit = token >> 4
        if lit == 15:
            extra, i = _read_length(src, i, n)
            lit += extra
        if i + lit > n:
            raise CorruptBlock("literal run exceeds block")
        if len(out) + lit > expected_len:
            raise CorruptBlock("output exceeds expected length")
        out += src[i : i + lit]
        i += lit
        if i == n:
            break
        if i + 2 > n:
            raise CorruptBlock("block ends inside a match offset")
        offset = src[i] | (src[i + 1] << 8)
        i += 2
        if offset == 0:
            raise CorruptBlock("match offset 0")
        produced = len(out)
        if offset > produced:
            raise CorruptBlock(f"match offset {offset} reaches before start of output ({produced} bytes)")
        ml = token & 0x0F
        if ml == 15:
            extra, i = _read_length(src, i, n)
            ml += extra
        ml += MIN_MATCH
        if produced + ml > expected_len:
            raise CorruptBlock("output exceeds expected length")
        start = produced - offset
        if offset >= ml:
            out += out[start : start + ml]
        else:
            pattern = bytes(out[start:])
            reps, rest = divmod(ml, offset)
            out += pattern * reps + pattern[:rest]
        if i >= n:
            raise CorruptBlock("block does not end with a literal-only sequence")
    if len(out) != expected_len:
        raise CorruptBlock(f"decompressed {len(out)} bytes, expected {expected_len}")
    return bytes(out)


def max_compressed_size(n: int) -> int:
    return n + n // 255 + 16
