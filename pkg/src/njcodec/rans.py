"""Byte-oriented range asymmetric numeral system coder.

Classic single-state configuration: 32-bit state renormalized a byte at a
time against 16-bit frequency tables.  Symbols are pushed in reverse order
so decoding streams forward.  Out-of-range symbols are coded through each
table's escape slot followed by a raw 16-bit value in a side channel.

Normative byte layout: big-endian u32 final state, the renormalization
bytes, then (only when escapes occurred) a little-endian u16 escape count
followed by one little-endian i16 per escape, in decode order.  Everything
in the hot path is fixed-width integer arithmetic, so streams are
byte-identical across platforms.
"""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass

from .entropy import CdfTable, PRECISION_BITS, TOTAL_FREQ

RANS_LOWER = 1 << 23  # state lives in [RANS_LOWER, RANS_LOWER << 8)
_STATE_STRUCT = struct.Struct(">I")
_ESC_COUNT_STRUCT = struct.Struct("<H")
_RAW_MIN, _RAW_MAX = -(1 << 15), (1 << 15) - 1


class CorruptStreamError(ValueError):
    """Decoder state desynchronized from the stream."""


@dataclass
class Bitstream:
    """Entropy-coded payload; decoding needs the same tables and count."""

    data: bytes
    symbol_count: int


def _tables_for(symbols, tables):
    if isinstance(tables, CdfTable):
        return [tables] * len(symbols)
    tables = list(tables)
    if len(tables) != len(symbols):
        raise ValueError(f"{len(symbols)} symbols but {len(tables)} tables")
    return tables


def rans_encode(symbols, tables) -> Bitstream:
    """Encode integer symbols against per-symbol tables."""
    symbols = [int(s) for s in symbols]
    tables = _tables_for(symbols, tables)

    escapes: list[int] = []  # raw values in forward (decode) order
    for s, t in zip(symbols, tables):
        if t.index_of(s) == t.escape_index:
            if not _RAW_MIN <= s <= _RAW_MAX:
                raise ValueError(f"symbol {s} exceeds the 16-bit escape range")
            escapes.append(s)
    if len(escapes) > 0xFFFF:
        raise ValueError("too many escape symbols for one stream")

    x = RANS_LOWER
    emitted = bytearray()
    for s, t in zip(reversed(symbols), reversed(tables)):
        idx = t.index_of(s)
        f = int(t.freqs[idx])
        if f == 0:
            raise ValueError(f"symbol {s} has zero frequency in its table")
        c = int(t.cum[idx])
        x_max = f << 15  # ((RANS_LOWER >> 16) << 8) * f
        while x >= x_max:
            emitted.append(x & 0xFF)
            x >>= 8
        x = ((x // f) << PRECISION_BITS) + (x % f) + c

    out = bytearray(_STATE_STRUCT.pack(x))
    out.extend(reversed(emitted))
    if escapes:
        out.extend(_ESC_COUNT_STRUCT.pack(len(escapes)))
        for v in escapes:
            out.extend(struct.pack("<h", v))
    return Bitstream(bytes(out), len(symbols))


def rans_decode(stream: Bitstream | bytes, tables, count: int) -> list[int]:
    """Recover the exact symbol sequence; raises CorruptStreamError on damage."""
    data = stream.data if isinstance(stream, Bitstream) else bytes(stream)
    if len(data) < 4:
        raise CorruptStreamError("stream shorter than the state word")
    if isinstance(tables, CdfTable):
        tables = [tables] * count
    else:
        tables = list(tables)
        if len(tables) != count:
            raise ValueError(f"{count} symbols but {len(tables)} tables")

    (x,) = _STATE_STRUCT.unpack_from(data, 0)
    if x < RANS_LOWER:
        raise CorruptStreamError("initial state below the renormalization bound")
    pos = 4
    end = len(data)
    mask = TOTAL_FREQ - 1

    out: list[int] = []
    escape_slots: list[int] = []
    for i in range(count):
        t = tables[i]
        slot = x & mask
        idx = bisect.bisect_right(t.cum_list, slot) - 1
        f = int(t.freqs[idx])
        if f == 0:
            raise CorruptStreamError("slot landed in a zero-frequency region")
        x = f * (x >> PRECISION_BITS) + slot - int(t.cum[idx])
        while x < RANS_LOWER:
            if pos >= end:
                raise CorruptStreamError("stream truncated during renormalization")
            x = (x << 8) | data[pos]
            pos += 1
        if idx == t.escape_index:
            escape_slots.append(len(out))
            out.append(0)
        else:
            out.append(t.smin + idx)

    if x != RANS_LOWER:
        raise CorruptStreamError("final-state sentinel mismatch")

    if escape_slots:
        if end - pos < 2:
            raise CorruptStreamError("missing escape side channel")
        (n_esc,) = _ESC_COUNT_STRUCT.unpack_from(data, pos)
        pos += 2
        if n_esc != len(escape_slots) or end - pos != 2 * n_esc:
            raise CorruptStreamError("escape side channel length mismatch")
        for slot_idx in escape_slots:
            (v,) = struct.unpack_from("<h", data, pos)
            pos += 2
            out[slot_idx] = v
    elif pos != end:
        raise CorruptStreamError(f"{end - pos} trailing bytes after decode")
    return out


def code_length_bound(symbols, tables) -> float:
    """Information content in bits implied by the tables, escapes included.

    The encoded stream is guaranteed within [bound - 16, bound + 64] bits.
    """
    symbols = [int(s) for s in symbols]
    tables = _tables_for(symbols, tables)
    bits = 0.0
    for s, t in zip(symbols, tables):
        idx = t.index_of(s)
        f = int(t.freqs[idx])
        if f == 0:
            raise ValueError(f"symbol {s} has zero frequency in its table")
        bits += PRECISION_BITS - math.log2(f)
        if idx == t.escape_index:
            bits += 16.0
    return bits
