"""Canonical Huffman coding over bytes.

Codes are assigned in (length, symbol) order and packed MSB first. A code
table is fully described by 256 code lengths (0 = unused symbol).
"""

from __future__ import annotations

import heapq

import numba
import numpy as np

from ..errors import CorruptionError, ValidationError

MAX_CODE_LENGTH = 24


def code_lengths(freqs: np.ndarray, max_length: int = MAX_CODE_LENGTH) -> np.ndarray:
    """Huffman code lengths for 256 symbol frequencies, capped at ``max_length``.

    Ties are broken by symbol so the result is deterministic. A single used
    symbol gets length 1. Over-long codes are avoided by halving frequencies
    (keeping used symbols at >= 1) and rebuilding.
    """
    f = np.asarray(freqs, dtype=np.int64).copy()
    used = np.nonzero(f)[0]
    lengths = np.zeros(256, dtype=np.uint8)
    if len(used) == 0:
        return lengths
    if len(used) == 1:
        lengths[used[0]] = 1
        return lengths
    while True:
        heap = [(int(f[s]), int(s), (int(s),)) for s in used]
        heapq.heapify(heap)
        depth = np.zeros(256, dtype=np.int64)
        tick = 256
        while len(heap) > 1:
            fa, _, a = heapq.heappop(heap)
            fb, _, b = heapq.heappop(heap)
            for s in a + b:
                depth[s] += 1
            heapq.heappush(heap, (fa + fb, tick, a + b))
            tick += 1
        if depth.max() <= max_length:
            lengths[used] = depth[used]
            return lengths
        f[used] = np.maximum(f[used] // 2, 1)


def canonical_codes(lengths: np.ndarray) -> np.ndarray:
    """Code value per symbol for a canonical code with the given lengths."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = np.zeros(256, dtype=np.int64)
    order = sorted((int(lengths[s]), s) for s in range(256) if lengths[s] > 0)
    code = 0
    prev = order[0][0] if order else 0
    for i, (ln, s) in enumerate(order):
        if i:
            code = (code + 1) << (ln - prev)
        prev = ln
        codes[s] = code
    return codes


def kraft_sum(lengths: np.ndarray) -> float:
    ls = np.asarray(lengths, dtype=np.int64)
    ls = ls[ls > 0]
    return float(np.sum(2.0 ** (-ls.astype(np.float64))))


def validate_lengths(lengths: np.ndarray) -> None:
    ls = np.asarray(lengths)
    if ls.shape != (256,):
        raise ValidationError(f"code table must list 256 lengths, got {ls.shape}")
    if ls.max(initial=0) > MAX_CODE_LENGTH:
        raise ValidationError(f"code length {int(ls.max())} exceeds {MAX_CODE_LENGTH}")
    if kraft_sum(ls) > 1.0:
        raise ValidationError(f"code lengths violate the Kraft inequality (sum {kraft_sum(ls):.6g} > 1)")


def _pack(symbols: np.ndarray, lengths: np.ndarray) -> tuple[bytes, int]:
    codes = canonical_codes(lengths)
    sl = lengths.astype(np.int64)[symbols]
    sc = codes[symbols]
    total = int(sl.sum())
    maxlen = int(sl.max(initial=0))
    if total == 0:
        return b"", 0
    # bit j (MSB first) of each code; rows padded to maxlen then masked
    j = np.arange(maxlen)
    shift = sl[:, None] - 1 - j[None, :]
    bits = (sc[:, None] >> np.maximum(shift, 0)) & 1
    bits = bits[shift >= 0].astype(np.uint8)
    return np.packbits(bits).tobytes(), total


def huffman_encode(symbols) -> tuple[np.ndarray, bytes, int]:
    """Returns ``(lengths[256], payload, bit_count)``.

    Falls back to a flat 8-bit code if the Huffman payload would exceed
    ``8 * count`` bits.
    """
    s = np.asarray(symbols, dtype=np.uint8).reshape(-1)
    if s.size == 0:
        raise ValidationError("cannot entropy-code an empty symbol sequence")
    lengths = code_lengths(np.bincount(s, minlength=256))
    if int(lengths.astype(np.int64)[s].sum()) > 8 * s.size:
        lengths = np.full(256, 8, dtype=np.uint8)
    payload, nbits = _pack(s, lengths)
    return lengths, payload, nbits


@numba.njit(cache=True)
def _decode(data, nbits, count, first_code, first_index, per_len, sorted_syms, maxlen, out):
    pos = 0
    for i in range(count):
        code = 0
        start = pos
        found = False
        for ln in range(1, maxlen + 1):
            if pos >= nbits:
                return 1, start, i
            bit = (data[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = (code << 1) | bit
            off = code - first_code[ln]
            if per_len[ln] > 0 and off >= 0 and off < per_len[ln]:
                out[i] = sorted_syms[first_index[ln] + off]
                found = True
                break
        if not found:
            return 2, start, i
    return 0, pos, count


def huffman_decode(lengths, payload: bytes, count: int, nbits: int | None = None) -> np.ndarray:
    """Inverse of :func:`huffman_encode`. Raises ``CorruptionError`` carrying the bit offset."""
    ls = np.asarray(lengths, dtype=np.int64)
    validate_lengths(ls)
    data = np.frombuffer(payload, dtype=np.uint8)
    if nbits is None:
        nbits = 8 * len(data)
    if nbits > 8 * len(data):
        raise CorruptionError(f"bit count {nbits} exceeds payload of {len(data)} bytes", bit_offset=8 * len(data))
    out = np.zeros(count, dtype=np.uint8)
    if count == 0:
        return out
    if not (ls > 0).any():
        raise CorruptionError("empty code table for a non-empty stream", bit_offset=0)
    maxlen = int(ls.max())
    codes = canonical_codes(ls)
    per_len = np.zeros(maxlen + 1, dtype=np.int64)
    first_code = np.zeros(maxlen + 1, dtype=np.int64)
    first_index = np.zeros(maxlen + 1, dtype=np.int64)
    order = sorted((int(ls[s]), s) for s in range(256) if ls[s] > 0)
    sorted_syms = np.array([s for _, s in order], dtype=np.uint8)
    for idx in range(len(order) - 1, -1, -1):
        ln, s = order[idx]
        per_len[ln] += 1
        first_index[ln] = idx
        first_code[ln] = codes[s]
    status, offset, i = _decode(data, nbits, count, first_code, first_index, per_len, sorted_syms, maxlen, out)
    if status == 1:
        raise CorruptionError(f"stream truncated while decoding symbol {i} of {count}", bit_offset=int(offset))
    if status == 2:
        raise CorruptionError(f"invalid code while decoding symbol {i}", bit_offset=int(offset))
    if offset != nbits:
        raise CorruptionError(f"{nbits - offset} trailing bits after {count} symbols", bit_offset=int(offset))
    return out
