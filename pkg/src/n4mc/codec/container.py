"""The ``.n4mc`` container.

Layout (all little-endian)::

    magic "N4MC" | version u8 | header record | section count u8
    section table: count x (id u8, offset u64, length u64, crc32 u32)
    section payloads, back to back, in table order

Header record (``HEADER``): fingerprint 8 bytes, k u16, k' u16, d u16,
width u16, N u32, n u32, p u32, tau f64, normalization center 3 x f64,
normalization scale f64.

A blob-group section holds: blob count u32, per blob (ndim u8, dims u32 x ndim,
offset f32, scale f32), then the section's Huffman table (256 x u8 code
lengths), symbol count u64, bit count u64 and the packed payload.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import CorruptionError, ValidationError
from .huffman import huffman_decode, huffman_encode
from .quant import QuantizedBlob

MAGIC = b"N4MC"
VERSION = 1
HEADER = struct.Struct("<8sHHHHIII d3dd")
ENTRY = struct.Struct("<BQQI")


class Section(enum.IntEnum):
    CONFIG = 1
    DECODER = 2
    TRANSFORMER = 3
    LATENTS = 4
    KEY_FEATURES = 5


@dataclass(frozen=True)
class Header:
    fingerprint: str  # 16 hex chars
    k: int
    feature_res: int
    feature_dim: int
    width: int
    frames: int
    group_size: int
    centers: int
    tau: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def pack(self) -> bytes:
        return HEADER.pack(bytes.fromhex(self.fingerprint), self.k, self.feature_res, self.feature_dim, self.width,
                           self.frames, self.group_size, self.centers, self.tau, *self.center, self.scale)

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        v = HEADER.unpack(data)
        return cls(v[0].hex(), *v[1:9], tuple(v[9:12]), v[12])


@dataclass
class Container:
    header: Header
    sections: dict[int, bytes] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        ids = sorted(self.sections)
        prefix = len(MAGIC) + 1 + HEADER.size + 1
        offset = prefix + ENTRY.size * len(ids)
        table = b""
        for sid in ids:
            body = self.sections[sid]
            table += ENTRY.pack(int(sid), offset, len(body), zlib.crc32(body))
            offset += len(body)
        out = MAGIC + struct.pack("<B", self.version) + self.header.pack() + struct.pack("<B", len(ids)) + table
        return out + b"".join(self.sections[s] for s in ids)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Container":
        prefix = len(MAGIC) + 1 + HEADER.size + 1
        if len(data) < prefix or data[:4] != MAGIC:
            raise CorruptionError("not an N4MC container (bad magic)", bit_offset=0)
        version = data[4]
        if version != VERSION:
            raise ValidationError(f"unsupported container version {version}")
        header = Header.unpack(data[5:5 + HEADER.size])
        count = data[prefix - 1]
        table_end = prefix + ENTRY.size * count
        if len(data) < table_end:
            raise CorruptionError("truncated section table", bit_offset=8 * len(data))
        sections: dict[int, bytes] = {}
        expected = table_end
        for i in range(count):
            sid, off, length, crc = ENTRY.unpack_from(data, prefix + i * ENTRY.size)
            name = _section_name(sid)
            if off != expected:
                raise CorruptionError(f"section {name} offset {off} overlaps or leaves a gap (expected {expected})",
                                      section=name)
            if off + length > len(data):
                raise CorruptionError(f"section {name} runs past end of file", section=name, bit_offset=8 * len(data))
            body = data[off:off + length]
            if zlib.crc32(body) != crc:
                raise CorruptionError(f"CRC mismatch in section {name}", section=name, bit_offset=8 * off)
            if sid in sections:
                raise CorruptionError(f"duplicate section {name}", section=name)
            sections[sid] = body
            expected = off + length
        if expected != len(data):
            raise CorruptionError(f"{len(data) - expected} trailing bytes after the last section",
                                  bit_offset=8 * expected)
        return cls(header, sections, version)

    def section_table(self) -> list[tuple[str, int, int]]:
        """``(name, offset, length)`` per section, as laid out by :meth:`to_bytes`."""
        ids = sorted(self.sections)
        offset = len(MAGIC) + 1 + HEADER.size + 1 + ENTRY.size * len(ids)
        rows = []
        for sid in ids:
            rows.append((_section_name(sid), offset, len(self.sections[sid])))
            offset += len(self.sections[sid])
        return rows

    @property
    def overhead_bytes(self) -> int:
        return len(MAGIC) + 1 + HEADER.size + 1 + ENTRY.size * len(self.sections)


def _section_name(sid: int) -> str:
    try:
        return Section(sid).name.lower()
    except ValueError:
        return f"unknown-{sid}"


def pack_blobs(blobs: list[QuantizedBlob]) -> bytes:
    meta = [struct.pack("<I", len(blobs))]
    for b in blobs:
        meta.append(struct.pack("<B", len(b.shape)) + struct.pack(f"<{len(b.shape)}I", *b.shape))
        meta.append(struct.pack("<ff", b.offset, b.scale))
    symbols = np.concatenate([b.symbols for b in blobs]) if blobs else np.zeros(0, np.uint8)
    if symbols.size:
        lengths, payload, nbits = huffman_encode(symbols)
    else:
        lengths, payload, nbits = np.zeros(256, np.uint8), b"", 0
    meta.append(lengths.astype(np.uint8).tobytes() + struct.pack("<QQ", symbols.size, nbits))
    return b"".join(meta) + payload


def unpack_blobs(body: bytes, section: str = "?") -> list[QuantizedBlob]:
    try:
        (n,) = struct.unpack_from("<I", body, 0)
        pos = 4
        shapes, params = [], []
        for _ in range(n):
            nd = body[pos]
            shape = struct.unpack_from(f"<{nd}I", body, pos + 1)
            pos += 1 + 4 * nd
            lo, sc = struct.unpack_from("<ff", body, pos)
            pos += 8
            shapes.append(tuple(shape))
            params.append((np.float32(lo), np.float32(sc)))
        lengths = np.frombuffer(body, dtype=np.uint8, count=256, offset=pos)
        count, nbits = struct.unpack_from("<QQ", body, pos + 256)
        pos += 256 + 16
    except (struct.error, IndexError, ValueError) as exc:
        raise CorruptionError(f"malformed blob metadata: {exc}", section=section) from exc
    if (nbits + 7) // 8 != len(body) - pos:
        raise CorruptionError(f"payload is {len(body) - pos} bytes, header announces {nbits} bits", section=section)
    total = sum(int(np.prod(s, dtype=np.int64)) for s in shapes)
    if total != count:
        raise CorruptionError(f"blob shapes cover {total} symbols, section holds {count}", section=section)
    try:
        symbols = huffman_decode(lengths, body[pos:], count, nbits)
    except CorruptionError as exc:
        raise CorruptionError(exc.message, bit_offset=exc.bit_offset, section=section) from exc
    except ValidationError as exc:
        raise CorruptionError(str(exc), section=section) from exc
    out, start = [], 0
    for shape, (lo, sc) in zip(shapes, params):
        size = int(np.prod(shape, dtype=np.int64))
        out.append(QuantizedBlob(shape, lo, sc, symbols[start:start + size].copy()))
        start += size
    return out
