"""Binary ``NFVG`` checkpoint container.

Layout (little-endian)::

    b"NFVG" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 entry_count | entries... | u32 crc32 of everything before it

    entry := u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 values

Entry names are dotted and start with their group: ``head.``, ``tail.``,
``processor.``, ``embeddings.``, ``pyramid.`` or ``optim.m.`` / ``optim.v.``
for Adam moments.
"""

import json
import struct
import zlib

import numpy as np

from .errors import FormatError

MAGIC = b"NFVG"
VERSION = 1


def encode(entries, meta):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(entries))]
    for name, array in entries.items():
        array = np.asarray(array, dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob):
    """Return ``(meta, entries)``; raises :class:`FormatError` naming the bad field."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("magic: not an NFVG checkpoint")
    if len(blob) < 8 or struct.unpack_from("<I", blob, 4)[0] != VERSION:
        raise FormatError(f"version: unsupported checkpoint version (expected {VERSION})")
    if len(blob) < 16 or struct.unpack_from("<I", blob, len(blob) - 4)[0] != zlib.crc32(blob[:-4]):
        raise FormatError("checksum: file is truncated or corrupted")
    try:
        off = 8
        (meta_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        meta = json.loads(blob[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            entries[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"entries: malformed payload ({exc})") from exc
    if off != len(blob) - 4:
        raise FormatError("entries: trailing bytes before checksum")
    return meta, entries


def save(path, entries, meta):
    blob = encode(entries, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
