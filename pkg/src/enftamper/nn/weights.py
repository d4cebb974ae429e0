"""Binary weight files.

Layout (all little-endian)::

    b"ENFW"  magic
    u32      format version
    u32      parameter count
    per parameter:
        u32 name length, name bytes (utf-8), u32 rank, u32 dims[rank], f64 values
    u32      CRC-32 of everything above

A JSON sidecar next to the file lists names, shapes and any extra metadata.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptWeights, IoFailure, VersionMismatch

MAGIC = b"ENFW"
FORMAT_VERSION = 1


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def encode(named: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptWeights("not a weight file (bad magic or too short)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"weight format {version}, this build reads {FORMAT_VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptWeights("checksum mismatch (truncated or altered file)")
    out = []
    pos = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out.append((name, arr.astype(np.float64)))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptWeights(f"malformed parameter record: {exc}") from exc
    if pos != len(body):
        raise CorruptWeights("trailing bytes after the last parameter")
    return out


def save_weights(named, path, meta: dict | None = None) -> None:
    blob = encode(named)
    side = {"format_version": FORMAT_VERSION,
            "parameters": [{"name": n, "shape": list(np.shape(a))} for n, a in named]}
    if meta:
        side["meta"] = meta
    try:
        Path(path).write_bytes(blob)
        sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_weights(path) -> list[tuple[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode(blob)


def read_sidecar(path) -> dict:
    try:
        return json.loads(sidecar_path(path).read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise CorruptWeights(f"sidecar is not valid JSON: {exc}") from exc
