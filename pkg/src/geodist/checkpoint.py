"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"GEODIST1"                      magic
    u32 version
    u32 n, n bytes                   config JSON (utf-8)
    u32 segment count
      per segment: u16 name length, name (utf-8), u64 offset, u64 length   (in floats)
    float32[...] parameter blob
    u32 CRC32 of everything above
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"GEODIST1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(model, meta: dict | None = None) -> bytes:
    doc = {"kind": model.kind, "model": model.config.to_dict()}
    doc.update(meta or {})
    cfg = json.dumps(doc, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(model.offsets))]
    for name, (off, n) in model.offsets.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", off, n))
    parts.append(np.asarray(model.params, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes) -> tuple[dict, dict[str, tuple[int, int]], np.ndarray]:
    """Parse and validate; returns (config document, segment table, float32 params)."""
    if len(data) < len(MAGIC) + 16 or not data.startswith(MAGIC):
        raise CheckpointError("not a geodist checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    doc = json.loads(body[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    table = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + ln].decode("utf-8")
        pos += ln
        off, length = struct.unpack_from("<QQ", body, pos)
        pos += 16
        table[name] = (off, length)
    blob = body[pos:]
    if len(blob) % 4:
        raise CheckpointError("parameter blob is not a whole number of float32s")
    params = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    expect = 0
    for name, (off, length) in sorted(table.items(), key=lambda kv: kv[1][0]):
        if off != expect:
            raise CheckpointError(f"segment table does not partition the blob at {name!r}")
        expect = off + length
    if expect != len(params):
        raise CheckpointError("segment table does not cover the parameter blob")
    return doc, table, params


def save(path, model, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(model, meta))


def load(path):
    """Returns (model, config document)."""
    doc, table, params = decode(Path(path).read_bytes())
    kind = doc.get("kind")
    if kind == "denoiser":
        from .denoiser import DenoiserConfig, DenoiserModel
        model = DenoiserModel(DenoiserConfig(**doc["model"]), params)
    elif kind == "vector_field":
        from .baseline_vf import VFConfig, VectorFieldModel
        model = VectorFieldModel(VFConfig(**{k: tuple(v) if isinstance(v, list) else v
                                             for k, v in doc["model"].items()}), params)
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    if dict(model.offsets) != table:
        raise CheckpointError("segment table does not match the model configuration")
    return model, doc
