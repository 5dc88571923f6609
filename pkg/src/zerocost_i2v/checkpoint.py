"""Single-file checkpoint: fixed header, JSON manifest, 64-byte aligned payload.

Layout::

    b"ZI2V" | u32 LE version | u64 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest maps tensor name to ``{dtype, shape, byte_offset, byte_length,
frozen}`` with absolute byte offsets.  String metadata (model config, offset
plan, adapter layout) rides along under the reserved ``"__metadata__"`` key.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, CheckpointError, OverlappingRanges, TruncatedPayload, UnknownDtype
from .vit import WeightStore

MAGIC = b"ZI2V"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
ALIGN = 64
METADATA_KEY = "__metadata__"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _render(entries: dict, meta: dict, base: int) -> bytes:
    manifest = {}
    if meta:
        manifest[METADATA_KEY] = meta
    for name, e in entries.items():
        manifest[name] = {**e, "byte_offset": base + e["byte_offset"]}
    return json.dumps(manifest, separators=(",", ":")).encode("utf-8")


def dumps(store: WeightStore) -> bytes:
    entries = {}
    cursor = 0
    for name, arr in store.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise UnknownDtype(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        cursor = _align(cursor)
        entries[name] = {"dtype": code, "shape": list(arr.shape), "byte_offset": cursor,
                         "byte_length": int(arr.nbytes), "frozen": bool(store.frozen[name])}
        cursor += arr.nbytes
    meta = {str(k): str(v) for k, v in store.meta.items()}
    # offsets depend on the manifest length and vice versa; iterate to a fixed point
    base = _align(HEADER.size + 2)
    while True:
        manifest = _render(entries, meta, base)
        new_base = _align(HEADER.size + len(manifest)) if entries else HEADER.size + len(manifest)
        if new_base == base or not entries:
            break
        base = new_base
    out = bytearray(HEADER.pack(MAGIC, VERSION, len(manifest)))
    out += manifest
    for name, arr in store.items():
        start = base + entries[name]["byte_offset"]
        out += b"\0" * (start - len(out))
        out += np.ascontiguousarray(arr, dtype=DTYPES[entries[name]["dtype"]]).tobytes()
    return bytes(out)


def save_checkpoint(store: WeightStore, path) -> None:
    """Write atomically: the file appears complete or not at all."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(store))
    os.replace(tmp, path)


def _validate_entry(name: str, e, end_of_manifest: int, size: int) -> tuple[np.dtype, tuple]:
    if not isinstance(e, dict) or set(e) != {"dtype", "shape", "byte_offset", "byte_length", "frozen"}:
        raise CheckpointError(f"manifest entry {name!r} is malformed")
    dtype = DTYPES.get(e["dtype"])
    if dtype is None:
        raise UnknownDtype(f"tensor {name!r} has unknown dtype {e['dtype']!r}")
    shape = e["shape"]
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise CheckpointError(f"tensor {name!r} has an invalid shape {shape!r}")
    off, length = e["byte_offset"], e["byte_length"]
    if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in (off, length)):
        raise CheckpointError(f"tensor {name!r} has invalid byte range")
    if length != math.prod(shape) * dtype.itemsize:
        raise CheckpointError(
            f"tensor {name!r}: byte_length {length} does not match shape {shape} of {e['dtype']}")
    if off < end_of_manifest:
        raise OverlappingRanges(f"tensor {name!r} overlaps the header or manifest")
    if off + length > size:
        raise TruncatedPayload(
            f"tensor {name!r} needs bytes [{off}, {off + length}) but the file has {size}")
    if not isinstance(e["frozen"], bool):
        raise CheckpointError(f"tensor {name!r}: frozen must be a boolean")
    return dtype, tuple(shape)


def loads(blob: bytes) -> WeightStore:
    """Parse a checkpoint; the whole manifest is validated before any tensor is read."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"not a checkpoint: magic {bytes(blob[:4])!r} != {MAGIC!r}")
    if len(blob) < HEADER.size:
        raise TruncatedPayload("file ends inside the header")
    _, version, mlen = HEADER.unpack_from(blob)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    end = HEADER.size + mlen
    if end > len(blob):
        raise TruncatedPayload(f"manifest of {mlen} bytes runs past the end of the file")
    try:
        manifest = json.loads(blob[HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CheckpointError("manifest must be a JSON object")
    meta = manifest.pop(METADATA_KEY, {})
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise CheckpointError("metadata must map strings to strings")
    checked = {name: _validate_entry(name, e, end, len(blob)) for name, e in manifest.items()}
    spans = sorted((e["byte_offset"], e["byte_offset"] + e["byte_length"], n)
                   for n, e in manifest.items() if e["byte_length"])
    for (_, stop, a), (start, _, b) in zip(spans, spans[1:]):
        if start < stop:
            raise OverlappingRanges(f"tensors {a!r} and {b!r} share bytes")
    store = WeightStore(meta=dict(meta))
    for name, e in manifest.items():
        dtype, shape = checked[name]
        raw = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=e["byte_offset"])
        store.add(name, raw.reshape(shape).astype(dtype.newbyteorder("="), copy=True),
                  frozen=e["frozen"])
    return store


def load_checkpoint(path) -> WeightStore:
    return loads(Path(path).read_bytes())
