"""On-disk formats: sequence files, checkpoints, config text, JSON helpers.

Everything is little-endian and versioned. Writers are atomic (temp file in
the same directory, then rename) so a crash never leaves a torn file.

Sequence file (magic "PSTS", version 1):

    magic      4 bytes  b"PSTS"
    version    u16
    T          u32      frames
    n          u32      points per frame (constant across frames)
    f          u32      feature width
    classes    u16
    flags      u8       bit 0: per-point labels present
    then T frame blocks, each:
        coords  f32 x n*3   row-major
        feats   f32 x n*f
        labels  u16 x n     only when flag bit 0 is set

Checkpoint file (magic "PSTW", version 1):

    magic      4 bytes  b"PSTW"
    version    u16
    meta_len   u32
    meta       UTF-8 JSON of length meta_len (task, config, class count)
    count      u32      number of parameters
    name table, count records:
        name_len u16, name UTF-8, ndim u8, dims u32 x ndim
    payloads   f32 row-major, concatenated in name-table order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Optional

import numpy as np

from .autodiff import Param
from .pointops import PointCloudFrame, PointCloudSequence

SEQ_MAGIC = b"PSTS"
CKPT_MAGIC = b"PSTW"
SEQ_VERSION = 1
CKPT_VERSION = 1

_SEQ_HEADER = struct.Struct("<4sHIIIHB")
_CKPT_HEADER = struct.Struct("<4sHI")


class FormatError(ValueError):
    """Raised for malformed, truncated, or mis-typed on-disk data."""


def atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def write_json_atomic(path: str, obj) -> None:
    atomic_write_bytes(path, (canonical_json(obj) + "\n").encode("utf-8"))


def parse_config_text(text: str) -> dict[str, str]:
    """UTF-8 key = value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"config line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_config(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# sequence files


def encode_sequence(seq: PointCloudSequence) -> bytes:
    frames = seq.frames
    n = frames[0].n
    if any(f.n != n for f in frames):
        raise FormatError("sequence file requires a constant point count per frame")
    has_labels = frames[0].labels is not None
    if any((f.labels is not None) != has_labels for f in frames):
        raise FormatError("either every frame has labels or none does")
    if not 0 <= seq.num_classes <= 0xFFFF:
        raise FormatError(f"num_classes must fit in u16, got {seq.num_classes}")
    parts = [
        _SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, seq.T, n, seq.feat_width,
                         seq.num_classes, 1 if has_labels else 0)
    ]
    for frame in frames:
        for arr, name in ((frame.coords, "coords"), (frame.feats, "feats")):
            if arr.dtype != np.float32:
                raise FormatError(f"{name} must be float32 for bit-exact storage, got {arr.dtype}")
            parts.append(np.ascontiguousarray(arr).tobytes())
        if has_labels:
            labels = frame.labels
            if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
                raise FormatError("labels must fit in u16")
            parts.append(labels.astype("<u2").tobytes())
    return b"".join(parts)


def decode_sequence(blob: bytes) -> PointCloudSequence:
    if len(blob) < _SEQ_HEADER.size:
        raise FormatError("sequence file shorter than its header")
    magic, version, T, n, f, num_classes, flags = _SEQ_HEADER.unpack_from(blob, 0)
    if magic != SEQ_MAGIC:
        raise FormatError(f"bad sequence magic {magic!r}")
    if version != SEQ_VERSION:
        raise FormatError(f"unsupported sequence version {version}")
    has_labels = bool(flags & 1)
    frame_bytes = 4 * n * 3 + 4 * n * f + (2 * n if has_labels else 0)
    expected = _SEQ_HEADER.size + T * frame_bytes
    if len(blob) != expected:
        raise FormatError(f"sequence file is {len(blob)} bytes, expected {expected}")
    frames = []
    off = _SEQ_HEADER.size
    for _ in range(T):
        coords = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
        off += 4 * n * 3
        feats = np.frombuffer(blob, dtype="<f4", count=n * f, offset=off).reshape(n, f)
        off += 4 * n * f
        labels = None
        if has_labels:
            labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int64)
            off += 2 * n
        frames.append(PointCloudFrame(coords.copy(), feats.copy(), labels))
    return PointCloudSequence(frames, num_classes)


def save_sequence(path: str, seq: PointCloudSequence) -> None:
    atomic_write_bytes(path, encode_sequence(seq))


def load_sequence(path: str) -> PointCloudSequence:
    with open(path, "rb") as fh:
        return decode_sequence(fh.read())


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(named: list[tuple[str, np.ndarray]], meta: Optional[dict] = None) -> bytes:
    meta_blob = canonical_json(meta or {}).encode("utf-8")
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(named))]
    payloads = []
    for name, arr in named:
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 0xFF:
            raise FormatError("parameter rank exceeds u8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts + payloads)


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, meta_len = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    if len(blob) < off + meta_len + 4:
        raise FormatError("checkpoint truncated in metadata")
    try:
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint metadata is not valid JSON: {exc}") from exc
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    entries: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        if len(blob) < off + 2:
            raise FormatError("checkpoint truncated in name table")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + name_len + 1:
            raise FormatError("checkpoint truncated in name table")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        if len(blob) < off + 4 * ndim:
            raise FormatError("checkpoint truncated in name table")
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        entries.append((name, dims))
    params: dict[str, np.ndarray] = {}
    for name, dims in entries:
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        end = off + 4 * size
        if len(blob) < end:
            raise FormatError(f"checkpoint truncated in payload of {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off = end
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after checkpoint payloads")
    return meta, params


def save_checkpoint(path: str, named_params: list[tuple[str, Param]],
                    meta: Optional[dict] = None) -> None:
    arrays = [(name, p.value.data) for name, p in named_params]
    atomic_write_bytes(path, encode_checkpoint(arrays, meta))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def restore_params(named_params: list[tuple[str, Param]], stored: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into params; names and shapes must match exactly."""
    names = [name for name, _ in named_params]
    missing = [n for n in names if n not in stored]
    extra = [n for n in stored if n not in set(names)]
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing {missing[:3]}, extra {extra[:3]}")
    for name, p in named_params:
        arr = stored[name]
        if arr.shape != p.shape:
            raise FormatError(f"parameter {name!r}: checkpoint {arr.shape} vs model {p.shape}")
        p.assign(arr.astype(p.value.dtype))
