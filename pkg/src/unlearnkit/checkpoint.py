"""The ``ULKT`` binary container for parameter sets and task vectors.

Layout::

    b"ULKT" | u32 LE version | u64 LE manifest length | manifest (UTF-8 JSON) | tensor data

The manifest is ``{"config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}``
with tensors sorted by name and offsets counted in bytes from the start of the
data section. Two optional keys ride along: ``kind`` ("model" or
"task_vector") and ``vocab`` (token strings by id). Tensor data is raw
little-endian float32 in manifest order, so a file is exactly
``16 + manifest_len + 4 * n_params`` bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import ModelConfig, ParameterSet

MAGIC = b"ULKT"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
KINDS = ("model", "task_vector")


@dataclasses.dataclass
class Checkpoint:
    params: ParameterSet
    kind: str = "model"
    vocab: list[str] | None = None


def _manifest(params: ParameterSet, kind: str, vocab) -> bytes:
    entries, offset = [], 0
    for name in params:
        arr = params[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += 4 * arr.size
    doc = {"config": params.config.to_dict(), "kind": kind, "tensors": entries}
    if vocab is not None:
        doc["vocab"] = list(vocab)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode(params: ParameterSet, kind: str = "model", vocab=None) -> bytes:
    if kind not in KINDS:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    manifest = _manifest(params, kind, vocab)
    parts = [HEADER.pack(MAGIC, VERSION, len(manifest)), manifest]
    parts.extend(params[name].astype("<f4", copy=False).tobytes() for name in params)
    return b"".join(parts)


def decode(data: bytes) -> Checkpoint:
    if len(data) < HEADER.size:
        raise FormatError(f"truncated header: {len(data)} bytes")
    magic, version, mlen = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    start = HEADER.size
    if len(data) < start + mlen:
        raise FormatError("truncated manifest")
    try:
        doc = json.loads(data[start:start + mlen].decode("utf-8"))
        config = ModelConfig.from_dict(doc["config"])
        entries = [(str(e["name"]), tuple(int(s) for s in e["shape"]), int(e["offset"])) for e in doc["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    kind = doc.get("kind", "model")
    if kind not in KINDS:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    names = [name for name, _, _ in entries]
    if names != sorted(names):
        raise FormatError("manifest tensors are not sorted by name")

    body = memoryview(data)[start + mlen:]
    tensors, expected_offset = {}, 0
    for name, shape, offset in entries:
        if offset != expected_offset:
            raise FormatError(f"{name}: offset {offset} != expected {expected_offset}")
        nbytes = 4 * int(np.prod(shape))
        if expected_offset + nbytes > len(body):
            raise FormatError(f"truncated tensor data at {name}")
        chunk = np.frombuffer(body[expected_offset:expected_offset + nbytes], dtype="<f4")
        tensors[name] = chunk.astype(np.float32).reshape(shape)
        expected_offset += nbytes
    if expected_offset != len(body):
        raise FormatError(f"{len(body) - expected_offset} trailing bytes after tensor data")
    try:
        params = ParameterSet(config, tensors)
    except ValueError as exc:
        raise FormatError(f"manifest does not match config: {exc}") from exc
    return Checkpoint(params, kind, doc.get("vocab"))


def save_checkpoint(params: ParameterSet, vocab=None) -> bytes:
    return encode(params, "model", vocab)


def load_checkpoint(data: bytes) -> ParameterSet:
    return decode(data).params


def write(path, params: ParameterSet, kind: str = "model", vocab=None) -> None:
    Path(path).write_bytes(encode(params, kind, vocab))


def read(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
