"""PTLK1 container: JSON header followed by raw little-endian float32 blocks.

Layout::

    b"PTLK1" | uint32 LE header length | header JSON (utf-8) | payload

The header lists every tensor with its shape and byte offset into the payload,
plus a free-form ``meta`` dict and a sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"PTLK1"
_LEN = struct.Struct("<I")


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.number) and arr.dtype != np.bool_:
        raise TypeError(f"cannot store dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype="<f4")


def dumps(tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    blocks = []
    offset = 0
    for name, value in tensors.items():
        arr = _as_array(value)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    payload = b"".join(blocks)
    header = {
        "format": MAGIC.decode(),
        "meta": dict(meta or {}),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + payload


def loads(data: bytes, *, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < len(MAGIC) + _LEN.size or not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a PTLK1 container (bad magic)")
    start = len(MAGIC) + _LEN.size
    (hlen,) = _LEN.unpack_from(data, len(MAGIC))
    if start + hlen > len(data):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    payload = data[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{source}: payload checksum mismatch")
    tensors = {}
    for e in entries:
        lo, n = e["offset"], e["nbytes"]
        if lo + n > len(payload):
            raise CheckpointError(f"{source}: tensor {e['name']!r} runs past end of payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header.get("meta", {})


def save(path, tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, meta))
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc})") from exc
    return loads(data, source=str(path))


def save_module(path, module: torch.nn.Module, meta: Mapping[str, Any] | None = None) -> Path:
    return save(path, module.state_dict(), meta)


def load_state_dict(tensors: Mapping[str, np.ndarray], prefix: str = "") -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in tensors.items():
        if name.startswith(prefix):
            out[name[len(prefix):]] = torch.from_numpy(np.array(arr, dtype=np.float32))
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
