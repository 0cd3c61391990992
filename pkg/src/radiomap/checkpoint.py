"""Binary checkpoint format.

Layout (little-endian)::

    b"ACTG" | u16 version | 32-byte sha256 config digest | u32 blob count
    per blob: u16 name length | name (utf-8) | u8 dtype code | u8 ndim
              | ndim x u32 dims | raw array bytes
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import AdamState, Tensor

MAGIC = b"ACTG"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
CONFIG_BLOB = "__config__"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the requested config."""


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def digest(self) -> bytes:
        return config_digest(self.config)

    def put_params(self, prefix: str, params: dict[str, Tensor]) -> None:
        for name, t in params.items():
            self.arrays[f"{prefix}.{name}"] = t.data

    def load_params(self, prefix: str, params: dict[str, Tensor]) -> None:
        for name, t in params.items():
            key = f"{prefix}.{name}"
            if key not in self.arrays:
                raise CheckpointError(f"checkpoint has no entry {key!r}")
            arr = self.arrays[key]
            if arr.shape != t.shape:
                raise CheckpointError(f"{key}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def put_adam(self, prefix: str, state: AdamState) -> None:
        for name in sorted(state.m):
            self.arrays[f"{prefix}.m.{name}"] = state.m[name]
            self.arrays[f"{prefix}.v.{name}"] = state.v[name]
            self.arrays[f"{prefix}.t.{name}"] = np.array(state.step[name], dtype=np.int64)
        self.arrays[f"{prefix}.skipped"] = np.array(state.skipped, dtype=np.int64)

    def load_adam(self, prefix: str) -> AdamState:
        state = AdamState()
        for key, arr in self.arrays.items():
            if not key.startswith(prefix + "."):
                continue
            rest = key[len(prefix) + 1 :]
            kind, _, name = rest.partition(".")
            if kind == "m":
                state.m[name] = arr.copy()
            elif kind == "v":
                state.v[name] = arr.copy()
            elif kind == "t":
                state.step[name] = int(arr)
            elif kind == "skipped":
                state.skipped = int(arr)
        return state


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = next((c for c, dt in _DTYPES.items() if (dt.kind, dt.itemsize) == (arr.dtype.kind, arr.dtype.itemsize)), None)
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    blobs = dict(ckpt.arrays)
    blobs[CONFIG_BLOB] = np.frombuffer(json.dumps(ckpt.config, sort_keys=True).encode(), dtype=np.uint8)
    parts = [MAGIC, struct.pack("<H", VERSION), ckpt.digest, struct.pack("<I", len(blobs))]
    for name in sorted(blobs):
        parts.append(_pack_array(name, blobs[name]))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_config: dict | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        (version,) = struct.unpack_from("<H", raw, 4)
        digest = raw[6:38]
        (count,) = struct.unpack_from("<I", raw, 38)
        pos = 42
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = json.loads(arrays.pop(CONFIG_BLOB).tobytes().decode())
    if config_digest(config) != digest:
        raise CheckpointError(f"{path}: config digest does not match stored config")
    if expect_config is not None and config_digest(expect_config) != digest:
        raise CheckpointError(f"{path}: checkpoint was trained with a different model config")
    return Checkpoint(config, arrays)
