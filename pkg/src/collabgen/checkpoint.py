"""Binary parameter container.

Layout (all integers little-endian)::

    magic      4 bytes  b"CGCK"
    version    u16
    meta_len   u32, then meta_len bytes of UTF-8 JSON
    n_arrays   u32
    per array: name_len u16, name (UTF-8), dtype code u8, ndim u8,
               ndim x u32 dims, payload_len u64, payload (row-major, little-endian)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import MissingArtifactError

MAGIC = b"CGCK"
VERSION = 1
DTYPE_CODES = {"<f4": 1, "<f8": 2, "<i8": 3, "<i4": 4, "|u1": 5, "|b1": 6}
CODE_DTYPES = {v: np.dtype(k) for k, v in DTYPE_CODES.items()}


class CheckpointFormatError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d arrays to 1-d, so copy through np.array instead
    return np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C", copy=True)


def encode_container(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = _le(np.asarray(arrays[name]))
        code = DTYPE_CODES.get(arr.dtype.str)
        if code is None:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", code, arr.ndim)]
        parts += [struct.pack("<I", d) for d in arr.shape]
        payload = arr.tobytes()
        parts += [struct.pack("<Q", len(payload)), payload]
    return b"".join(parts)


def decode_container(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint container")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported container version {version}")
    pos = 6
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if code not in CODE_DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code}")
        arr = np.frombuffer(buf[pos:pos + plen], dtype=CODE_DTYPES[code]).reshape(shape).copy()
        pos += plen
        arrays[name] = arr
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last array")
    return arrays, meta


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = ""):
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write the container and return its SHA-256."""
    buf = encode_container(arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path, producer: str = "train-stage1") -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return decode_container(path.read_bytes())


def array_checksums(arrays: dict[str, np.ndarray]) -> dict[str, str]:
    return {k: hashlib.sha256(_le(np.asarray(v)).tobytes()).hexdigest() for k, v in sorted(arrays.items())}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
