"""The TPLF checkpoint container.

Layout (all integers little-endian)::

    b"TPLF"  u16 version
    u32 config_len   config (UTF-8 JSON)
    u32 n_arrays
    per array: u16 name_len, name, u8 dtype tag, u8 ndim, u64 * ndim shape,
               u64 nbytes, payload (little-endian)
    u32 CRC-32 of every preceding byte

Floating-point arrays are stored as float32 only.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CheckpointError, CorruptCheckpointError, UnsupportedVersionError

MAGIC = b"TPLF"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {("f", 4): 1, ("i", 8): 2, ("u", 1): 3}


@dataclass
class Checkpoint:
    version: int
    config_bytes: bytes
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> dict:
        return json.loads(self.config_bytes.decode("utf-8"))


def encode_config(config) -> bytes:
    if isinstance(config, bytes):
        return config
    if isinstance(config, str):
        return config.encode("utf-8")
    return json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _array_tag(name: str, arr: np.ndarray) -> int:
    tag = _TAGS.get((arr.dtype.kind, arr.dtype.itemsize))
    if tag is None:
        raise CheckpointError(f"array {name!r}: dtype {arr.dtype} not storable (float32, int64, uint8 only)")
    return tag


def serialize(arrays: Mapping[str, np.ndarray], config) -> bytes:
    cfg = encode_config(config)
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(arrays))]
    seen = set()
    for name, arr in arrays.items():
        if name in seen:
            raise CheckpointError(f"duplicate array name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        tag = _array_tag(name, arr)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<BB", tag, arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), struct.pack("<Q", len(payload)), payload]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], config) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = serialize(arrays, config)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("unexpected end of checkpoint data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def _read_header(r: _Reader) -> tuple[int, bytes]:
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("bad magic: not a TPLF checkpoint")
    (version,) = r.unpack("<H")
    if version > VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is newer than supported {VERSION}")
    (n,) = r.unpack("<I")
    return version, r.take(n)


def deserialize(data: bytes) -> Checkpoint:
    if len(data) < 4 + 2 + 4 + 4 + 4:
        raise CorruptCheckpointError("CRC check failed: checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        # a newer writer may have changed the layout; report that first
        if data[:4] == MAGIC and struct.unpack("<H", data[4:6])[0] > VERSION:
            raise UnsupportedVersionError(f"checkpoint version {struct.unpack('<H', data[4:6])[0]} unsupported")
        raise CorruptCheckpointError("CRC check failed: checkpoint corrupt or truncated")
    r = _Reader(body)
    version, cfg = _read_header(r)
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CorruptCheckpointError(f"array {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        dtype = _DTYPES[tag]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CorruptCheckpointError(f"array {name!r}: payload size does not match shape")
        if name in arrays:
            raise CorruptCheckpointError(f"duplicate array name {name!r}")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last array")
    return Checkpoint(version, cfg, arrays)


def load_checkpoint(path) -> Checkpoint:
    return deserialize(Path(path).read_bytes())


def peek_checkpoint(path) -> Checkpoint:
    """Read only magic, version and config; arrays are not loaded and the CRC is not checked."""
    with open(path, "rb") as f:
        head = f.read(10)
        r = _Reader(head)
        if r.take(4) != MAGIC:
            raise CorruptCheckpointError("bad magic: not a TPLF checkpoint")
        (version,) = r.unpack("<H")
        if version > VERSION:
            raise UnsupportedVersionError(f"checkpoint version {version} is newer than supported {VERSION}")
        (n,) = r.unpack("<I")
        cfg = f.read(n)
        if len(cfg) != n:
            raise CorruptCheckpointError("unexpected end of checkpoint header")
    return Checkpoint(version, cfg, {})
