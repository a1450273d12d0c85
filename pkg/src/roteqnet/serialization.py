"""Binary tensor (RTQT) and checkpoint (RTQC) formats.

RTQT layout, all integers little-endian::

    b"RTQT" | u32 version=1 | u8 dtype (0=float32, 1=float64) | u32 ndim
    | ndim x u32 dims | row-major payload

RTQC layout::

    b"RTQC" | u32 version=1 | u32 config length | canonical JSON config
    | u32 entry count | per entry: u32 name length | utf-8 name
    | u64 blob length | RTQT blob

Entries are written in model build order.  Loading with a ``dtype`` casts
every tensor to that precision (float64 -> float32 rounds to nearest).
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

RTQT_MAGIC = b"RTQT"
RTQC_MAGIC = b"RTQC"
RTQT_VERSION = 1
RTQC_VERSION = 1

_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPES = {code: dt.newbyteorder("<") for dt, code in _CODES.items()}


class FormatError(ValueError):
    """Raised for malformed or unsupported tensor/checkpoint files."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def encode_rtqt(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"RTQT stores float32 or float64 only, got {array.dtype}")
    code = _CODES[array.dtype]
    header = RTQT_MAGIC + struct.pack("<IBI", RTQT_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"unexpected end of data: wanted {n} bytes, got {len(data)}")
    return data


def read_rtqt_stream(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4) != RTQT_MAGIC:
        raise FormatError("bad magic, not an RTQT tensor")
    version, code, ndim = struct.unpack("<IBI", _read_exact(stream, 9))
    if version != RTQT_VERSION:
        raise FormatError(f"unsupported RTQT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown RTQT dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(stream, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def decode_rtqt(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    array = read_rtqt_stream(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after RTQT payload")
    return array


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temporary sibling file then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_rtqt(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write(path, encode_rtqt(array))


def load_rtqt(path: str | os.PathLike) -> np.ndarray:
    return decode_rtqt(Path(path).read_bytes())


def encode_checkpoint(config: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    cfg = canonical_json(config).encode("utf-8")
    parts = [RTQC_MAGIC, struct.pack("<II", RTQC_VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, array in tensors:
        raw_name = name.encode("utf-8")
        blob = encode_rtqt(array)
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def decode_checkpoint(data: bytes, dtype=None) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    stream = io.BytesIO(data)
    if _read_exact(stream, 4) != RTQC_MAGIC:
        raise FormatError("bad magic, not an RTQC checkpoint")
    version, cfg_len = struct.unpack("<II", _read_exact(stream, 8))
    if version != RTQC_VERSION:
        raise FormatError(f"unsupported RTQC version {version}")
    config = json.loads(_read_exact(stream, cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(stream, 4))
        name = _read_exact(stream, name_len).decode("utf-8")
        (blob_len,) = struct.unpack("<Q", _read_exact(stream, 8))
        array = decode_rtqt(_read_exact(stream, blob_len))
        if dtype is not None:
            array = array.astype(dtype)
        tensors.append((name, array))
    if stream.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return config, tensors
