"""Binary tensor container (``.stmt``) and named-tensor archives.

Layout of one tensor record, all integers little-endian::

    b"STMT" | version u8 (=1) | dtype u8 (0=f32, 1=f64) | ndim u32 | dims u32[ndim] | payload

An archive is ``count u32`` followed by ``count`` records of
``name_len u16 | utf-8 name | tensor record``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Union

import numpy as np

from ..errors import ContractError

MAGIC = b"STMT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathLike = Union[str, Path]


def _as_numpy(t) -> np.ndarray:
    return np.asarray(getattr(t, "data", t))


def write_tensor(fh: BinaryIO, t) -> None:
    arr = _as_numpy(t)
    if arr.dtype not in _CODES:
        raise ContractError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<BBI", VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if fh.read(4) != MAGIC:
        raise ContractError("not an STMT tensor record (bad magic)")
    version, code, ndim = struct.unpack("<BBI", fh.read(6))
    if version != VERSION:
        raise ContractError(f"unsupported STMT version {version}")
    if code not in _DTYPES:
        raise ContractError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    payload = fh.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise ContractError("truncated STMT payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path: PathLike, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def archive_bytes(tensors: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, t)
    return buf.getvalue()


def save_archive(path: PathLike, tensors: Mapping[str, object]) -> None:
    Path(path).write_bytes(archive_bytes(tensors))


def load_archive(path: PathLike) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            out[name] = read_tensor(fh)
    return out
