"""Binary tensor container, checkpoint manifests and key-value text files.

TensorFile layout (all little-endian)::

    offset  size     field
    0       4        magic  b"VGEO"
    4       4        version, u32 (= 1)
    8       1        dtype code: 1 float32, 2 float64, 3 u8
    9       1        ndim
    10      8*ndim   dims, u64 each
    ...              row-major payload
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"VGEO"
VERSION = 1
HEADER_FIXED = 10

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint8"): 3, np.dtype("bool"): 3}


class TensorFormatError(ValueError):
    """A TensorFile could not be decoded; the message names the failing field."""


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TensorFormatError(f"dtype: unsupported array dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFormatError("ndim: more than 255 dimensions")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise TensorFormatError(f"magic: expected {MAGIC!r}, found {bytes(blob[:4])!r}")
    if len(blob) < HEADER_FIXED:
        raise TensorFormatError("header: truncated before ndim")
    version, code, ndim = struct.unpack_from("<IBB", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"version: expected {VERSION}, found {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"dtype: unknown code {code}")
    dims_end = HEADER_FIXED + 8 * ndim
    if len(blob) < dims_end:
        raise TensorFormatError("dims: header truncated")
    dims = struct.unpack_from(f"<{ndim}Q", blob, HEADER_FIXED)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) < expected:
        raise TensorFormatError(f"payload: truncated, expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise TensorFormatError(f"payload: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_kv(path, items: Mapping[str, object]) -> None:
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(directory, tensors: Mapping[str, np.ndarray], config: Mapping[str, object]) -> None:
    """One TensorFile per parameter, ``manifest.txt`` (name = file) and ``config.txt``."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in tensors.items():
        rel = f"params/{name}.vgeo"
        write_tensor(directory / rel, arr)
        manifest[name] = rel
    write_kv(directory / "manifest.txt", manifest)
    write_kv(directory / "config.txt", config)


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    manifest = read_kv(directory / "manifest.txt")
    tensors = {name: read_tensor(directory / rel) for name, rel in manifest.items()}
    return tensors, read_kv(directory / "config.txt")


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable[object]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v
