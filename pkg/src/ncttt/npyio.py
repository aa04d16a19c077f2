"""Reader and writer for the NPY v1.0 subset used for dataset exchange.

Supported: little-endian ``u1``, ``f4`` and ``f8`` payloads in C order.
Every rejection raises a subclass of :class:`NpyError` whose message names
the byte offset where parsing stopped.
"""

from __future__ import annotations

import ast
import os
import struct
import warnings

import numpy as np

MAGIC = b"\x93NUMPY"
HEADER_ALIGN = 64
DTYPES = {"u1": "|u1", "f4": "<f4", "f8": "<f8"}
_DESCR_TO_KEY = {"|u1": "u1", "<u1": "u1", "u1": "u1", "<f4": "f4", "<f8": "f8"}


class NpyError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagic(NpyError):
    pass


class UnsupportedVersion(NpyError):
    pass


class BadHeader(NpyError):
    pass


class UnsupportedDtype(NpyError):
    pass


class FortranOrder(NpyError):
    pass


class TruncatedPayload(NpyError):
    pass


def encode_npy(array, dtype: str = "f8") -> bytes:
    if dtype not in DTYPES:
        raise UnsupportedDtype(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}", 0)
    arr = np.array(array, dtype=np.dtype(DTYPES[dtype]), order="C")  # ascontiguousarray would promote 0-d to 1-d
    shape = tuple(int(s) for s in arr.shape)
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %r, }" % (DTYPES[dtype], shape)
    prefix_len = len(MAGIC) + 2 + 2
    pad = (-(prefix_len + len(header) + 1)) % HEADER_ALIGN
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    return MAGIC + bytes([1, 0]) + struct.pack("<H", len(header_bytes)) + header_bytes + arr.tobytes()


def write_npy(path, array, dtype: str = "f8") -> None:
    data = encode_npy(array, dtype)
    with open(path, "wb") as fh:
        fh.write(data)


def _parse_header(text: str, offset: int) -> tuple[str, tuple[int, ...]]:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # stray escapes in fuzzed text warn before failing
            header = ast.literal_eval(text)
    except Exception as exc:  # literal_eval raises a zoo of types on garbage input
        raise BadHeader(f"header is not a Python literal: {type(exc).__name__}", offset) from None
    if not isinstance(header, dict):
        raise BadHeader("header is not a dict", offset)
    keys = set(header)
    if keys != {"descr", "fortran_order", "shape"}:
        raise BadHeader(f"header keys {sorted(map(str, keys))} != ['descr', 'fortran_order', 'shape']", offset)
    descr = header["descr"]
    if not isinstance(descr, str) or descr not in _DESCR_TO_KEY:
        raise UnsupportedDtype(f"unsupported descr {descr!r}", offset)
    if header["fortran_order"] is not False:
        if header["fortran_order"] is True:
            raise FortranOrder("fortran_order=True is not supported", offset)
        raise BadHeader(f"fortran_order must be a bool, got {header['fortran_order']!r}", offset)
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(type(s) is int and s >= 0 for s in shape):
        raise BadHeader(f"shape must be a tuple of non-negative ints, got {shape!r}", offset)
    return _DESCR_TO_KEY[descr], shape


def decode_npy(data: bytes) -> np.ndarray:
    """Parse an NPY byte string into a float64 array."""
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagic("missing \\x93NUMPY magic", 0)
    pos = len(MAGIC)
    if len(data) < pos + 2:
        raise TruncatedPayload("file ends inside the version field", len(data))
    version = (data[pos], data[pos + 1])
    if version != (1, 0):
        raise UnsupportedVersion(f"version {version[0]}.{version[1]} is not supported", pos)
    pos += 2
    if len(data) < pos + 2:
        raise TruncatedPayload("file ends inside the header length", len(data))
    (hlen,) = struct.unpack("<H", data[pos:pos + 2])
    pos += 2
    if len(data) < pos + hlen:
        raise TruncatedPayload(f"header declares {hlen} bytes but only {len(data) - pos} remain", len(data))
    try:
        text = data[pos:pos + hlen].decode("latin1")
    except UnicodeDecodeError:  # pragma: no cover - latin1 decodes any byte
        raise BadHeader("header is not latin-1 text", pos) from None
    key, shape = _parse_header(text, pos)
    pos += hlen
    dtype = np.dtype(DTYPES[key])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    need = count * dtype.itemsize
    have = len(data) - pos
    if have < need:
        raise TruncatedPayload(f"payload needs {need} bytes, found {have}", len(data))
    if have > need:
        raise TruncatedPayload(f"payload has {have - need} trailing bytes", pos + need)
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return arr.astype(np.float64).reshape(shape)


def read_npy(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        return decode_npy(fh.read())


def npy_info(path) -> dict:
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    arr = decode_npy(data)
    (hlen,) = struct.unpack("<H", data[8:10])
    key, _ = _parse_header(data[10:10 + hlen].decode("latin1"), 10)
    return {"dtype": key, "shape": list(arr.shape), "header_bytes": 10 + hlen, "payload_bytes": len(data) - 10 - hlen}
