"""CALT binary tensor files.

Layout (little-endian): magic ``b"CALT"``, version u32 (=1), dtype u8 (1 = f64),
rank u8, ``rank`` dims as u32, then the row-major f64 payload.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CALT"
VERSION = 1
DTYPE_F64 = 1


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def read_from(buf: io.BufferedIOBase | io.BytesIO, base: int = 0) -> np.ndarray:
    """Read one tensor from a stream positioned at its magic."""
    start = buf.tell()

    def take(n: int, what: str) -> bytes:
        pos = buf.tell()
        raw = buf.read(n)
        if len(raw) != n:
            raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(raw)}", base + pos)
        return raw

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", base + start)
    version, dtype, rank = struct.unpack("<IBB", take(6, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", base + start + 4)
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}", base + start + 8)
    dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = take(8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def decode(raw: bytes) -> np.ndarray:
    buf = io.BytesIO(raw)
    arr = read_from(buf)
    if buf.tell() != len(raw):
        raise FormatError("trailing bytes after tensor", buf.tell())
    return arr


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
