"""Little-endian helpers for the versioned binary artifact formats."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError


class Writer:
    def __init__(self, magic: bytes, version: int):
        self.buf = io.BytesIO()
        self.buf.write(magic)
        self.pack("<H", version)

    def pack(self, fmt: str, *values) -> None:
        self.buf.write(struct.pack(fmt, *values))

    def array(self, arr, dtype: str) -> None:
        self.buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def json(self, obj) -> None:
        # sort_keys keeps files byte-identical across runs
        raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self.pack("<I", len(raw))
        self.buf.write(raw)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.getvalue())


class Reader:
    def __init__(self, data: bytes, magic: bytes, versions=(1,)):
        self.data = memoryview(data)
        self.pos = 0
        got = bytes(self.take(len(magic)))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        (self.version,) = self.unpack("<H")
        if self.version not in versions:
            raise FormatError(f"unsupported version {self.version}")

    @classmethod
    def open(cls, path, magic: bytes, versions=(1,)):
        return cls(Path(path).read_bytes(), magic, versions)

    def take(self, n: int):
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dt.itemsize * count)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype).newbyteorder("="))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(bytes(self.take(n)).decode("utf-8"))

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
