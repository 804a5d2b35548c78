"""Shared helpers for binary model files and their JSON sidecars."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def dump_json(path: str | Path, payload) -> None:
    """Write sorted, indented JSON atomically (temp file + rename)."""
    path = Path(path)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_magic(path: str | Path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(8)


class Reader:
    """Sequential little-endian reader over a byte buffer."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def unpack(self, fmt: str):
        vals = struct.unpack_from("<" + fmt, self.buf, self.off)
        self.off += struct.calcsize("<" + fmt)
        return vals

    def array(self, dtype: str, count: int):
        import numpy as np

        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.off).copy()
        self.off += arr.nbytes
        return arr
