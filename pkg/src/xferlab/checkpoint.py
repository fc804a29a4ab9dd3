"""Binary parameter checkpoints.

Layout: the magic string ``XFERLAB1``, then for every named parameter in
order: name length (u64 LE), UTF-8 name, rank (u64 LE), one extent per axis
(u64 LE), and the row-major float32 payload (little endian).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .tensor import Tensor

MAGIC = b"XFERLAB1"


def save_params(params: dict[str, Tensor], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, p in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            f.write(struct.pack("<Q", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<Q", extent))
            f.write(arr.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as a name -> float32 array dict."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: bad magic at offset 0")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataFormatError(f"{path}: truncated {what} at offset {pos}")
        chunk = blob[pos: pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<Q", take(8, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        shape = tuple(struct.unpack("<Q", take(8, "extent"))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = take(4 * count, f"payload of '{name}'")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return out
