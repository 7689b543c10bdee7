"""Seeding, hashing and small validation helpers."""

from __future__ import annotations

import hashlib
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .exceptions import DimensionError


def named_rng(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for stream ``name`` derived from one root seed.

    The same (root, name, extra) always yields the same stream, so one
    component can be replayed without running the others.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(root_seed) & 0xFFFFFFFF, key, *[int(e) for e in extra]])


def check_vector(x, dim: int, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise DimensionError(f"{what} must have length {dim}, got shape {x.shape}")
    return x


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
