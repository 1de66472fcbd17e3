"""Utility helpers for consensus Monte Carlo."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
import tempfile
from typing import Any

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & _MASK64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & _MASK64
    return value ^ (value >> 31)


def derive_seed(master_seed: int, *keys: int) -> int:
    """Mix a master seed with stream keys into a stable 64-bit seed."""
    value = _splitmix64(master_seed & _MASK64)
    for key in keys:
        value = _splitmix64(value ^ (key & _MASK64))
    return value


def partition_file_name(k: int, fmt: str) -> str:
    """Return the sample file name for partition ``k``."""
    return f"partition_{k:03d}.{'bin' if fmt == 'binary' else 'csv'}"


def k_dir_name(k: int) -> str:
    """Return the per-K experiment subdirectory name."""
    return f"K{k:03d}"


def canonical_json(payload: Any) -> str:
    """Serialize deterministically (sorted keys, no whitespace drift)."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def config_hash(payload: Any) -> str:
    """Return the SHA-256 of a config's canonical JSON form."""
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def array_fingerprint(array: np.ndarray) -> str:
    """Return a short content hash used for provenance records."""
    data = np.ascontiguousarray(array, dtype="<f8")
    digest = hashlib.sha256(str(data.shape).encode())
    digest.update(data.tobytes())
    return digest.hexdigest()[:16]


def atomic_write(path: Path, data: bytes | str) -> None:
    """Write a file via write-temp-then-rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
