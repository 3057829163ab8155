"""Shared constants and deterministic-serialization helpers."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path

# Fixed continental order used everywhere a 5-way label axis appears.
CONTINENTS = ("Africa", "America", "Asia", "Europe", "Oceania")


def round9(x: float) -> float:
    """Round to 9 significant digits (the float-serialization contract)."""
    if not math.isfinite(x):
        return x
    return float(f"{x:.9g}")


def _canonical(obj):
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        return round9(obj)
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def dumps_canonical(obj, indent: int | None = 2) -> str:
    """JSON with sorted keys and floats rounded to 9 significant digits.

    Byte-deterministic for equal inputs; floats print as the shortest
    round-trip representation of their 9-digit rounding.
    """
    return json.dumps(_canonical(obj), sort_keys=True, indent=indent)


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serializable object."""
    return hashlib.sha256(dumps_canonical(obj, indent=None).encode("utf-8")).hexdigest()[:16]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file + rename so failures never leave partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
