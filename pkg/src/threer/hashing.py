"""Canonical JSON and content hashing helpers."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any


def _check_floats(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError("non-finite float cannot be canonicalized")
    if isinstance(obj, dict):
        for value in obj.values():
            _check_floats(value)
    elif isinstance(obj, (list, tuple)):
        for value in obj:
            _check_floats(value)
    return obj


def canonical_json(obj: Any) -> str:
    """Sorted keys, no whitespace, shortest round-trip floats."""
    _check_floats(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def hash_obj(obj: Any) -> str:
    return sha256_hex(canonical_json(obj))


def derive_int(*parts: Any, bits: int = 64) -> int:
    """Deterministic integer from arbitrary JSON-able parts."""
    digest = hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[: bits // 8], "big")


def atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj: Any) -> str:
    """Write canonical JSON and return its hash."""
    text = canonical_json(obj)
    atomic_write(path, text + "\n")
    return sha256_hex(text)
