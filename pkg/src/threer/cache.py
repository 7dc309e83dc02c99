"""Content-addressed stage cache and small persistent key-value caches."""

from __future__ import annotations

import json
import logging
import shutil
import threading
from pathlib import Path
from typing import Any, Iterator, MutableMapping

from threer.clients.base import Embedder, RetryPolicy
from threer.hashing import atomic_write, canonical_json, hash_obj, sha256_hex, write_json
from threer.retrieval import EmbeddingVector

logger = logging.getLogger(__name__)


def stage_key(stage: str, **parts: Any) -> str:
    return hash_obj({"stage": stage, **parts})


class StageCache:
    """Stage outputs stored as ``stages/<stage>/<key>.json``.

    Each entry carries the hash of its output; an entry that fails to parse
    or verify is moved to ``quarantine/`` and reported as a miss.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _path(self, stage: str, key: str) -> Path:
        return self.root / "stages" / stage / f"{key}.json"

    def lookup(self, stage: str, key: str) -> dict | None:
        path = self._path(stage, key)
        if not path.exists():
            self.misses += 1
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            output = entry["output"]
            if entry.get("stage") != stage or entry.get("key") != key or hash_obj(output) != entry["output_hash"]:
                raise ValueError("hash mismatch")
        except (ValueError, KeyError, TypeError) as exc:
            self.quarantine(path, str(exc))
            self.misses += 1
            return None
        self.hits += 1
        return output

    def store(self, stage: str, key: str, output: dict) -> str:
        output_hash = hash_obj(output)
        write_json(self._path(stage, key), {"stage": stage, "key": key, "output": output, "output_hash": output_hash})
        return output_hash

    def quarantine(self, path: Path, reason: str) -> None:
        target = self.root / "quarantine" / f"{path.parent.name}-{path.name}"
        target.parent.mkdir(parents=True, exist_ok=True)
        logger.warning("quarantining corrupt cache entry %s: %s", path, reason)
        shutil.move(str(path), target)


class JsonFileDict(MutableMapping[str, Any]):
    """Thread-safe dict persisted to one JSON file on :meth:`flush`."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._data: dict[str, Any] = {}
        if self.path is not None and self.path.exists():
            try:
                self._data = json.loads(self.path.read_text(encoding="utf-8"))
            except ValueError:
                logger.warning("ignoring unreadable cache file %s", self.path)

    def __getitem__(self, key: str) -> Any:
        with self._lock:
            return self._data[key]

    def __setitem__(self, key: str, value: Any) -> None:
        with self._lock:
            self._data[key] = value

    def __delitem__(self, key: str) -> None:
        with self._lock:
            del self._data[key]

    def __iter__(self) -> Iterator[str]:
        with self._lock:
            return iter(list(self._data))

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)

    def get(self, key: str, default: Any = None) -> Any:
        with self._lock:
            return self._data.get(key, default)

    def flush(self) -> None:
        if self.path is None:
            return
        with self._lock:
            text = canonical_json(self._data)
        atomic_write(self.path, text)


class CachedEmbedder(Embedder):
    """Embedding cache keyed by (backend id, text hash) in front of another embedder."""

    def __init__(self, inner: Embedder, store: MutableMapping[str, Any] | None = None):
        self.inner = inner
        super().__init__(inner.backend_id, inner.retry)
        self.dim = inner.dim
        self.store = store if store is not None else {}

    # retries happen inside the wrapped client, so the policy lives there
    @property
    def retry(self) -> RetryPolicy:
        return self.inner.retry

    @retry.setter
    def retry(self, policy: RetryPolicy) -> None:
        self.inner.retry = policy

    def embed(self, text: str) -> EmbeddingVector:
        key = f"{self.backend_id}:{sha256_hex(text)}"
        cached = self.store.get(key)
        if cached is not None:
            return EmbeddingVector(tuple(cached))
        vec = self.inner.embed(text)
        self.store[key] = list(vec.values)
        return vec
