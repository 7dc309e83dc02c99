"""JSON-over-POST adapters for remote backends.

Wire shapes::

    chat     {system, user, temperature, seed, max_tokens} -> {text}
    embed    {text} -> {embedding}
    t2v      {prompt, seed, params} -> {artifact_url, frame_count, fps}
    vqa      {artifact_url, question} -> {score}
    enhance  {artifact_url, intent, target_frames} -> {artifact_url, frame_count}
    critique {artifact_url, system, user, temperature, seed, max_tokens} -> {text}

The adapter config is a JSON object with one section per backend, each
holding ``url`` and optionally ``api_key_env`` (the name of an environment
variable; the key itself never appears in configs or logs).
"""

from __future__ import annotations

import json
import os
import socket
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from threer.clients.base import (
    ArtifactStore,
    Backends,
    ChatClient,
    ChatRequest,
    CritiqueClient,
    Embedder,
    Enhancer,
    GenerationParams,
    RetryPolicy,
    VideoArtifact,
    VideoGenerator,
    VqaClient,
)
from threer.errors import ClientError, ErrorKind, ValidationError
from threer.retrieval import EmbeddingVector

SECTIONS = ("chat", "embed", "t2v", "vqa", "enhance", "critique")


@dataclass(frozen=True)
class Endpoint:
    url: str
    api_key_env: str | None = None
    timeout: float = 60.0

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json", "Accept": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers


def _retry_after(err: urllib.error.HTTPError) -> float | None:
    value = err.headers.get("Retry-After") if err.headers else None
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


def post_json(endpoint: Endpoint, payload: dict) -> dict:
    """POST ``payload`` and map failures onto the client error taxonomy."""
    data = json.dumps(payload).encode("utf-8")
    request = urllib.request.Request(endpoint.url, data=data, headers=endpoint.headers(), method="POST")
    try:
        with urllib.request.urlopen(request, timeout=endpoint.timeout) as resp:
            body = resp.read()
    except urllib.error.HTTPError as err:
        if err.code == 429:
            raise ClientError(ErrorKind.RATE_LIMITED, "HTTP 429", retry_after=_retry_after(err)) from None
        if err.code in (403, 451):
            raise ClientError(ErrorKind.CONTENT_POLICY, f"HTTP {err.code}") from None
        if err.code in (408, 504):
            raise ClientError(ErrorKind.TIMEOUT, f"HTTP {err.code}") from None
        if err.code >= 500:
            raise ClientError(ErrorKind.TRANSPORT, f"HTTP {err.code}") from None
        raise ClientError(ErrorKind.SCHEMA_VIOLATION, f"HTTP {err.code}") from None
    except (socket.timeout, TimeoutError):
        raise ClientError(ErrorKind.TIMEOUT, f"no response within {endpoint.timeout}s") from None
    except (urllib.error.URLError, ConnectionError, OSError) as err:
        reason = getattr(err, "reason", err)
        if isinstance(reason, (socket.timeout, TimeoutError)):
            raise ClientError(ErrorKind.TIMEOUT, str(reason)) from None
        raise ClientError(ErrorKind.TRANSPORT, str(reason)) from None
    try:
        obj = json.loads(body)
    except json.JSONDecodeError:
        raise ClientError(ErrorKind.SCHEMA_VIOLATION, "response is not JSON") from None
    if not isinstance(obj, dict):
        raise ClientError(ErrorKind.SCHEMA_VIOLATION, "response is not a JSON object")
    return obj


def _field(obj: dict, name: str, kind: type | tuple[type, ...]) -> Any:
    value = obj.get(name)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ClientError(ErrorKind.SCHEMA_VIOLATION, f"missing or invalid field {name!r}")
    return value


class _Remote:
    """Tracks remote URLs of artifacts fetched into the local store."""

    def __init__(self, store: ArtifactStore, timeout: float = 60.0):
        self.store = store
        self.timeout = timeout
        self._urls: dict[str, str] = {}
        self._lock = threading.Lock()

    def url_for(self, video: VideoArtifact) -> str:
        with self._lock:
            url = self._urls.get(video.id)
        return url or Path(video.storage_ref).resolve().as_uri()

    def fetch(self, url: str, frame_count: int, fps: float, prompt: str) -> VideoArtifact:
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                data = resp.read()
        except (urllib.error.URLError, OSError) as err:
            raise ClientError(ErrorKind.TRANSPORT, f"artifact download failed: {err}") from None
        video = self.store.put(data, frame_count, fps, prompt)
        with self._lock:
            self._urls[video.id] = url
        return video


class HttpChat(ChatClient):
    def __init__(self, endpoint: Endpoint, **kwargs):
        super().__init__(f"http-chat:{endpoint.url}", **kwargs)
        self.endpoint = endpoint

    def _complete_once(self, req: ChatRequest) -> str:
        obj = post_json(
            self.endpoint,
            {
                "system": req.system_prompt,
                "user": req.user_message,
                "temperature": req.temperature,
                "seed": req.seed,
                "max_tokens": req.max_tokens,
            },
        )
        return _field(obj, "text", str)


class HttpEmbedder(Embedder):
    def __init__(self, endpoint: Endpoint, dim: int, **kwargs):
        super().__init__(f"http-embed:{endpoint.url}/dim={dim}", **kwargs)
        self.endpoint = endpoint
        self.dim = dim

    def _embed_once(self, text: str) -> EmbeddingVector:
        values = _field(post_json(self.endpoint, {"text": text}), "embedding", list)
        try:
            vec = EmbeddingVector(tuple(values))
        except (ValidationError, TypeError, ValueError) as exc:
            raise ClientError(ErrorKind.SCHEMA_VIOLATION, str(exc)) from None
        if vec.dim != self.dim:
            raise ClientError(ErrorKind.SCHEMA_VIOLATION, f"embedding dim {vec.dim} != {self.dim}")
        return vec


class HttpVideoGenerator(VideoGenerator):
    def __init__(self, endpoint: Endpoint, remote: _Remote, **kwargs):
        super().__init__(f"http-t2v:{endpoint.url}", **kwargs)
        self.endpoint = endpoint
        self.remote = remote

    def _generate_once(self, prompt: str, params: GenerationParams) -> VideoArtifact:
        obj = post_json(self.endpoint, {"prompt": prompt, "seed": params.seed, "params": params.to_dict()})
        return self.remote.fetch(
            _field(obj, "artifact_url", str),
            int(_field(obj, "frame_count", int)),
            float(_field(obj, "fps", (int, float))),
            prompt,
        )


class HttpVqa(VqaClient):
    def __init__(self, endpoint: Endpoint, remote: _Remote, **kwargs):
        super().__init__(f"http-vqa:{endpoint.url}", **kwargs)
        self.endpoint = endpoint
        self.remote = remote

    def _answer_once(self, video: VideoArtifact, question: str) -> float:
        obj = post_json(self.endpoint, {"artifact_url": self.remote.url_for(video), "question": question})
        score = float(_field(obj, "score", (int, float)))
        if not 0.0 <= score <= 1.0:
            raise ClientError(ErrorKind.SCHEMA_VIOLATION, f"score {score} outside [0, 1]")
        return score


class HttpEnhancer(Enhancer):
    def __init__(self, endpoint: Endpoint, remote: _Remote, **kwargs):
        super().__init__(f"http-enhance:{endpoint.url}", **kwargs)
        self.endpoint = endpoint
        self.remote = remote

    def _enhance_once(self, video: VideoArtifact, intent: str, target_frames: int) -> VideoArtifact:
        obj = post_json(
            self.endpoint,
            {"artifact_url": self.remote.url_for(video), "intent": intent, "target_frames": target_frames},
        )
        frames = int(_field(obj, "frame_count", int))
        fps = video.fps * frames / video.frame_count
        return self.remote.fetch(_field(obj, "artifact_url", str), frames, fps, video.source_prompt)


class HttpCritic(CritiqueClient):
    def __init__(self, endpoint: Endpoint, remote: _Remote, **kwargs):
        super().__init__(f"http-critique:{endpoint.url}", **kwargs)
        self.endpoint = endpoint
        self.remote = remote

    def _critique_once(self, video: VideoArtifact, req: ChatRequest) -> str:
        obj = post_json(
            self.endpoint,
            {
                "artifact_url": self.remote.url_for(video),
                "system": req.system_prompt,
                "user": req.user_message,
                "temperature": req.temperature,
                "seed": req.seed,
                "max_tokens": req.max_tokens,
            },
        )
        return _field(obj, "text", str)


def _endpoint(config: dict, section: str) -> Endpoint:
    entry = config.get(section)
    if not isinstance(entry, dict) or not isinstance(entry.get("url"), str):
        raise ValidationError(f"adapter config needs a {section!r} section with a 'url'")
    unknown = set(entry) - {"url", "api_key_env", "timeout", "dim"}
    if unknown:
        raise ValidationError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return Endpoint(entry["url"], entry.get("api_key_env"), float(entry.get("timeout", config.get("timeout", 60.0))))


def http_backends(config: dict, root: Path, retry: RetryPolicy | None = None) -> Backends:
    unknown = set(config) - set(SECTIONS) - {"timeout"}
    if unknown:
        raise ValidationError(f"unknown adapter config sections: {sorted(unknown)}")
    store = ArtifactStore(Path(root) / "artifacts")
    remote = _Remote(store, float(config.get("timeout", 60.0)))
    dim = config.get("embed", {}).get("dim")
    if not isinstance(dim, int) or dim < 1:
        raise ValidationError("adapter config 'embed' section needs a positive integer 'dim'")
    kw = {"retry": retry}
    return Backends(
        chat=HttpChat(_endpoint(config, "chat"), **kw),
        embedder=HttpEmbedder(_endpoint(config, "embed"), dim, **kw),
        t2v=HttpVideoGenerator(_endpoint(config, "t2v"), remote, **kw),
        vqa=HttpVqa(_endpoint(config, "vqa"), remote, **kw),
        enhancer=HttpEnhancer(_endpoint(config, "enhance"), remote, **kw),
        critic=HttpCritic(_endpoint(config, "critique"), remote, **kw) if "critique" in config else None,
        store=store,
    )


def load_adapter_config(path: Path) -> dict:
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read adapter config {path}: {exc}") from None
    if not isinstance(config, dict):
        raise ValidationError("adapter config must be a JSON object")
    return config
