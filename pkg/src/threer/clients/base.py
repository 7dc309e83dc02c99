"""Backend-neutral client contracts, retry handling and call transcripts."""

from __future__ import annotations

import contextlib
import contextvars
import dataclasses
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, TypeVar

from threer.errors import ClientError, ContractViolation, ErrorKind, PlaceholderLeak, ValidationError
from threer.hashing import atomic_write, sha256_hex, write_json
from threer.retrieval import EmbeddingVector

logger = logging.getLogger(__name__)

T = TypeVar("T")

PLACEHOLDER = "[prompt]"


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_message: str
    temperature: float = 0.0
    seed: int | None = None
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.user_message.strip():
            raise ValidationError("chat user_message must be non-empty")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class VideoArtifact:
    id: str
    frame_count: int
    fps: float
    storage_ref: str
    source_prompt: str

    def __post_init__(self) -> None:
        if self.frame_count < 1:
            raise ValidationError("frame_count must be >= 1")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")

    def meta(self) -> dict:
        return {
            "id": self.id,
            "frame_count": self.frame_count,
            "fps": self.fps,
            "source_prompt": self.source_prompt,
        }

    @classmethod
    def from_meta(cls, meta: dict, storage_ref: str) -> VideoArtifact:
        return cls(meta["id"], int(meta["frame_count"]), float(meta["fps"]), storage_ref, meta["source_prompt"])


@dataclass(frozen=True)
class VqaAnswer:
    question_id: int
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ContractViolation(f"VQA score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GenerationParams:
    seed: int = 0
    frames: int = 16
    fps: float = 8.0
    extra: tuple[tuple[str, Any], ...] = ()

    def to_dict(self) -> dict:
        return {"seed": self.seed, "frames": self.frames, "fps": self.fps, **dict(self.extra)}


DEFAULT_RETRYABLE = frozenset({ErrorKind.TRANSPORT, ErrorKind.RATE_LIMITED, ErrorKind.TIMEOUT})


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 0.5
    backoff_multiplier: float = 2.0
    retryable_kinds: frozenset[ErrorKind] = DEFAULT_RETRYABLE

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValidationError("max_attempts must be >= 1")
        if self.backoff_multiplier < 1:
            raise ValidationError("backoff_multiplier must be >= 1")
        if self.base_backoff < 0:
            raise ValidationError("base_backoff must be >= 0")

    def delay(self, failed_attempt: int) -> float:
        """Backoff after the ``failed_attempt``-th attempt (1-based)."""
        return self.base_backoff * self.backoff_multiplier ** (failed_attempt - 1)

    def to_dict(self) -> dict:
        return {
            "max_attempts": self.max_attempts,
            "base_backoff": self.base_backoff,
            "backoff_multiplier": self.backoff_multiplier,
            "retryable_kinds": sorted(k.value for k in self.retryable_kinds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RetryPolicy:
        kinds = d.get("retryable_kinds")
        return cls(
            max_attempts=int(d.get("max_attempts", 3)),
            base_backoff=float(d.get("base_backoff", 0.5)),
            backoff_multiplier=float(d.get("backoff_multiplier", 2.0)),
            retryable_kinds=frozenset(ErrorKind(k) for k in kinds) if kinds is not None else DEFAULT_RETRYABLE,
        )


class Transcript:
    """Thread-safe, append-only log of backend call attempts."""

    def __init__(self) -> None:
        self._entries: list[dict] = []
        self._lock = threading.Lock()

    def append(self, entry: dict) -> int:
        with self._lock:
            self._entries.append(entry)
            return len(self._entries) - 1

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    @property
    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def count(self, backend: str | None = None, op: str | None = None) -> int:
        return sum(
            1
            for e in self.entries
            if (backend is None or e["backend"] == backend) and (op is None or e["op"] == op)
        )

    @contextlib.contextmanager
    def active(self) -> Iterator[Transcript]:
        token = _ACTIVE.set(self)
        try:
            yield self
        finally:
            _ACTIVE.reset(token)


_ACTIVE: contextvars.ContextVar[Transcript | None] = contextvars.ContextVar("threer_transcript", default=None)


def current_transcript() -> Transcript | None:
    return _ACTIVE.get()


class BackendClient:
    """Shared retry loop and transcript recording.

    Subclasses implement the single-attempt methods; public methods validate
    and route through :meth:`_call`.
    """

    kind = "backend"

    def __init__(
        self,
        backend_id: str,
        retry: RetryPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend_id = backend_id
        self.retry = retry or RetryPolicy()
        self._sleep = sleep

    def _call(self, op: str, request: dict, fn: Callable[[], T], summarize: Callable[[T], Any] = lambda r: r) -> T:
        transcript = current_transcript()
        policy = self.retry
        attempt = 1
        while True:
            started = time.perf_counter()
            entry = {"backend": self.kind, "backend_id": self.backend_id, "op": op, "attempt": attempt, "request": request}
            try:
                result = fn()
            except ClientError as exc:
                exc.attempt = attempt
                entry.update(ok=False, error=str(exc), elapsed=time.perf_counter() - started)
                if transcript is not None:
                    transcript.append(entry)
                if exc.kind not in policy.retryable_kinds or attempt >= policy.max_attempts:
                    raise
                delay = policy.delay(attempt)
                if exc.retry_after is not None:
                    delay = max(delay, exc.retry_after)
                logger.warning("%s %s attempt %d failed (%s); retrying in %.3fs", self.kind, op, attempt, exc, delay)
                self._sleep(delay)
                attempt += 1
                continue
            except Exception as exc:
                entry.update(ok=False, error=f"{type(exc).__name__}: {exc}", elapsed=time.perf_counter() - started)
                if transcript is not None:
                    transcript.append(entry)
                raise
            entry.update(ok=True, response=summarize(result), elapsed=time.perf_counter() - started)
            if transcript is not None:
                transcript.append(entry)
            return result


class ChatClient(BackendClient):
    kind = "chat"

    def complete(self, req: ChatRequest) -> str:
        def once() -> str:
            text = self._complete_once(req)
            if not isinstance(text, str) or not text.strip():
                raise ClientError(ErrorKind.SCHEMA_VIOLATION, "empty completion")
            return text

        return self._call("complete", req.to_dict(), once)

    def _complete_once(self, req: ChatRequest) -> str:
        raise NotImplementedError


class Embedder(BackendClient):
    kind = "embed"
    dim: int

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise ValidationError("cannot embed empty text")
        return self._call(
            "embed", {"text": text}, lambda: self._embed_once(text), lambda v: {"dim": v.dim}
        )

    def _embed_once(self, text: str) -> EmbeddingVector:
        raise NotImplementedError


class VideoGenerator(BackendClient):
    kind = "t2v"

    def generate_video(self, prompt: str, params: GenerationParams | None = None) -> VideoArtifact:
        if not prompt.strip():
            raise ValidationError("prompt must be non-empty")
        params = params or GenerationParams()
        return self._call(
            "generate_video",
            {"prompt": prompt, "params": params.to_dict()},
            lambda: self._generate_once(prompt, params),
            VideoArtifact.meta,
        )

    def _generate_once(self, prompt: str, params: GenerationParams) -> VideoArtifact:
        raise NotImplementedError


class VqaClient(BackendClient):
    kind = "vqa"

    def answer_question(self, video: VideoArtifact, question: str, question_id: int = 0) -> VqaAnswer:
        if PLACEHOLDER in question:
            raise PlaceholderLeak(question)

        def once() -> VqaAnswer:
            score = self._answer_once(video, question)
            try:
                score = float(score)
            except (TypeError, ValueError):
                raise ClientError(ErrorKind.SCHEMA_VIOLATION, f"non-numeric score {score!r}") from None
            return VqaAnswer(question_id, score)

        return self._call(
            "answer_question",
            {"video_id": video.id, "question": question},
            once,
            lambda a: {"score": a.score},
        )

    def _answer_once(self, video: VideoArtifact, question: str) -> float:
        raise NotImplementedError


class Enhancer(BackendClient):
    kind = "enhance"

    def enhance_video(self, video: VideoArtifact, intent: str, target_frames: int) -> VideoArtifact:
        if target_frames < video.frame_count:
            raise ValidationError(f"target_frames {target_frames} < input frame_count {video.frame_count}")
        if target_frames == video.frame_count:
            return video

        def once() -> VideoArtifact:
            out = self._enhance_once(video, intent, target_frames)
            if out.frame_count != target_frames:
                raise ContractViolation(f"enhancer returned {out.frame_count} frames, expected {target_frames}")
            return out

        return self._call(
            "enhance_video",
            {"video_id": video.id, "intent": intent, "target_frames": target_frames},
            once,
            VideoArtifact.meta,
        )

    def _enhance_once(self, video: VideoArtifact, intent: str, target_frames: int) -> VideoArtifact:
        raise NotImplementedError


class CritiqueClient(BackendClient):
    """Vision-language model: a chat completion with a video attached."""

    kind = "critique"

    def critique(self, video: VideoArtifact, req: ChatRequest) -> str:
        def once() -> str:
            text = self._critique_once(video, req)
            if not isinstance(text, str) or not text.strip():
                raise ClientError(ErrorKind.SCHEMA_VIOLATION, "empty completion")
            return text

        return self._call("critique", {"video_id": video.id, **req.to_dict()}, once)

    def _critique_once(self, video: VideoArtifact, req: ChatRequest) -> str:
        raise NotImplementedError


class ArtifactStore:
    """Content-addressed blob store for video payloads."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def path_for(self, artifact_id: str) -> Path:
        return self.root / artifact_id[:2] / f"{artifact_id}.bin"

    def put(self, data: bytes, frame_count: int, fps: float, source_prompt: str) -> VideoArtifact:
        artifact_id = sha256_hex(data)
        path = self.path_for(artifact_id)
        if not path.exists():
            atomic_write(path, data)
        video = VideoArtifact(artifact_id, frame_count, fps, str(path), source_prompt)
        write_json(path.with_suffix(".json"), video.meta())
        return video

    def read(self, video: VideoArtifact) -> bytes:
        return Path(video.storage_ref).read_bytes()

    def load(self, artifact_id: str) -> VideoArtifact | None:
        path = self.path_for(artifact_id)
        meta_path = path.with_suffix(".json")
        if not path.exists() or not meta_path.exists():
            return None
        return VideoArtifact.from_meta(json.loads(meta_path.read_text()), str(path))


@dataclass
class Backends:
    """The set of clients one pipeline run talks to."""

    chat: ChatClient
    embedder: Embedder
    t2v: VideoGenerator
    vqa: VqaClient
    enhancer: Enhancer
    critic: CritiqueClient | None = None
    store: ArtifactStore | None = None
    extra: dict = field(default_factory=dict)

    def ids(self) -> dict[str, str]:
        out = {
            "chat": self.chat.backend_id,
            "embed": self.embedder.backend_id,
            "t2v": self.t2v.backend_id,
            "vqa": self.vqa.backend_id,
            "enhance": self.enhancer.backend_id,
        }
        if self.critic is not None:
            out["critique"] = self.critic.backend_id
        return out

    def all(self) -> list[BackendClient]:
        clients: list[BackendClient] = [self.chat, self.embedder, self.t2v, self.vqa, self.enhancer]
        if self.critic is not None:
            clients.append(self.critic)
        return clients

    def set_retry(self, policy: RetryPolicy) -> None:
        for client in self.all():
            client.retry = policy
