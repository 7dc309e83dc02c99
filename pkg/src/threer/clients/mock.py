"""Deterministic mock backends.

Every mock answer is a pure function of the mock's seed and the request
content, so runs reproduce across processes regardless of call order.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

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
from threer.errors import ClientError, ErrorKind
from threer.hashing import canonical_json, derive_int, hash_obj
from threer.retrieval import EmbeddingVector

_TOKEN = re.compile(r"[a-z0-9]+")

STOPWORDS = frozenset(
    "a an the of in on at to for and or with by from into onto is are was were be being been "
    "it its this that some for as up down out over under inside outside".split()
)


def content_words(text: str) -> set[str]:
    words = set()
    for token in _TOKEN.findall(text.lower()):
        if token in STOPWORDS or len(token) < 3:
            continue
        if len(token) > 4 and token.endswith("s") and not token.endswith("ss"):
            token = token[:-1]
        words.add(token)
    return words


class HashEmbedder(Embedder):
    """Signed feature hashing over word unigrams and bigrams."""

    def __init__(self, dim: int = 256, seed: int = 0, **kwargs):
        super().__init__(f"hash-embed-v1/dim={dim}/seed={seed}", **kwargs)
        self.dim = dim
        self.seed = seed
        self.calls = 0
        self._lock = threading.Lock()

    def _features(self, text: str) -> Iterable[tuple[str, float]]:
        tokens = _TOKEN.findall(text.lower())
        if not tokens:
            yield text, 1.0
            return
        for t in tokens:
            yield t, 1.0
        for a, b in zip(tokens, tokens[1:]):
            yield f"{a} {b}", 0.5

    def _embed_once(self, text: str) -> EmbeddingVector:
        with self._lock:
            self.calls += 1
        values = [0.0] * self.dim
        for feature, weight in self._features(text):
            h = hashlib.sha256(f"{self.seed}\x00{feature}".encode("utf-8")).digest()
            index = int.from_bytes(h[:4], "big") % self.dim
            sign = 1.0 if h[4] & 1 else -1.0
            values[index] += sign * weight
        if not any(values):
            values[0] = 1.0
        return EmbeddingVector(tuple(values))


_MERGE_RE = re.compile(r"User Prompt: (.*)\nCurrent Description: (.*)\nModifier: (.*)\nMerged Description:", re.DOTALL)
_REFINE_RE = re.compile(r"User Prompt: (.*?)\nOriginal Description: (.*)\n\n\d+ Refined Descriptions:", re.DOTALL)
_COUNT_RE = re.compile(r"a single list of (\d+) strings")

_VARIATIONS = (
    "Soft natural light falls across the scene.",
    "The camera glides slowly to reveal the full setting.",
    "Gentle motion brings the moment to life.",
    "Warm tones give the scene a calm mood.",
    "A steady wide shot frames everything in view.",
    "Subtle details shift as a light breeze passes.",
    "The view opens from a close angle to a broad one.",
    "Clear, balanced colors keep the scene vivid.",
)


class MockChat(ChatClient):
    """Chat mock that understands the merge and refinement templates.

    Merging keeps a modifier only if it shares a content word with the user
    prompt, which makes it act as a relevance filter.
    """

    def __init__(self, seed: int = 0, **kwargs):
        super().__init__(f"mock-chat-v1/seed={seed}", **kwargs)
        self.seed = seed
        self.calls = 0
        self._lock = threading.Lock()

    def _complete_once(self, req: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
        user = req.user_message
        start = user.rfind("User Prompt: ")
        tail = user[start:] if start >= 0 else user
        if (m := _MERGE_RE.search(tail)) is not None:
            return self._merge(*(g.strip() for g in m.groups()))
        if (m := _REFINE_RE.search(tail)) is not None:
            count = _COUNT_RE.search(req.system_prompt)
            n = int(count.group(1)) if count else 4
            return self._refine(m.group(1).strip(), m.group(2).strip(), n, req)
        return f"mock completion {hash_obj([self.seed, req.to_dict()])[:16]}"

    def _merge(self, intent: str, description: str, modifier: str) -> str:
        if content_words(intent) & content_words(modifier):
            return f"{description.rstrip(' .')}, {modifier}."
        return description

    def _refine(self, intent: str, description: str, n: int, req: ChatRequest) -> str:
        base = description.rstrip()
        if not base.endswith("."):
            base += "."
        offset = derive_int(self.seed, req.to_dict()) % len(_VARIATIONS)
        picks = [_VARIATIONS[(offset + i) % len(_VARIATIONS)] for i in range(n)]
        return json.dumps([f"{base} {p}" for p in picks])


class ScriptedChat(ChatClient):
    """Returns canned responses in order, or from a function of the request.

    Exceptions in the script are raised instead of returned.
    """

    def __init__(self, script: Sequence[str | Exception] | Callable[[ChatRequest], str], **kwargs):
        super().__init__(kwargs.pop("backend_id", "scripted-chat"), **kwargs)
        self.script = script
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.requests)

    def _complete_once(self, req: ChatRequest) -> str:
        with self._lock:
            index = len(self.requests)
            self.requests.append(req)
        if callable(self.script):
            return self.script(req)
        item = self.script[min(index, len(self.script) - 1)]
        if isinstance(item, Exception):
            raise item
        return item


def request_key(req: ChatRequest) -> str:
    return hash_obj({"system": req.system_prompt, "user": req.user_message})


class ReplayChat(ChatClient):
    """Answers from a recorded transcript keyed by request content."""

    def __init__(self, recording: Mapping[str, str], **kwargs):
        super().__init__(kwargs.pop("backend_id", "replay-chat"), **kwargs)
        self.recording = dict(recording)

    @classmethod
    def from_entries(cls, entries: Iterable[dict], **kwargs) -> ReplayChat:
        recording = {}
        for e in entries:
            req = e["request"]
            recording[request_key(ChatRequest(req["system_prompt"], req["user_message"]))] = e["response"]
        return cls(recording, **kwargs)

    def _complete_once(self, req: ChatRequest) -> str:
        try:
            return self.recording[request_key(req)]
        except KeyError:
            raise ClientError(ErrorKind.SCHEMA_VIOLATION, "request not in recording") from None


class _InFlight:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __enter__(self) -> None:
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)

    def __exit__(self, *exc) -> None:
        with self._lock:
            self.current -= 1


class MockVideoGenerator(VideoGenerator):
    """Produces a seeded byte blob per (prompt, params)."""

    def __init__(self, store: ArtifactStore, seed: int = 0, frames: int = 16, delay: float = 0.0, **kwargs):
        super().__init__(f"mock-t2v-v1/seed={seed}", **kwargs)
        self.store = store
        self.seed = seed
        self.frames = frames
        self.delay = delay
        self.calls = 0
        self.in_flight = _InFlight()
        self._lock = threading.Lock()

    def _generate_once(self, prompt: str, params: GenerationParams) -> VideoArtifact:
        with self.in_flight:
            with self._lock:
                self.calls += 1
            if self.delay:
                time.sleep(self.delay)
            frames = params.frames or self.frames
            header = canonical_json({"kind": "mock-video", "prompt": prompt, "params": params.to_dict(), "seed": self.seed})
            body = _expand(header, frames * 32)
            return self.store.put(header.encode("utf-8") + b"\n" + body, frames, params.fps, prompt)


def _expand(seed_text: str, size: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(f"{seed_text}\x00{counter}".encode("utf-8")).digest()
        counter += 1
    return bytes(out[:size])


class MockVqa(VqaClient):
    """Yes/no answers.

    ``mode`` is ``"hash"`` (seeded coin per video and question, 60% yes),
    ``"yes"``, ``"no"``, or a callable ``(video, question) -> score``.
    """

    def __init__(self, seed: int = 0, mode: str | Callable[[VideoArtifact, str], float] = "hash", **kwargs):
        label = mode if isinstance(mode, str) else "custom"
        super().__init__(f"mock-vqa-v1/seed={seed}/mode={label}", **kwargs)
        self.seed = seed
        self.mode = mode
        self.calls = 0
        self._lock = threading.Lock()

    def _answer_once(self, video: VideoArtifact, question: str) -> float:
        with self._lock:
            self.calls += 1
        if callable(self.mode):
            return self.mode(video, question)
        if self.mode == "yes":
            return 1.0
        if self.mode == "no":
            return 0.0
        return 1.0 if derive_int(self.seed, video.id, question) % 100 < 60 else 0.0


class MockEnhancer(Enhancer):
    def __init__(self, store: ArtifactStore, seed: int = 0, frame_error: int = 0, **kwargs):
        super().__init__(f"mock-enhance-v1/seed={seed}", **kwargs)
        self.store = store
        self.seed = seed
        self.frame_error = frame_error
        self.calls = 0
        self._lock = threading.Lock()

    def _enhance_once(self, video: VideoArtifact, intent: str, target_frames: int) -> VideoArtifact:
        with self._lock:
            self.calls += 1
        frames = target_frames + self.frame_error
        header = canonical_json(
            {"kind": "mock-enhanced", "source": video.id, "intent": intent, "frames": frames, "seed": self.seed}
        )
        fps = video.fps * frames / video.frame_count
        return self.store.put(header.encode("utf-8") + b"\n" + _expand(header, frames * 32), frames, fps, video.source_prompt)


_DPO_RE = re.compile(r'\*\*Description Prompt Old \(DPO\):\*\*"(.*?)"\n', re.DOTALL)
_UPI_RE = re.compile(r'\*\*User Prompt Intent \(UPI\):\*\*"(.*?)"\n', re.DOTALL)


class MockCritic(CritiqueClient):
    """Emits schema-valid critique JSON.

    ``scores`` scripts the critic's score per call; otherwise scores are
    seeded from the video id.
    """

    def __init__(self, seed: int = 0, scores: Sequence[int] | None = None, **kwargs):
        super().__init__(f"mock-critic-v1/seed={seed}", **kwargs)
        self.seed = seed
        self.scores = list(scores) if scores is not None else None
        self.calls = 0
        self._lock = threading.Lock()

    def _critique_once(self, video: VideoArtifact, req: ChatRequest) -> str:
        with self._lock:
            index = self.calls
            self.calls += 1
        dpo = m.group(1) if (m := _DPO_RE.search(req.system_prompt)) else video.source_prompt
        upi = m.group(1) if (m := _UPI_RE.search(req.system_prompt)) else ""
        if self.scores is not None:
            score = self.scores[min(index, len(self.scores) - 1)]
        else:
            score = derive_int(self.seed, video.id, dpo) % 11
        return json.dumps(
            {
                "prompt_analysis": {
                    "user_prompt_intent": upi,
                    "bottleneck_flaw_metrics": {
                        "metric": "A_TV",
                        "score": score,
                        "observation": "The video drifts from the stated subjects.",
                    },
                    "diagnosis": {"root_cause": "Compositional overload in the description."},
                },
                "prescription": {
                    "P_new": f"{upi} (KEYWORD:1.3). {dpo}".strip(),
                    "meta_instruction": "Emphasize the subjects of the user intent.",
                },
            }
        )


def mock_backends(
    root: Path,
    seed: int = 0,
    *,
    vqa_mode: str = "hash",
    embed_dim: int = 256,
    retry: RetryPolicy | None = None,
    t2v_delay: float = 0.0,
    critic_scores: Sequence[int] | None = None,
) -> Backends:
    store = ArtifactStore(Path(root) / "artifacts")
    kw = {"retry": retry}
    return Backends(
        chat=MockChat(seed, **kw),
        embedder=HashEmbedder(embed_dim, seed, **kw),
        t2v=MockVideoGenerator(store, seed, delay=t2v_delay, **kw),
        vqa=MockVqa(seed, vqa_mode, **kw),
        enhancer=MockEnhancer(store, seed, **kw),
        critic=MockCritic(seed, critic_scores, **kw),
        store=store,
    )
