"""Backend client contracts, mocks, and HTTP adapters."""

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
    Transcript,
    VideoArtifact,
    VideoGenerator,
    VqaAnswer,
    VqaClient,
)
from threer.clients.mock import mock_backends

__all__ = [
    "ArtifactStore",
    "Backends",
    "ChatClient",
    "ChatRequest",
    "CritiqueClient",
    "Embedder",
    "Enhancer",
    "GenerationParams",
    "RetryPolicy",
    "Transcript",
    "VideoArtifact",
    "VideoGenerator",
    "VqaAnswer",
    "VqaClient",
    "mock_backends",
]
