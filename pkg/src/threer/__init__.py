"""Retrieval, refinement and ranking pipeline for text-to-video prompt optimization."""

from threer.errors import ThreeRError

__version__ = "0.1.0"

__all__ = ["ThreeRError", "__version__"]
