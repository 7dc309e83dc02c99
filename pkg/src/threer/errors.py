"""Exception hierarchy.

Every error raised by the package derives from :class:`ThreeRError`. The
``exit_code`` class attribute is what the CLI maps the error to.
"""

from __future__ import annotations

import enum


class ThreeRError(Exception):
    exit_code = 3


class ValidationError(ThreeRError):
    """Bad input: files, configs, or preconditions."""

    exit_code = 1


class MalformedRecord(ValidationError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class EmptyDatabase(ValidationError):
    def __init__(self) -> None:
        super().__init__("relation database contains no valid entries")


class DimensionMismatch(ValidationError):
    def __init__(self, a_dim: int, b_dim: int):
        super().__init__(f"embedding dimensions differ: {a_dim} != {b_dim}")
        self.a_dim = a_dim
        self.b_dim = b_dim


class WrongEntryCount(ValidationError):
    def __init__(self, found: int, expected: int = 29):
        super().__init__(f"question bank has {found} entries, expected {expected}")
        self.found = found


class NonFiniteWeight(ValidationError):
    def __init__(self, index: int):
        super().__init__(f"question bank entry {index} has a non-finite weight")
        self.index = index


class MixedBanks(ValidationError):
    def __init__(self, bank_ids: set[str]):
        super().__init__(f"score reports reference different banks: {sorted(bank_ids)}")
        self.bank_ids = bank_ids


class PlaceholderLeak(ValidationError):
    def __init__(self, question: str):
        super().__init__(f"question still contains the [prompt] placeholder: {question!r}")
        self.question = question


class ErrorKind(enum.Enum):
    TRANSPORT = "transport"
    RATE_LIMITED = "rate_limited"
    SCHEMA_VIOLATION = "schema_violation"
    CONTENT_POLICY = "content_policy"
    TIMEOUT = "timeout"


class ClientError(ThreeRError):
    """A backend call failed. ``kind`` decides retry-vs-fail."""

    exit_code = 2

    def __init__(
        self,
        kind: ErrorKind,
        detail: str = "",
        *,
        attempt: int = 1,
        retry_after: float | None = None,
    ):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind
        self.detail = detail
        self.attempt = attempt
        self.retry_after = retry_after
        self.merge_step: int | None = None


class ContractViolation(ThreeRError):
    """A backend answered, but the answer breaks the client contract."""

    exit_code = 2


class DescriptionCollapse(ThreeRError):
    def __init__(self, step: int):
        super().__init__(f"merge step {step} returned an empty description")
        self.step = step


class UnparseableCandidates(ThreeRError):
    def __init__(self, excerpt: str):
        super().__init__(f"could not parse prompt candidates from: {excerpt!r}")
        self.excerpt = excerpt


class RefinementFailure(ThreeRError):
    exit_code = 2


class CritiqueSchemaError(ThreeRError):
    def __init__(self, detail: str):
        super().__init__(f"critique output violates schema: {detail}")
        self.detail = detail


class MissingArtifact(ThreeRError):
    exit_code = 1


class UnknownRun(ValidationError):
    pass


class StageFailure(ThreeRError):
    """Wraps an error with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
