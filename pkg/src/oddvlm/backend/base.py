from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol


class BackendError(RuntimeError):
    """A completion could not be obtained (after any retries)."""


class RateLimitError(BackendError):
    def __init__(self, message: str, retry_after: float | None = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class AuthError(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Decoding:
    # deterministic-style decoding; the evaluated models' settings are not published
    temperature: float = 0.0
    max_output_tokens: int = 4096


@dataclass(frozen=True)
class VlmRequest:
    prompt_text: str
    request_id: str
    images: tuple[str, ...] = ()
    decoding: Decoding = field(default_factory=Decoding)
    # routing metadata: lets mocks answer without reading the prompt
    stage: str = ""
    sample_id: str = ""
    strategy: str = ""
    output_schema: str = "labels"
    label_scope: tuple[str, ...] = ()
    options: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.images) > 1:
            raise ValueError("a stage call attaches at most one image")


@dataclass(frozen=True)
class RawResponse:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    latency_ms: float = 0.0


class Backend(Protocol):
    def complete(self, request: VlmRequest) -> RawResponse: ...
