"""Vision-language model clients, mocks and output parsing."""

from .base import (
    AuthError,
    Backend,
    BackendConfigError,
    BackendError,
    BackendTimeout,
    Decoding,
    RateLimitError,
    RawResponse,
    VlmRequest,
)
from .http import HttpBackend, JsonPoster, RemoteProfile
from .mock import (
    OracleBackend,
    SampleTruth,
    ScriptedBackend,
    ScriptRule,
    SeededNoiseBackend,
    box_center,
)
from .parsing import ParseReport, extract_json, parse_predictions, parse_text_field

__all__ = [
    "AuthError",
    "Backend",
    "BackendConfigError",
    "BackendError",
    "BackendTimeout",
    "Decoding",
    "HttpBackend",
    "JsonPoster",
    "OracleBackend",
    "ParseReport",
    "RateLimitError",
    "RawResponse",
    "RemoteProfile",
    "SampleTruth",
    "ScriptRule",
    "ScriptedBackend",
    "SeededNoiseBackend",
    "VlmRequest",
    "box_center",
    "extract_json",
    "parse_predictions",
    "parse_text_field",
]
