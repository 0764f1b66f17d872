"""Chat-completions client for remote vision-language models."""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import httpx

from .base import (
    AuthError,
    BackendConfigError,
    BackendError,
    BackendTimeout,
    RateLimitError,
    RawResponse,
    VlmRequest,
)

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "ODDVLM_API_KEY"


@dataclass(frozen=True)
class RemoteProfile:
    endpoint: str
    model: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout_s: float = 120.0
    max_attempts: int = 3
    backoff_base_s: float = 1.0
    backoff_cap_s: float = 30.0
    max_in_flight: int = 4

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> RemoteProfile:
        """Read a profile from a JSON config; ``name`` picks from a ``profiles`` map."""
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if "profiles" in doc:
            if name is None:
                if len(doc["profiles"]) != 1:
                    raise BackendConfigError("config has several profiles; name one")
                name = next(iter(doc["profiles"]))
            try:
                doc = doc["profiles"][name]
            except KeyError:
                raise BackendConfigError(f"no remote profile named {name!r}") from None
        try:
            return cls(**doc)
        except TypeError as exc:
            raise BackendConfigError(f"bad remote profile: {exc}") from exc


def image_payload(ref: str) -> str:
    """URL passed through; local files become a base64 data URL."""
    if ref.startswith(("http://", "https://", "data:")):
        return ref
    path = Path(ref)
    mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return f"data:{mime};base64,{base64.b64encode(path.read_bytes()).decode('ascii')}"


def _retry_after(response: httpx.Response) -> float | None:
    value = response.headers.get("retry-after")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class JsonPoster:
    """POST JSON with capped exponential backoff and a bound on requests in flight.

    Transport errors, timeouts, 429 and 5xx are retried; 429 waits out the
    server's ``Retry-After`` when given. 401/403 and other 4xx fail at once.
    """

    def __init__(
        self,
        profile: RemoteProfile,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        api_key: str | None = None,
    ) -> None:
        self.profile = profile
        key = api_key if api_key is not None else os.environ.get(profile.api_key_env)
        if not key:
            raise BackendConfigError(
                f"no credential: set the {profile.api_key_env} environment variable"
            )
        self._headers = {"Authorization": f"Bearer {key}"}
        self._client = client or httpx.Client(timeout=profile.timeout_s)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(profile.max_in_flight)
        self._jitter = random.Random()

    def _backoff(self, attempt: int) -> float:
        delay = min(self.profile.backoff_cap_s, self.profile.backoff_base_s * 2 ** (attempt - 1))
        return delay * (0.5 + self._jitter.random() / 2)

    def post(self, url: str, body: dict[str, Any]) -> dict[str, Any]:
        last: BackendError = BackendError("no attempt made")
        for attempt in range(1, self.profile.max_attempts + 1):
            wait: float | None = None
            try:
                with self._slots:
                    response = self._client.post(url, json=body, headers=self._headers)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"request timed out: {exc}")
            except httpx.TransportError as exc:
                last = BackendError(f"transport error: {exc}")
            else:
                status = response.status_code
                if status == 429:
                    wait = _retry_after(response)
                    last = RateLimitError("rate limited by server", retry_after=wait)
                elif status in (401, 403):
                    raise AuthError(f"authentication failed ({status})")
                elif status >= 500:
                    last = BackendError(f"server error {status}")
                elif status >= 400:
                    raise BackendError(f"request rejected ({status}): {response.text[:200]}")
                else:
                    try:
                        return response.json()
                    except ValueError as exc:
                        raise BackendError("response body is not JSON") from exc
            if attempt < self.profile.max_attempts:
                delay = wait if wait is not None else self._backoff(attempt)
                log.warning("attempt %d failed (%s); retrying in %.2fs", attempt, last, delay)
                self._sleep(delay)
        raise last


class HttpBackend:
    def __init__(self, profile: RemoteProfile, **poster_kwargs: Any) -> None:
        self.profile = profile
        self._poster = JsonPoster(profile, **poster_kwargs)

    def build_body(self, request: VlmRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = [{"type": "text", "text": request.prompt_text}]
        for ref in request.images:
            content.append({"type": "image_url", "image_url": {"url": image_payload(ref)}})
        return {
            "model": self.profile.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_output_tokens,
        }

    def complete(self, request: VlmRequest) -> RawResponse:
        start = time.perf_counter()
        data = self._poster.post(self.profile.endpoint, self.build_body(request))
        latency = (time.perf_counter() - start) * 1000
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("response lacks choices[0].message.content") from exc
        if isinstance(text, list):
            text = "".join(part.get("text", "") for part in text if isinstance(part, dict))
        usage = data.get("usage") or {}
        return RawResponse(
            text=text or "",
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
            latency_ms=latency,
        )
