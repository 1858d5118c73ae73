"""Minimal JSON-over-HTTP client shared by the remote planner and segmenter."""

from __future__ import annotations

import logging
import time
from typing import Any, Mapping

import httpx

log = logging.getLogger(__name__)


class RemoteError(RuntimeError):
    """Base class for remote backend failures."""


class TransportError(RemoteError):
    """Connection failure, timeout or server error persisting after retries."""


class MalformedResponse(RemoteError):
    """The service answered, but not with the documented JSON shape."""


class JsonServiceClient:
    """POSTs one JSON document per call and returns the decoded JSON reply.

    Connection errors, timeouts and 5xx answers are retried ``retries``
    times; 4xx answers and undecodable bodies are not. ``httpx.Client`` is
    thread-safe, so one instance can serve concurrent episode workers.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.0,
        transport: httpx.BaseTransport | None = None,
    ):
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self.endpoint = endpoint
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, payload: Mapping[str, Any]) -> Any:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt and self.backoff:
                time.sleep(self.backoff * attempt)
            try:
                resp = self._client.post(self.endpoint, json=payload)
            except httpx.TimeoutException as exc:
                last = exc
                log.warning("timeout posting to %s (attempt %d)", self.endpoint, attempt + 1)
                continue
            except httpx.TransportError as exc:
                last = exc
                log.warning("transport error posting to %s (attempt %d): %s", self.endpoint, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last = RemoteError(f"HTTP {resp.status_code}")
                log.warning("server error %d from %s (attempt %d)", resp.status_code, self.endpoint, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise MalformedResponse(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError:
                raise MalformedResponse(f"non-JSON body from {self.endpoint}") from None
        raise TransportError(f"{self.endpoint} failed after {self.retries + 1} attempts: {last}")
