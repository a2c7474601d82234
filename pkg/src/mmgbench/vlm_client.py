"""Chat-completion VLM clients: HTTP, deterministic mock, and a write-once response cache."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Protocol

import cv2
import httpx
import numpy as np

from mmgbench.config import TOKEN_ENV_VAR, ClientConfig
from mmgbench.errors import (
    ConfigInvalid,
    EmptyInput,
    EndpointError,
    ImageUnreadable,
    MalformedResponse,
    RateLimited,
    VlmClientError,
    VlmTimeout,
)

UTC = timezone.utc  # datetime.UTC alias (Python 3.11+)

logger = logging.getLogger(__name__)

IMAGE_MARKER = "<image>"


@dataclass(slots=True, frozen=True)
class TextSegment:
    text: str


@dataclass(slots=True, frozen=True)
class ImageSegment:
    path: Path | None = None
    data: bytes | None = None

    def read_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        if self.path is None:
            raise ImageUnreadable("image segment has neither a path nor inline data")
        try:
            return Path(self.path).read_bytes()
        except OSError as exc:
            raise ImageUnreadable(f"{self.path}: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(self.read_bytes()).hexdigest()


Segment = TextSegment | ImageSegment


@dataclass(slots=True, frozen=True)
class PromptBundle:
    segments: tuple[Segment, ...]
    system: str | None = None

    def __post_init__(self) -> None:
        if not self.segments:
            raise EmptyInput("a prompt bundle needs at least one segment")

    @classmethod
    def from_rendered(
        cls, rendered: str, images: Sequence[Path | bytes], *, system: str | None = None
    ) -> PromptBundle:
        """Split a rendered template on ``<image>`` markers and interleave the given images."""
        pieces = rendered.split(IMAGE_MARKER)
        if len(pieces) - 1 != len(images):
            raise ConfigInvalid(f"template has {len(pieces) - 1} image markers but {len(images)} images were given")
        segments: list[Segment] = []
        for index, piece in enumerate(pieces):
            if piece:
                segments.append(TextSegment(piece))
            if index < len(images):
                image = images[index]
                segments.append(ImageSegment(data=image) if isinstance(image, bytes) else ImageSegment(path=Path(image)))
        return cls(tuple(segments), system)

    @property
    def text(self) -> str:
        return "".join(segment.text if isinstance(segment, TextSegment) else IMAGE_MARKER for segment in self.segments)

    @property
    def image_paths(self) -> list[Path]:
        return [s.path for s in self.segments if isinstance(s, ImageSegment) and s.path is not None]


def canonical_bundle(bundle: PromptBundle) -> dict[str, Any]:
    segments: list[dict[str, str]] = []
    for segment in bundle.segments:
        if isinstance(segment, TextSegment):
            segments.append({"text": segment.text})
        else:
            segments.append({"image_sha256": segment.digest()})
    return {"system": bundle.system, "segments": segments}


def cache_key(model_name: str, bundle: PromptBundle, temperature: float, max_tokens: int) -> str:
    payload = {
        "model": model_name,
        "bundle": canonical_bundle(bundle),
        "temperature": temperature,
        "max_tokens": max_tokens,
    }
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


_SIGNATURES: tuple[tuple[bytes, str], ...] = (
    (b"\x89PNG\r\n\x1a\n", "image/png"),
    (b"\xff\xd8\xff", "image/jpeg"),
    (b"GIF8", "image/gif"),
    (b"BM", "image/bmp"),
)


def _mime_type(data: bytes) -> str | None:
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    for signature, mime in _SIGNATURES:
        if data.startswith(signature):
            return mime
    return None


def image_data_url(segment: ImageSegment) -> str:
    data = segment.read_bytes()
    where = segment.path or "<inline>"
    mime = _mime_type(data)
    if mime is None:
        raise ImageUnreadable(f"{where}: not a readable image")
    if mime != "image/gif" and cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED) is None:
        raise ImageUnreadable(f"{where}: {mime} payload does not decode")
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def bundle_to_messages(bundle: PromptBundle) -> list[dict[str, Any]]:
    messages: list[dict[str, Any]] = []
    if bundle.system is not None:
        messages.append({"role": "system", "content": [{"type": "text", "text": bundle.system}]})
    content: list[dict[str, Any]] = []
    for segment in bundle.segments:
        if isinstance(segment, TextSegment):
            content.append({"type": "text", "text": segment.text})
        else:
            content.append({"type": "image_url", "image_url": {"url": image_data_url(segment)}})
    messages.append({"role": "user", "content": content})
    return messages


class VlmClient(Protocol):
    config: ClientConfig

    def complete(self, bundle: PromptBundle) -> str: ...


def key_for(client: VlmClient, bundle: PromptBundle) -> str:
    cfg = client.config
    return cache_key(cfg.model_name, bundle, cfg.temperature, cfg.max_tokens)


@dataclass(slots=True)
class CacheEntry:
    key: str
    request_digest: str
    response: str
    created_at: str


class ResponseCache:
    """One JSON file per key; the first write for a key wins."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path_for(self, key: str) -> Path:
        return self.root / key

    def get(self, key: str) -> CacheEntry | None:
        path = self.path_for(key)
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return CacheEntry(key=key, **data)

    def put(self, key: str, response: str, *, request_digest: str | None = None) -> CacheEntry:
        with self._lock:
            existing = self.get(key)
            if existing is not None:
                return existing
            entry = {
                "request_digest": request_digest or key,
                "response": response,
                "created_at": datetime.now(UTC).isoformat(),
            }
            try:
                with self.path_for(key).open("x", encoding="utf-8") as file:
                    json.dump(entry, file, sort_keys=True)
            except FileExistsError:
                pass
        stored = self.get(key)
        assert stored is not None
        return stored


@dataclass
class MockVlmClient:
    """Offline client: ``rules[key]`` when present, else ``responder(bundle)``, else ``default``."""

    rules: Mapping[str, str] = field(default_factory=dict)
    default: str = "unknown"
    responder: Callable[[PromptBundle], str | None] | None = None
    config: ClientConfig = field(default_factory=lambda: ClientConfig(model_name="mock"))
    calls: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def complete(self, bundle: PromptBundle) -> str:
        key = key_for(self, bundle)
        with self._lock:
            self.calls.append(key)
        if key in self.rules:
            return self.rules[key]
        if self.responder is not None:
            answer = self.responder(bundle)
            if answer is not None:
                return answer
        return self.default


class CachingClient:
    def __init__(self, inner: VlmClient, cache: ResponseCache) -> None:
        self.inner = inner
        self.cache = cache
        self.config = inner.config
        self.hits = 0
        self.misses = 0
        self._guard = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def complete(self, bundle: PromptBundle) -> str:
        key = key_for(self.inner, bundle)
        # concurrent misses on one key wait for the first call instead of repeating it
        with self._lock_for(key):
            entry = self.cache.get(key)
            if entry is not None:
                with self._guard:
                    self.hits += 1
                return entry.response
            with self._guard:
                self.misses += 1
            response = self.inner.complete(bundle)
            return self.cache.put(key, response).response


class HttpVlmClient:
    """Chat-completion client over httpx with bounded concurrency and exponential backoff."""

    def __init__(
        self,
        config: ClientConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        token: str | None = None,
    ) -> None:
        config.validate()
        self.config = config
        self._sleep = sleep
        token = token if token is not None else os.environ.get(TOKEN_ENV_VAR)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=config.timeout_s, transport=transport, headers=headers)
        self._slots = threading.BoundedSemaphore(config.concurrency_limit)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> HttpVlmClient:
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def request_payload(self, bundle: PromptBundle) -> dict[str, Any]:
        return {
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": bundle_to_messages(bundle),
        }

    def complete(self, bundle: PromptBundle) -> str:
        payload = self.request_payload(bundle)
        last_error: VlmClientError | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                delay = self.config.backoff_base_s * 2 ** (attempt - 1)
                logger.warning(
                    "retrying vlm request",
                    extra={"attempt": attempt, "delay_s": delay, "error": type(last_error).__name__},
                )
                self._sleep(delay)
            try:
                with self._slots:
                    response = self._client.post(self.config.endpoint, json=payload)
            except httpx.TimeoutException as exc:
                last_error = VlmTimeout(f"request timed out after {self.config.timeout_s}s")
                last_error.__cause__ = exc
                continue
            except httpx.TransportError as exc:
                last_error = EndpointError(f"transport error: {exc}")
                continue
            if response.status_code == 429:
                last_error = RateLimited(f"rate limited after {attempt + 1} attempt(s)")
                continue
            if response.status_code >= 500:
                last_error = EndpointError(f"endpoint returned HTTP {response.status_code}")
                continue
            if response.status_code >= 400:
                raise EndpointError(f"endpoint returned HTTP {response.status_code}")
            return parse_completion(response)
        assert last_error is not None
        raise last_error


def parse_completion(response: httpx.Response) -> str:
    try:
        body = response.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse("response has no choices[0].message.content") from exc
    if not isinstance(content, str):
        raise MalformedResponse(f"message content must be a string, got {type(content).__name__}")
    return content


def load_mock_rules(path: Path | None) -> dict[str, str]:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ConfigInvalid(f"{path}: mock rules must be a JSON object of key -> response")
    return {str(key): value for key, value in data.items()}


def build_client(
    kind: str,
    config: ClientConfig | None = None,
    cache_dir: Path | None = None,
    *,
    rules: Mapping[str, str] | None = None,
    default: str = "unknown",
) -> VlmClient:
    config = config or ClientConfig()
    if kind == "mock":
        client: VlmClient = MockVlmClient(
            rules=dict(rules or {}),
            default=default,
            config=ClientConfig(
                model_name=config.model_name,
                temperature=config.temperature,
                max_tokens=config.max_tokens,
            ),
        )
    elif kind == "http":
        client = HttpVlmClient(config)
    else:
        raise ConfigInvalid(f"unknown client kind {kind!r}")
    if cache_dir is not None:
        return CachingClient(client, ResponseCache(cache_dir))
    return client
