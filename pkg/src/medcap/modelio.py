"""HTTP client layer for OpenAI-compatible chat-completions and embeddings
endpoints: request shaping, retry with exponential backoff, per-endpoint
rate limiting and concurrency caps, and newline-delimited audit logging.

One ModelClient instance per endpoint; instances are safe to share across
threads. Mock endpoints (base_url starting with ``mock://``) are served by
in-process deterministic simulators from :mod:`medcap.mocks`.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx
from PIL import Image, UnidentifiedImageError

from .datamodel import ImageRecord
from .errors import (
    ConfigError,
    EndpointExhausted,
    EndpointRejected,
    ImageDecodeError,
    InputError,
)

BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0


@dataclass(frozen=True)
class EndpointConfig:
    name: str
    base_url: str
    model_name: str
    api_key_env_var: Optional[str] = None
    max_concurrent_requests: int = 4
    requests_per_minute: int = 600
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    max_completion_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.max_concurrent_requests < 1:
            raise ConfigError(f"{self.name}: max_concurrent_requests must be >= 1")
        if self.requests_per_minute < 1:
            raise ConfigError(f"{self.name}: requests_per_minute must be >= 1")
        if self.timeout <= 0:
            raise ConfigError(f"{self.name}: timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError(f"{self.name}: max_retries must be non-negative")


@dataclass(frozen=True)
class EncodePolicy:
    max_dimension: int = 1024
    jpeg_quality: int = 90

    def __post_init__(self) -> None:
        if self.max_dimension < 16:
            raise ConfigError("encode max_dimension must be >= 16")
        if not 1 <= self.jpeg_quality <= 100:
            raise ConfigError("encode jpeg_quality must be within 1..100")


@dataclass(frozen=True)
class EncodedImage:
    media_type: str  # "jpeg" | "png"
    base64_payload: str
    source_sha256: str
    resized_to: Optional[tuple[int, int]] = None

    def data_url(self) -> str:
        return f"data:image/{self.media_type};base64,{self.base64_payload}"


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_text: str
    image: Optional[EncodedImage] = None
    response_format_json: bool = False

    def __post_init__(self) -> None:
        if self.image is not None and self.image.media_type not in ("jpeg", "png"):
            raise InputError(f"unsupported image media type: {self.image.media_type}")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: float
    endpoint: str


def encode_image(record: ImageRecord, policy: EncodePolicy = EncodePolicy()) -> EncodedImage:
    """Read and base64-encode the record's image.

    Images whose longest side fits within policy.max_dimension pass through
    byte-identical; larger ones are downscaled (aspect preserved) and
    re-encoded as JPEG at the configured quality. Deterministic for a fixed
    file and policy.
    """
    path = Path(record.image_path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    digest = hashlib.sha256(raw).hexdigest()
    try:
        with Image.open(io.BytesIO(raw)) as image:
            image.load()
            width, height = image.size
            source_format = (image.format or "").lower()
            if max(width, height) <= policy.max_dimension and source_format in ("jpeg", "png"):
                return EncodedImage(
                    media_type=source_format,
                    base64_payload=base64.b64encode(raw).decode("ascii"),
                    source_sha256=digest,
                )
            if max(width, height) <= policy.max_dimension:
                new_size = (width, height)  # small but non-jpeg/png source: re-encode only
            elif width >= height:
                new_size = (policy.max_dimension, max(1, round(height * policy.max_dimension / width)))
            else:
                new_size = (max(1, round(width * policy.max_dimension / height)), policy.max_dimension)
            resized = image.convert("RGB").resize(new_size, Image.LANCZOS)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    buffer = io.BytesIO()
    resized.save(buffer, format="JPEG", quality=policy.jpeg_quality)
    return EncodedImage(
        media_type="jpeg",
        base64_payload=base64.b64encode(buffer.getvalue()).decode("ascii"),
        source_sha256=digest,
        resized_to=new_size if new_size != (width, height) else None,
    )


class RateLimiter:
    """Sliding 60-second window limiter, thread-safe, with injectable clock."""

    def __init__(
        self,
        requests_per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self._limit = requests_per_minute
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._sent: deque[float] = deque()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._sent and now - self._sent[0] >= 60.0:
                    self._sent.popleft()
                if len(self._sent) < self._limit:
                    self._sent.append(now)
                    return
                wait = 60.0 - (now - self._sent[0])
            self._sleep(max(wait, 1e-3))


class AuditLog:
    """Append-only newline-delimited JSON log, one record per network attempt.

    Writes are serialized through a single lock; the in-memory copy is kept
    only when requested (tests, small runs).
    """

    def __init__(self, path: Optional[Path] = None, keep_in_memory: bool = False) -> None:
        self.path = Path(path) if path else None
        self._keep = keep_in_memory or path is None
        self._lock = threading.Lock()
        self.records: list[dict] = []
        self._handle = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, "a", encoding="utf-8")

    def append(self, record: dict) -> None:
        with self._lock:
            if self._handle:
                self._handle.write(json.dumps(record, ensure_ascii=False) + "\n")
                self._handle.flush()
            if self._keep:
                self.records.append(record)

    def close(self) -> None:
        with self._lock:
            if self._handle:
                self._handle.close()
                self._handle = None

    def __enter__(self) -> "AuditLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _request_body_hash(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()


class ModelClient:
    """Synchronous client for one endpoint, shareable across threads."""

    def __init__(
        self,
        config: EndpointConfig,
        audit: Optional[AuditLog] = None,
        transport: Optional[httpx.BaseTransport] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
    ) -> None:
        self.config = config
        self.audit = audit if audit is not None else AuditLog()
        self._clock = clock
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._limiter = RateLimiter(config.requests_per_minute, clock=clock, sleep=sleep)
        self._slots = threading.Semaphore(config.max_concurrent_requests)

        headers = {}
        if config.api_key_env_var:
            key = os.environ.get(config.api_key_env_var)
            if not key:
                raise ConfigError(
                    f"endpoint {config.name}: environment variable {config.api_key_env_var} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"

        base_url = config.base_url.rstrip("/")
        if base_url.startswith("mock:"):
            if transport is None:
                from . import mocks

                transport = mocks.build_mock_transport(base_url)
            base_url = "http://mock.internal/v1"
        self._base_url = base_url
        self._client = httpx.Client(transport=transport, timeout=config.timeout, headers=headers)

    # -- request construction -------------------------------------------------

    def chat_body(self, request: ChatRequest) -> dict:
        if request.image is not None:
            user_content: object = [
                {"type": "text", "text": request.user_text},
                {"type": "image_url", "image_url": {"url": request.image.data_url()}},
            ]
        else:
            user_content = request.user_text
        body = {
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_completion_tokens,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": user_content},
            ],
        }
        if request.response_format_json:
            body["response_format"] = {"type": "json_object"}
        return body

    # -- operations -----------------------------------------------------------

    def chat(self, request: ChatRequest, meta: Optional[dict] = None) -> ChatResponse:
        body = self.chat_body(request)
        payload, latency = self._post_with_retry("/chat/completions", body, op="chat", meta=meta)
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointRejected(f"{self.config.name}: malformed chat response shape: {exc}", 200)
        usage = payload.get("usage") or {}
        return ChatResponse(
            text=text if isinstance(text, str) else json.dumps(text),
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency_ms=latency,
            endpoint=self.config.name,
        )

    def embed(self, texts: Sequence[str], meta: Optional[dict] = None) -> list[list[float]]:
        if not texts:
            raise InputError("embed requires at least one text")
        for i, text in enumerate(texts):
            if not isinstance(text, str) or not text.strip():
                raise InputError(f"embed input {i} is empty")
        body = {"model": self.config.model_name, "input": list(texts)}
        payload, _ = self._post_with_retry("/embeddings", body, op="embed", meta=meta)
        try:
            rows = sorted(payload["data"], key=lambda row: row["index"])
            vectors = [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError) as exc:
            raise EndpointRejected(f"{self.config.name}: malformed embeddings response: {exc}", 200)
        if len(vectors) != len(texts):
            raise EndpointRejected(
                f"{self.config.name}: expected {len(texts)} embeddings, got {len(vectors)}", 200
            )
        return vectors

    def health_check(self, op: str = "chat") -> None:
        """One minimal request to surface endpoint problems before a run."""
        if op == "embed":
            self.embed(["health check"], meta={"purpose": "health_check"})
        else:
            self.chat(
                ChatRequest(system_prompt="health check", user_text="reply with ok"),
                meta={"purpose": "health_check"},
            )

    # -- internals ------------------------------------------------------------

    def _post_with_retry(self, path: str, body: dict, op: str, meta: Optional[dict]) -> tuple[dict, float]:
        url = self._base_url + path
        body_hash = _request_body_hash(body)
        try_index = 0
        with self._slots:
            while True:
                self._limiter.acquire()
                started = self._clock()
                audit_record = {
                    "ts": time.time(),
                    "endpoint": self.config.name,
                    "model": self.config.model_name,
                    "op": op,
                    "try_index": try_index,
                    "request_sha256": body_hash,
                    **(meta or {}),
                }
                try:
                    response = self._client.post(url, json=body)
                except httpx.TransportError as exc:
                    audit_record.update(ok=False, status=type(exc).__name__, latency_ms=self._elapsed(started))
                    self.audit.append(audit_record)
                    if try_index >= self.config.max_retries:
                        raise EndpointExhausted(
                            f"{self.config.name}: transport errors exhausted retries: {exc}", try_index + 1
                        ) from exc
                    self._backoff(try_index)
                    try_index += 1
                    continue

                latency = self._elapsed(started)
                if response.status_code == 200:
                    payload = response.json()
                    usage = payload.get("usage") or {}
                    audit_record.update(
                        ok=True,
                        status=200,
                        latency_ms=latency,
                        prompt_tokens=usage.get("prompt_tokens"),
                        completion_tokens=usage.get("completion_tokens"),
                    )
                    self.audit.append(audit_record)
                    return payload, latency

                audit_record.update(ok=False, status=response.status_code, latency_ms=latency)
                self.audit.append(audit_record)
                if response.status_code == 429 or response.status_code >= 500:
                    if try_index >= self.config.max_retries:
                        raise EndpointExhausted(
                            f"{self.config.name}: HTTP {response.status_code} after {try_index + 1} attempts",
                            try_index + 1,
                        )
                    self._backoff(try_index)
                    try_index += 1
                    continue
                raise EndpointRejected(
                    f"{self.config.name}: HTTP {response.status_code}: {response.text[:200]}",
                    response.status_code,
                )

    def _elapsed(self, started: float) -> float:
        return (self._clock() - started) * 1000.0

    def _backoff(self, try_index: int) -> None:
        delay = BACKOFF_BASE_SECONDS * (BACKOFF_FACTOR**try_index) * self._rng.uniform(0.5, 1.5)
        self._sleep(delay)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "ModelClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
