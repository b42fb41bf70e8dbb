"""Deterministic in-process endpoint simulators for offline runs and tests.

A base_url of the form ``mock://teacher``, ``mock://judge`` or
``mock://embedder`` (with optional query parameters) routes a ModelClient
through an httpx.MockTransport served by one of the handlers below. Every
handler validates incoming requests against the wire-shape schemas before
answering, so any run against mocks doubles as a conformance check of the
client's request construction.

The teacher reads the ground truth it needs from metadata embedded in the
fixture PNGs themselves (tEXt chunks written by :func:`make_fixture_image`),
which keeps the simulator honest: it sees only what a real endpoint would
receive on the wire.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import re
import threading
import urllib.parse
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import httpx
import jsonschema
from PIL import Image
from PIL.PngImagePlugin import PngInfo

META_IMAGE_ID = "medcap:image_id"
META_GROUND_TRUTH = "medcap:ground_truth"
META_DATASET = "medcap:dataset"
META_CLASSES = "medcap:classes"

_CONTENT_PART = {
    "oneOf": [
        {
            "type": "object",
            "required": ["type", "text"],
            "properties": {"type": {"const": "text"}, "text": {"type": "string"}},
            "additionalProperties": False,
        },
        {
            "type": "object",
            "required": ["type", "image_url"],
            "properties": {
                "type": {"const": "image_url"},
                "image_url": {
                    "type": "object",
                    "required": ["url"],
                    "properties": {
                        "url": {"type": "string", "pattern": "^data:image/(jpeg|png);base64,"}
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
    ]
}

CHAT_REQUEST_SCHEMA = {
    "type": "object",
    "required": ["model", "messages"],
    "properties": {
        "model": {"type": "string", "minLength": 1},
        "temperature": {"type": "number", "minimum": 0},
        "max_tokens": {"type": "integer", "minimum": 1},
        "response_format": {
            "type": "object",
            "required": ["type"],
            "properties": {"type": {"enum": ["json_object", "text"]}},
            "additionalProperties": False,
        },
        "messages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["role", "content"],
                "properties": {
                    "role": {"enum": ["system", "user", "assistant"]},
                    "content": {
                        "oneOf": [
                            {"type": "string"},
                            {"type": "array", "minItems": 1, "items": _CONTENT_PART},
                        ]
                    },
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}

EMBEDDINGS_REQUEST_SCHEMA = {
    "type": "object",
    "required": ["model", "input"],
    "properties": {
        "model": {"type": "string", "minLength": 1},
        "input": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "string", "minLength": 1},
        },
    },
    "additionalProperties": False,
}


def validate_chat_request(body: dict) -> None:
    jsonschema.validate(body, CHAT_REQUEST_SCHEMA)


def validate_embeddings_request(body: dict) -> None:
    jsonschema.validate(body, EMBEDDINGS_REQUEST_SCHEMA)


# -- fixture images ------------------------------------------------------------


def make_fixture_image(
    path: Path,
    image_id: str,
    ground_truth: str,
    dataset: str,
    classes: Sequence[str],
    size: tuple[int, int] = (48, 48),
) -> Path:
    """Write a small deterministic PNG whose tEXt chunks carry the labels the
    mock teacher needs. Keep the longest side at or below the encode policy's
    passthrough limit so the chunks survive transmission byte-exactly."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    color = (digest[0], digest[1], digest[2])
    image = Image.new("RGB", size, color)
    info = PngInfo()
    info.add_text(META_IMAGE_ID, image_id)
    info.add_text(META_GROUND_TRUTH, ground_truth)
    info.add_text(META_DATASET, dataset)
    info.add_text(META_CLASSES, "|".join(classes))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG", pnginfo=info)
    return path


def read_image_metadata(png_bytes: bytes) -> dict:
    with Image.open(io.BytesIO(png_bytes)) as image:
        image.load()
        return dict(getattr(image, "text", {}) or {})


def extract_image_bytes(body: dict) -> Optional[bytes]:
    """Pull the first data-URL image out of a chat request body."""
    for message in body.get("messages", []):
        content = message.get("content")
        if not isinstance(content, list):
            continue
        for part in content:
            if isinstance(part, dict) and part.get("type") == "image_url":
                url = part["image_url"]["url"]
                _, _, payload = url.partition("base64,")
                return base64.b64decode(payload)
    return None


def _chat_payload(content: str, model: str) -> dict:
    return {
        "id": "mock-" + hashlib.sha256(content.encode("utf-8")).hexdigest()[:12],
        "object": "chat.completion",
        "model": model,
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": content},
                "finish_reason": "stop",
            }
        ],
        "usage": {
            "prompt_tokens": 64,
            "completion_tokens": max(1, len(content) // 4),
            "total_tokens": 64 + max(1, len(content) // 4),
        },
    }


def _json_response(payload: dict, status: int = 200) -> httpx.Response:
    return httpx.Response(status, json=payload)


def _error_response(status: int, message: str) -> httpx.Response:
    return httpx.Response(status, json={"error": {"message": message, "type": "mock_error"}})


def _decision(kind: str, key: str, salt: str) -> float:
    """Deterministic pseudo-uniform draw in [0, 1) for one (kind, key) pair."""
    digest = hashlib.sha256(f"{kind}:{salt}:{key}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16) / float(0x100000000)


def _split_sentences(text: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+|\n+", text.strip())
    return [part.strip() for part in parts if part.strip()]


def _normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().rstrip(".").lower())


class MockTeacher:
    """Simulated captioning endpoint.

    wrong_rate: fraction of images captioned with a deliberately wrong class.
    malformed_rate: fraction answered with prose instead of JSON (every ask).
    malformed_once: images selected by malformed_rate answer prose only on
        their first ask and valid JSON afterwards.
    http_fail_once_rate / http_fail_always_rate: fraction of images whose
        requests get a 500, once (first attempt) or on every attempt.
    All selections hash the image_id so behaviour is stable across resumes.
    """

    def __init__(
        self,
        wrong_rate: float = 0.0,
        malformed_rate: float = 0.0,
        malformed_once: bool = True,
        http_fail_once_rate: float = 0.0,
        http_fail_always_rate: float = 0.0,
        salt: str = "0",
    ) -> None:
        self.wrong_rate = wrong_rate
        self.malformed_rate = malformed_rate
        self.malformed_once = malformed_once
        self.http_fail_once_rate = http_fail_once_rate
        self.http_fail_always_rate = http_fail_always_rate
        self.salt = salt
        self._lock = threading.Lock()
        self._asks: dict[str, int] = {}
        self._posts: dict[str, int] = {}
        self.requests: list[dict] = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        if not request.url.path.endswith("/chat/completions"):
            return _error_response(404, f"unknown path {request.url.path}")
        body = json.loads(request.content)
        try:
            validate_chat_request(body)
        except jsonschema.ValidationError as exc:
            return _error_response(400, f"request schema violation: {exc.message}")
        with self._lock:
            self.requests.append(body)
        image_bytes = extract_image_bytes(body)
        if image_bytes is None:
            return _json_response(_chat_payload("ok", body["model"]))
        meta = read_image_metadata(image_bytes)
        image_id = meta.get(META_IMAGE_ID)
        truth = meta.get(META_GROUND_TRUTH)
        if not image_id or not truth:
            return _error_response(400, "fixture image carries no label metadata")

        with self._lock:
            post_index = self._posts.get(image_id, 0)
            self._posts[image_id] = post_index + 1
        if _decision("http_always", image_id, self.salt) < self.http_fail_always_rate:
            return _error_response(500, "simulated persistent server error")
        if post_index == 0 and _decision("http_once", image_id, self.salt) < self.http_fail_once_rate:
            return _error_response(500, "simulated transient server error")

        malformed_pick = _decision("malformed", image_id, self.salt) < self.malformed_rate
        if malformed_pick:
            with self._lock:
                ask_index = self._asks.get(image_id, 0)
                self._asks[image_id] = ask_index + 1
            if not self.malformed_once or ask_index == 0:
                content = (
                    f"The submitted image appears to show material relevant to {truth}, "
                    "though a structured reading is not provided here."
                )
                return _json_response(_chat_payload(content, body["model"]))

        label = truth
        if _decision("wrong", image_id, self.salt) < self.wrong_rate:
            classes = [c for c in meta.get(META_CLASSES, "").split("|") if c]
            if truth in classes and len(classes) > 1:
                label = classes[(classes.index(truth) + 1) % len(classes)]
            else:
                label = truth + " (atypical)"
        dataset = meta.get(META_DATASET, "unknown")
        caption = {
            "prediction": label,
            "description": {
                "image_type": f"Digital {dataset} image of diagnostic quality.",
                "anatomical_region": f"Region conventionally assessed for {dataset} studies.",
                "key_findings": f"Appearances are characteristic of {label}.",
                "clinical_significance": f"Findings consistent with {label}; correlate clinically.",
            },
        }
        return _json_response(_chat_payload(json.dumps(caption), body["model"]))


class MockJudge:
    """Simulated text-analysis endpoint dispatching on a ``Task:`` marker in
    the system prompt. Verdicts use normalized substring containment, which
    is crude but deterministic and directionally sensible: restating the
    reference scores high, novel claims score low."""

    def __init__(self, n_questions: int = 3) -> None:
        self.n_questions = n_questions
        self._lock = threading.Lock()
        self.requests: list[dict] = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        if not request.url.path.endswith("/chat/completions"):
            return _error_response(404, f"unknown path {request.url.path}")
        body = json.loads(request.content)
        try:
            validate_chat_request(body)
        except jsonschema.ValidationError as exc:
            return _error_response(400, f"request schema violation: {exc.message}")
        with self._lock:
            self.requests.append(body)
        system = ""
        user = ""
        for message in body["messages"]:
            if message["role"] == "system" and isinstance(message["content"], str):
                system = message["content"]
            if message["role"] == "user" and isinstance(message["content"], str):
                user = message["content"]
        marker = re.search(r"Task:\s*([a-z_]+)", system)
        task = marker.group(1) if marker else ""
        if not task and "health check" in system.lower():
            return _json_response(_chat_payload("ok", body.get("model", "mock-judge")))
        if task == "statement_decomposition":
            content = json.dumps(_split_sentences(_section(user, "TEXT")))
        elif task == "faithfulness":
            context = _normalize(_section(user, "CONTEXT"))
            statements = json.loads(_section(user, "STATEMENTS"))
            content = json.dumps([1 if _normalize(s) in context else 0 for s in statements])
        elif task == "question_generation":
            sentences = _split_sentences(_section(user, "TEXT")) or ["the image"]
            questions = []
            for i in range(self.n_questions):
                stem = " ".join(sentences[i % len(sentences)].split()[:6]).rstrip(".,;")
                questions.append(f"What does the description convey about {stem.lower()}?")
            content = json.dumps(questions)
        elif task == "correctness_claims":
            answer = _split_sentences(_section(user, "ANSWER"))
            reference = _split_sentences(_section(user, "REFERENCE"))
            norm_ref = [_normalize(s) for s in reference]
            norm_ans = [_normalize(s) for s in answer]
            tp = [s for s in answer if _normalize(s) in norm_ref]
            fp = [s for s in answer if _normalize(s) not in norm_ref]
            fn = [s for s in reference if _normalize(s) not in norm_ans]
            content = json.dumps({"tp": tp, "fp": fp, "fn": fn})
        else:
            return _error_response(400, f"unrecognized judge task marker: {task!r}")
        return _json_response(_chat_payload(content, body["model"]))


_SECTION_HEADER = re.compile(r"^(CONTEXT|STATEMENTS|TEXT|ANSWER|REFERENCE|QUESTION):[ \t]*$", re.MULTILINE)


def _section(text: str, header: str) -> str:
    """Return the block between the '<header>:' line and the next header line."""
    blocks: dict[str, str] = {}
    matches = list(_SECTION_HEADER.finditer(text))
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        blocks[match.group(1)] = text[match.end() : end].strip()
    return blocks.get(header, "")


class MockEmbedder:
    """Hash-derived unit vectors: identical texts embed identically, distinct
    texts land effectively at random on the sphere."""

    def __init__(self, dim: int = 32) -> None:
        self.dim = dim
        self._lock = threading.Lock()
        self.requests: list[dict] = []

    def vector(self, text: str) -> list[float]:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        raw = []
        counter = 0
        while len(raw) < self.dim:
            block = hashlib.sha256(digest + counter.to_bytes(2, "big")).digest()
            raw.extend(byte / 255.0 * 2.0 - 1.0 for byte in block)
            counter += 1
        raw = raw[: self.dim]
        norm = sum(x * x for x in raw) ** 0.5 or 1.0
        return [x / norm for x in raw]

    def __call__(self, request: httpx.Request) -> httpx.Response:
        if not request.url.path.endswith("/embeddings"):
            return _error_response(404, f"unknown path {request.url.path}")
        body = json.loads(request.content)
        try:
            validate_embeddings_request(body)
        except jsonschema.ValidationError as exc:
            return _error_response(400, f"request schema violation: {exc.message}")
        with self._lock:
            self.requests.append(body)
        data = [
            {"object": "embedding", "index": i, "embedding": self.vector(text)}
            for i, text in enumerate(body["input"])
        ]
        return _json_response(
            {
                "object": "list",
                "data": data,
                "model": body["model"],
                "usage": {"prompt_tokens": 8 * len(data), "total_tokens": 8 * len(data)},
            }
        )


ScriptItem = Union[httpx.Response, Exception, Callable[[httpx.Request], httpx.Response]]


class ScriptedTransport(httpx.BaseTransport):
    """Plays back a fixed sequence of responses/exceptions and records every
    request it saw. For unit tests that need exact control over the wire."""

    def __init__(self, script: Sequence[ScriptItem]) -> None:
        self.script: list[ScriptItem] = list(script)
        self.requests: list[httpx.Request] = []
        self._lock = threading.Lock()

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        with self._lock:
            self.requests.append(request)
            if not self.script:
                raise AssertionError("scripted transport exhausted")
            item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        if callable(item):
            return item(request)
        return item


def scripted_chat(content: str, model: str = "scripted") -> httpx.Response:
    return _json_response(_chat_payload(content, model))


_HANDLER_KINDS = {"teacher": MockTeacher, "judge": MockJudge, "embedder": MockEmbedder}

_FLOAT_PARAMS = {
    "wrong_rate",
    "malformed_rate",
    "http_fail_once_rate",
    "http_fail_always_rate",
}
_INT_PARAMS = {"dim", "n_questions"}
_BOOL_PARAMS = {"malformed_once"}


def build_mock_handler(base_url: str):
    parsed = urllib.parse.urlsplit(base_url)
    if parsed.scheme != "mock":
        raise ValueError(f"not a mock endpoint url: {base_url}")
    kind = parsed.netloc or parsed.path.strip("/")
    if kind not in _HANDLER_KINDS:
        raise ValueError(f"unknown mock endpoint kind: {kind!r}")
    kwargs: dict = {}
    for key, values in urllib.parse.parse_qs(parsed.query).items():
        value = values[-1]
        if key in _FLOAT_PARAMS:
            kwargs[key] = float(value)
        elif key in _INT_PARAMS:
            kwargs[key] = int(value)
        elif key in _BOOL_PARAMS:
            kwargs[key] = value.lower() in ("1", "true", "yes")
        elif key == "salt":
            kwargs[key] = value
        else:
            raise ValueError(f"unknown mock parameter {key!r} for {kind}")
    return _HANDLER_KINDS[kind](**kwargs)


def build_mock_transport(base_url: str) -> httpx.MockTransport:
    return httpx.MockTransport(build_mock_handler(base_url))
