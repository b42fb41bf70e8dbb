"""Loading and rendering of the emitted conversation files.

Each line of corpus_train.ndjson / corpus_validation.ndjson is one JSON
object: an image_id plus exactly three chat messages (system, user,
assistant), the user message carrying an image_path. Validation happens
here, before any model is constructed, so schema problems abort cheaply.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from medcap_trainer.errors import CorpusError

# Placeholder standing in for vision features in the rendered prompt. It
# lives inside the masked prompt span, so image tokens never receive loss.
IMAGE_TOKEN = "<image>"

_ROLE_ORDER = ("system", "user", "assistant")


@dataclass(frozen=True)
class Conversation:
    image_id: str
    system: str
    user: str
    assistant: str
    image_path: Optional[str]

    def prompt_text(self) -> str:
        """Everything the model conditions on but must not be trained on."""
        image = f"{IMAGE_TOKEN}\n" if self.image_path else ""
        return (
            f"<|system|>\n{self.system}\n"
            f"<|user|>\n{image}{self.user}\n"
            f"<|assistant|>\n"
        )

    def full_text(self) -> str:
        return self.prompt_text() + self.assistant


def _message(payload: dict, index: int, where: str) -> dict:
    messages = payload.get("messages")
    if not isinstance(messages, list) or len(messages) != len(_ROLE_ORDER):
        raise CorpusError(f"{where}: expected exactly {len(_ROLE_ORDER)} messages")
    entry = messages[index]
    if not isinstance(entry, dict):
        raise CorpusError(f"{where}: message {index} is not an object")
    role = entry.get("role")
    if role != _ROLE_ORDER[index]:
        raise CorpusError(
            f"{where}: message {index} has role {role!r}, expected {_ROLE_ORDER[index]!r}"
        )
    content = entry.get("content")
    if not isinstance(content, str) or not content.strip():
        raise CorpusError(f"{where}: message {index} content must be non-empty text")
    return entry


def load_conversations(path: Path) -> list[Conversation]:
    """Parse one corpus file; raises CorpusError on any malformed or empty
    input rather than training on garbage."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc

    conversations: list[Conversation] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path.name}:{lineno}"
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{where}: invalid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise CorpusError(f"{where}: row is not an object")
        image_id = payload.get("image_id")
        if not isinstance(image_id, str) or not image_id:
            raise CorpusError(f"{where}: missing image_id")
        if image_id in seen:
            raise CorpusError(f"{where}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        system = _message(payload, 0, where)
        user = _message(payload, 1, where)
        assistant = _message(payload, 2, where)
        image_path = user.get("image_path")
        if image_path is not None and not isinstance(image_path, str):
            raise CorpusError(f"{where}: image_path must be text when present")
        conversations.append(
            Conversation(
                image_id=image_id,
                system=system["content"],
                user=user["content"],
                assistant=assistant["content"],
                image_path=image_path,
            )
        )
    if not conversations:
        raise CorpusError(f"{path}: corpus file contains no conversations")
    return conversations
