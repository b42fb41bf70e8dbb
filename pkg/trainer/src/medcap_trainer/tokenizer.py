"""Tokenizers behind one tiny protocol: encode text to ids with no special
tokens, expose pad/eos ids, round-trip through JSON for the adapter export.

The built-in character tokenizer exists so the smoke path needs no
downloaded vocabulary; real runs adapt whatever tokenizer ships with the
base model.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol, Sequence

from medcap_trainer.errors import TrainerError

PAD = "<pad>"
EOS = "<eos>"
UNK = "<unk>"


class Tokenizer(Protocol):
    pad_id: int
    eos_id: int
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...


class CharTokenizer:
    """One character, one token. Vocabulary is built from the corpus text,
    so any conversation encodes without unknowns; unseen inference-time
    characters fall back to <unk>."""

    def __init__(self, alphabet: Sequence[str]):
        specials = [PAD, EOS, UNK]
        duplicates = set(specials) & set(alphabet)
        if duplicates:
            raise TrainerError(f"alphabet collides with special tokens: {duplicates}")
        self._tokens = specials + sorted(set(alphabet))
        self._index = {token: i for i, token in enumerate(self._tokens)}
        self.pad_id = self._index[PAD]
        self.eos_id = self._index[EOS]
        self.unk_id = self._index[UNK]
        self.vocab_size = len(self._tokens)

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "CharTokenizer":
        alphabet = sorted({ch for text in texts for ch in text})
        return cls(alphabet)

    def encode(self, text: str) -> list[int]:
        return [self._index.get(ch, self.unk_id) for ch in text]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(
            self._tokens[i] if 0 <= i < self.vocab_size else UNK for i in ids
        )

    def save(self, path: Path) -> None:
        payload = {"kind": "char", "tokens": self._tokens}
        Path(path).write_text(
            json.dumps(payload, ensure_ascii=False) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: Path) -> "CharTokenizer":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("kind") != "char":
            raise TrainerError(f"{path}: not a char tokenizer file")
        tokens = payload["tokens"]
        tokenizer = cls.__new__(cls)
        tokenizer._tokens = list(tokens)
        tokenizer._index = {token: i for i, token in enumerate(tokens)}
        tokenizer.pad_id = tokenizer._index[PAD]
        tokenizer.eos_id = tokenizer._index[EOS]
        tokenizer.unk_id = tokenizer._index[UNK]
        tokenizer.vocab_size = len(tokens)
        return tokenizer


class HFTokenizer:
    """Adapter putting a transformers tokenizer behind the same protocol."""

    def __init__(self, inner):
        self._inner = inner
        eos = inner.eos_token_id
        if eos is None:
            raise TrainerError("base tokenizer has no eos token")
        self.eos_id = eos
        self.pad_id = inner.pad_token_id if inner.pad_token_id is not None else eos
        self.vocab_size = len(inner)

    def encode(self, text: str) -> list[int]:
        return self._inner(text, add_special_tokens=False)["input_ids"]

    def decode(self, ids: Sequence[int]) -> str:
        return self._inner.decode(ids)
