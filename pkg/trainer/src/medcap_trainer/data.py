"""Turns conversations into padded training batches.

The label rule is the heart of the trainer: loss is next-token cross
entropy over assistant-response tokens only. build_labels writes -100
(the ignore index) over every prompt position, image placeholder included,
and every padding position, so nothing but the assistant span can move the
gradients no matter what the label source holds there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import torch

from medcap_trainer.corpus import Conversation
from medcap_trainer.errors import CorpusError
from medcap_trainer.tokenizer import Tokenizer

IGNORE_INDEX = -100


@dataclass(frozen=True)
class EncodedExample:
    image_id: str
    input_ids: list[int]
    prompt_length: int


def encode_conversation(
    tokenizer: Tokenizer, conversation: Conversation, max_length: int
) -> EncodedExample:
    prompt_ids = tokenizer.encode(conversation.prompt_text())
    assistant_ids = tokenizer.encode(conversation.assistant) + [tokenizer.eos_id]
    if len(prompt_ids) >= max_length:
        raise CorpusError(
            f"{conversation.image_id}: prompt is {len(prompt_ids)} tokens, "
            f"leaving no room for the response within max_length={max_length}"
        )
    input_ids = (prompt_ids + assistant_ids)[:max_length]
    return EncodedExample(
        image_id=conversation.image_id,
        input_ids=input_ids,
        prompt_length=len(prompt_ids),
    )


def build_labels(
    label_source: torch.Tensor,
    prompt_lengths: torch.Tensor,
    attention_mask: torch.Tensor,
) -> torch.Tensor:
    """Mask a (batch, seq) tensor of label token ids down to assistant-only
    supervision. label_source is typically the input ids, but any tensor of
    the same shape yields the same labels at masked positions."""
    labels = label_source.clone()
    positions = torch.arange(labels.shape[1]).unsqueeze(0)
    labels[positions < prompt_lengths.unsqueeze(1)] = IGNORE_INDEX
    labels[attention_mask == 0] = IGNORE_INDEX
    return labels


def collate(examples: Sequence[EncodedExample], pad_id: int) -> dict[str, torch.Tensor]:
    width = max(len(example.input_ids) for example in examples)
    input_ids = torch.full((len(examples), width), pad_id, dtype=torch.long)
    attention_mask = torch.zeros((len(examples), width), dtype=torch.long)
    for row, example in enumerate(examples):
        n = len(example.input_ids)
        input_ids[row, :n] = torch.tensor(example.input_ids, dtype=torch.long)
        attention_mask[row, :n] = 1
    prompt_lengths = torch.tensor(
        [example.prompt_length for example in examples], dtype=torch.long
    )
    labels = build_labels(input_ids, prompt_lengths, attention_mask)
    return {
        "input_ids": input_ids,
        "attention_mask": attention_mask,
        "prompt_lengths": prompt_lengths,
        "labels": labels,
    }


def batches(
    examples: Sequence[EncodedExample], batch_size: int, pad_id: int
) -> Iterator[dict[str, torch.Tensor]]:
    for start in range(0, len(examples), batch_size):
        yield collate(examples[start : start + batch_size], pad_id)
