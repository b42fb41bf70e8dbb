"""Adapter fine-tuning on the emitted conversation files.

train() is the whole public surface: load and validate both corpus files,
build the base model, inject low-rank adapters, run next-token training on
assistant spans only, and export the adapter tensors plus a JSON training
log. Defaults give an effective batch of 16 (4 per device x 4 accumulation)
with a linear warmup schedule.

The built-in "tiny-char-lm" base is a small randomly initialized llama
architecture over a character vocabulary drawn from the corpus itself; it
exists for smoke runs and tests on machines with no model cache. Any other
base_model_id is resolved through transformers.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn

from medcap_trainer.corpus import Conversation, load_conversations
from medcap_trainer.data import IGNORE_INDEX, EncodedExample, batches, encode_conversation
from medcap_trainer.errors import ResourceError, TrainerError
from medcap_trainer.lora import inject_lora, mark_only_lora_trainable, save_adapter
from medcap_trainer.tokenizer import CharTokenizer, HFTokenizer, Tokenizer

logger = logging.getLogger(__name__)

TINY_BASE = "tiny-char-lm"


@dataclass(frozen=True)
class LoraSettings:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.0
    targets: tuple[str, ...] = ("q_proj", "v_proj")


@dataclass(frozen=True)
class TrainerConfig:
    base_model_id: str = TINY_BASE
    output_dir: Path = Path("trainer_out")
    epochs: int = 10
    per_device_batch: int = 4
    gradient_accumulation: int = 4
    learning_rate: float = 2e-4
    warmup_ratio: float = 0.03
    scheduler: str = "linear"
    gradient_checkpointing: bool = True
    # Char-level smoke runs need room for full clinical prompts (a rendered
    # chest X-ray prompt alone is over 1k characters).
    max_length: int = 2048
    seed: int = 0
    lora: LoraSettings = field(default_factory=LoraSettings)

    def __post_init__(self):
        for name in ("epochs", "per_device_batch", "gradient_accumulation", "max_length"):
            if getattr(self, name) < 1:
                raise TrainerError(f"{name} must be at least 1")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise TrainerError("warmup_ratio must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be positive")

    @property
    def effective_batch(self) -> int:
        return self.per_device_batch * self.gradient_accumulation


@dataclass(frozen=True)
class TrainingResult:
    adapter_dir: Path
    log_path: Path
    step_losses: list[float]
    epoch_logs: list[dict]
    adapted_modules: list[str]


def _tiny_base(
    config: TrainerConfig, texts: Sequence[str]
) -> tuple[CharTokenizer, nn.Module]:
    from transformers import LlamaConfig, LlamaForCausalLM

    tokenizer = CharTokenizer.from_texts(texts)
    model_config = LlamaConfig(
        vocab_size=tokenizer.vocab_size,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=4,
        max_position_embeddings=config.max_length,
        pad_token_id=tokenizer.pad_id,
        eos_token_id=tokenizer.eos_id,
        bos_token_id=tokenizer.eos_id,
    )
    return tokenizer, LlamaForCausalLM(model_config)


def _pretrained_base(config: TrainerConfig) -> tuple[Tokenizer, nn.Module]:
    from transformers import AutoModelForCausalLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(config.base_model_id)
        model = AutoModelForCausalLM.from_pretrained(config.base_model_id)
    except Exception as exc:
        raise TrainerError(
            f"base model {config.base_model_id!r} is not loadable: {exc}"
        ) from exc
    return HFTokenizer(tokenizer), model


def load_base(
    config: TrainerConfig, texts: Sequence[str]
) -> tuple[Tokenizer, nn.Module]:
    if config.base_model_id == TINY_BASE:
        return _tiny_base(config, texts)
    return _pretrained_base(config)


def _encode_all(
    tokenizer: Tokenizer, conversations: Sequence[Conversation], max_length: int
) -> list[EncodedExample]:
    return [
        encode_conversation(tokenizer, conversation, max_length)
        for conversation in conversations
    ]


def _forward_loss(model: nn.Module, batch: dict[str, torch.Tensor]) -> torch.Tensor:
    try:
        output = model(
            input_ids=batch["input_ids"],
            attention_mask=batch["attention_mask"],
            labels=batch["labels"],
        )
    except RuntimeError as exc:
        if "out of memory" in str(exc).lower():
            raise ResourceError(f"training step exhausted memory: {exc}") from exc
        raise
    return output.loss


def _validation_loss(
    model: nn.Module, examples: Sequence[EncodedExample], config: TrainerConfig, pad_id: int
) -> Optional[float]:
    if not examples:
        return None
    model.eval()
    total = 0.0
    weight = 0
    with torch.no_grad():
        for batch in batches(examples, config.per_device_batch, pad_id):
            n_targets = int((batch["labels"][:, 1:] != IGNORE_INDEX).sum().item())
            loss = _forward_loss(model, batch)
            total += float(loss.item()) * n_targets
            weight += n_targets
    model.train()
    return total / weight if weight else None


def train(
    train_path: Path, validation_path: Optional[Path], config: TrainerConfig
) -> TrainingResult:
    """Fine-tune adapters on one corpus; returns paths to the exported
    adapter and training log together with the per-step loss history."""
    train_conversations = load_conversations(Path(train_path))
    validation_conversations = (
        load_conversations(Path(validation_path)) if validation_path else []
    )

    torch.manual_seed(config.seed)
    texts = [
        conversation.full_text()
        for conversation in (*train_conversations, *validation_conversations)
    ]
    tokenizer, model = load_base(config, texts)
    train_examples = _encode_all(tokenizer, train_conversations, config.max_length)
    validation_examples = _encode_all(tokenizer, validation_conversations, config.max_length)

    adapted = inject_lora(
        model,
        config.lora.targets,
        rank=config.lora.rank,
        alpha=config.lora.alpha,
        dropout=config.lora.dropout,
    )
    mark_only_lora_trainable(model)
    logger.info("adapting %d modules: %s", len(adapted), ", ".join(adapted))

    if config.gradient_checkpointing and hasattr(model, "gradient_checkpointing_enable"):
        model.config.use_cache = False
        model.gradient_checkpointing_enable(
            gradient_checkpointing_kwargs={"use_reentrant": False}
        )

    micro_per_epoch = math.ceil(len(train_examples) / config.per_device_batch)
    steps_per_epoch = math.ceil(micro_per_epoch / config.gradient_accumulation)
    total_steps = steps_per_epoch * config.epochs

    from transformers import get_scheduler

    trainable = [parameter for parameter in model.parameters() if parameter.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate)
    scheduler = get_scheduler(
        config.scheduler,
        optimizer=optimizer,
        num_warmup_steps=round(config.warmup_ratio * total_steps),
        num_training_steps=total_steps,
    )

    model.train()
    step_records: list[dict] = []
    epoch_records: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(train_examples)))
        random.Random(config.seed * 1000 + epoch).shuffle(order)
        shuffled = [train_examples[i] for i in order]

        pending: list[float] = []
        micro_seen = 0
        epoch_losses: list[float] = []
        for batch in batches(shuffled, config.per_device_batch, tokenizer.pad_id):
            loss = _forward_loss(model, batch)
            (loss / config.gradient_accumulation).backward()
            pending.append(float(loss.item()))
            micro_seen += 1
            boundary = (
                micro_seen % config.gradient_accumulation == 0
                or micro_seen == micro_per_epoch
            )
            if boundary:
                optimizer.step()
                scheduler.step()
                optimizer.zero_grad()
                step += 1
                step_loss = sum(pending) / len(pending)
                epoch_losses.append(step_loss)
                step_records.append(
                    {
                        "step": step,
                        "epoch": epoch + 1,
                        "loss": step_loss,
                        "lr": scheduler.get_last_lr()[0],
                    }
                )
                pending = []

        epoch_records.append(
            {
                "epoch": epoch + 1,
                "train_loss": sum(epoch_losses) / len(epoch_losses),
                "validation_loss": _validation_loss(
                    model, validation_examples, config, tokenizer.pad_id
                ),
            }
        )
        logger.info("epoch %d: %s", epoch + 1, epoch_records[-1])

    out_dir = Path(config.output_dir)
    adapter_dir = out_dir / "adapter"
    metadata = {
        "base_model_id": config.base_model_id,
        "rank": config.lora.rank,
        "alpha": config.lora.alpha,
        "dropout": config.lora.dropout,
        "targets": list(config.lora.targets),
        "adapted_modules": adapted,
    }
    save_adapter(model, adapter_dir, metadata)
    if isinstance(tokenizer, CharTokenizer):
        tokenizer.save(adapter_dir / "tokenizer.json")

    log_path = out_dir / "training_log.json"
    log_payload = {
        "config": {**asdict(config), "output_dir": str(config.output_dir)},
        "adapted_modules": adapted,
        "steps": step_records,
        "epochs": epoch_records,
    }
    log_path.write_text(
        json.dumps(log_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    return TrainingResult(
        adapter_dir=adapter_dir,
        log_path=log_path,
        step_losses=[record["loss"] for record in step_records],
        epoch_logs=epoch_records,
        adapted_modules=adapted,
    )
