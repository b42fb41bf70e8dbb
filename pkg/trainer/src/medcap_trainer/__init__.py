"""Fine-tunes a causal LM on medcap instruction corpus files.

The only input contract is the pair of conversation files the pipeline
emits (corpus_train.ndjson / corpus_validation.ndjson); this package never
imports medcap itself.
"""

from medcap_trainer.corpus import Conversation, CorpusError, load_conversations
from medcap_trainer.train import (
    LoraSettings,
    TrainerConfig,
    TrainerError,
    TrainingResult,
    train,
)

__all__ = [
    "Conversation",
    "CorpusError",
    "LoraSettings",
    "TrainerConfig",
    "TrainerError",
    "TrainingResult",
    "load_conversations",
    "train",
]
