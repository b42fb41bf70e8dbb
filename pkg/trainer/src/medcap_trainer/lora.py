"""Minimal low-rank adapters over nn.Linear layers.

The update path is the usual out = W x + (alpha / r) * B A x with A drawn
small and B zeroed, so an injected model is numerically identical to its
base until the first optimizer step. Only A and B ever require gradients;
base tensors stay frozen and bit-identical through training.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from medcap_trainer.errors import TrainerError

ADAPTER_WEIGHTS = "adapter_weights.pt"
ADAPTER_CONFIG = "adapter_config.json"


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        if rank < 1:
            raise TrainerError(f"lora rank must be positive, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = self.dropout(x) @ self.lora_A.transpose(0, 1) @ self.lora_B.transpose(0, 1)
        return self.base(x) + update * self.scaling


def inject_lora(
    model: nn.Module,
    target_suffixes: Sequence[str],
    rank: int,
    alpha: float,
    dropout: float,
) -> list[str]:
    """Replace every nn.Linear whose attribute name matches one of the
    target suffixes. Returns the adapted module names; refuses to proceed
    when nothing matches, since that would silently train nothing."""
    adapted: list[str] = []
    for name, module in list(model.named_modules()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf not in target_suffixes:
            continue
        if not isinstance(module, nn.Linear):
            raise TrainerError(
                f"target module {name} is {type(module).__name__}, not nn.Linear"
            )
        parent = model.get_submodule(name.rsplit(".", 1)[0]) if "." in name else model
        setattr(parent, leaf, LoRALinear(module, rank=rank, alpha=alpha, dropout=dropout))
        adapted.append(name)
    if not adapted:
        raise TrainerError(f"no modules matched lora targets {list(target_suffixes)}")
    return adapted


def mark_only_lora_trainable(model: nn.Module) -> None:
    for name, parameter in model.named_parameters():
        parameter.requires_grad_("lora_A" in name or "lora_B" in name)


def lora_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: tensor.detach().clone()
        for name, tensor in model.state_dict().items()
        if "lora_A" in name or "lora_B" in name
    }


def save_adapter(
    model: nn.Module, out_dir: Path, metadata: dict
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / ADAPTER_WEIGHTS
    config_path = out_dir / ADAPTER_CONFIG
    torch.save(lora_state_dict(model), weights_path)
    config_path.write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return weights_path, config_path


def load_adapter(model: nn.Module, adapter_dir: Path) -> None:
    """Load exported adapter tensors into an already-injected model."""
    weights_path = Path(adapter_dir) / ADAPTER_WEIGHTS
    try:
        tensors = torch.load(weights_path, weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise TrainerError(f"cannot load adapter weights {weights_path}: {exc}") from exc
    result = model.load_state_dict(tensors, strict=False)
    if result.unexpected_keys:
        raise TrainerError(
            f"adapter does not fit model: unexpected keys {list(result.unexpected_keys)}"
        )
