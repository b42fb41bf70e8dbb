"""Command line front end: medcap-train."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from medcap_trainer.errors import TrainerError
from medcap_trainer.train import LoraSettings, TrainerConfig, train


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medcap-train",
        description="Fine-tune low-rank adapters on emitted instruction corpus files.",
    )
    parser.add_argument("--train", type=Path, required=True, metavar="NDJSON",
                        help="corpus_train.ndjson path")
    parser.add_argument("--validation", type=Path, default=None, metavar="NDJSON",
                        help="corpus_validation.ndjson path (optional)")
    parser.add_argument("--output-dir", type=Path, required=True)
    parser.add_argument("--base-model", default=TrainerConfig.base_model_id,
                        help="model id or path; default is the built-in tiny char LM")
    parser.add_argument("--epochs", type=int, default=TrainerConfig.epochs)
    parser.add_argument("--batch-size", type=int, default=TrainerConfig.per_device_batch)
    parser.add_argument("--grad-accum", type=int, default=TrainerConfig.gradient_accumulation)
    parser.add_argument("--learning-rate", type=float, default=TrainerConfig.learning_rate)
    parser.add_argument("--warmup-ratio", type=float, default=TrainerConfig.warmup_ratio)
    parser.add_argument("--max-length", type=int, default=TrainerConfig.max_length)
    parser.add_argument("--seed", type=int, default=TrainerConfig.seed)
    parser.add_argument("--lora-rank", type=int, default=LoraSettings.rank)
    parser.add_argument("--lora-alpha", type=float, default=LoraSettings.alpha)
    parser.add_argument("--lora-dropout", type=float, default=LoraSettings.dropout)
    parser.add_argument("--lora-targets", default=",".join(LoraSettings.targets),
                        help="comma-separated linear-layer names to adapt")
    parser.add_argument("--no-gradient-checkpointing", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s: %(message)s")
    args = _parser().parse_args(argv)
    targets = tuple(t.strip() for t in args.lora_targets.split(",") if t.strip())
    try:
        config = TrainerConfig(
            base_model_id=args.base_model,
            output_dir=args.output_dir,
            epochs=args.epochs,
            per_device_batch=args.batch_size,
            gradient_accumulation=args.grad_accum,
            learning_rate=args.learning_rate,
            warmup_ratio=args.warmup_ratio,
            gradient_checkpointing=not args.no_gradient_checkpointing,
            max_length=args.max_length,
            seed=args.seed,
            lora=LoraSettings(
                rank=args.lora_rank,
                alpha=args.lora_alpha,
                dropout=args.lora_dropout,
                targets=targets,
            ),
        )
        result = train(args.train, args.validation, config)
    except TrainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(2)
    final = result.epoch_logs[-1]
    print(f"adapter: {result.adapter_dir}")
    print(f"log: {result.log_path}")
    print(f"final epoch: {final}")


if __name__ == "__main__":
    main()
