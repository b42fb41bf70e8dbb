"""Comparative evaluation reports: per-dataset classification and caption
quality tables for the evaluated models, with deltas when exactly two models
are compared (second listed minus first listed).

Values are kept at full precision in the JSON and CSV renderings; the text
table renders every metric at four decimals.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Sequence

from .clsmetrics import ClassificationReport
from .errors import ConfigError, EmptyInput

CLS_METRIC_KEYS = ("accuracy", "balanced_accuracy", "precision", "recall", "f1")
RAG_METRIC_KEYS = ("faithfulness", "answer_relevancy", "answer_correctness")


@dataclass(frozen=True)
class ClsRow:
    model: str
    n: int
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n": self.n,
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True)
class RagRow:
    model: str
    n_scored: int
    faithfulness: Optional[float]
    answer_relevancy: Optional[float]
    answer_correctness: Optional[float]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_scored": self.n_scored,
            "faithfulness": self.faithfulness,
            "answer_relevancy": self.answer_relevancy,
            "answer_correctness": self.answer_correctness,
        }


@dataclass
class DatasetBlock:
    dataset: str
    n_test: int
    cls_rows: list[ClsRow] = field(default_factory=list)
    rag_rows: list[RagRow] = field(default_factory=list)
    cls_delta: Optional[dict[str, float]] = None
    rag_delta: Optional[dict[str, float]] = None

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "n_test": self.n_test,
            "classification": [row.to_dict() for row in self.cls_rows],
            "caption_quality": [row.to_dict() for row in self.rag_rows],
            "classification_delta": self.cls_delta,
            "caption_quality_delta": self.rag_delta,
        }


@dataclass
class ComparisonReport:
    datasets: list[DatasetBlock]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "datasets": [block.to_dict() for block in self.datasets],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ComparisonReport":
        blocks = []
        for entry in payload["datasets"]:
            blocks.append(
                DatasetBlock(
                    dataset=entry["dataset"],
                    n_test=entry["n_test"],
                    cls_rows=[ClsRow(**row) for row in entry["classification"]],
                    rag_rows=[RagRow(**row) for row in entry["caption_quality"]],
                    cls_delta=entry.get("classification_delta"),
                    rag_delta=entry.get("caption_quality_delta"),
                )
            )
        return cls(datasets=blocks, metadata=dict(payload["metadata"]))


def report_timestamp() -> str:
    """ISO timestamp for report metadata; SOURCE_DATE_EPOCH pins it for
    byte-reproducible artifacts."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = int(epoch) if epoch else int(time.time())
    return datetime.fromtimestamp(moment, tz=timezone.utc).isoformat()


def _cls_row(model: str, report: ClassificationReport) -> ClsRow:
    return ClsRow(
        model=model,
        n=report.n,
        accuracy=report.accuracy,
        balanced_accuracy=report.balanced_accuracy,
        precision=report.macro_precision,
        recall=report.macro_recall,
        f1=report.macro_f1,
    )


def _rag_row(model: str, summary_block: dict) -> RagRow:
    def mean_of(metric: str) -> Optional[float]:
        return summary_block[metric]["mean"]

    scored = min(
        (summary_block[m]["n_scored"] for m in RAG_METRIC_KEYS),
        default=0,
    )
    return RagRow(
        model=model,
        n_scored=scored,
        faithfulness=mean_of("faithfulness"),
        answer_relevancy=mean_of("answer_relevancy"),
        answer_correctness=mean_of("answer_correctness"),
    )


def build_report(
    models: Sequence[str],
    cls_reports: dict[str, dict[str, ClassificationReport]],
    rag_summaries: dict[str, dict[str, dict]],
    metadata: Optional[dict] = None,
) -> ComparisonReport:
    """Assemble the comparison from per-dataset, per-model results.

    cls_reports: dataset -> model -> ClassificationReport.
    rag_summaries: dataset -> model -> one summarize_scores() dataset block.
    Deltas are emitted only for exactly two models, as models[1] - models[0].
    """
    if not models:
        raise EmptyInput("no models to report on")
    if len(set(models)) != len(models):
        raise ConfigError(f"duplicate model names: {list(models)}")
    datasets = sorted(set(cls_reports) | set(rag_summaries))
    if not datasets:
        raise EmptyInput("no datasets to report on")
    blocks = []
    for dataset in datasets:
        cls_by_model = cls_reports.get(dataset, {})
        rag_by_model = rag_summaries.get(dataset, {})
        block = DatasetBlock(
            dataset=dataset,
            n_test=next((r.n for r in cls_by_model.values()), 0),
        )
        for model in models:
            if model in cls_by_model:
                block.cls_rows.append(_cls_row(model, cls_by_model[model]))
            if model in rag_by_model:
                block.rag_rows.append(_rag_row(model, rag_by_model[model]))
        if len(models) == 2 and len(block.cls_rows) == 2:
            first, second = block.cls_rows
            block.cls_delta = {
                key: getattr(second, key) - getattr(first, key) for key in CLS_METRIC_KEYS
            }
        if len(models) == 2 and len(block.rag_rows) == 2:
            first, second = block.rag_rows
            block.rag_delta = {
                key: (
                    getattr(second, key) - getattr(first, key)
                    if getattr(second, key) is not None and getattr(first, key) is not None
                    else None
                )
                for key in RAG_METRIC_KEYS
            }
        blocks.append(block)
    meta = dict(metadata or {})
    meta.setdefault("created_at", report_timestamp())
    meta.setdefault("models", list(models))
    return ComparisonReport(datasets=blocks, metadata=meta)


# -- rendering ---------------------------------------------------------------------


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _render_text(report: ComparisonReport) -> str:
    lines: list[str] = []
    lines.append("model comparison report")
    lines.append(f"generated: {report.metadata.get('created_at', 'unknown')}")
    for block in report.datasets:
        lines.append("")
        lines.append(f"=== {block.dataset} (n={block.n_test}) ===")
        if block.cls_rows:
            lines.append("classification")
            header = ["model", "accuracy", "balanced_accuracy", "precision", "recall", "f1"]
            rows = [
                [row.model] + [_fmt(getattr(row, key)) for key in CLS_METRIC_KEYS]
                for row in block.cls_rows
            ]
            if block.cls_delta is not None:
                rows.append(["delta"] + [_fmt(block.cls_delta[key]) for key in CLS_METRIC_KEYS])
            lines.extend(_format_table(header, rows))
        if block.rag_rows:
            lines.append("caption quality")
            header = ["model", "faithfulness", "answer_relevancy", "answer_correctness"]
            rows = [
                [row.model] + [_fmt(getattr(row, key)) for key in RAG_METRIC_KEYS]
                for row in block.rag_rows
            ]
            if block.rag_delta is not None:
                rows.append(["delta"] + [_fmt(block.rag_delta[key]) for key in RAG_METRIC_KEYS])
            lines.extend(_format_table(header, rows))
    lines.append("")
    return "\n".join(lines)


def _format_table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    out = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip()]
    for row in rows:
        out.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return out


def _render_csv(report: ComparisonReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["dataset", "section", "model", "metric", "value"])
    for block in report.datasets:
        for row in block.cls_rows:
            for key in CLS_METRIC_KEYS:
                writer.writerow([block.dataset, "classification", row.model, key, repr(getattr(row, key))])
        if block.cls_delta is not None:
            for key in CLS_METRIC_KEYS:
                writer.writerow([block.dataset, "classification", "delta", key, repr(block.cls_delta[key])])
        for row in block.rag_rows:
            for key in RAG_METRIC_KEYS:
                value = getattr(row, key)
                writer.writerow(
                    [block.dataset, "caption_quality", row.model, key, "" if value is None else repr(value)]
                )
        if block.rag_delta is not None:
            for key in RAG_METRIC_KEYS:
                value = block.rag_delta[key]
                writer.writerow(
                    [block.dataset, "caption_quality", "delta", key, "" if value is None else repr(value)]
                )
    return buffer.getvalue()


def render(report: ComparisonReport, format: str = "table-text") -> str:
    if not report.datasets:
        raise EmptyInput("report has no dataset blocks")
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n"
    if format == "csv":
        return _render_csv(report)
    if format == "table-text":
        return _render_text(report)
    raise ConfigError(f"unknown report format: {format!r}")
