"""CSV-to-manifest adapters for the source image collections.

Each supported collection ships a CSV listing image ids and labels; the
adapter turns usable rows into ImageRecords and counts what it had to drop.
Dropping is deliberate policy, not error handling: multi-label rows have no
single ground truth to match a prediction against, and rows whose image file
is absent cannot be captioned. Validation of the resulting manifest (class
coverage, duplicates, vocabulary) is a separate report-producing step so
callers decide what is fatal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .datamodel import DatasetFamily, ImageRecord
from .errors import ConfigError, IoError, MalformedLabel


@dataclass(frozen=True)
class CsvAdapterConfig:
    csv_path: Path
    image_dir: Path
    id_column: str
    label_column: str
    image_extension: str = ""  # appended to the id cell; empty if ids are filenames
    label_delimiter: Optional[str] = None  # None disables multi-label detection

    def __post_init__(self) -> None:
        if not self.id_column or not self.label_column:
            raise ConfigError("id_column and label_column are required")
        if self.id_column == self.label_column:
            raise ConfigError("id_column and label_column must differ")
        if self.image_extension and not self.image_extension.startswith("."):
            raise ConfigError(f"image_extension must start with '.': {self.image_extension!r}")
        if self.label_delimiter == "":
            raise ConfigError("label_delimiter must be None or a non-empty string")


@dataclass
class IngestStats:
    rows_total: int = 0
    ingested: int = 0
    multi_label_dropped: int = 0
    missing_image_dropped: int = 0
    blank_dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "rows_total": self.rows_total,
            "ingested": self.ingested,
            "multi_label_dropped": self.multi_label_dropped,
            "missing_image_dropped": self.missing_image_dropped,
            "blank_dropped": self.blank_dropped,
        }


def ingest_csv(
    config: CsvAdapterConfig, family: DatasetFamily
) -> tuple[list[ImageRecord], IngestStats]:
    """Read one collection CSV into ImageRecords, preserving row order.

    Labels are synonym-resolved but NOT checked against the vocabulary here;
    run validate_manifest on the result for that.
    """
    csv_path = Path(config.csv_path)
    image_dir = Path(config.image_dir)
    if not image_dir.is_dir():
        raise ConfigError(f"image_dir does not exist: {image_dir}")
    try:
        handle = open(csv_path, "r", encoding="utf-8-sig", newline="")
    except OSError as exc:
        raise IoError(f"cannot read {csv_path}: {exc}") from exc

    records: list[ImageRecord] = []
    stats = IngestStats()
    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        for column in (config.id_column, config.label_column):
            if column not in header:
                raise ConfigError(f"{csv_path}: column {column!r} not in header {header}")
        for row in reader:
            stats.rows_total += 1
            image_id = (row.get(config.id_column) or "").strip()
            label_cell = (row.get(config.label_column) or "").strip()
            if not image_id or not label_cell:
                stats.blank_dropped += 1
                continue
            if config.label_delimiter is not None:
                parts = [p for p in label_cell.split(config.label_delimiter) if p.strip()]
                if len(parts) > 1:
                    stats.multi_label_dropped += 1
                    continue
                label_cell = parts[0]
            try:
                label = family.canonicalize(label_cell)
            except MalformedLabel:
                stats.blank_dropped += 1
                continue
            image_path = image_dir / (image_id + config.image_extension)
            if not image_path.is_file():
                stats.missing_image_dropped += 1
                continue
            records.append(
                ImageRecord(
                    image_id=image_id,
                    image_path=image_path,
                    dataset=family.id,
                    ground_truth=label,
                )
            )
            stats.ingested += 1
    return records, stats


@dataclass
class ManifestValidation:
    dataset: str
    total: int
    per_class: dict[str, int]
    duplicate_ids: list[str] = field(default_factory=list)
    out_of_vocabulary: dict[str, int] = field(default_factory=dict)
    empty_classes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.duplicate_ids and not self.out_of_vocabulary and self.total > 0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "total": self.total,
            "per_class": dict(sorted(self.per_class.items())),
            "duplicate_ids": sorted(self.duplicate_ids),
            "out_of_vocabulary": dict(sorted(self.out_of_vocabulary.items())),
            "empty_classes": sorted(self.empty_classes),
            "ok": self.ok,
        }


def validate_manifest(records: list[ImageRecord], family: DatasetFamily) -> ManifestValidation:
    per_class: dict[str, int] = {c: 0 for c in family.class_vocabulary}
    seen: set[str] = set()
    duplicates: set[str] = set()
    oov: dict[str, int] = {}
    for record in records:
        if record.dataset is not family.id:
            oov[f"<dataset:{record.dataset.value}>"] = (
                oov.get(f"<dataset:{record.dataset.value}>", 0) + 1
            )
            continue
        if record.image_id in seen:
            duplicates.add(record.image_id)
        seen.add(record.image_id)
        label = record.ground_truth.canonical
        if label in per_class:
            per_class[label] += 1
        else:
            oov[label] = oov.get(label, 0) + 1
    return ManifestValidation(
        dataset=family.id.value,
        total=len(records),
        per_class=per_class,
        duplicate_ids=sorted(duplicates),
        out_of_vocabulary=oov,
        empty_classes=sorted(c for c, n in per_class.items() if n == 0),
    )
