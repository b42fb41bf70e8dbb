"""Shared domain types: canonical labels, image records, structured captions.

Everything here is an immutable value type; the operations are pure
functions, so instances can be shared freely between threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .errors import IoError, MalformedLabel, ParseFailure, SchemaViolation

SECTION_KEYS = ("image_type", "anatomical_region", "key_findings", "clinical_significance")

SECTION_HEADERS = {
    "image_type": "IMAGE TYPE",
    "anatomical_region": "ANATOMICAL REGION",
    "key_findings": "KEY FINDINGS",
    "clinical_significance": "CLINICAL SIGNIFICANCE",
}

_WHITESPACE = re.compile(r"\s+")


class DatasetId(str, Enum):
    FUNDUS = "fundus"
    DERMATOLOGY = "dermatology"
    CHEST_XRAY = "chest_xray"


class Verdict(str, Enum):
    RETAINED = "retained"
    REJECTED_MISMATCH = "rejected_mismatch"
    REJECTED_MALFORMED = "rejected_malformed"


@dataclass(frozen=True)
class NormalizationConfig:
    """Settings for label canonicalization.

    ``synonym_map`` entries are themselves normalized (lowercased, trimmed,
    whitespace collapsed) and chains such as a->b, b->c are resolved to
    a->c at construction so a single lookup is idempotent. Cycles are a
    configuration error.
    """

    synonym_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        normalized = {_normalize(k): _normalize(v) for k, v in self.synonym_map.items()}
        resolved = {}
        for key in normalized:
            seen = [key]
            current = key
            while current in normalized and normalized[current] != current:
                current = normalized[current]
                if current in seen:
                    raise MalformedLabel(f"synonym cycle: {' -> '.join(seen + [current])}")
                seen.append(current)
            resolved[key] = current
        object.__setattr__(self, "_resolved", resolved)

    def resolve(self, normalized: str) -> str:
        return self._resolved.get(normalized, normalized)


DEFAULT_NORMALIZATION = NormalizationConfig()


def _normalize(raw: str) -> str:
    return _WHITESPACE.sub(" ", raw.strip().lower())


@dataclass(frozen=True)
class CanonicalLabel:
    raw: str
    canonical: str

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.canonical


def canonicalize_label(raw: str, config: NormalizationConfig = DEFAULT_NORMALIZATION) -> CanonicalLabel:
    """Lowercase, trim, collapse whitespace, then apply the synonym map.

    Idempotent: canonicalizing an already-canonical string is a no-op.
    Raises MalformedLabel for empty or whitespace-only input.
    """
    if not raw or not raw.strip():
        raise MalformedLabel(f"empty label: {raw!r}")
    return CanonicalLabel(raw=raw, canonical=config.resolve(_normalize(raw)))


@dataclass(frozen=True)
class DatasetFamily:
    """One source dataset: its id, display name, and class vocabulary.

    ``class_vocabulary`` holds canonical label strings in configuration
    order; ``normalization`` is the dataset's synonym map.
    """

    id: DatasetId
    display_name: str
    class_vocabulary: tuple[str, ...]
    normalization: NormalizationConfig = DEFAULT_NORMALIZATION

    def __post_init__(self) -> None:
        if not self.class_vocabulary:
            raise MalformedLabel(f"{self.id.value}: empty class vocabulary")
        canon = tuple(canonicalize_label(c, self.normalization).canonical for c in self.class_vocabulary)
        if len(set(canon)) != len(canon):
            raise MalformedLabel(f"{self.id.value}: duplicate classes after canonicalization: {canon}")
        object.__setattr__(self, "class_vocabulary", canon)
        n = len(canon)
        if self.id is DatasetId.FUNDUS and n != 5:
            raise MalformedLabel(f"fundus vocabulary must have 5 classes, got {n}")
        if self.id is DatasetId.DERMATOLOGY and n != 7:
            raise MalformedLabel(f"dermatology vocabulary must have 7 classes, got {n}")
        if self.id is DatasetId.CHEST_XRAY and n > 15:
            raise MalformedLabel(f"chest_xray vocabulary capped at 15 classes, got {n}")

    def canonicalize(self, raw: str) -> CanonicalLabel:
        return canonicalize_label(raw, self.normalization)

    def contains(self, label: CanonicalLabel) -> bool:
        return label.canonical in self.class_vocabulary


FUNDUS_DEFAULT_CLASSES = ("grade 0", "grade 1", "grade 2", "grade 3", "grade 4")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    image_path: Path
    dataset: DatasetId
    ground_truth: CanonicalLabel


@dataclass(frozen=True)
class DescriptionSections:
    """The four mandatory caption sections, each non-empty after trimming."""

    image_type: str
    anatomical_region: str
    key_findings: str
    clinical_significance: str

    def __post_init__(self) -> None:
        for key in SECTION_KEYS:
            value = getattr(self, key)
            if not isinstance(value, str) or not value.strip():
                raise SchemaViolation(key, raw=json.dumps(self.__dict__, default=str))


@dataclass(frozen=True)
class StructuredCaption:
    prediction: CanonicalLabel
    description: DescriptionSections


@dataclass(frozen=True)
class DistillationSample:
    """One teacher generation joined with its source record and verdict."""

    record: ImageRecord
    teacher_output: Optional[StructuredCaption]
    raw_response: str
    verdict: Verdict
    attempt_index: int

    def __post_init__(self) -> None:
        if self.attempt_index < 0:
            raise ValueError("attempt_index must be non-negative")
        rederived = derive_verdict(self.record, self.teacher_output)
        if rederived is not self.verdict:
            raise ValueError(f"verdict {self.verdict.value} inconsistent with fields (expected {rederived.value})")


def derive_verdict(record: ImageRecord, teacher_output: Optional[StructuredCaption]) -> Verdict:
    """retained iff the prediction canonically equals the ground truth."""
    if teacher_output is None:
        return Verdict.REJECTED_MALFORMED
    if teacher_output.prediction.canonical == record.ground_truth.canonical:
        return Verdict.RETAINED
    return Verdict.REJECTED_MISMATCH


def make_sample(
    record: ImageRecord,
    teacher_output: Optional[StructuredCaption],
    raw_response: str,
    attempt_index: int = 0,
) -> DistillationSample:
    return DistillationSample(
        record=record,
        teacher_output=teacher_output,
        raw_response=raw_response,
        verdict=derive_verdict(record, teacher_output),
        attempt_index=attempt_index,
    )


# ---------------------------------------------------------------------------
# Structured caption parsing
# ---------------------------------------------------------------------------

_DECODER = json.JSONDecoder()


def _first_json_object(raw: str) -> Optional[dict]:
    """Return the first JSON object embedded in raw text, or None.

    Scans for '{' and attempts a decode from each position, which also
    skips markdown code fences and surrounding prose.
    """
    idx = raw.find("{")
    while idx != -1:
        try:
            value, _ = _DECODER.raw_decode(raw, idx)
        except json.JSONDecodeError:
            idx = raw.find("{", idx + 1)
            continue
        if isinstance(value, dict):
            return value
        idx = raw.find("{", idx + 1)
    return None


def _loose_key(mapping: dict, wanted: str) -> Optional[object]:
    """Case/underscore/space-insensitive key lookup."""
    target = wanted.replace("_", " ").strip().lower()
    for key, value in mapping.items():
        if isinstance(key, str) and key.replace("_", " ").strip().lower() == target:
            return value
    return None


def _sections_from_mapping(mapping: dict, raw: str) -> DescriptionSections:
    values = {}
    for key in SECTION_KEYS:
        value = _loose_key(mapping, key)
        if not isinstance(value, str) or not value.strip():
            raise SchemaViolation(key, raw)
        values[key] = value.strip()
    return DescriptionSections(**values)


def _sections_from_text(text: str, raw: str) -> DescriptionSections:
    """Split a single string on the four uppercase section headers."""
    positions = []
    for key in SECTION_KEYS:
        match = re.search(rf"{SECTION_HEADERS[key]}\s*:?", text, flags=re.IGNORECASE)
        if match is None:
            raise SchemaViolation(key, raw)
        positions.append((match.start(), match.end(), key))
    positions.sort()
    values = {}
    for i, (_, end, key) in enumerate(positions):
        stop = positions[i + 1][0] if i + 1 < len(positions) else len(text)
        section = text[end:stop].strip()
        if not section:
            raise SchemaViolation(key, raw)
        values[key] = section
    return DescriptionSections(**values)


def parse_structured_caption(
    raw: str, normalization: NormalizationConfig = DEFAULT_NORMALIZATION
) -> StructuredCaption:
    """Extract and validate the caption object from a model response.

    Tolerates surrounding prose and code fences. The description is
    accepted either as a nested object with the four section keys or as a
    single string containing the four uppercase section headers; both are
    normalized to DescriptionSections.
    """
    obj = _first_json_object(raw)
    if obj is None:
        raise ParseFailure("no JSON object found in response", raw)
    prediction = _loose_key(obj, "prediction")
    if not isinstance(prediction, str) or not prediction.strip():
        raise SchemaViolation("prediction", raw)
    description = _loose_key(obj, "description")
    if isinstance(description, dict):
        sections = _sections_from_mapping(description, raw)
    elif isinstance(description, str) and description.strip():
        sections = _sections_from_text(description, raw)
    else:
        raise SchemaViolation("description", raw)
    return StructuredCaption(prediction=canonicalize_label(prediction, normalization), description=sections)


def flatten_description(description: DescriptionSections) -> str:
    """Render the four sections as headed plain text, one per line."""
    return "\n".join(f"{SECTION_HEADERS[key]}: {getattr(description, key)}" for key in SECTION_KEYS)


def caption_to_dict(caption: StructuredCaption) -> dict:
    return {
        "prediction": caption.prediction.canonical,
        "description": {key: getattr(caption.description, key) for key in SECTION_KEYS},
    }


def caption_to_json(caption: StructuredCaption) -> str:
    """Canonical single-line serialization of the wire shape."""
    return json.dumps(caption_to_dict(caption), ensure_ascii=False)


def caption_from_dict(payload: dict, normalization: NormalizationConfig = DEFAULT_NORMALIZATION) -> StructuredCaption:
    return StructuredCaption(
        prediction=canonicalize_label(payload["prediction"], normalization),
        description=DescriptionSections(**{key: payload["description"][key] for key in SECTION_KEYS}),
    )


# ---------------------------------------------------------------------------
# Canonical manifest format (newline-delimited JSON)
# ---------------------------------------------------------------------------


def record_to_dict(record: ImageRecord) -> dict:
    return {
        "image_id": record.image_id,
        "image_path": str(record.image_path),
        "dataset": record.dataset.value,
        "ground_truth": record.ground_truth.canonical,
    }


def record_from_dict(payload: dict, families: Mapping[DatasetId, DatasetFamily]) -> ImageRecord:
    dataset = DatasetId(payload["dataset"])
    family = families.get(dataset)
    normalization = family.normalization if family else DEFAULT_NORMALIZATION
    return ImageRecord(
        image_id=payload["image_id"],
        image_path=Path(payload["image_path"]),
        dataset=dataset,
        ground_truth=canonicalize_label(payload["ground_truth"], normalization),
    )


def write_manifest(records: Iterable[ImageRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_dict(record), ensure_ascii=False) + "\n")


def read_manifest(path: Path, families: Mapping[DatasetId, DatasetFamily]) -> list[ImageRecord]:
    if not Path(path).is_file():
        raise IoError(f"manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(record_from_dict(json.loads(line), families))
    return records
