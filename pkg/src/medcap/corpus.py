"""Deterministic 70:20:10 partitioning and instruction-corpus emission.

Split allocation uses two levels of rounding. Dataset-level totals come
from largest-remainder rounding of the dataset size against the ratios
(ties broken in split order: train, validation, test). Those totals are
then apportioned across the dataset's (class) strata by controlled
rounding: every stratum cell is the floor or ceiling of its ideal share,
rows sum to stratum sizes, and columns sum to the dataset totals. Plain
per-stratum largest remainder cannot reproduce the reference totals
(it over-allocates the test split when many strata share the same
fractional part), which is why the dataset level anchors the counts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .datamodel import (
    DatasetId,
    DistillationSample,
    caption_to_dict,
    caption_to_json,
)
from .errors import EmptyInput, InputError

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class SplitManifest:
    seed: int
    ratios: tuple[float, float, float]
    assignment: Mapping[str, str]  # image_id -> split name
    counts: Mapping[str, Mapping[str, Mapping[str, int]]]  # split -> dataset -> class -> n

    def split_totals(self) -> dict[str, int]:
        return {
            split: sum(sum(classes.values()) for classes in datasets.values())
            for split, datasets in self.counts.items()
        }

    def ids_for(self, split: str) -> set[str]:
        return {image_id for image_id, name in self.assignment.items() if name == split}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "assignment": {k: self.assignment[k] for k in sorted(self.assignment)},
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "SplitManifest":
        return cls(
            seed=payload["seed"],
            ratios=tuple(payload["ratios"]),
            assignment=dict(payload["assignment"]),
            counts=payload["counts"],
        )


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Round n * ratios to integers summing to n, largest remainder first."""
    ideal = [n * r for r in ratios]
    parts = [math.floor(x) for x in ideal]
    order = sorted(range(len(ratios)), key=lambda i: (-(ideal[i] - parts[i]), i))
    for i in order[: n - sum(parts)]:
        parts[i] += 1
    return parts


def _controlled_round(stratum_sizes: Sequence[int], ratios: Sequence[float]) -> list[list[int]]:
    """Allocate each stratum across splits so the dataset totals match the
    dataset-level largest-remainder targets and every cell stays within one
    sample of its ideal share."""
    n = sum(stratum_sizes)
    targets = largest_remainder(n, ratios)
    ideal = [[size * r for r in ratios] for size in stratum_sizes]
    cells = [[math.floor(x) for x in row] for row in ideal]
    frac = [[ideal[i][j] - cells[i][j] for j in range(len(ratios))] for i in range(len(stratum_sizes))]
    row_deficit = [stratum_sizes[i] - sum(cells[i]) for i in range(len(stratum_sizes))]
    col_deficit = [targets[j] - sum(row[j] for row in cells) for j in range(len(ratios))]

    fractional_cells = sorted(
        ((i, j) for i in range(len(stratum_sizes)) for j in range(len(ratios)) if frac[i][j] > 0),
        key=lambda cell: (-frac[cell[0]][cell[1]], cell[0], cell[1]),
    )
    chosen: set[tuple[int, int]] = set()
    for i, j in fractional_cells:
        if row_deficit[i] > 0 and col_deficit[j] > 0:
            cells[i][j] += 1
            chosen.add((i, j))
            row_deficit[i] -= 1
            col_deficit[j] -= 1

    # Swap repair: move a +1 between columns within a row to serve a column
    # the greedy pass left short. Feasibility is guaranteed for two-way
    # tables with consistent marginals.
    for j in range(len(ratios)):
        while col_deficit[j] > 0:
            if not _augment(j, frac, cells, chosen, row_deficit, col_deficit, len(stratum_sizes), len(ratios)):
                raise InputError("split allocation infeasible for the given strata and ratios")
    return cells


def _augment(j, frac, cells, chosen, row_deficit, col_deficit, n_rows, n_cols) -> bool:
    for i in range(n_rows):
        if (i, j) in chosen or frac[i][j] <= 0:
            continue
        if row_deficit[i] > 0:
            cells[i][j] += 1
            chosen.add((i, j))
            row_deficit[i] -= 1
            col_deficit[j] -= 1
            return True
        for j2 in range(n_cols):
            if j2 == j or (i, j2) not in chosen:
                continue
            for i2 in range(n_rows):
                if i2 != i and (i2, j2) not in chosen and frac[i2][j2] > 0 and row_deficit[i2] > 0:
                    cells[i][j2] -= 1
                    chosen.discard((i, j2))
                    cells[i][j] += 1
                    chosen.add((i, j))
                    cells[i2][j2] += 1
                    chosen.add((i2, j2))
                    row_deficit[i2] -= 1
                    col_deficit[j] -= 1
                    return True
    return False


def _stratum_rng(seed: int, dataset: str, label: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{dataset}:{label}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def split(
    corpus: Sequence[DistillationSample],
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Stratified train/validation/test assignment over retained samples.

    Strata are (dataset, class); records within a stratum are shuffled by a
    generator keyed on (seed, dataset, class) before assignment, so the
    result depends only on the corpus contents, seed, and ratios.
    """
    if not corpus:
        raise EmptyInput("cannot split an empty corpus")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise InputError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"ratios must sum to 1.0, got {sum(ratios)}")

    strata: dict[tuple[str, str], list[DistillationSample]] = {}
    for sample in corpus:
        key = (sample.record.dataset.value, sample.record.ground_truth.canonical)
        strata.setdefault(key, []).append(sample)

    datasets = sorted({key[0] for key in strata})
    assignment: dict[str, str] = {}
    counts: dict[str, dict[str, dict[str, int]]] = {name: {} for name in SPLIT_NAMES}

    for dataset in datasets:
        keys = sorted(key for key in strata if key[0] == dataset)
        sizes = [len(strata[key]) for key in keys]
        if min(sizes) < 3 and all(r > 0 for r in ratios):
            logger.warning(
                "dataset %s has a stratum smaller than 3; some splits will receive 0 samples from it", dataset
            )
        allocation = _controlled_round(sizes, ratios)
        for (dataset_id, label), cells in zip(keys, allocation):
            members = sorted(strata[(dataset_id, label)], key=lambda s: s.record.image_id)
            _stratum_rng(seed, dataset_id, label).shuffle(members)
            cursor = 0
            for split_name, take in zip(SPLIT_NAMES, cells):
                for sample in members[cursor : cursor + take]:
                    assignment[sample.record.image_id] = split_name
                counts[split_name].setdefault(dataset_id, {})[label] = take
                cursor += take

    return SplitManifest(seed=seed, ratios=tuple(ratios), assignment=assignment, counts=counts)


# ---------------------------------------------------------------------------
# Instruction corpus emission
# ---------------------------------------------------------------------------


def conversation_for(sample: DistillationSample, system_prompt: str, user_prompt: str) -> dict:
    if sample.teacher_output is None:
        raise InputError(f"sample {sample.record.image_id} has no teacher caption")
    return {
        "image_id": sample.record.image_id,
        "messages": [
            {"role": "system", "content": system_prompt},
            {"role": "user", "content": user_prompt, "image_path": str(sample.record.image_path)},
            {"role": "assistant", "content": caption_to_json(sample.teacher_output)},
        ],
    }


def _prompt_for(prompt: str | Mapping[str, str], dataset: str) -> str:
    if isinstance(prompt, str):
        return prompt
    try:
        return prompt[dataset]
    except KeyError:
        raise InputError(f"no prompt configured for dataset {dataset!r}")


def emit_instruction_corpus(
    manifest: SplitManifest,
    corpus: Sequence[DistillationSample],
    system_prompt: str | Mapping[str, str],
    user_prompt: str | Mapping[str, str],
    out_dir: Path,
) -> dict[str, Path]:
    """Write train/validation conversation files (one JSON object per line,
    ordered by image_id). Test-split samples are never emitted.

    Prompts may be plain strings or mappings keyed by dataset id, for runs
    where placeholders were rendered per dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {sample.record.image_id: sample for sample in corpus}
    missing = [image_id for image_id in manifest.assignment if image_id not in by_id]
    if missing:
        raise InputError(f"split references {len(missing)} image_ids missing from the corpus: {missing[:3]}...")

    paths = {}
    for split_name, filename in (("train", "corpus_train.ndjson"), ("validation", "corpus_validation.ndjson")):
        path = out_dir / filename
        ids = sorted(manifest.ids_for(split_name))
        with open(path, "w", encoding="utf-8") as handle:
            for image_id in ids:
                sample = by_id[image_id]
                dataset = sample.record.dataset.value
                conversation = conversation_for(
                    sample, _prompt_for(system_prompt, dataset), _prompt_for(user_prompt, dataset)
                )
                handle.write(json.dumps(conversation, ensure_ascii=False) + "\n")
        paths[split_name] = path
    return paths


def corpus_to_ndjson(corpus: Iterable[DistillationSample], path: Path) -> None:
    """Retained-corpus wire format: one ImageRecord + caption per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for sample in sorted(corpus, key=lambda s: s.record.image_id):
            row = {
                "image_id": sample.record.image_id,
                "image_path": str(sample.record.image_path),
                "dataset": sample.record.dataset.value,
                "ground_truth": sample.record.ground_truth.canonical,
                "caption": caption_to_dict(sample.teacher_output),
            }
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")


def corpus_from_ndjson(path: Path) -> list[DistillationSample]:
    from .datamodel import ImageRecord, caption_from_dict, canonicalize_label, make_sample

    samples = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            row = json.loads(line)
            record = ImageRecord(
                image_id=row["image_id"],
                image_path=Path(row["image_path"]),
                dataset=DatasetId(row["dataset"]),
                ground_truth=canonicalize_label(row["ground_truth"]),
            )
            caption = caption_from_dict(row["caption"])
            samples.append(make_sample(record, caption, raw_response=caption_to_json(caption)))
    return samples
