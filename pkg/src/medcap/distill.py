"""Teacher distillation: per-class quota loop with checkpoint/resume, and
plain checkpointed inference for candidate models.

Scheduling keeps at most one request in flight per class while running
classes in parallel. That makes each class's attempted set a contiguous
prefix of its (seeded, deterministic) pool order, which is what makes a
killed run resumable without re-sending or skipping work: the checkpoint
tail is always a clean prefix boundary.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .datamodel import (
    SECTION_KEYS,
    DatasetFamily,
    DatasetId,
    DistillationSample,
    ImageRecord,
    StructuredCaption,
    Verdict,
    caption_to_dict,
    caption_from_dict,
    make_sample,
    parse_structured_caption,
)
from .errors import (
    ConfigError,
    EndpointExhausted,
    ImageDecodeError,
    InputError,
    IoError,
    ParseFailure,
)
from .modelio import ChatRequest, EncodePolicy, ModelClient, encode_image

OUTCOME_TRANSPORT = "transport_failure"
GUARDRAIL_PHRASE = "interpretive tool"

DEFAULT_SYSTEM_PROMPT = """\
You are a specialist clinician with extensive experience interpreting medical
images. You act as an interpretive tool only: your reading feeds a research
pipeline and is not medical advice for any patient.

Examine the supplied image and answer with a single JSON object, nothing else,
in exactly this shape:
{
  "prediction": "<one class name, chosen from: {class_list}>",
  "description": {
    "image_type": "<modality and overall image quality>",
    "anatomical_region": "<what part of the body is shown>",
    "key_findings": "<the visual findings that support the prediction>",
    "clinical_significance": "<what the findings imply clinically>"
  }
}
All four description fields are mandatory and must be non-empty prose.
"""

DEFAULT_USER_PROMPT = (
    "Classify this image into exactly one of the following classes: "
    "{class_list}. Then describe it as instructed."
)


@dataclass(frozen=True)
class PromptTemplate:
    """System/user prompt pair for caption generation.

    The system prompt must name all four description sections and carry the
    interpretive-tool guardrail; templates that lost either in editing are
    rejected up front rather than producing unparseable corpora later.
    ``{class_list}`` and ``{dataset_name}`` placeholders are substituted at
    render time.
    """

    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    user_prompt: str = DEFAULT_USER_PROMPT

    def __post_init__(self) -> None:
        for key in SECTION_KEYS:
            if key not in self.system_prompt:
                raise ConfigError(f"system prompt does not name section {key!r}")
        if GUARDRAIL_PHRASE not in self.system_prompt.lower():
            raise ConfigError(
                f"system prompt is missing the {GUARDRAIL_PHRASE!r} guardrail clause"
            )
        if not self.user_prompt.strip():
            raise ConfigError("user prompt must be non-empty")

    def render(self, family: DatasetFamily) -> "RenderedPrompts":
        class_list = ", ".join(family.class_vocabulary)
        substitutions = {"{class_list}": class_list, "{dataset_name}": family.display_name}
        system = self.system_prompt
        user = self.user_prompt
        for placeholder, value in substitutions.items():
            system = system.replace(placeholder, value)
            user = user.replace(placeholder, value)
        return RenderedPrompts(system_prompt=system, user_prompt=user)


@dataclass(frozen=True)
class RenderedPrompts:
    system_prompt: str
    user_prompt: str


@dataclass(frozen=True)
class QuotaPlan:
    """Per-class retention targets and attempt budgets for one dataset."""

    per_class_quota: Mapping[str, int]
    attempt_budget_per_class: Mapping[str, int]

    def __post_init__(self) -> None:
        if not self.per_class_quota:
            raise ConfigError("quota plan has no classes")
        for cls, quota in self.per_class_quota.items():
            if quota < 1:
                raise ConfigError(f"quota for {cls!r} must be >= 1")
            budget = self.attempt_budget_per_class.get(cls)
            if budget is None:
                raise ConfigError(f"no attempt budget for class {cls!r}")
            if budget < quota:
                raise ConfigError(f"attempt budget for {cls!r} is below its quota")

    @classmethod
    def from_total(
        cls, total: int, classes: Sequence[str], budget_factor: int = 10
    ) -> "QuotaPlan":
        """Spread a dataset total over classes: base = total // n, and the
        first total % n classes (vocabulary order) take one extra."""
        if total < len(classes):
            raise ConfigError(f"total {total} below class count {len(classes)}")
        if budget_factor < 1:
            raise ConfigError("budget_factor must be >= 1")
        base, extra = divmod(total, len(classes))
        quotas = {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}
        budgets = {c: q * budget_factor for c, q in quotas.items()}
        return cls(per_class_quota=quotas, attempt_budget_per_class=budgets)


@dataclass
class ClassYield:
    attempted: int = 0
    retained: int = 0
    rejected_mismatch: int = 0
    rejected_malformed: int = 0
    transport_failures: int = 0

    def check(self) -> None:
        total = (
            self.retained
            + self.rejected_mismatch
            + self.rejected_malformed
            + self.transport_failures
        )
        if total != self.attempted:
            raise ValueError(f"yield counters do not sum to attempted: {self}")

    def to_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "retained": self.retained,
            "rejected_mismatch": self.rejected_mismatch,
            "rejected_malformed": self.rejected_malformed,
            "transport_failures": self.transport_failures,
        }


@dataclass
class YieldStats:
    dataset: str
    per_class: dict[str, ClassYield] = field(default_factory=dict)
    excluded_classes: dict[str, str] = field(default_factory=dict)

    def check(self) -> None:
        for stats in self.per_class.values():
            stats.check()

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "per_class": {c: s.to_dict() for c, s in sorted(self.per_class.items())},
            "excluded_classes": dict(sorted(self.excluded_classes.items())),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "YieldStats":
        return cls(
            dataset=payload["dataset"],
            per_class={c: ClassYield(**v) for c, v in payload["per_class"].items()},
            excluded_classes=dict(payload.get("excluded_classes", {})),
        )


# -- checkpoints -----------------------------------------------------------------


class CheckpointWriter:
    """Append-only ndjson writer flushed per record so a kill loses at most
    the line being written."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._handle.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "CheckpointWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_checkpoint(path: Path) -> dict[str, dict]:
    """Read a checkpoint into image_id -> last record. A torn final line
    (process killed mid-write) is dropped; damage anywhere else is an error."""
    path = Path(path)
    if not path.exists():
        return {}
    by_id: dict[str, dict] = {}
    lines = path.read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            if i == len(lines) - 1:
                break
            raise IoError(f"{path}: corrupt checkpoint line {i + 1}: {exc}") from exc
        by_id[record["image_id"]] = record
    return by_id


def _pool_order(records: Sequence[ImageRecord], seed: int) -> list[ImageRecord]:
    """Deterministic seed-dependent shuffle, recomputable on resume."""
    return sorted(
        records,
        key=lambda r: hashlib.sha256(f"{seed}:{r.image_id}".encode("utf-8")).hexdigest(),
    )


class _ClassState:
    """Progress of one class through its pool-order prefix."""

    def __init__(self, pool: list[ImageRecord], quota: int, budget: int) -> None:
        self.pool = pool
        self.quota = quota
        self.budget = budget
        self.next_index = 0
        self.attempted = 0
        self.retained = 0

    def replay_checkpoint(self, done: dict[str, dict], outcomes: dict[str, str]) -> None:
        """Consume the already-checkpointed prefix of the pool order."""
        while self.next_index < len(self.pool) and self.retained < self.quota:
            image_id = self.pool[self.next_index].image_id
            if image_id not in done:
                break
            outcome = done[image_id]["outcome"]
            outcomes[image_id] = outcome
            self.attempted += 1
            if outcome == Verdict.RETAINED.value:
                self.retained += 1
            self.next_index += 1

    def next_record(self) -> Optional[ImageRecord]:
        if len(self.pool) < self.quota:
            return None  # unfillable even at perfect yield; do not burn requests
        if self.retained >= self.quota or self.attempted >= self.budget:
            return None
        if self.next_index >= len(self.pool):
            return None
        record = self.pool[self.next_index]
        self.next_index += 1
        self.attempted += 1
        return record

    def finish_reason(self) -> Optional[str]:
        if self.retained >= self.quota:
            return None
        if len(self.pool) < self.quota:
            return "insufficient_pool"
        if self.attempted >= self.budget:
            return "budget_exhausted"
        return "pool_exhausted"


# -- single-image generation -------------------------------------------------------


@dataclass
class AttemptResult:
    record: ImageRecord
    outcome: str  # Verdict value or OUTCOME_TRANSPORT
    caption: Optional[StructuredCaption]
    raw_response: str
    error: Optional[str] = None


def _ask_with_reask(
    client: ModelClient,
    request: ChatRequest,
    family: DatasetFamily,
    meta: dict,
) -> tuple[Optional[StructuredCaption], str]:
    """One generation with a single identical re-ask on a malformed reply."""
    raw = ""
    for ask_index in (0, 1):
        response = client.chat(request, meta={**meta, "ask_index": ask_index})
        raw = response.text
        try:
            return parse_structured_caption(raw, family.normalization), raw
        except ParseFailure:
            continue
    return None, raw


def generate_one(
    client: ModelClient,
    record: ImageRecord,
    prompts: RenderedPrompts,
    family: DatasetFamily,
    policy: EncodePolicy = EncodePolicy(),
    purpose: str = "distill",
) -> AttemptResult:
    """Caption one image and classify the outcome. Endpoint exhaustion and
    undecodable images are recorded as transport failures, not raised; a
    rejected request (auth, bad model name) propagates because retrying
    other images cannot succeed either."""
    meta = {"image_id": record.image_id, "dataset": record.dataset.value, "purpose": purpose}
    try:
        image = encode_image(record, policy)
    except ImageDecodeError as exc:
        return AttemptResult(record, OUTCOME_TRANSPORT, None, "", error=str(exc))
    request = ChatRequest(
        system_prompt=prompts.system_prompt,
        user_text=prompts.user_prompt,
        image=image,
        response_format_json=True,
    )
    try:
        caption, raw = _ask_with_reask(client, request, family, meta)
    except EndpointExhausted as exc:
        return AttemptResult(record, OUTCOME_TRANSPORT, None, "", error=str(exc))
    if caption is None:
        return AttemptResult(record, Verdict.REJECTED_MALFORMED.value, None, raw)
    verdict = (
        Verdict.RETAINED
        if caption.prediction.canonical == record.ground_truth.canonical
        else Verdict.REJECTED_MISMATCH
    )
    return AttemptResult(record, verdict.value, caption, raw)


# -- quota loop -----------------------------------------------------------------


def _checkpoint_record(result: AttemptResult, attempt_index: int) -> dict:
    return {
        "image_id": result.record.image_id,
        "dataset": result.record.dataset.value,
        "ground_truth": result.record.ground_truth.canonical,
        "attempt_index": attempt_index,
        "outcome": result.outcome,
        "caption": caption_to_dict(result.caption) if result.caption else None,
        "raw_response": result.raw_response,
        "error": result.error,
    }


def run_quota_loop(
    client: ModelClient,
    records: Sequence[ImageRecord],
    family: DatasetFamily,
    prompts: PromptTemplate,
    plan: QuotaPlan,
    checkpoint_path: Path,
    seed: int = 0,
    policy: EncodePolicy = EncodePolicy(),
) -> tuple[list[DistillationSample], YieldStats]:
    """Generate per class until its quota is retained or its pool/budget runs
    out. Classes that cannot fill their quota are excluded from the returned
    corpus entirely (recorded with a reason) to preserve class balance.
    """
    rendered = prompts.render(family)
    unknown = sorted(set(plan.per_class_quota) - set(family.class_vocabulary))
    if unknown:
        raise ConfigError(f"quota plan names classes outside the vocabulary: {unknown}")

    pools: dict[str, list[ImageRecord]] = {cls: [] for cls in plan.per_class_quota}
    for record in records:
        label = record.ground_truth.canonical
        if label in pools:
            pools[label].append(record)
    for cls in pools:
        pools[cls] = _pool_order(pools[cls], seed)

    done = load_checkpoint(checkpoint_path)
    stats = YieldStats(dataset=family.id.value)
    outcomes: dict[str, str] = {}  # image_id -> outcome, pool images only

    states = {
        cls: _ClassState(
            pool=pools[cls],
            quota=plan.per_class_quota[cls],
            budget=plan.attempt_budget_per_class[cls],
        )
        for cls in plan.per_class_quota
    }
    for state in states.values():
        state.replay_checkpoint(done, outcomes)

    with CheckpointWriter(checkpoint_path) as checkpoint:
        executor = concurrent.futures.ThreadPoolExecutor(max_workers=max(1, len(states)))
        try:
            pending: dict[concurrent.futures.Future, tuple[_ClassState, int]] = {}

            def submit(state: _ClassState) -> None:
                attempt_index = state.attempted  # 0-based index of the attempt about to run
                record = state.next_record()
                if record is not None:
                    future = executor.submit(
                        generate_one, client, record, rendered, family, policy
                    )
                    pending[future] = (state, attempt_index)

            for state in states.values():
                submit(state)
            while pending:
                finished, _ = concurrent.futures.wait(
                    pending, return_when=concurrent.futures.FIRST_COMPLETED
                )
                for future in finished:
                    state, attempt_index = pending.pop(future)
                    result = future.result()
                    checkpoint.write(_checkpoint_record(result, attempt_index))
                    outcomes[result.record.image_id] = result.outcome
                    if result.outcome == Verdict.RETAINED.value:
                        state.retained += 1
                    submit(state)
        finally:
            executor.shutdown(wait=True, cancel_futures=True)

    done = load_checkpoint(checkpoint_path)
    samples: list[DistillationSample] = []
    for cls, state in sorted(states.items()):
        yield_stats = ClassYield()
        retained_records: list[ImageRecord] = []
        for record in state.pool:
            outcome = outcomes.get(record.image_id)
            if outcome is None:
                continue
            yield_stats.attempted += 1
            if outcome == Verdict.RETAINED.value:
                yield_stats.retained += 1
                retained_records.append(record)
            elif outcome == Verdict.REJECTED_MISMATCH.value:
                yield_stats.rejected_mismatch += 1
            elif outcome == Verdict.REJECTED_MALFORMED.value:
                yield_stats.rejected_malformed += 1
            else:
                yield_stats.transport_failures += 1
        stats.per_class[cls] = yield_stats
        reason = state.finish_reason()
        if reason is not None:
            stats.excluded_classes[cls] = reason
            continue
        for record in retained_records[: state.quota]:
            entry = done[record.image_id]
            caption = caption_from_dict(entry["caption"], family.normalization)
            samples.append(
                make_sample(record, caption, entry["raw_response"], entry["attempt_index"])
            )
    stats.check()
    samples.sort(key=lambda s: s.record.image_id)
    return samples, stats


# -- candidate inference ------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    dataset: str
    ground_truth: str
    caption: Optional[StructuredCaption]
    raw_response: str
    malformed: bool = False
    transport_failed: bool = False

    @property
    def prediction(self) -> Optional[str]:
        return self.caption.prediction.canonical if self.caption else None

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "dataset": self.dataset,
            "ground_truth": self.ground_truth,
            "prediction": self.prediction,
            "caption": caption_to_dict(self.caption) if self.caption else None,
            "raw_response": self.raw_response,
            "malformed": self.malformed,
            "transport_failed": self.transport_failed,
        }

    @classmethod
    def from_dict(cls, payload: dict, family: DatasetFamily) -> "PredictionRecord":
        caption = (
            caption_from_dict(payload["caption"], family.normalization)
            if payload.get("caption")
            else None
        )
        return cls(
            image_id=payload["image_id"],
            dataset=payload["dataset"],
            ground_truth=payload["ground_truth"],
            caption=caption,
            raw_response=payload.get("raw_response", ""),
            malformed=bool(payload.get("malformed")),
            transport_failed=bool(payload.get("transport_failed")),
        )


def run_inference(
    client: ModelClient,
    records: Sequence[ImageRecord],
    family: DatasetFamily,
    prompts: PromptTemplate,
    checkpoint_path: Path,
    policy: EncodePolicy = EncodePolicy(),
    purpose: str = "predict",
    max_workers: int = 8,
) -> list[PredictionRecord]:
    """Caption every record once (no quotas), checkpointed and resumable.
    Output is sorted by image_id and covers exactly the input records."""
    if not records:
        raise InputError("run_inference needs at least one record")
    rendered = prompts.render(family)
    done = load_checkpoint(checkpoint_path)
    todo = [r for r in records if r.image_id not in done]
    with CheckpointWriter(checkpoint_path) as checkpoint:
        if todo:
            with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
                futures = {
                    executor.submit(
                        generate_one, client, record, rendered, family, policy, purpose
                    ): record
                    for record in todo
                }
                for future in concurrent.futures.as_completed(futures):
                    result = future.result()
                    checkpoint.write(_checkpoint_record(result, 0))
    done = load_checkpoint(checkpoint_path)
    results: list[PredictionRecord] = []
    for record in sorted(records, key=lambda r: r.image_id):
        entry = done[record.image_id]
        caption = (
            caption_from_dict(entry["caption"], family.normalization)
            if entry.get("caption")
            else None
        )
        results.append(
            PredictionRecord(
                image_id=record.image_id,
                dataset=record.dataset.value,
                ground_truth=record.ground_truth.canonical,
                caption=caption,
                raw_response=entry.get("raw_response", ""),
                malformed=entry["outcome"] == Verdict.REJECTED_MALFORMED.value,
                transport_failed=entry["outcome"] == OUTCOME_TRANSPORT,
            )
        )
    return results


def write_predictions(records: Sequence[PredictionRecord], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in sorted(records, key=lambda r: r.image_id):
            handle.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def read_predictions(
    path: Path, family: DatasetFamily | Mapping[DatasetId, DatasetFamily]
) -> list[PredictionRecord]:
    """Load a predictions file. ``family`` is either the single family every
    row belongs to, or a mapping covering each dataset found in the file."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"predictions file not found: {path}")
    results = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            payload = json.loads(line)
            if isinstance(family, DatasetFamily):
                row_family = family
            else:
                try:
                    row_family = family[DatasetId(payload["dataset"])]
                except (KeyError, ValueError):
                    raise InputError(f"no dataset family for prediction row {payload.get('image_id')!r}")
            results.append(PredictionRecord.from_dict(payload, row_family))
    return results
