"""Stage orchestration over a run directory.

Every pipeline command operates on one run directory. Each stage reads the
artifacts of upstream stages, writes its own, and records a manifest under
stages/<name>.json holding a fingerprint of (config digest, input file
hashes) plus the hashes of the files it produced. Re-running a stage whose
fingerprint and outputs are unchanged is a no-op; --force reruns it anyway.

Checkpoints (checkpoints/*.ndjson) and the audit log are incremental state,
not stage outputs: an interrupted stage leaves no manifest, and the rerun
resumes from the checkpoints instead of repeating completed requests.

The ingest fingerprint covers the adapter CSV listings, not image bytes;
editing an image in place without touching the listing does not invalidate
downstream stages.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

from .capmetrics import CaptionEvalCase, evaluate_captions, summarize_scores, write_caption_scores
from .clsmetrics import ClassificationReport, build_confusion, compute_metrics
from .config import RunConfig
from .corpus import SplitManifest, corpus_from_ndjson, corpus_to_ndjson, emit_instruction_corpus, split
from .datamodel import (
    DatasetFamily,
    DatasetId,
    DistillationSample,
    ImageRecord,
    canonicalize_label,
    flatten_description,
    read_manifest,
    write_manifest,
)
from .distill import PredictionRecord, read_predictions, run_inference, run_quota_loop, write_predictions
from .errors import ConfigError, InputError, IoError, RunLockedError, StageDependencyError
from .ingest import ingest_csv, validate_manifest
from .modelio import AuditLog, ModelClient
from .report import build_report, render, report_timestamp

logger = logging.getLogger(__name__)

LOCK_FILENAME = ".lock"


# -- run directory layout ------------------------------------------------------------


@dataclass(frozen=True)
class RunPaths:
    """All artifact locations inside one run directory."""

    run_dir: Path

    @property
    def manifest(self) -> Path:
        return self.run_dir / "manifest.ndjson"

    @property
    def validation(self) -> Path:
        return self.run_dir / "validation.json"

    @property
    def corpus(self) -> Path:
        return self.run_dir / "corpus.ndjson"

    @property
    def yield_stats(self) -> Path:
        return self.run_dir / "yield_stats.json"

    @property
    def split(self) -> Path:
        return self.run_dir / "split.json"

    @property
    def corpus_train(self) -> Path:
        return self.run_dir / "corpus_train.ndjson"

    @property
    def corpus_validation(self) -> Path:
        return self.run_dir / "corpus_validation.ndjson"

    @property
    def audit(self) -> Path:
        return self.run_dir / "audit.ndjson"

    @property
    def report_json(self) -> Path:
        return self.run_dir / "report.json"

    @property
    def report_csv(self) -> Path:
        return self.run_dir / "report.csv"

    @property
    def report_text(self) -> Path:
        return self.run_dir / "report.txt"

    @property
    def stages_dir(self) -> Path:
        return self.run_dir / "stages"

    @property
    def checkpoints_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    def stage_manifest(self, stage: str) -> Path:
        return self.stages_dir / f"{stage}.json"

    def distill_checkpoint(self, dataset: str) -> Path:
        return self.checkpoints_dir / f"distill_{dataset}.ndjson"

    def predict_checkpoint(self, model: str, dataset: str) -> Path:
        return self.checkpoints_dir / f"predict_{model}_{dataset}.ndjson"

    def predictions(self, model: str) -> Path:
        return self.run_dir / f"predictions_{model}.ndjson"

    def scores_cls(self, model: str) -> Path:
        return self.run_dir / f"scores_cls_{model}.json"

    def scores_rag(self, model: str) -> Path:
        return self.run_dir / f"scores_rag_{model}.ndjson"

    def scores_rag_summary(self, model: str) -> Path:
        return self.run_dir / f"scores_rag_{model}_summary.json"


@contextlib.contextmanager
def run_lock(run_dir: Path) -> Iterator[None]:
    """Exclusive advisory lock on a run directory.

    The lock file holds the owning pid. A lock whose pid is gone is stale
    and gets taken over with a warning; a live pid raises RunLockedError.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / LOCK_FILENAME
    for attempt in range(2):
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            if attempt == 1:
                raise RunLockedError(f"run directory {run_dir} is locked: {lock_path}")
            try:
                pid = int(lock_path.read_text(encoding="utf-8").strip())
            except (OSError, ValueError):
                pid = None
            if pid is not None and _pid_alive(pid):
                raise RunLockedError(f"run directory {run_dir} is locked by pid {pid}")
            logger.warning("removing stale lock %s (pid %s is gone)", lock_path, pid)
            lock_path.unlink(missing_ok=True)
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
    finally:
        os.close(fd)
    try:
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- stage framework -----------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    name: str
    inputs: Callable[[RunConfig, RunPaths], list[Path]]
    outputs: Callable[[RunConfig, RunPaths], list[Path]]
    run: Callable[[RunConfig, RunPaths], None]


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_digest(config: RunConfig) -> str:
    if config.config_sha256:
        return config.config_sha256
    blob = json.dumps(config.raw, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _relpath(path: Path, paths: RunPaths) -> str:
    try:
        return str(Path(path).relative_to(paths.run_dir))
    except ValueError:
        return str(path)


def _fingerprint(stage: Stage, config: RunConfig, paths: RunPaths, input_hashes: dict[str, str]) -> str:
    doc = {
        "stage": stage.name,
        "config": _config_digest(config),
        "inputs": input_hashes,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def _input_hashes(stage: Stage, config: RunConfig, paths: RunPaths) -> Optional[dict[str, str]]:
    """Hashes of the stage's input files, or None if any is missing."""
    hashes = {}
    for path in stage.inputs(config, paths):
        if not Path(path).is_file():
            return None
        hashes[_relpath(path, paths)] = _sha256_file(path)
    return hashes


def stage_is_complete(stage: Stage, config: RunConfig, paths: RunPaths) -> bool:
    manifest_path = paths.stage_manifest(stage.name)
    if not manifest_path.is_file():
        return False
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    input_hashes = _input_hashes(stage, config, paths)
    if input_hashes is None:
        return False
    if manifest.get("fingerprint") != _fingerprint(stage, config, paths, input_hashes):
        return False
    recorded = manifest.get("outputs", {})
    for path in stage.outputs(config, paths):
        rel = _relpath(path, paths)
        if rel not in recorded or not Path(path).is_file():
            return False
        if _sha256_file(path) != recorded[rel]:
            return False
    return True


def run_stage(stage: Stage, config: RunConfig, paths: RunPaths, force: bool = False) -> bool:
    """Execute one stage; returns True if it ran, False if up to date."""
    if not force and stage_is_complete(stage, config, paths):
        logger.info("stage %s: up to date, skipping", stage.name)
        return False
    missing = [str(p) for p in stage.inputs(config, paths) if not Path(p).is_file()]
    if missing:
        raise StageDependencyError(stage.name, missing)
    logger.info("stage %s: running", stage.name)
    started = time.monotonic()
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    stage.run(config, paths)
    outputs = stage.outputs(config, paths)
    missing_out = [str(p) for p in outputs if not Path(p).is_file()]
    if missing_out:
        raise IoError(f"stage {stage.name} did not produce: {missing_out}")
    input_hashes = _input_hashes(stage, config, paths)
    if input_hashes is None:
        raise IoError(f"stage {stage.name}: an input file vanished during the run")
    manifest = {
        "stage": stage.name,
        "fingerprint": _fingerprint(stage, config, paths, input_hashes),
        "config": _config_digest(config),
        "inputs": input_hashes,
        "outputs": {_relpath(p, paths): _sha256_file(p) for p in outputs},
        "completed_at": report_timestamp(),
        "elapsed_seconds": round(time.monotonic() - started, 3),
    }
    paths.stages_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = paths.stage_manifest(stage.name)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("stage %s: done in %.2fs", stage.name, manifest["elapsed_seconds"])
    return True


# -- shared helpers ------------------------------------------------------------------


def _families(config: RunConfig) -> dict[DatasetId, DatasetFamily]:
    return {dataset_id: ds.family for dataset_id, ds in config.datasets.items()}


def _sorted_datasets(config: RunConfig) -> list[DatasetId]:
    return sorted(config.datasets, key=lambda d: d.value)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise IoError(f"corrupt JSON in {path}: {exc}")


def _rendered_prompts(config: RunConfig) -> dict[str, tuple[str, str]]:
    """dataset id value -> (system, user) with placeholders substituted."""
    rendered = {}
    for dataset_id in _sorted_datasets(config):
        prompts = config.prompts.render(config.datasets[dataset_id].family)
        rendered[dataset_id.value] = (prompts.system_prompt, prompts.user_prompt)
    return rendered


def _test_records_by_dataset(config: RunConfig, paths: RunPaths) -> dict[DatasetId, list[ImageRecord]]:
    corpus = corpus_from_ndjson(paths.corpus)
    manifest = SplitManifest.from_dict(_read_json(paths.split))
    test_ids = manifest.ids_for("test")
    grouped: dict[DatasetId, list[ImageRecord]] = {}
    for sample in corpus:
        if sample.record.image_id in test_ids:
            grouped.setdefault(sample.record.dataset, []).append(sample.record)
    return grouped


# -- stage bodies --------------------------------------------------------------------


def _run_ingest(config: RunConfig, paths: RunPaths) -> None:
    all_records: list[ImageRecord] = []
    validation_doc: dict[str, dict] = {}
    problems: list[str] = []
    for dataset_id in _sorted_datasets(config):
        dataset = config.datasets[dataset_id]
        if dataset.adapter is None:
            raise ConfigError(f"dataset {dataset_id.value} has no adapter configured")
        records, stats = ingest_csv(dataset.adapter, dataset.family)
        check = validate_manifest(records, dataset.family)
        validation_doc[dataset_id.value] = {"ingest": stats.to_dict(), "validation": check.to_dict()}
        logger.info(
            "ingest %s: %d rows, %d ingested, %d dropped",
            dataset_id.value,
            stats.rows_total,
            stats.ingested,
            stats.rows_total - stats.ingested,
        )
        if not check.ok:
            problems.append(
                f"{dataset_id.value}: duplicates={check.duplicate_ids} "
                f"out_of_vocabulary={sorted(check.out_of_vocabulary)} total={check.total}"
            )
        all_records.extend(records)

    seen: dict[str, str] = {}
    for record in all_records:
        if record.image_id in seen:
            problems.append(
                f"image_id {record.image_id!r} appears in both {seen[record.image_id]} "
                f"and {record.dataset.value}"
            )
        seen[record.image_id] = record.dataset.value

    _write_json(paths.validation, validation_doc)
    if problems:
        raise InputError("manifest validation failed: " + "; ".join(problems))
    write_manifest(sorted(all_records, key=lambda r: (r.dataset.value, r.image_id)), paths.manifest)


def _run_distill(config: RunConfig, paths: RunPaths) -> None:
    records = read_manifest(paths.manifest, _families(config))
    audit = AuditLog(paths.audit)
    try:
        teacher = ModelClient(config.teacher, audit=audit)
        teacher.health_check("chat")
        corpus: list[DistillationSample] = []
        yield_doc: dict[str, dict] = {}
        for dataset_id in _sorted_datasets(config):
            dataset = config.datasets[dataset_id]
            pool = [r for r in records if r.dataset == dataset_id]
            samples, stats = run_quota_loop(
                teacher,
                pool,
                dataset.family,
                config.prompts,
                dataset.quota_plan(),
                paths.distill_checkpoint(dataset_id.value),
                seed=config.seed,
                policy=config.encode,
            )
            corpus.extend(samples)
            yield_doc[dataset_id.value] = stats.to_dict()
            logger.info(
                "distill %s: %d retained, %d classes excluded",
                dataset_id.value,
                len(samples),
                len(stats.excluded_classes),
            )
        corpus_to_ndjson(corpus, paths.corpus)
        _write_json(paths.yield_stats, yield_doc)
    finally:
        audit.close()


def _run_split(config: RunConfig, paths: RunPaths) -> None:
    corpus = corpus_from_ndjson(paths.corpus)
    manifest = split(corpus, ratios=config.split_ratios, seed=config.seed)
    paths.split.write_text(manifest.to_json(), encoding="utf-8")
    logger.info("split totals: %s", manifest.split_totals())


def _run_emit_corpus(config: RunConfig, paths: RunPaths) -> None:
    corpus = corpus_from_ndjson(paths.corpus)
    manifest = SplitManifest.from_dict(_read_json(paths.split))
    rendered = _rendered_prompts(config)
    system_prompts = {dataset: system for dataset, (system, _) in rendered.items()}
    user_prompts = {dataset: user for dataset, (_, user) in rendered.items()}
    emit_instruction_corpus(manifest, corpus, system_prompts, user_prompts, paths.run_dir)


def _run_predict(config: RunConfig, paths: RunPaths) -> None:
    grouped = _test_records_by_dataset(config, paths)
    if not grouped:
        raise InputError("no test-split records to caption")
    audit = AuditLog(paths.audit)
    try:
        for model_name, endpoint in config.candidates.items():
            client = ModelClient(endpoint, audit=audit)
            client.health_check("chat")
            predictions: list[PredictionRecord] = []
            for dataset_id in sorted(grouped, key=lambda d: d.value):
                family = config.datasets[dataset_id].family
                predictions.extend(
                    run_inference(
                        client,
                        grouped[dataset_id],
                        family,
                        config.prompts,
                        paths.predict_checkpoint(model_name, dataset_id.value),
                        policy=config.encode,
                    )
                )
            predictions.sort(key=lambda p: p.image_id)
            write_predictions(predictions, paths.predictions(model_name))
            logger.info("predict %s: %d captions", model_name, len(predictions))
    finally:
        audit.close()


def _run_eval_cls(config: RunConfig, paths: RunPaths) -> None:
    families = _families(config)
    for model_name in config.candidates:
        predictions = read_predictions(paths.predictions(model_name), families)
        by_dataset: dict[str, list[PredictionRecord]] = {}
        for record in predictions:
            by_dataset.setdefault(record.dataset, []).append(record)
        doc: dict[str, dict] = {"model": model_name, "datasets": {}}
        for dataset, rows in sorted(by_dataset.items()):
            family = families[DatasetId(dataset)]
            pairs = [
                (
                    canonicalize_label(row.ground_truth),
                    canonicalize_label(row.prediction) if row.prediction else None,
                )
                for row in rows
            ]
            matrix = build_confusion(pairs, family.class_vocabulary)
            report = compute_metrics(matrix, dataset=dataset, model=model_name)
            doc["datasets"][dataset] = report.to_dict()
        _write_json(paths.scores_cls(model_name), doc)


def _run_eval_rag(config: RunConfig, paths: RunPaths) -> None:
    corpus = corpus_from_ndjson(paths.corpus)
    manifest = SplitManifest.from_dict(_read_json(paths.split))
    test_ids = manifest.ids_for("test")
    teacher_by_id = {s.record.image_id: s for s in corpus if s.record.image_id in test_ids}
    rendered = _rendered_prompts(config)
    families = _families(config)

    audit = AuditLog(paths.audit)
    try:
        judge = ModelClient(config.judge, audit=audit)
        embedder = ModelClient(config.embedder, audit=audit)
        judge.health_check("chat")
        embedder.health_check("embed")
        for model_name in config.candidates:
            predictions = {
                p.image_id: p for p in read_predictions(paths.predictions(model_name), families)
            }
            cases: list[CaptionEvalCase] = []
            skipped: dict[str, dict[str, int]] = {}
            for image_id, sample in sorted(teacher_by_id.items()):
                dataset = sample.record.dataset.value
                tally = skipped.setdefault(
                    dataset, {"n_test": 0, "n_cases": 0, "skipped_no_caption": 0, "missing_prediction": 0}
                )
                tally["n_test"] += 1
                prediction = predictions.get(image_id)
                if prediction is None:
                    tally["missing_prediction"] += 1
                    continue
                if prediction.caption is None:
                    tally["skipped_no_caption"] += 1
                    continue
                _, user_prompt = rendered[dataset]
                cases.append(
                    CaptionEvalCase(
                        image_id=image_id,
                        dataset=dataset,
                        question=user_prompt,
                        answer=flatten_description(prediction.caption.description),
                        context=flatten_description(sample.teacher_output.description),
                    )
                )
                tally["n_cases"] += 1
            if cases:
                scores, summary = evaluate_captions(judge, embedder, cases, config.metrics)
            else:
                scores, summary = [], summarize_scores([])
            write_caption_scores(scores, paths.scores_rag(model_name))
            _write_json(
                paths.scores_rag_summary(model_name),
                {"model": model_name, "summary": summary, "cases": skipped},
            )
            logger.info("eval-rag %s: %d cases scored", model_name, len(cases))
    finally:
        audit.close()


def _run_report(config: RunConfig, paths: RunPaths) -> None:
    models = list(config.candidates)
    cls_reports: dict[str, dict[str, ClassificationReport]] = {}
    rag_summaries: dict[str, dict[str, dict]] = {}
    for model_name in models:
        cls_doc = _read_json(paths.scores_cls(model_name))
        for dataset, payload in cls_doc.get("datasets", {}).items():
            cls_reports.setdefault(dataset, {})[model_name] = ClassificationReport.from_dict(payload)
        rag_doc = _read_json(paths.scores_rag_summary(model_name))
        for dataset, block in rag_doc.get("summary", {}).get("per_dataset", {}).items():
            rag_summaries.setdefault(dataset, {})[model_name] = block
    metadata = config.metadata()
    metadata["created_at"] = report_timestamp()
    report = build_report(models, cls_reports, rag_summaries, metadata=metadata)
    for fmt, path in (("json", paths.report_json), ("csv", paths.report_csv), ("table-text", paths.report_text)):
        path.write_text(render(report, fmt), encoding="utf-8")
    logger.info("report: %d datasets, models %s", len(report.datasets), models)


# -- stage registry ------------------------------------------------------------------


def _adapter_inputs(config: RunConfig, paths: RunPaths) -> list[Path]:
    out = []
    for dataset_id in _sorted_datasets(config):
        adapter = config.datasets[dataset_id].adapter
        if adapter is not None:
            out.append(adapter.csv_path)
    return out


def _prediction_outputs(config: RunConfig, paths: RunPaths) -> list[Path]:
    return [paths.predictions(m) for m in config.candidates]


def _cls_outputs(config: RunConfig, paths: RunPaths) -> list[Path]:
    return [paths.scores_cls(m) for m in config.candidates]


def _rag_outputs(config: RunConfig, paths: RunPaths) -> list[Path]:
    out = []
    for model in config.candidates:
        out.append(paths.scores_rag(model))
        out.append(paths.scores_rag_summary(model))
    return out


STAGES: tuple[Stage, ...] = (
    Stage(
        "ingest",
        inputs=_adapter_inputs,
        outputs=lambda c, p: [p.manifest, p.validation],
        run=_run_ingest,
    ),
    Stage(
        "distill",
        inputs=lambda c, p: [p.manifest],
        outputs=lambda c, p: [p.corpus, p.yield_stats],
        run=_run_distill,
    ),
    Stage(
        "split",
        inputs=lambda c, p: [p.corpus],
        outputs=lambda c, p: [p.split],
        run=_run_split,
    ),
    Stage(
        "emit-corpus",
        inputs=lambda c, p: [p.corpus, p.split],
        outputs=lambda c, p: [p.corpus_train, p.corpus_validation],
        run=_run_emit_corpus,
    ),
    Stage(
        "predict",
        inputs=lambda c, p: [p.corpus, p.split],
        outputs=_prediction_outputs,
        run=_run_predict,
    ),
    Stage(
        "eval-cls",
        inputs=_prediction_outputs,
        outputs=_cls_outputs,
        run=_run_eval_cls,
    ),
    Stage(
        "eval-rag",
        inputs=lambda c, p: [p.corpus, p.split] + _prediction_outputs(c, p),
        outputs=_rag_outputs,
        run=_run_eval_rag,
    ),
    Stage(
        "report",
        inputs=lambda c, p: _cls_outputs(c, p) + [p.scores_rag_summary(m) for m in c.candidates],
        outputs=lambda c, p: [p.report_json, p.report_csv, p.report_text],
        run=_run_report,
    ),
)

STAGES_BY_NAME = {stage.name: stage for stage in STAGES}


def run_pipeline(
    config: RunConfig,
    run_dir: Path,
    stages: Optional[Sequence[str]] = None,
    force: bool = False,
) -> dict[str, str]:
    """Run the named stages (default: all, in order) under the run lock.

    Returns {stage: "ran" | "skipped"}.
    """
    names = list(stages) if stages is not None else [s.name for s in STAGES]
    unknown = [n for n in names if n not in STAGES_BY_NAME]
    if unknown:
        raise ConfigError(f"unknown stages: {unknown}")
    paths = RunPaths(Path(run_dir))
    outcome: dict[str, str] = {}
    with run_lock(paths.run_dir):
        for name in names:
            ran = run_stage(STAGES_BY_NAME[name], config, paths, force=force)
            outcome[name] = "ran" if ran else "skipped"
    return outcome
