"""Run configuration: one YAML file describing endpoints, datasets, prompts,
metric options, and encode policy for a whole pipeline run.

Secrets never live in the file; endpoint entries name the environment
variable that holds their API key. Validation is front-loaded so a typo
fails before any artifact is written or request sent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .capmetrics import MetricOptions
from .datamodel import DatasetFamily, DatasetId, NormalizationConfig
from .distill import PromptTemplate, QuotaPlan
from .errors import ConfigError, IoError
from .ingest import CsvAdapterConfig
from .modelio import EncodePolicy, EndpointConfig


@dataclass(frozen=True)
class DatasetConfig:
    family: DatasetFamily
    adapter: Optional[CsvAdapterConfig] = None
    quota_total: Optional[int] = None
    quota_per_class: Optional[int] = None
    budget_factor: int = 10

    def __post_init__(self) -> None:
        if (self.quota_total is None) == (self.quota_per_class is None):
            raise ConfigError(
                f"{self.family.id.value}: set exactly one of quota_total / quota_per_class"
            )
        if self.budget_factor < 1:
            raise ConfigError(f"{self.family.id.value}: budget_factor must be >= 1")

    def quota_plan(self) -> QuotaPlan:
        classes = self.family.class_vocabulary
        if self.quota_total is not None:
            return QuotaPlan.from_total(self.quota_total, classes, self.budget_factor)
        quotas = {c: self.quota_per_class for c in classes}
        budgets = {c: self.quota_per_class * self.budget_factor for c in classes}
        return QuotaPlan(per_class_quota=quotas, attempt_budget_per_class=budgets)


@dataclass
class RunConfig:
    seed: int
    split_ratios: tuple[float, float, float]
    teacher: EndpointConfig
    judge: EndpointConfig
    embedder: EndpointConfig
    candidates: dict[str, EndpointConfig]
    datasets: dict[DatasetId, DatasetConfig]
    prompts: PromptTemplate
    metrics: MetricOptions
    encode: EncodePolicy
    config_sha256: str = ""
    source_path: Optional[Path] = None
    raw: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        """Provenance block for reports: endpoints by name, never secrets."""
        return {
            "seed": self.seed,
            "split_ratios": list(self.split_ratios),
            "config_sha256": self.config_sha256,
            "endpoints": {
                "teacher": self.teacher.model_name,
                "judge": self.judge.model_name,
                "embedder": self.embedder.model_name,
                "candidates": {name: ep.model_name for name, ep in self.candidates.items()},
            },
        }


_TOP_LEVEL_KEYS = {"run", "endpoints", "datasets", "prompts", "metrics", "encode"}
_ENDPOINT_KEYS = {
    "name",
    "base_url",
    "model_name",
    "api_key_env_var",
    "max_concurrent_requests",
    "requests_per_minute",
    "timeout",
    "max_retries",
    "temperature",
    "max_completion_tokens",
}
_DATASET_KEYS = {
    "display_name",
    "classes",
    "synonyms",
    "adapter",
    "quota_total",
    "quota_per_class",
    "budget_factor",
}
_ADAPTER_KEYS = {
    "csv_path",
    "image_dir",
    "id_column",
    "label_column",
    "image_extension",
    "label_delimiter",
}


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return mapping[key]


def _check_keys(mapping: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")


def _endpoint(payload: dict, default_name: str, context: str) -> EndpointConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"{context}: endpoint must be a mapping")
    _check_keys(payload, _ENDPOINT_KEYS, context)
    kwargs = dict(payload)
    kwargs.setdefault("name", default_name)
    for key in ("base_url", "model_name"):
        _require(kwargs, key, context)
    try:
        return EndpointConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _dataset(dataset_id: DatasetId, payload: dict, base_dir: Path) -> DatasetConfig:
    context = f"datasets.{dataset_id.value}"
    if not isinstance(payload, dict):
        raise ConfigError(f"{context}: must be a mapping")
    _check_keys(payload, _DATASET_KEYS, context)
    classes = _require(payload, "classes", context)
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise ConfigError(f"{context}: classes must be a list of strings")
    synonyms = payload.get("synonyms") or {}
    if not isinstance(synonyms, dict):
        raise ConfigError(f"{context}: synonyms must be a mapping")
    family = DatasetFamily(
        id=dataset_id,
        display_name=payload.get("display_name", dataset_id.value),
        class_vocabulary=tuple(classes),
        normalization=NormalizationConfig({str(k): str(v) for k, v in synonyms.items()}),
    )
    adapter = None
    if payload.get("adapter") is not None:
        adapter_payload = payload["adapter"]
        if not isinstance(adapter_payload, dict):
            raise ConfigError(f"{context}.adapter: must be a mapping")
        _check_keys(adapter_payload, _ADAPTER_KEYS, f"{context}.adapter")
        kwargs = dict(adapter_payload)
        csv_path = Path(_require(kwargs, "csv_path", f"{context}.adapter"))
        image_dir = Path(_require(kwargs, "image_dir", f"{context}.adapter"))
        if not csv_path.is_absolute():
            csv_path = base_dir / csv_path
        if not image_dir.is_absolute():
            image_dir = base_dir / image_dir
        kwargs["csv_path"] = csv_path
        kwargs["image_dir"] = image_dir
        adapter = CsvAdapterConfig(**kwargs)
    return DatasetConfig(
        family=family,
        adapter=adapter,
        quota_total=payload.get("quota_total"),
        quota_per_class=payload.get("quota_per_class"),
        budget_factor=payload.get("budget_factor", 10),
    )


def parse_config(payload: dict, base_dir: Path, config_sha256: str = "") -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(payload, _TOP_LEVEL_KEYS, "config")
    for section in _TOP_LEVEL_KEYS:
        value = payload.get(section)
        if value is not None and not isinstance(value, dict):
            raise ConfigError(f"{section}: must be a mapping")

    run = payload.get("run") or {}
    _check_keys(run, {"seed", "split_ratios"}, "run")
    seed = run.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("run.seed must be an integer")
    ratios_raw = run.get("split_ratios", [0.7, 0.2, 0.1])
    if not isinstance(ratios_raw, list) or len(ratios_raw) != 3:
        raise ConfigError("run.split_ratios must be a list of three numbers")
    ratios = tuple(float(r) for r in ratios_raw)

    endpoints = _require(payload, "endpoints", "config")
    _check_keys(endpoints, {"teacher", "judge", "embedder", "candidates"}, "endpoints")
    teacher = _endpoint(_require(endpoints, "teacher", "endpoints"), "teacher", "endpoints.teacher")
    judge = _endpoint(_require(endpoints, "judge", "endpoints"), "judge", "endpoints.judge")
    embedder = _endpoint(
        _require(endpoints, "embedder", "endpoints"), "embedder", "endpoints.embedder"
    )
    candidates_raw = endpoints.get("candidates") or {}
    if not isinstance(candidates_raw, dict) or not candidates_raw:
        raise ConfigError("endpoints.candidates must name at least one candidate model")
    candidates = {
        name: _endpoint(ep, name, f"endpoints.candidates.{name}")
        for name, ep in candidates_raw.items()
    }

    datasets_raw = _require(payload, "datasets", "config")
    if not isinstance(datasets_raw, dict) or not datasets_raw:
        raise ConfigError("datasets must define at least one dataset")
    datasets: dict[DatasetId, DatasetConfig] = {}
    for key, entry in datasets_raw.items():
        try:
            dataset_id = DatasetId(key)
        except ValueError:
            valid = [d.value for d in DatasetId]
            raise ConfigError(f"unknown dataset {key!r}; expected one of {valid}") from None
        datasets[dataset_id] = _dataset(dataset_id, entry, base_dir)

    prompts_raw = payload.get("prompts") or {}
    _check_keys(prompts_raw, {"system_prompt", "user_prompt"}, "prompts")
    prompts = PromptTemplate(**prompts_raw)

    metrics_raw = payload.get("metrics") or {}
    _check_keys(metrics_raw, {"n_questions", "correctness_weights", "max_workers"}, "metrics")
    if "correctness_weights" in metrics_raw:
        weights = metrics_raw["correctness_weights"]
        if not isinstance(weights, list) or len(weights) != 2:
            raise ConfigError("metrics.correctness_weights must be a list of two numbers")
        metrics_raw = {**metrics_raw, "correctness_weights": tuple(float(w) for w in weights)}
    metrics = MetricOptions(**metrics_raw)

    encode_raw = payload.get("encode") or {}
    _check_keys(encode_raw, {"max_dimension", "jpeg_quality"}, "encode")
    encode = EncodePolicy(**encode_raw)

    return RunConfig(
        seed=seed,
        split_ratios=ratios,
        teacher=teacher,
        judge=judge,
        embedder=embedder,
        candidates=candidates,
        datasets=datasets,
        prompts=prompts,
        metrics=metrics,
        encode=encode,
        config_sha256=config_sha256,
        raw=payload,
    )


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        raw_bytes = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        payload = yaml.safe_load(raw_bytes)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    config = parse_config(
        payload,
        base_dir=path.parent.resolve(),
        config_sha256=hashlib.sha256(raw_bytes).hexdigest(),
    )
    config.source_path = path
    return config


DEFAULT_DERMATOLOGY_CLASSES = (
    "actinic keratosis",
    "basal cell carcinoma",
    "benign keratosis",
    "dermatofibroma",
    "melanoma",
    "melanocytic nevus",
    "vascular lesion",
)

DEFAULT_DERMATOLOGY_SYNONYMS = {
    "akiec": "actinic keratosis",
    "bcc": "basal cell carcinoma",
    "bkl": "benign keratosis",
    "df": "dermatofibroma",
    "mel": "melanoma",
    "nv": "melanocytic nevus",
    "vasc": "vascular lesion",
}

DEFAULT_CHEST_XRAY_CLASSES = (
    "normal",
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
    "consolidation",
    "edema",
    "emphysema",
    "fibrosis",
    "pleural thickening",
    "hernia",
)

DEFAULT_CHEST_XRAY_SYNONYMS = {"no finding": "normal", "pleural_thickening": "pleural thickening"}

DEFAULT_FUNDUS_CLASSES = ("grade 0", "grade 1", "grade 2", "grade 3", "grade 4")

DEFAULT_FUNDUS_SYNONYMS = {
    "0": "grade 0",
    "1": "grade 1",
    "2": "grade 2",
    "3": "grade 3",
    "4": "grade 4",
}


def example_config(base_url: str = "mock://teacher", judge_url: str = "mock://judge",
                   embedder_url: str = "mock://embedder") -> dict:
    """A complete configuration skeleton with the standard three collections,
    wired to mock endpoints so it runs offline as written."""
    return {
        "run": {"seed": 0, "split_ratios": [0.7, 0.2, 0.1]},
        "endpoints": {
            "teacher": {"base_url": base_url, "model_name": "teacher-vlm"},
            "judge": {"base_url": judge_url, "model_name": "judge-llm"},
            "embedder": {"base_url": embedder_url, "model_name": "embedding-model"},
            "candidates": {
                "base": {"base_url": base_url, "model_name": "candidate-base"},
                "tuned": {"base_url": base_url, "model_name": "candidate-tuned"},
            },
        },
        "datasets": {
            "fundus": {
                "display_name": "retinal fundus photographs",
                "classes": list(DEFAULT_FUNDUS_CLASSES),
                "synonyms": dict(DEFAULT_FUNDUS_SYNONYMS),
                "quota_total": 500,
                "adapter": {
                    "csv_path": "fundus/train.csv",
                    "image_dir": "fundus/images",
                    "id_column": "id_code",
                    "label_column": "diagnosis",
                    "image_extension": ".png",
                },
            },
            "dermatology": {
                "display_name": "dermatoscopic images",
                "classes": list(DEFAULT_DERMATOLOGY_CLASSES),
                "synonyms": dict(DEFAULT_DERMATOLOGY_SYNONYMS),
                "quota_total": 676,
                "adapter": {
                    "csv_path": "dermatology/metadata.csv",
                    "image_dir": "dermatology/images",
                    "id_column": "image_id",
                    "label_column": "dx",
                    "image_extension": ".jpg",
                },
            },
            "chest_xray": {
                "display_name": "chest radiographs",
                "classes": list(DEFAULT_CHEST_XRAY_CLASSES),
                "synonyms": dict(DEFAULT_CHEST_XRAY_SYNONYMS),
                "quota_per_class": 50,
                "adapter": {
                    "csv_path": "chest_xray/labels.csv",
                    "image_dir": "chest_xray/images",
                    "id_column": "Image Index",
                    "label_column": "Finding Labels",
                    "label_delimiter": "|",
                },
            },
        },
        "prompts": {},
        "metrics": {"n_questions": 3, "correctness_weights": [0.75, 0.25]},
        "encode": {"max_dimension": 1024, "jpeg_quality": 90},
    }
