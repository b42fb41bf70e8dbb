"""Reference-based caption quality scoring driven by a judge model and an
embeddings endpoint.

Three scores per caption, each in spirit a retrieval-augmented-evaluation
metric computed against the retained teacher description as reference:

- faithfulness: the candidate text is split into atomic statements and the
  judge marks each as supported/unsupported by the reference context; the
  score is the supported fraction.
- answer relevancy: the judge writes questions the candidate text would
  answer; the score is the mean cosine similarity between those questions'
  embeddings and the original instruction's embedding, reported raw in
  [-1, 1].
- answer correctness: the judge sorts claims into TP/FP/FN against the
  reference; claim F1 is blended with the (clamped) embedding similarity of
  the two texts, weighted 0.75/0.25 by default.

A judge reply that stays unparseable after one identical re-ask makes that
one metric unavailable for that one caption; it is recorded and excluded
from aggregation rather than failing the run.
"""

from __future__ import annotations

import concurrent.futures
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, EndpointExhausted, InputError, MetricUnavailable
from .modelio import ChatRequest, ModelClient

METRICS = ("faithfulness", "answer_relevancy", "answer_correctness")

JUDGE_SYSTEM_PROMPTS = {
    "statement_decomposition": (
        "You split prose into short, atomic, self-contained factual statements.\n"
        "Task: statement_decomposition\n"
        "Reply with a JSON array of strings, one statement each, and nothing else."
    ),
    "faithfulness": (
        "You check statements against a reference context. A statement is\n"
        "supported only if the context states or directly implies it.\n"
        "Task: faithfulness\n"
        "Reply with a JSON array of integers, 1 for supported and 0 for\n"
        "unsupported, in the same order as the statements, and nothing else."
    ),
    "question_generation": (
        "You write questions that the given text would directly answer.\n"
        "Task: question_generation\n"
        "Write exactly {n} questions. Reply with a JSON array of strings and\n"
        "nothing else."
    ),
    "correctness_claims": (
        "You compare an answer against a reference, claim by claim.\n"
        "Task: correctness_claims\n"
        'Reply with a JSON object {"tp": [...], "fp": [...], "fn": [...]} and\n'
        "nothing else: tp holds answer claims present in the reference, fp\n"
        "answer claims absent from it, fn reference claims missing from the\n"
        "answer."
    ),
}


@dataclass(frozen=True)
class CaptionEvalCase:
    """One candidate caption to score against its retained teacher reference.

    context and ground_truth are the same text by construction here (the
    teacher description is both the retrieval context and the reference
    answer); the duplication is kept explicit so the scoring code reads like
    the metric definitions.
    """

    image_id: str
    dataset: str
    question: str
    answer: str
    context: str
    ground_truth: str = ""

    def __post_init__(self) -> None:
        for name in ("image_id", "question", "answer", "context"):
            if not getattr(self, name).strip():
                raise InputError(f"case {self.image_id!r}: empty {name}")
        if not self.ground_truth:
            object.__setattr__(self, "ground_truth", self.context)
        elif self.ground_truth != self.context:
            raise InputError(
                f"case {self.image_id!r}: ground_truth must equal context in this pipeline"
            )


@dataclass(frozen=True)
class MetricOptions:
    n_questions: int = 3
    correctness_weights: tuple[float, float] = (0.75, 0.25)
    max_workers: int = 4

    def __post_init__(self) -> None:
        if self.n_questions < 1:
            raise ConfigError("n_questions must be >= 1")
        w_claim, w_semantic = self.correctness_weights
        if w_claim < 0 or w_semantic < 0 or abs(w_claim + w_semantic - 1.0) > 1e-9:
            raise ConfigError("correctness_weights must be non-negative and sum to 1")
        if self.max_workers < 1:
            raise ConfigError("max_workers must be >= 1")


@dataclass
class CaptionScores:
    image_id: str
    dataset: str
    faithfulness: Optional[float] = None
    answer_relevancy: Optional[float] = None
    answer_correctness: Optional[float] = None
    unavailable: dict[str, str] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "dataset": self.dataset,
            "faithfulness": self.faithfulness,
            "answer_relevancy": self.answer_relevancy,
            "answer_correctness": self.answer_correctness,
            "unavailable": dict(sorted(self.unavailable.items())),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CaptionScores":
        return cls(
            image_id=payload["image_id"],
            dataset=payload["dataset"],
            faithfulness=payload.get("faithfulness"),
            answer_relevancy=payload.get("answer_relevancy"),
            answer_correctness=payload.get("answer_correctness"),
            unavailable=dict(payload.get("unavailable", {})),
            diagnostics=dict(payload.get("diagnostics", {})),
        )


# -- judge plumbing ---------------------------------------------------------------

_DECODER = json.JSONDecoder()


def _first_json_value(raw: str):
    """First JSON array or object embedded in raw text, else None."""
    candidates = [i for i in range(len(raw)) if raw[i] in "[{"]
    for idx in candidates:
        try:
            value, _ = _DECODER.raw_decode(raw, idx)
        except json.JSONDecodeError:
            continue
        if isinstance(value, (list, dict)):
            return value
    return None


def _ask_judge(
    judge: ModelClient,
    metric: str,
    system_prompt: str,
    user_text: str,
    validate: Callable[[object], object],
    meta: dict,
) -> object:
    """One judge call with a single identical re-ask on an invalid reply."""
    last_problem = "no reply"
    for ask_index in (0, 1):
        try:
            response = judge.chat(
                ChatRequest(system_prompt=system_prompt, user_text=user_text),
                meta={**meta, "ask_index": ask_index},
            )
        except EndpointExhausted as exc:
            raise MetricUnavailable(metric, f"judge transport failure: {exc}") from exc
        value = _first_json_value(response.text)
        if value is not None:
            try:
                return validate(value)
            except ValueError as exc:
                last_problem = str(exc)
                continue
        last_problem = "reply contained no JSON value"
    raise MetricUnavailable(metric, last_problem)


def _as_statement_list(value: object) -> list[str]:
    if not isinstance(value, list) or not value:
        raise ValueError("expected a non-empty JSON array of statements")
    out = []
    for item in value:
        if not isinstance(item, str) or not item.strip():
            raise ValueError("statements must be non-empty strings")
        out.append(item.strip())
    return out


def decompose_statements(
    judge: ModelClient, metric: str, text: str, meta: dict
) -> list[str]:
    return _ask_judge(
        judge,
        metric,
        JUDGE_SYSTEM_PROMPTS["statement_decomposition"],
        f"TEXT:\n{text}",
        _as_statement_list,
        {**meta, "purpose": "judge:decompose"},
    )


def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    norm = float(np.linalg.norm(va) * np.linalg.norm(vb))
    if norm == 0.0:
        return 0.0
    return float(np.dot(va, vb) / norm)


# -- the three metrics --------------------------------------------------------------


def score_faithfulness(judge: ModelClient, case: CaptionEvalCase) -> tuple[float, dict]:
    meta = {"image_id": case.image_id}
    statements = decompose_statements(judge, "faithfulness", case.answer, meta)

    def check_verdicts(value: object) -> list[int]:
        if not isinstance(value, list) or len(value) != len(statements):
            raise ValueError(
                f"expected {len(statements)} verdicts, got "
                f"{len(value) if isinstance(value, list) else type(value).__name__}"
            )
        verdicts = []
        for item in value:
            if isinstance(item, bool):
                verdicts.append(int(item))
            elif isinstance(item, int) and item in (0, 1):
                verdicts.append(item)
            else:
                raise ValueError("verdicts must be 0 or 1")
        return verdicts

    verdicts = _ask_judge(
        judge,
        "faithfulness",
        JUDGE_SYSTEM_PROMPTS["faithfulness"],
        f"CONTEXT:\n{case.context}\n\nSTATEMENTS:\n{json.dumps(statements, ensure_ascii=False)}",
        check_verdicts,
        {**meta, "purpose": "judge:faithfulness"},
    )
    score = sum(verdicts) / len(verdicts)
    return score, {"n_statements": len(statements), "n_supported": sum(verdicts)}


def score_relevancy(
    judge: ModelClient,
    embedder: ModelClient,
    case: CaptionEvalCase,
    n_questions: int = 3,
) -> tuple[float, dict]:
    meta = {"image_id": case.image_id}

    def check_questions(value: object) -> list[str]:
        questions = _as_statement_list(value)
        if len(questions) < n_questions:
            raise ValueError(f"expected {n_questions} questions, got {len(questions)}")
        return questions[:n_questions]

    questions = _ask_judge(
        judge,
        "answer_relevancy",
        JUDGE_SYSTEM_PROMPTS["question_generation"].replace("{n}", str(n_questions)),
        f"TEXT:\n{case.answer}",
        check_questions,
        {**meta, "purpose": "judge:questions"},
    )
    try:
        vectors = embedder.embed([case.question] + questions, meta={**meta, "purpose": "embed:relevancy"})
    except EndpointExhausted as exc:
        raise MetricUnavailable("answer_relevancy", f"embedder transport failure: {exc}") from exc
    original, generated = vectors[0], vectors[1:]
    similarities = [_cosine(original, vec) for vec in generated]
    score = float(sum(similarities) / len(similarities))
    return score, {"questions": questions, "similarities": similarities}


def score_correctness(
    judge: ModelClient,
    embedder: ModelClient,
    case: CaptionEvalCase,
    weights: tuple[float, float] = (0.75, 0.25),
) -> tuple[float, dict]:
    meta = {"image_id": case.image_id}

    def check_claims(value: object) -> dict[str, list[str]]:
        if not isinstance(value, dict):
            raise ValueError("expected a JSON object with tp/fp/fn")
        claims = {}
        for key in ("tp", "fp", "fn"):
            bucket = value.get(key)
            if not isinstance(bucket, list) or any(not isinstance(s, str) for s in bucket):
                raise ValueError(f"claim bucket {key!r} must be an array of strings")
            claims[key] = bucket
        return claims

    claims = _ask_judge(
        judge,
        "answer_correctness",
        JUDGE_SYSTEM_PROMPTS["correctness_claims"],
        f"ANSWER:\n{case.answer}\n\nREFERENCE:\n{case.ground_truth}",
        check_claims,
        {**meta, "purpose": "judge:correctness"},
    )
    tp, fp, fn = len(claims["tp"]), len(claims["fp"]), len(claims["fn"])
    denominator = 2 * tp + fp + fn
    claim_f1 = (2 * tp / denominator) if denominator else 0.0
    try:
        answer_vec, reference_vec = embedder.embed(
            [case.answer, case.ground_truth], meta={**meta, "purpose": "embed:correctness"}
        )
    except EndpointExhausted as exc:
        raise MetricUnavailable("answer_correctness", f"embedder transport failure: {exc}") from exc
    semantic = min(1.0, max(0.0, _cosine(answer_vec, reference_vec)))
    w_claim, w_semantic = weights
    score = w_claim * claim_f1 + w_semantic * semantic
    return score, {
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "claim_f1": claim_f1,
        "semantic_similarity": semantic,
    }


# -- batch evaluation ----------------------------------------------------------------


def evaluate_one(
    judge: ModelClient,
    embedder: ModelClient,
    case: CaptionEvalCase,
    options: MetricOptions = MetricOptions(),
) -> CaptionScores:
    scores = CaptionScores(image_id=case.image_id, dataset=case.dataset)
    try:
        scores.faithfulness, diag = score_faithfulness(judge, case)
        scores.diagnostics.update(diag)
    except MetricUnavailable as exc:
        scores.unavailable["faithfulness"] = exc.reason
    try:
        scores.answer_relevancy, diag = score_relevancy(
            judge, embedder, case, options.n_questions
        )
        scores.diagnostics.update(diag)
    except MetricUnavailable as exc:
        scores.unavailable["answer_relevancy"] = exc.reason
    try:
        scores.answer_correctness, diag = score_correctness(
            judge, embedder, case, options.correctness_weights
        )
        scores.diagnostics.update(diag)
    except MetricUnavailable as exc:
        scores.unavailable["answer_correctness"] = exc.reason
    return scores


def evaluate_captions(
    judge: ModelClient,
    embedder: ModelClient,
    cases: Sequence[CaptionEvalCase],
    options: MetricOptions = MetricOptions(),
) -> tuple[list[CaptionScores], dict]:
    """Score every case; a metric the judge cannot deliver for one case is
    excluded from that metric's mean and counted, never fatal. Returns scores
    sorted by image_id plus an aggregation summary (overall and per dataset).
    """
    if not cases:
        raise InputError("evaluate_captions needs at least one case")
    ids = [c.image_id for c in cases]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate image_ids in evaluation cases")
    with concurrent.futures.ThreadPoolExecutor(max_workers=options.max_workers) as executor:
        results = list(executor.map(lambda c: evaluate_one(judge, embedder, c, options), cases))
    results.sort(key=lambda s: s.image_id)
    return results, summarize_scores(results)


def summarize_scores(scores: Sequence[CaptionScores]) -> dict:
    def aggregate(group: Sequence[CaptionScores]) -> dict:
        block: dict = {"n_cases": len(group)}
        for metric in METRICS:
            values = [getattr(s, metric) for s in group if getattr(s, metric) is not None]
            block[metric] = {
                "mean": (float(np.mean(values)) if values else None),
                "n_scored": len(values),
                "n_unavailable": sum(1 for s in group if metric in s.unavailable),
            }
        return block

    datasets = sorted({s.dataset for s in scores})
    return {
        "overall": aggregate(scores),
        "per_dataset": {d: aggregate([s for s in scores if s.dataset == d]) for d in datasets},
    }


def write_caption_scores(scores: Sequence[CaptionScores], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for score in sorted(scores, key=lambda s: s.image_id):
            handle.write(json.dumps(score.to_dict(), ensure_ascii=False) + "\n")


def read_caption_scores(path: Path) -> list[CaptionScores]:
    with open(Path(path), "r", encoding="utf-8") as handle:
        return [CaptionScores.from_dict(json.loads(line)) for line in handle if line.strip()]
