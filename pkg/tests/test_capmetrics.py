"""Caption metric tests: frozen arithmetic fixtures through scripted judges,
plus behavioural coverage via the deterministic mock judge/embedder."""

from __future__ import annotations

import httpx
import pytest

from medcap.capmetrics import (
    CaptionEvalCase,
    CaptionScores,
    MetricOptions,
    evaluate_captions,
    evaluate_one,
    read_caption_scores,
    score_correctness,
    score_faithfulness,
    score_relevancy,
    summarize_scores,
    write_caption_scores,
    _cosine,
)
from medcap.errors import ConfigError, InputError, MetricUnavailable
from medcap.mocks import ScriptedTransport, scripted_chat
from medcap.modelio import EndpointConfig, ModelClient


class FakeTime:
    def __init__(self) -> None:
        self.now = 0.0

    def clock(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.now += seconds


def make_client(transport, name="scripted") -> ModelClient:
    fake = FakeTime()
    return ModelClient(
        EndpointConfig(name=name, base_url="http://t.invalid/v1", model_name="m", max_retries=1),
        transport=transport,
        clock=fake.clock,
        sleep=fake.sleep,
    )


def mock_client(base_url: str) -> ModelClient:
    fake = FakeTime()
    return ModelClient(
        EndpointConfig(name=base_url, base_url=base_url, model_name="m", max_retries=1),
        clock=fake.clock,
        sleep=fake.sleep,
    )


def embeddings_response(vectors) -> httpx.Response:
    data = [
        {"object": "embedding", "index": i, "embedding": list(v)} for i, v in enumerate(vectors)
    ]
    return httpx.Response(200, json={"object": "list", "data": data, "model": "m"})


def case(answer="The lesion is dark. The border is irregular.", **overrides) -> CaptionEvalCase:
    defaults = dict(
        image_id="img-1",
        dataset="dermatology",
        question="Describe the image and classify it.",
        answer=answer,
        context="The lesion is dark. The border is irregular.",
    )
    defaults.update(overrides)
    return CaptionEvalCase(**defaults)


class TestCaseValidation:
    def test_ground_truth_defaults_to_context(self):
        c = case()
        assert c.ground_truth == c.context

    def test_ground_truth_must_equal_context(self):
        with pytest.raises(InputError):
            case(ground_truth="something else entirely")

    def test_empty_fields_rejected(self):
        with pytest.raises(InputError):
            case(answer="   ")

    def test_options_validated(self):
        with pytest.raises(ConfigError):
            MetricOptions(n_questions=0)
        with pytest.raises(ConfigError):
            MetricOptions(correctness_weights=(0.9, 0.2))
        with pytest.raises(ConfigError):
            MetricOptions(correctness_weights=(-0.25, 1.25))


class TestCosine:
    def test_orthogonal_and_parallel(self):
        assert _cosine([1, 0], [0, 1]) == pytest.approx(0.0)
        assert _cosine([1, 0], [2, 0]) == pytest.approx(1.0)
        assert _cosine([1, 0], [-3, 0]) == pytest.approx(-1.0)

    def test_zero_vector_scores_zero(self):
        assert _cosine([0, 0], [1, 0]) == 0.0


class TestFaithfulness:
    def test_frozen_two_of_three_fixture(self):
        judge = make_client(
            ScriptedTransport(
                [
                    scripted_chat('["The lesion is dark.", "The border is irregular.", "There is bleeding."]'),
                    scripted_chat("[1, 1, 0]"),
                ]
            )
        )
        score, diagnostics = score_faithfulness(judge, case())
        assert score == pytest.approx(2.0 / 3.0)
        assert diagnostics == {"n_statements": 3, "n_supported": 2}
        judge.close()

    def test_identity_answer_scores_one_under_mock_judge(self):
        with mock_client("mock://judge") as judge:
            score, _ = score_faithfulness(judge, case())
        assert score == 1.0

    def test_fabricated_answer_scores_zero_under_mock_judge(self):
        with mock_client("mock://judge") as judge:
            score, _ = score_faithfulness(
                judge, case(answer="A large mass occupies the frame. Bone is fractured.")
            )
        assert score == 0.0

    def test_reask_recovers_from_prose_reply(self):
        transport = ScriptedTransport(
            [
                scripted_chat("I could not produce JSON, sorry."),
                scripted_chat('["The lesion is dark."]'),
                scripted_chat("[1]"),
            ]
        )
        judge = make_client(transport)
        score, _ = score_faithfulness(judge, case())
        assert score == 1.0
        assert len(transport.requests) == 3
        judge.close()

    def test_persistent_garbage_becomes_unavailable(self):
        judge = make_client(
            ScriptedTransport([scripted_chat("nope"), scripted_chat("still nope")])
        )
        with pytest.raises(MetricUnavailable) as excinfo:
            score_faithfulness(judge, case())
        assert excinfo.value.metric == "faithfulness"
        judge.close()

    def test_verdict_count_mismatch_becomes_unavailable(self):
        judge = make_client(
            ScriptedTransport(
                [
                    scripted_chat('["a", "b", "c"]'),
                    scripted_chat("[1, 1]"),
                    scripted_chat("[1, 1]"),
                ]
            )
        )
        with pytest.raises(MetricUnavailable) as excinfo:
            score_faithfulness(judge, case())
        assert "3" in excinfo.value.reason
        judge.close()

    def test_boolean_verdicts_accepted(self):
        judge = make_client(
            ScriptedTransport([scripted_chat('["a", "b"]'), scripted_chat("[true, false]")])
        )
        score, _ = score_faithfulness(judge, case())
        assert score == pytest.approx(0.5)
        judge.close()


class TestRelevancy:
    def test_mean_cosine_not_clamped(self):
        judge = make_client(ScriptedTransport([scripted_chat('["q1?", "q2?", "q3?"]')]))
        embedder = make_client(
            ScriptedTransport(
                [embeddings_response([[1, 0], [1, 0], [0, 1], [-1, 0]])]
            )
        )
        score, diagnostics = score_relevancy(judge, embedder, case(), n_questions=3)
        assert score == pytest.approx((1.0 + 0.0 - 1.0) / 3.0)
        assert diagnostics["similarities"] == pytest.approx([1.0, 0.0, -1.0])
        judge.close()
        embedder.close()

    def test_fully_negative_mean_preserved(self):
        judge = make_client(ScriptedTransport([scripted_chat('["q1?", "q2?"]')]))
        embedder = make_client(
            ScriptedTransport([embeddings_response([[1, 0], [-1, 0], [-2, 0]])])
        )
        score, _ = score_relevancy(judge, embedder, case(), n_questions=2)
        assert score == pytest.approx(-1.0)
        judge.close()
        embedder.close()

    def test_surplus_questions_truncated(self):
        judge = make_client(ScriptedTransport([scripted_chat('["a?", "b?", "c?", "d?"]')]))
        embedder = make_client(
            ScriptedTransport([embeddings_response([[1, 0], [1, 0], [1, 0]])])
        )
        score, diagnostics = score_relevancy(judge, embedder, case(), n_questions=2)
        assert diagnostics["questions"] == ["a?", "b?"]
        assert score == pytest.approx(1.0)
        judge.close()
        embedder.close()

    def test_too_few_questions_unavailable(self):
        judge = make_client(
            ScriptedTransport([scripted_chat('["only one?"]'), scripted_chat('["only one?"]')])
        )
        embedder = make_client(ScriptedTransport([]))
        with pytest.raises(MetricUnavailable):
            score_relevancy(judge, embedder, case(), n_questions=3)
        judge.close()
        embedder.close()

    def test_mock_judge_and_embedder_end_to_end(self):
        with mock_client("mock://judge") as judge, mock_client("mock://embedder") as embedder:
            score, diagnostics = score_relevancy(judge, embedder, case(), n_questions=3)
        assert -1.0 <= score <= 1.0
        assert len(diagnostics["questions"]) == 3


class TestCorrectness:
    def test_frozen_blend_fixture(self):
        judge = make_client(
            ScriptedTransport(
                [scripted_chat('{"tp": ["k1", "k2"], "fp": ["w1"], "fn": ["m1"]}')]
            )
        )
        embedder = make_client(
            ScriptedTransport([embeddings_response([[1.0, 0.0], [0.8, 0.6]])])
        )
        score, diagnostics = score_correctness(judge, embedder, case(), weights=(0.75, 0.25))
        assert diagnostics["claim_f1"] == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))
        assert diagnostics["semantic_similarity"] == pytest.approx(0.8)
        assert score == pytest.approx(0.70)
        judge.close()
        embedder.close()

    def test_negative_similarity_clamped_to_zero(self):
        judge = make_client(
            ScriptedTransport([scripted_chat('{"tp": [], "fp": ["a"], "fn": []}')])
        )
        embedder = make_client(
            ScriptedTransport([embeddings_response([[1.0, 0.0], [-1.0, 0.0]])])
        )
        score, diagnostics = score_correctness(judge, embedder, case())
        assert diagnostics["semantic_similarity"] == 0.0
        assert score == 0.0
        judge.close()
        embedder.close()

    def test_empty_claim_buckets_mean_zero_f1(self):
        judge = make_client(
            ScriptedTransport([scripted_chat('{"tp": [], "fp": [], "fn": []}')])
        )
        embedder = make_client(
            ScriptedTransport([embeddings_response([[1.0, 0.0], [1.0, 0.0]])])
        )
        score, diagnostics = score_correctness(judge, embedder, case())
        assert diagnostics["claim_f1"] == 0.0
        assert score == pytest.approx(0.25)
        judge.close()
        embedder.close()

    def test_identity_answer_perfect_under_mocks(self):
        with mock_client("mock://judge") as judge, mock_client("mock://embedder") as embedder:
            score, diagnostics = score_correctness(judge, embedder, case())
        assert diagnostics["fp"] == 0
        assert diagnostics["fn"] == 0
        assert score == pytest.approx(1.0)

    def test_malformed_claims_object_unavailable(self):
        judge = make_client(
            ScriptedTransport(
                [scripted_chat('{"tp": "not a list"}'), scripted_chat('{"tp": "not a list"}')]
            )
        )
        embedder = make_client(ScriptedTransport([]))
        with pytest.raises(MetricUnavailable) as excinfo:
            score_correctness(judge, embedder, case())
        assert excinfo.value.metric == "answer_correctness"
        judge.close()
        embedder.close()


class TestEvaluateBatch:
    def test_one_bad_metric_recorded_not_fatal(self):
        judge = make_client(
            ScriptedTransport(
                [
                    scripted_chat("garbage"),  # decompose ask 0
                    scripted_chat("garbage"),  # decompose ask 1 -> faithfulness unavailable
                    scripted_chat('["q1?", "q2?", "q3?"]'),
                    scripted_chat('{"tp": ["a"], "fp": [], "fn": []}'),
                ]
            )
        )
        embedder = make_client(
            ScriptedTransport(
                [
                    embeddings_response([[1, 0], [1, 0], [1, 0], [1, 0]]),
                    embeddings_response([[1, 0], [1, 0]]),
                ]
            )
        )
        scores = evaluate_one(judge, embedder, case())
        assert scores.faithfulness is None
        assert "faithfulness" in scores.unavailable
        assert scores.answer_relevancy == pytest.approx(1.0)
        assert scores.answer_correctness == pytest.approx(1.0)
        judge.close()
        embedder.close()

    def test_batch_sorted_and_summarized(self):
        cases = [
            case(image_id="b", dataset="fundus", answer="The disc is pale."),
            case(image_id="a", dataset="fundus"),
            case(image_id="c", dataset="dermatology"),
        ]
        with mock_client("mock://judge") as judge, mock_client("mock://embedder") as embedder:
            scores, summary = evaluate_captions(judge, embedder, cases, MetricOptions(max_workers=2))
        assert [s.image_id for s in scores] == ["a", "b", "c"]
        assert summary["overall"]["n_cases"] == 3
        assert summary["overall"]["faithfulness"]["n_scored"] == 3
        assert set(summary["per_dataset"]) == {"dermatology", "fundus"}
        identity = [s for s in scores if s.image_id in ("a", "c")]
        assert all(s.faithfulness == 1.0 for s in identity)

    def test_summary_excludes_unavailable_from_mean(self):
        scores = [
            CaptionScores(image_id="a", dataset="d", faithfulness=1.0),
            CaptionScores(
                image_id="b",
                dataset="d",
                faithfulness=None,
                unavailable={"faithfulness": "judge gave up"},
            ),
            CaptionScores(image_id="c", dataset="d", faithfulness=0.5),
        ]
        summary = summarize_scores(scores)
        block = summary["overall"]["faithfulness"]
        assert block["mean"] == pytest.approx(0.75)
        assert block["n_scored"] == 2
        assert block["n_unavailable"] == 1

    def test_duplicate_ids_rejected(self):
        with mock_client("mock://judge") as judge, mock_client("mock://embedder") as embedder:
            with pytest.raises(InputError):
                evaluate_captions(judge, embedder, [case(), case()])

    def test_empty_cases_rejected(self):
        with mock_client("mock://judge") as judge, mock_client("mock://embedder") as embedder:
            with pytest.raises(InputError):
                evaluate_captions(judge, embedder, [])

    def test_scores_file_round_trip(self, tmp_path):
        with mock_client("mock://judge") as judge, mock_client("mock://embedder") as embedder:
            scores, _ = evaluate_captions(
                judge, embedder, [case(image_id="z"), case(image_id="y")]
            )
        path = tmp_path / "scores.ndjson"
        write_caption_scores(scores, path)
        loaded = read_caption_scores(path)
        assert [s.to_dict() for s in loaded] == [s.to_dict() for s in scores]
        assert [s.image_id for s in loaded] == ["y", "z"]
