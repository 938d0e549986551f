"""Tests for the critique corpus pipeline."""

import pytest

from app.core.storage import read_jsonl
from app.pipeline.critique import (
    build_critique_corpus,
    corpus_stats,
    filter_critique,
    generate_conversations,
    generate_vqa,
    summarize_and_integrate,
)
from app.pipeline.llm import LlmGateway, RetryPolicy, ResponseCache, ScriptedLlmClient
from app.pipeline.records import CommentThread, CritiqueRecord, QaPair
from app.pipeline.settings import CritiqueSettings

PAIR = "Q: How is the light?\nA: Soft and even."
MCQ = "Q: Which light?\nA) Hard\nB) Soft\nC) Mixed\nD) None\nAnswer: B\nTopics: lighting\n\n"


def respond(*rules):
    """Responder answering the first (substring, text) rule found in the prompt."""

    def responder(request):
        for needle, text in rules:
            if needle in request.prompt:
                return text
        return None

    return responder


def _gateway(fixtures_dir, cache=None):
    client = ScriptedLlmClient.from_file(fixtures_dir / "llm_script.yaml")
    policy = RetryPolicy(max_attempts=2, backoff_base=0.0, backoff_max=0.0)
    return LlmGateway(client, cache=cache, policy=policy, parallelism=4, sleep=lambda _: None)


def _threads(fixtures_dir):
    return read_jsonl(fixtures_dir / "flower_thread.jsonl", CommentThread)


def _accepted(text="Soft light and a tidy frame.", image_id="p1"):
    return CritiqueRecord(image_id=image_id, critique=text, source_comment_count=2, accepted=True)


def test_corpus_matches_golden_critique(fixtures_dir, tmp_path):
    corpus = build_critique_corpus(_threads(fixtures_dir), _gateway(fixtures_dir), out_dir=tmp_path)
    written = (tmp_path / "critiques.jsonl").read_bytes()
    assert written == (fixtures_dir / "golden_critiques.jsonl").read_bytes()
    assert len(corpus.vqa_items) == 5
    assert [item.id for item in corpus.vqa_items] == [f"flower-001-vqa-{i}" for i in range(5)]
    assert len(corpus.pairs) == 7
    assert all(pair.accepted for pair in corpus.pairs)
    assert {pair.aspect for pair in corpus.pairs} == set(CritiqueSettings().aspects)
    assert len(read_jsonl(tmp_path / "qa.jsonl", QaPair)) == 7


def test_critique_keeps_comment_count(scripted_gateway):
    thread = CommentThread(image_id="p1", comments=["nice light", "tilted horizon", "good color"])
    gateway = scripted_gateway(
        responder=respond(("List the aesthetic themes", "Lighting: nice"), ("cohesive photo critique", "Verbatim."))
    )
    record = summarize_and_integrate(thread, gateway)
    assert record.critique == "Verbatim."
    assert record.source_comment_count == 3
    assert record.accepted is None
    assert len(gateway.client.calls) == 2


def test_thread_without_comments_is_rejected_without_calls(scripted_gateway):
    gateway = scripted_gateway(default="unused")
    record = summarize_and_integrate(CommentThread(image_id="empty"), gateway)
    assert record.accepted is False
    assert record.reject_reason == "no_comments"
    assert gateway.client.calls == []


def test_empty_generation_is_rejected(scripted_gateway):
    gateway = scripted_gateway(responder=respond(("List the aesthetic themes", "Lighting: nice")), default="   ")
    record = summarize_and_integrate(CommentThread(image_id="p1", comments=["nice"]), gateway)
    assert record.accepted is False
    assert record.reject_reason == "empty_generation"


@pytest.mark.parametrize(
    "verdict, accepted, reason",
    [
        ("YES", True, None),
        ("NO", False, "low_information"),
        ("maybe?", False, "unparseable_verdict"),
    ],
)
def test_filter_critique_verdicts(scripted_gateway, verdict, accepted, reason):
    gateway = scripted_gateway(default=verdict)
    record = CritiqueRecord(image_id="p1", critique="Soft light.", source_comment_count=1)
    result = filter_critique(record, gateway)
    assert result.accepted is accepted
    assert result.reject_reason == reason
    assert gateway.client.calls[0].model_tag == "small"


def test_rejected_record_passes_filter_unchanged(scripted_gateway):
    gateway = scripted_gateway(default="YES")
    record = CritiqueRecord(image_id="p1", accepted=False, reject_reason="no_comments")
    assert filter_critique(record, gateway) is record
    assert gateway.client.calls == []


def test_one_pair_per_aspect(scripted_gateway):
    gateway = scripted_gateway(responder=respond(("Is the following question", "YES")), default=PAIR)
    pairs = generate_conversations(_accepted(), gateway)
    assert len(pairs) == 7
    assert [p.aspect for p in pairs] == list(CritiqueSettings().aspects)


def test_malformed_aspect_is_dropped(scripted_gateway, log_records):
    gateway = scripted_gateway(
        responder=respond(
            ("Is the following question", "YES"),
            ("about the emotion of this photo", "I would rather not."),
        ),
        default=PAIR,
    )
    pairs = generate_conversations(_accepted(), gateway)
    assert len(pairs) == 6
    assert "emotion" not in {p.aspect for p in pairs}
    dropped = [r for r in log_records.records if "Dropping" in r.getMessage()]
    assert len(dropped) == 1


def test_pairs_per_critique_follow_responses(scripted_gateway):
    settings = CritiqueSettings(aspects=["lighting", "composition", "color", "emotion", "technique"])
    lighting = "\n\n".join([PAIR, "Q: Where is the key light?\nA: Camera left.", "Q: Any rim light?\nA: No."])
    gateway = scripted_gateway(
        responder=respond(("Is the following question", "YES"), ("about the lighting of", lighting)),
        default=PAIR,
    )
    pairs = [p for i in range(3) for p in generate_conversations(_accepted(image_id=f"p{i}"), gateway, settings)]
    assert len(pairs) == 3 * 7
    assert sum(p.aspect == "lighting" for p in pairs) == 9


def test_rejected_pair_is_kept_with_reason(scripted_gateway):
    gateway = scripted_gateway(responder=respond(("Is the following question", "NO")), default=PAIR)
    pairs = generate_conversations(_accepted(), gateway, CritiqueSettings(aspects=["lighting"]))
    assert len(pairs) == 1
    assert pairs[0].accepted is False
    assert pairs[0].reject_reason == "low_information"


def test_conversations_need_accepted_record(scripted_gateway):
    with pytest.raises(ValueError):
        generate_conversations(CritiqueRecord(image_id="p1", critique="x"), scripted_gateway(default=PAIR))
    with pytest.raises(ValueError):
        generate_vqa(CritiqueRecord(image_id="p1", critique="x"), scripted_gateway(default=MCQ))


def test_vqa_items_and_count_mismatch(scripted_gateway):
    result = generate_vqa(_accepted(), scripted_gateway(default=MCQ * 5))
    assert result.flag is None
    assert [item.id for item in result.items] == [f"p1-vqa-{i}" for i in range(5)]
    assert all(item.answer == "B" and item.topics == ["lighting"] for item in result.items)

    short = generate_vqa(_accepted(), scripted_gateway(default=MCQ * 4))
    assert short.flag == "mcq_count_mismatch"
    assert short.items == []


def test_corpus_stats_single_entry():
    stats = corpus_stats([" ".join(["word"] * 65)])
    assert stats.count == 1
    assert stats.mean_length == 65
    assert [(b.lower, b.upper, b.count) for b in stats.length_histogram] == [(60, 70, 1)]
    assert stats.category_histogram == {}


def test_corpus_stats_buckets_and_categories():
    entries = [
        CritiqueRecord(image_id="a", critique=" ".join(["w"] * 40), accepted=True, category="Flowers"),
        CritiqueRecord(image_id="b", critique=" ".join(["w"] * 90), accepted=True),
    ]
    stats = corpus_stats(entries)
    assert stats.mean_length == 65
    counts = {b.lower: b.count for b in stats.length_histogram}
    assert counts[40] == 1 and counts[90] == 1
    assert sum(counts.values()) == 2
    assert [b.lower for b in stats.length_histogram] == list(range(40, 100, 10))
    assert stats.category_histogram == {"Flowers": 1, "uncategorized": 1}
    with pytest.raises(ValueError):
        corpus_stats([])


def test_prompts_never_carry_the_image(fixtures_dir):
    gateway = _gateway(fixtures_dir)
    build_critique_corpus(_threads(fixtures_dir), gateway)
    assert gateway.client.calls
    for request in gateway.client.calls:
        assert "flower-001.jpg" not in request.prompt
        assert "photos/" not in request.prompt


def test_warm_cache_rerun_is_identical(fixtures_dir, tmp_path):
    build_critique_corpus(
        _threads(fixtures_dir), _gateway(fixtures_dir, ResponseCache(tmp_path / "cache")), out_dir=tmp_path / "cold"
    )
    warm = _gateway(fixtures_dir, ResponseCache(tmp_path / "cache"))
    build_critique_corpus(_threads(fixtures_dir), warm, out_dir=tmp_path / "warm")
    assert warm.client.calls == []
    for name in ("critiques.jsonl", "qa.jsonl", "vqa.jsonl"):
        assert (tmp_path / "warm" / name).read_bytes() == (tmp_path / "cold" / name).read_bytes()


def test_duplicate_image_ids_are_rejected(scripted_gateway):
    threads = [CommentThread(image_id="p1", comments=["a"]), CommentThread(image_id="p1", comments=["b"])]
    with pytest.raises(ValueError):
        build_critique_corpus(threads, scripted_gateway(default="YES"))
