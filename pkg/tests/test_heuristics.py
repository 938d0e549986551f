"""Tests for the LLM output parsers."""

import pytest

from app.pipeline.heuristics import (
    UNPARSED,
    extract_choice,
    parse_mcq_blocks,
    parse_qa_pairs,
    parse_scores,
    parse_verdict,
    word_count,
)

OPTIONS = {"A": "Rule of thirds", "B": "Leading lines", "C": "Symmetry", "D": "Negative space"}


@pytest.mark.parametrize(
    "text, verdict",
    [
        ("YES", "YES"),
        ("yes, it is informative", "YES"),
        ("  **No**.", "NO"),
        ("Maybe", None),
        ("", None),
        ("Yesterday I saw", None),
        ("The answer is YES", None),
    ],
)
def test_parse_verdict(text, verdict):
    assert parse_verdict(text) == verdict


def test_word_count():
    assert word_count("  soft   light\nand shadow ") == 4
    assert word_count("") == 0


def test_parse_qa_pairs():
    text = "Q: How is the light?\nA: Soft and\n warm.\n\nQ: And the framing?\nA: Tight.\n"
    assert parse_qa_pairs(text) == [("How is the light?", "Soft and warm."), ("And the framing?", "Tight.")]
    assert parse_qa_pairs("no pairs here") == []
    assert parse_qa_pairs("Q: only a question") == []


def test_parse_mcq_blocks():
    text = (
        "Question 1: Where does the eye go first?\n"
        "A) The lamp\n"
        "B) The window\n"
        "C) The chair\n"
        "D) The floor\n"
        "Answer: B\n"
        "Topics: composition, lighting\n"
        "\n"
        "Q: Missing key\n"
        "A) one\n"
        "B) two\n"
        "\n"
        "Q. What tone dominates?\n"
        "(A) Warm\n"
        "B. Cool\n"
        "Answer: (A)\n"
    )
    blocks = parse_mcq_blocks(text)
    assert [b.question for b in blocks] == ["Where does the eye go first?", "What tone dominates?"]
    first, second = blocks
    assert first.options == {"A": "The lamp", "B": "The window", "C": "The chair", "D": "The floor"}
    assert first.answer == "B"
    assert first.topics == ["composition", "lighting"]
    assert second.options == {"A": "Warm", "B": "Cool"}
    assert second.answer == "A"
    assert second.topics == []


def test_parse_mcq_blocks_drops_gapped_options():
    text = "Q: Gap?\nA) one\nC) three\nAnswer: A\n"
    assert parse_mcq_blocks(text) == []


@pytest.mark.parametrize(
    "text, scores",
    [
        ("8, 9, 7", (8, 9, 7)),
        ("Relevance 10 / dependency 1 / expertise 5", (10, 1, 5)),
        ("11, 9, 7", None),
        ("8, 9", None),
        ("8, 9, 7, 6", None),
        ("8.5, 9, 7", None),
        ("0, 9, 7", None),
        ("", None),
    ],
)
def test_parse_scores(text, scores):
    assert parse_scores(text) == scores


@pytest.mark.parametrize(
    "text, choice",
    [
        ("B", "B"),
        ("(C)", "C"),
        ("D. Negative space", "D"),
        ("A) because the subject sits on a third", "A"),
        ("C: symmetry", "C"),
        ("  \nB\n", "B"),
        ("I think the answer is: C", "C"),
        ("Answer: (D)", "D"),
        ("My pick: leading lines, clearly.", "B"),
        ("Definitely SYMMETRY", "C"),
        ("E", UNPARSED),
        ("Answer: E", UNPARSED),
        ("Either symmetry or leading lines", UNPARSED),
        ("I cannot tell", UNPARSED),
        ("", UNPARSED),
        ("A lovely photo", UNPARSED),
    ],
)
def test_extract_choice(text, choice):
    assert extract_choice(text, OPTIONS) == choice


def test_extract_choice_prefers_leading_letter_over_answer_line():
    assert extract_choice("B.\nAnswer: C", OPTIONS) == "B"
