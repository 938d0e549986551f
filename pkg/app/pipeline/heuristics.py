"""Parsers for LLM output and answer text.

All functions are pure and never raise on malformed text: they return None,
an empty list or ``UNPARSED`` instead, and the calling stage decides what a
parse failure means.
"""

import re
from dataclasses import dataclass, field

UNPARSED = "UNPARSED"

_LEADING_WORD = re.compile(r"^[\W_]*([A-Za-z]+)")
_PAREN_LETTER = re.compile(r"^\(([A-Z])\)")
_PUNCT_LETTER = re.compile(r"^([A-Z])[.):](?:\s|$)")
_BARE_LETTER = re.compile(r"^([A-Z])$")
_ANSWER_LETTER = re.compile(r"(?i:answer)\s*(?:(?i:is))?\s*:\s*\(?([A-Z])\b")
_QA_PAIR = re.compile(r"^\s*Q:\s*(.+?)\s*^\s*A:\s*(.+?)\s*(?=^\s*Q:|\Z)", re.MULTILINE | re.DOTALL)
_OPTION_LINE = re.compile(r"^\(?([A-F])[).:]\s*(.+?)\s*$")
_ANSWER_LINE = re.compile(r"^(?i:answer)\s*:\s*\(?([A-F])\b")
_TOPICS_LINE = re.compile(r"^(?i:topics?)\s*:\s*(.+?)\s*$")
_QUESTION_LINE = re.compile(r"^(?i:q(?:uestion)?)\s*\d*\s*[:.]\s*(.+?)\s*$")
_INTEGER = re.compile(r"(?<![\w.])-?\d+(?![\w.])")


def word_count(text: str) -> int:
    """Number of whitespace-separated tokens."""
    return len(text.split())


def parse_verdict(text: str) -> str | None:
    """Read a strict YES/NO verdict from the first word of ``text``.

    Leading whitespace and punctuation are skipped; the first alphabetic
    token must be ``yes`` or ``no`` (any case).

    Args:
        text: Raw model output

    Returns:
        "YES", "NO", or None when the first word is anything else
    """
    match = _LEADING_WORD.match(text)
    if not match:
        return None
    token = match.group(1).upper()
    return token if token in ("YES", "NO") else None


def parse_qa_pairs(text: str) -> list[tuple[str, str]]:
    """Extract ``Q: ... / A: ...`` pairs in order.

    Returns:
        (question, answer) tuples with both parts nonempty
    """
    pairs = []
    for match in _QA_PAIR.finditer(text):
        question = " ".join(match.group(1).split())
        answer = " ".join(match.group(2).split())
        if question and answer:
            pairs.append((question, answer))
    return pairs


@dataclass
class ParsedMcq:
    """One multiple-choice question read from generation output."""
    question: str
    options: dict[str, str] = field(default_factory=dict)
    answer: str | None = None
    topics: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        letters = sorted(self.options)
        contiguous = letters == [chr(ord("A") + i) for i in range(len(letters))]
        return bool(self.question) and len(self.options) >= 2 and contiguous and self.answer in self.options


def parse_mcq_blocks(text: str) -> list[ParsedMcq]:
    """Parse MCQ blocks of the form::

        Q: <question>
        A) <option>
        B) <option>
        C) <option>
        D) <option>
        Answer: <letter>
        Topics: <topic>, <topic>

    Incomplete blocks (missing question, options or a valid answer key) are
    dropped.

    Args:
        text: Raw model output

    Returns:
        Complete blocks in order of appearance
    """
    blocks: list[ParsedMcq] = []
    current: ParsedMcq | None = None
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line:
            continue
        question = _QUESTION_LINE.match(line)
        if question:
            if current is not None:
                blocks.append(current)
            current = ParsedMcq(question=question.group(1))
            continue
        if current is None:
            continue
        answer = _ANSWER_LINE.match(line)
        if answer:
            current.answer = answer.group(1)
            continue
        topics = _TOPICS_LINE.match(line)
        if topics:
            current.topics = [t.strip() for t in topics.group(1).split(",") if t.strip()]
            continue
        option = _OPTION_LINE.match(line)
        if option and option.group(1) not in current.options:
            current.options[option.group(1)] = option.group(2)
    if current is not None:
        blocks.append(current)
    return [block for block in blocks if block.complete]


def parse_scores(text: str) -> tuple[int, int, int] | None:
    """Read exactly three integer scores in 1-10.

    Returns:
        (relevance, visual_dependency, expertise) or None when the text holds
        a different number of integers or any is out of range
    """
    values = [int(v) for v in _INTEGER.findall(text)]
    if len(values) != 3 or any(not 1 <= v <= 10 for v in values):
        return None
    return values[0], values[1], values[2]


def extract_choice(text: str, options: dict[str, str]) -> str:
    """Map a free-form answer to an option letter.

    Precedence:
        1. leading letter forms "(A)", "A.", "A)", "A:" or a bare "A" line
        2. "Answer: A" anywhere in the text
        3. the unique option whose text occurs in the answer (case-insensitive)

    Args:
        text: Model answer
        options: Letter -> option text

    Returns:
        The option letter, or UNPARSED
    """
    stripped = text.strip()
    first_line = stripped.splitlines()[0].strip() if stripped else ""

    for pattern in (_PAREN_LETTER, _PUNCT_LETTER, _BARE_LETTER):
        match = pattern.match(first_line)
        if match and match.group(1) in options:
            return match.group(1)

    for match in _ANSWER_LETTER.finditer(stripped):
        if match.group(1) in options:
            return match.group(1)

    lowered = " ".join(stripped.lower().split())
    hits = [
        letter
        for letter, option_text in options.items()
        if option_text.strip() and " ".join(option_text.lower().split()) in lowered
    ]
    if len(hits) == 1:
        return hits[0]
    return UNPARSED
