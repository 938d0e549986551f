"""Persisted records of the critique, bench and evaluation pipelines.

Every model here is written as one JSON object per line (see
``app.core.storage.write_jsonl``) and validated again when read back.
"""

from __future__ import annotations

import string
from typing import Any, Literal

from pydantic import BaseModel, Field, computed_field, field_validator, model_validator

Aspect = Literal[
    "lighting",
    "composition",
    "color",
    "emotion",
    "narrative",
    "technique",
    "post-processing",
    "other",
]

DEFAULT_ASPECTS: tuple[str, ...] = (
    "lighting",
    "composition",
    "color",
    "emotion",
    "narrative",
    "technique",
    "post-processing",
)

FilterStage = Literal["visual_dependency", "scoring", "topk"]

# Stage order every item's filter_log follows
STAGE_ORDER: tuple[str, ...] = ("visual_dependency", "scoring", "topk")


class CommentThread(BaseModel):
    """One photo and its forum comments.

    Attributes:
        image_id: Unique id within a corpus
        image_path: Optional path of the photo (never sent to an LLM)
        title: Optional photo title
        comments: Raw user comments
        category: Optional photo category (used for corpus statistics)
    """
    image_id: str = Field(min_length=1)
    image_path: str | None = None
    title: str | None = None
    comments: list[str] = Field(default_factory=list)
    category: str | None = None


class CritiqueRecord(BaseModel):
    """A unified critique distilled from one thread.

    ``accepted`` is None until the informativeness filter has run.
    """
    image_id: str
    critique: str = ""
    source_comment_count: int = Field(default=0, ge=0)
    accepted: bool | None = None
    reject_reason: str | None = None
    category: str | None = None

    @model_validator(mode="after")
    def _check_reason(self) -> "CritiqueRecord":
        if self.accepted is False and not self.reject_reason:
            raise ValueError(f"Rejected critique {self.image_id} needs a reject_reason")
        return self


class QaPair(BaseModel):
    """One aspect-specific conversation turn derived from a critique."""
    image_id: str
    aspect: Aspect
    question: str
    answer: str
    accepted: bool
    reject_reason: str | None = None


class FilterStageResult(BaseModel):
    """Outcome of one bench filter stage for one item."""
    stage: FilterStage
    passed: bool
    detail: str = ""


class McqScores(BaseModel):
    """Three-axis item score, each an integer 1-10."""
    relevance: int = Field(ge=1, le=10)
    visual_dependency: int = Field(ge=1, le=10)
    expertise: int = Field(ge=1, le=10)

    @property
    def mean(self) -> float:
        return (self.relevance + self.visual_dependency + self.expertise) / 3.0


class McqItem(BaseModel):
    """A multiple-choice question about one photo.

    Attributes:
        id: Unique item id
        image_id: Photo the question is about
        question: Question text
        options: Letter -> option text; letters contiguous from "A", 2-6 options
        answer: Key letter, one of ``options``
        topics: Topic tags from the generation prompt
        scores: Three-axis scores once scored
        filter_log: Stage outcomes in STAGE_ORDER
        flags: Free-form problem markers
    """
    id: str
    image_id: str
    question: str
    options: dict[str, str]
    answer: str
    topics: list[str] = Field(default_factory=list)
    scores: McqScores | None = None
    filter_log: list[FilterStageResult] = Field(default_factory=list)
    flags: list[str] = Field(default_factory=list)

    @field_validator("options")
    @classmethod
    def _check_options(cls, options: dict[str, str]) -> dict[str, str]:
        if not 2 <= len(options) <= 6:
            raise ValueError(f"An MCQ needs 2-6 options, got {len(options)}")
        expected = list(string.ascii_uppercase[: len(options)])
        if sorted(options) != expected:
            raise ValueError(f"Option letters must be {expected}, got {sorted(options)}")
        return dict(sorted(options.items()))

    @model_validator(mode="after")
    def _check_answer(self) -> "McqItem":
        if self.answer not in self.options:
            raise ValueError(f"Answer {self.answer!r} is not an option of item {self.id}")
        stages = [entry.stage for entry in self.filter_log]
        if stages != list(STAGE_ORDER[: len(stages)]):
            raise ValueError(f"filter_log of item {self.id} is out of order: {stages}")
        return self

    @property
    def passed_filters(self) -> bool:
        return all(entry.passed for entry in self.filter_log)


class HistogramBucket(BaseModel):
    """Half-open bucket [lower, upper) with its count."""
    lower: int
    upper: int
    count: int = Field(ge=0)


class CorpusStats(BaseModel):
    """Length and category statistics of a critique or QA corpus."""
    count: int = Field(ge=1)
    mean_length: float
    length_histogram: list[HistogramBucket]
    category_histogram: dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_sums(self) -> "CorpusStats":
        if sum(b.count for b in self.length_histogram) != self.count:
            raise ValueError("length_histogram does not sum to count")
        if self.category_histogram and sum(self.category_histogram.values()) != self.count:
            raise ValueError("category_histogram does not sum to count")
        return self

    def top_categories(self, k: int = 40) -> list[tuple[str, int]]:
        """The k most frequent categories, ties by name."""
        return sorted(self.category_histogram.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


class EvalReport(BaseModel):
    """Accuracy of one model on one benchmark.

    Per-topic counts may sum above the overall total: an item tagged with
    several merged categories is counted in each of them.
    """
    model_name: str
    benchmark_id: str
    overall_correct: int = Field(default=0, ge=0)
    overall_total: int = Field(default=0, ge=0)
    per_topic_correct: dict[str, int] = Field(default_factory=dict)
    per_topic_total: dict[str, int] = Field(default_factory=dict)
    unparsed_count: int = Field(default=0, ge=0)
    skipped_count: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_counts(self) -> "EvalReport":
        if self.overall_correct > self.overall_total:
            raise ValueError("overall_correct exceeds overall_total")
        if set(self.per_topic_correct) != set(self.per_topic_total):
            raise ValueError("per_topic_correct and per_topic_total have different topics")
        for topic, total in self.per_topic_total.items():
            if not 0 <= self.per_topic_correct[topic] <= total:
                raise ValueError(f"Topic {topic!r} has correct count outside [0, {total}]")
        return self

    @computed_field
    @property
    def overall_accuracy(self) -> float:
        return self.overall_correct / self.overall_total if self.overall_total else 0.0

    @computed_field
    @property
    def per_topic_accuracy(self) -> dict[str, float]:
        return {
            topic: (self.per_topic_correct[topic] / total if total else 0.0)
            for topic, total in self.per_topic_total.items()
        }

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvalReport":
        data = {k: v for k, v in data.items() if k not in ("overall_accuracy", "per_topic_accuracy")}
        return cls.model_validate(data)
