"""Settings of the LLM pipelines, loaded from ``configs/pipeline.yaml``."""

from pydantic import BaseModel, Field

from app.pipeline.llm import LlmSettings
from app.pipeline.records import DEFAULT_ASPECTS, Aspect


class CritiqueSettings(BaseModel):
    """Critique corpus construction.

    Attributes:
        generation_tag: Model tag for summarize/integrate/conversation/VQA prompts
        filter_tag: Model tag for the informativeness filters
        aspects: Aspects prompted for conversations
        mcqs_per_critique: MCQs requested per accepted critique
        generation_temperature: Temperature of generation prompts
        bucket_width: Word-length histogram bucket width
        top_categories: Categories kept in the category histogram plot
    """
    generation_tag: str = "large"
    filter_tag: str = "small"
    aspects: list[Aspect] = Field(default_factory=lambda: list(DEFAULT_ASPECTS), min_length=1)
    mcqs_per_critique: int = Field(default=5, ge=1)
    generation_temperature: float = Field(default=0.0, ge=0.0)
    bucket_width: int = Field(default=10, ge=1)
    top_categories: int = Field(default=40, ge=1)


class BenchSettings(BaseModel):
    """Benchmark construction.

    Attributes:
        top_critiques: Most detailed critiques kept
        per_critique: Questions generated per critique
        final: Items in the final benchmark
        generation_tag: Model tag for question generation
        filter_tag: Model tag for the blind-answer filter
        scoring_tag: Model tag for three-axis scoring
    """
    top_critiques: int = Field(default=5000, ge=1)
    per_critique: int = Field(default=5, ge=1)
    final: int = Field(default=1500, ge=1)
    generation_tag: str = "large"
    filter_tag: str = "large"
    scoring_tag: str = "large"


class PipelineSettings(BaseModel):
    """Everything the critique, bench and eval commands read from config."""
    llm: LlmSettings = Field(default_factory=LlmSettings)
    critique: CritiqueSettings = Field(default_factory=CritiqueSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)
