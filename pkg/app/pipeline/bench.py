"""Benchmark construction.

Stages, in this fixed order for every item:

1. question generation from the most detailed critiques;
2. visual-dependency filter: a model sees only the question and options
   (never the image or the critique); items it answers correctly are dropped;
3. three-axis scoring (aesthetics relevance, visual dependency, expertise);
4. top-K selection by mean score.

Outputs of ``build_bench``: ``bench.jsonl`` (selected items),
``bench_candidates.jsonl`` (every generated item with its filter log) and
``selection_audit.csv`` (one row per scored item).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from app.core.storage import atomic_write_text, ensure_out_dir, write_jsonl
from app.logger import logger
from app.pipeline.critique import check_unique_ids, filter_critique, mcqs_from_text, summarize_and_integrate
from app.pipeline.evaluation import format_options
from app.pipeline.heuristics import UNPARSED, extract_choice, parse_scores, word_count
from app.pipeline.llm import LlmGateway
from app.pipeline.prompts import render_prompt
from app.pipeline.records import CommentThread, CritiqueRecord, FilterStageResult, McqItem, McqScores
from app.pipeline.settings import BenchSettings, CritiqueSettings

AUDIT_COLUMNS = ["rank", "id", "image_id", "relevance", "visual_dependency", "expertise", "mean", "selected"]
DEFAULT_TOPIC = "Other"


@dataclass
class Selection:
    """Result of the top-K stage."""
    selected: list[McqItem]
    ranked: list[McqItem]
    audit: list[dict[str, object]] = field(default_factory=list)


@dataclass
class BenchBuild:
    """Everything ``build_bench`` produced."""
    candidates: list[McqItem]
    selection: Selection
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def bench(self) -> list[McqItem]:
        return self.selection.selected


def select_top_critiques(critiques: list[CritiqueRecord], k: int) -> list[CritiqueRecord]:
    """The ``k`` most detailed critiques (word count desc, image_id asc).

    Raises:
        ValueError: If k exceeds the number of critiques
    """
    if k > len(critiques):
        raise ValueError(f"Asked for the top {k} critiques of a corpus of {len(critiques)}")
    ranked = sorted(critiques, key=lambda r: (-word_count(r.critique), r.image_id))
    return ranked[:k]


def generate_bench_questions(
    record: CritiqueRecord,
    llm: LlmGateway,
    settings: BenchSettings | None = None,
) -> list[McqItem]:
    """Generate ``per_critique`` four-option questions grounded on one critique.

    Items without topic tags get the "Other" topic and an "untagged" flag.
    """
    settings = settings or BenchSettings()
    response = llm.ask(
        render_prompt("bench_questions", critique=record.critique, count=settings.per_critique),
        model_tag=settings.generation_tag,
    )
    items = mcqs_from_text(response, record.image_id, f"{record.image_id}-q")
    if len(items) != settings.per_critique:
        logger.warning(f"{record.image_id}: parsed {len(items)} questions, expected {settings.per_critique}")
    tagged = []
    for item in items:
        if not item.topics:
            item = item.model_copy(update={"topics": [DEFAULT_TOPIC], "flags": item.flags + ["untagged"]})
        tagged.append(item)
    return tagged


def visual_dependency_filter(
    item: McqItem,
    llm: LlmGateway,
    settings: BenchSettings | None = None,
) -> FilterStageResult:
    """Drop items a model answers correctly without the image.

    Returns:
        Failed with "blind_correct" when the blind answer is the key; passed
        with "blind_wrong" or "blind_answer_unparseable" otherwise
    """
    settings = settings or BenchSettings()
    prompt = render_prompt("blind_answer", question=item.question, options=format_options(item.options))
    choice = extract_choice(llm.ask(prompt, model_tag=settings.filter_tag), item.options)
    if choice == UNPARSED:
        return FilterStageResult(stage="visual_dependency", passed=True, detail="blind_answer_unparseable")
    if choice == item.answer:
        return FilterStageResult(stage="visual_dependency", passed=False, detail="blind_correct")
    return FilterStageResult(stage="visual_dependency", passed=True, detail="blind_wrong")


def score_item(
    item: McqItem,
    llm: LlmGateway,
    settings: BenchSettings | None = None,
) -> tuple[McqScores | None, FilterStageResult]:
    """Ask for relevance, visual dependency and expertise scores (1-10).

    Returns:
        (scores, stage result); scores is None and the stage fails with
        "score_parse" unless exactly three in-range integers come back
    """
    settings = settings or BenchSettings()
    prompt = render_prompt(
        "score_item", question=item.question, options=format_options(item.options), answer=item.answer
    )
    parsed = parse_scores(llm.ask(prompt, model_tag=settings.scoring_tag))
    if parsed is None:
        return None, FilterStageResult(stage="scoring", passed=False, detail="score_parse")
    scores = McqScores(relevance=parsed[0], visual_dependency=parsed[1], expertise=parsed[2])
    return scores, FilterStageResult(stage="scoring", passed=True, detail=f"mean={scores.mean:.2f}")


def filter_and_score(item: McqItem, llm: LlmGateway, settings: BenchSettings) -> McqItem:
    """Run the dependency filter and, if it passes, scoring."""
    log = list(item.filter_log)
    dependency = visual_dependency_filter(item, llm, settings)
    log.append(dependency)
    scores = None
    if dependency.passed:
        scores, scoring = score_item(item, llm, settings)
        log.append(scoring)
    return item.model_copy(update={"filter_log": log, "scores": scores})


def _rank_key(item: McqItem) -> tuple[float, int, str]:
    return (-item.scores.mean, -item.scores.expertise, item.id)


def select_final(items: list[McqItem], k: int) -> Selection:
    """Deterministic top-K by mean score, then expertise desc, then id asc.

    Every scored item gets a "topk" stage entry; items not scored are ignored.

    Args:
        items: Candidate items
        k: Benchmark size

    Returns:
        Selection with ``min(k, pool)`` selected items and one audit row per
        ranked item
    """
    pool = [item for item in items if item.scores is not None and item.passed_filters]
    if k > len(pool):
        logger.warning(f"Requested {k} final items but only {len(pool)} are scored; keeping all")
    ranked = []
    audit = []
    for rank, item in enumerate(sorted(pool, key=_rank_key), start=1):
        selected = rank <= k
        entry = FilterStageResult(stage="topk", passed=selected, detail=f"rank={rank}")
        ranked.append(item.model_copy(update={"filter_log": item.filter_log + [entry]}))
        audit.append(
            {
                "rank": rank,
                "id": item.id,
                "image_id": item.image_id,
                "relevance": item.scores.relevance,
                "visual_dependency": item.scores.visual_dependency,
                "expertise": item.scores.expertise,
                "mean": f"{item.scores.mean:.4f}",
                "selected": selected,
            }
        )
    return Selection(selected=ranked[: min(k, len(ranked))], ranked=ranked, audit=audit)


def audit_csv(rows: list[dict[str, object]]) -> str:
    """Render selection audit rows as CSV text."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=AUDIT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def critiques_from_threads(
    threads: list[CommentThread],
    llm: LlmGateway,
    settings: CritiqueSettings | None = None,
) -> list[CritiqueRecord]:
    """Summarize, integrate and filter raw threads (no conversations or VQA)."""
    settings = settings or CritiqueSettings()
    check_unique_ids(threads)
    return llm.map(lambda t: filter_critique(summarize_and_integrate(t, llm, settings), llm, settings), threads)


def build_bench(
    critiques: list[CritiqueRecord],
    llm: LlmGateway,
    settings: BenchSettings | None = None,
    out_dir: str | Path | None = None,
) -> BenchBuild:
    """Generate, filter, score and select benchmark items.

    Args:
        critiques: Critique records; only accepted ones are used
        llm: Gateway
        settings: Stage sizes and model tags
        out_dir: Directory for bench.jsonl, bench_candidates.jsonl and
            selection_audit.csv (None skips writing)

    Returns:
        BenchBuild
    """
    settings = settings or BenchSettings()
    accepted = [r for r in critiques if r.accepted]
    top = select_top_critiques(accepted, settings.top_critiques)
    logger.info(f"Generating {settings.per_critique} questions for each of {len(top)} critiques")
    generated = [item for items in llm.map(lambda r: generate_bench_questions(r, llm, settings), top) for item in items]

    candidates = llm.map(lambda item: filter_and_score(item, llm, settings), generated)
    blind = sum(1 for c in candidates if not c.filter_log[0].passed)
    logger.info(
        f"Dependency filter removed {blind}/{len(candidates)} items; "
        f"{sum(c.scores is not None for c in candidates)} scored"
    )

    selection = select_final(candidates, settings.final)
    by_id = {item.id: item for item in selection.ranked}
    candidates = [by_id.get(item.id, item) for item in candidates]
    build = BenchBuild(candidates=candidates, selection=selection)

    if out_dir is not None:
        out = ensure_out_dir(out_dir)
        build.paths = {
            "bench": write_jsonl(out / "bench.jsonl", selection.selected),
            "candidates": write_jsonl(out / "bench_candidates.jsonl", candidates),
            "audit": atomic_write_text(out / "selection_audit.csv", audit_csv(selection.audit)),
        }
    logger.info(f"Benchmark: {len(selection.selected)} items selected")
    return build
