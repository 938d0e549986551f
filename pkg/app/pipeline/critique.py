"""Critique corpus pipeline.

Turns raw comment threads into unified critiques, filters them with a small
model, and derives aspect conversations and five-question VQA sets from the
accepted ones. Only comment text ever reaches the LLM; images stay on disk.

Outputs of ``build_critique_corpus``:

- ``critiques.jsonl``: one CritiqueRecord per thread (rejected ones included)
- ``qa.jsonl``: every generated QaPair with its verdict
- ``vqa.jsonl``: McqItems of critiques whose VQA set parsed completely
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from app.core.storage import ensure_out_dir, write_jsonl
from app.logger import logger
from app.pipeline.heuristics import parse_mcq_blocks, parse_qa_pairs, parse_verdict, word_count
from app.pipeline.llm import LlmGateway
from app.pipeline.prompts import render_prompt
from app.pipeline.records import CommentThread, CorpusStats, CritiqueRecord, HistogramBucket, McqItem, QaPair
from app.pipeline.settings import CritiqueSettings

UNCATEGORIZED = "uncategorized"


@dataclass
class VqaResult:
    """MCQs generated for one critique.

    ``items`` is empty whenever ``flag`` is set.
    """
    image_id: str
    items: list[McqItem] = field(default_factory=list)
    flag: str | None = None


@dataclass
class CritiqueCorpus:
    """Everything ``build_critique_corpus`` produced."""
    records: list[CritiqueRecord]
    pairs: list[QaPair]
    vqa: list[VqaResult]
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def accepted(self) -> list[CritiqueRecord]:
        return [r for r in self.records if r.accepted]

    @property
    def vqa_items(self) -> list[McqItem]:
        return [item for result in self.vqa for item in result.items]


def _format_comments(comments: list[str]) -> str:
    return "\n".join(f"{i}. {' '.join(c.split())}" for i, c in enumerate(comments, start=1))


def summarize_and_integrate(
    thread: CommentThread,
    llm: LlmGateway,
    settings: CritiqueSettings | None = None,
) -> CritiqueRecord:
    """Two-stage critique generation: summarize the comments, then integrate.

    Args:
        thread: Photo comments
        llm: Gateway used for both prompts
        settings: Model tag and temperature

    Returns:
        CritiqueRecord with ``accepted`` still undecided, or rejected with
        "no_comments" / "empty_generation"
    """
    settings = settings or CritiqueSettings()
    if not thread.comments:
        logger.warning(f"Skipping {thread.image_id}: no comments")
        return CritiqueRecord(
            image_id=thread.image_id, accepted=False, reject_reason="no_comments", category=thread.category
        )

    summary = llm.ask(
        render_prompt("summarize", title=thread.title or "(untitled)", comments=_format_comments(thread.comments)),
        model_tag=settings.generation_tag,
        temperature=settings.generation_temperature,
    ).strip()
    critique = ""
    if summary:
        critique = llm.ask(
            render_prompt("integrate", summary=summary),
            model_tag=settings.generation_tag,
            temperature=settings.generation_temperature,
        ).strip()
    if not critique:
        logger.warning(f"Rejecting {thread.image_id}: empty generation")
        return CritiqueRecord(
            image_id=thread.image_id,
            source_comment_count=len(thread.comments),
            accepted=False,
            reject_reason="empty_generation",
            category=thread.category,
        )
    return CritiqueRecord(
        image_id=thread.image_id,
        critique=critique,
        source_comment_count=len(thread.comments),
        category=thread.category,
    )


def _verdict_outcome(text: str) -> tuple[bool, str | None]:
    verdict = parse_verdict(text)
    if verdict == "YES":
        return True, None
    if verdict == "NO":
        return False, "low_information"
    return False, "unparseable_verdict"


def filter_critique(
    record: CritiqueRecord,
    small_llm: LlmGateway,
    settings: CritiqueSettings | None = None,
) -> CritiqueRecord:
    """Ask the small model whether the critique is informative enough.

    Already rejected records pass through unchanged.
    """
    settings = settings or CritiqueSettings()
    if record.accepted is False:
        return record
    response = small_llm.ask(render_prompt("filter_critique", critique=record.critique), model_tag=settings.filter_tag)
    accepted, reason = _verdict_outcome(response)
    if not accepted:
        logger.warning(f"Critique {record.image_id} rejected: {reason}")
    return record.model_copy(update={"accepted": accepted, "reject_reason": reason})


def generate_conversations(
    record: CritiqueRecord,
    llm: LlmGateway,
    settings: CritiqueSettings | None = None,
) -> list[QaPair]:
    """One conversation prompt per aspect, each parsed pair filtered individually.

    Args:
        record: Accepted critique
        llm: Gateway for generation and filtering
        settings: Aspects and model tags

    Returns:
        Every parsed QaPair with its verdict; aspects whose response does not
        parse contribute nothing

    Raises:
        ValueError: If the record is not accepted
    """
    settings = settings or CritiqueSettings()
    if not record.accepted:
        raise ValueError(f"Conversations need an accepted critique, {record.image_id} is not")
    pairs: list[QaPair] = []
    for aspect in settings.aspects:
        response = llm.ask(
            render_prompt("conversation", critique=record.critique, aspect=aspect),
            model_tag=settings.generation_tag,
            temperature=settings.generation_temperature,
        )
        parsed = parse_qa_pairs(response)
        if not parsed:
            logger.warning(f"Dropping {aspect} conversation of {record.image_id}: unparseable response")
            continue
        for question, answer in parsed:
            verdict = llm.ask(
                render_prompt("filter_pair", critique=record.critique, question=question, answer=answer),
                model_tag=settings.filter_tag,
            )
            accepted, reason = _verdict_outcome(verdict)
            pairs.append(
                QaPair(
                    image_id=record.image_id,
                    aspect=aspect,
                    question=question,
                    answer=answer,
                    accepted=accepted,
                    reject_reason=reason,
                )
            )
    logger.debug(f"{record.image_id}: {sum(p.accepted for p in pairs)}/{len(pairs)} conversation pairs accepted")
    return pairs


def mcqs_from_text(text: str, image_id: str, id_prefix: str) -> list[McqItem]:
    """Parse generated MCQ blocks into four-option McqItems.

    Blocks without exactly the options A-D are dropped.
    """
    items = []
    for block in parse_mcq_blocks(text):
        if sorted(block.options) != ["A", "B", "C", "D"]:
            continue
        items.append(
            McqItem(
                id=f"{id_prefix}{len(items)}",
                image_id=image_id,
                question=block.question,
                options=block.options,
                answer=block.answer,
                topics=block.topics,
            )
        )
    return items


def generate_vqa(
    record: CritiqueRecord,
    llm: LlmGateway,
    settings: CritiqueSettings | None = None,
) -> VqaResult:
    """Generate exactly ``mcqs_per_critique`` MCQs grounded in the critique.

    Returns:
        VqaResult with the items, or no items and flag "mcq_count_mismatch"

    Raises:
        ValueError: If the record is not accepted
    """
    settings = settings or CritiqueSettings()
    if not record.accepted:
        raise ValueError(f"VQA generation needs an accepted critique, {record.image_id} is not")
    response = llm.ask(
        render_prompt("vqa", critique=record.critique, count=settings.mcqs_per_critique),
        model_tag=settings.generation_tag,
        temperature=settings.generation_temperature,
    )
    items = mcqs_from_text(response, record.image_id, f"{record.image_id}-vqa-")
    if len(items) != settings.mcqs_per_critique:
        logger.warning(
            f"Flagging {record.image_id}: parsed {len(items)} MCQs, expected {settings.mcqs_per_critique}"
        )
        return VqaResult(image_id=record.image_id, flag="mcq_count_mismatch")
    return VqaResult(image_id=record.image_id, items=items)


def _text_of(entry: CritiqueRecord | QaPair | str) -> str:
    if isinstance(entry, CritiqueRecord):
        return entry.critique
    if isinstance(entry, QaPair):
        return entry.answer
    return entry


def corpus_stats(entries: list[CritiqueRecord | QaPair | str], bucket_width: int = 10) -> CorpusStats:
    """Word-length and category statistics.

    Critiques contribute their critique text, QA pairs their answer. The
    category histogram is built only when some entry has a category;
    entries without one count as "uncategorized".

    Args:
        entries: Critiques, QA pairs or plain texts
        bucket_width: Histogram bucket width in words

    Returns:
        CorpusStats with contiguous buckets from the shortest to the longest text

    Raises:
        ValueError: If ``entries`` is empty
    """
    if not entries:
        raise ValueError("corpus_stats needs at least one entry")
    lengths = [word_count(_text_of(e)) for e in entries]
    counts: dict[int, int] = {}
    for n in lengths:
        lower = (n // bucket_width) * bucket_width
        counts[lower] = counts.get(lower, 0) + 1
    buckets = [
        HistogramBucket(lower=lower, upper=lower + bucket_width, count=counts.get(lower, 0))
        for lower in range(min(counts), max(counts) + bucket_width, bucket_width)
    ]

    categories: dict[str, int] = {}
    if any(getattr(e, "category", None) for e in entries):
        for e in entries:
            name = getattr(e, "category", None) or UNCATEGORIZED
            categories[name] = categories.get(name, 0) + 1

    return CorpusStats(
        count=len(entries),
        mean_length=sum(lengths) / len(lengths),
        length_histogram=buckets,
        category_histogram=dict(sorted(categories.items())),
    )


def process_thread(
    thread: CommentThread,
    llm: LlmGateway,
    settings: CritiqueSettings,
) -> tuple[CritiqueRecord, list[QaPair], VqaResult | None]:
    """Run every critique stage for one thread."""
    record = filter_critique(summarize_and_integrate(thread, llm, settings), llm, settings)
    if not record.accepted:
        return record, [], None
    return record, generate_conversations(record, llm, settings), generate_vqa(record, llm, settings)


def check_unique_ids(threads: list[CommentThread]) -> None:
    """Raise ValueError when an image_id appears twice."""
    seen: set[str] = set()
    for thread in threads:
        if thread.image_id in seen:
            raise ValueError(f"Duplicate image_id {thread.image_id!r} in comment threads")
        seen.add(thread.image_id)


def build_critique_corpus(
    threads: list[CommentThread],
    llm: LlmGateway,
    settings: CritiqueSettings | None = None,
    out_dir: str | Path | None = None,
) -> CritiqueCorpus:
    """Process every thread in parallel and write the corpus files in input order.

    Args:
        threads: Comment threads with unique image ids
        llm: Gateway (its parallelism bounds concurrent requests)
        settings: Critique settings
        out_dir: Directory for critiques.jsonl, qa.jsonl, vqa.jsonl (None skips writing)

    Returns:
        CritiqueCorpus
    """
    settings = settings or CritiqueSettings()
    check_unique_ids(threads)
    logger.info(f"Building critique corpus from {len(threads)} threads")
    results = llm.map(lambda thread: process_thread(thread, llm, settings), threads)

    corpus = CritiqueCorpus(
        records=[r[0] for r in results],
        pairs=[pair for r in results for pair in r[1]],
        vqa=[r[2] for r in results if r[2] is not None],
    )
    logger.info(
        f"Critiques accepted {len(corpus.accepted)}/{len(corpus.records)}, "
        f"QA pairs accepted {sum(p.accepted for p in corpus.pairs)}/{len(corpus.pairs)}, "
        f"VQA items {len(corpus.vqa_items)} ({sum(v.flag is not None for v in corpus.vqa)} flagged)"
    )
    if out_dir is not None:
        out = ensure_out_dir(out_dir)
        corpus.paths = {
            "critiques": write_jsonl(out / "critiques.jsonl", corpus.records),
            "qa": write_jsonl(out / "qa.jsonl", corpus.pairs),
            "vqa": write_jsonl(out / "vqa.jsonl", corpus.vqa_items),
        }
    return corpus
