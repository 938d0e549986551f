"""MCQ evaluation harness.

Runs a model client over a benchmark, maps each free-form answer to an
option letter and accumulates overall and per-topic accuracy. Topics are
merged into report categories through a topic merge map; an item tagged
with several categories counts once in each of them and once overall.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol

import numpy as np

from app.core.storage import read_jsonl
from app.logger import logger
from app.pipeline.heuristics import UNPARSED, extract_choice
from app.pipeline.llm import LlmGateway
from app.pipeline.prompts import render_prompt
from app.pipeline.records import EvalReport, McqItem

DEFAULT_MERGE_MAP_PATH = Path(__file__).parent / "data" / "topic_merge_map.json"


class ModelClient(Protocol):
    """A model answering one MCQ.

    ``image_ref`` is the photo path for clients with ``requires_image``,
    otherwise None.
    """

    name: str
    requires_image: bool

    def answer(self, image_ref: Path | None, question: str, options: dict[str, str]) -> str: ...


def item_key(question: str, options: dict[str, str]) -> str:
    """Stable hash of a question and its options."""
    material = json.dumps({"question": question, "options": options}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class OracleModelClient:
    """Always answers the key of a known item set."""

    requires_image = False

    def __init__(self, items: list[McqItem], name: str = "mock-oracle"):
        self.name = name
        self._keys = {item_key(item.question, item.options): item.answer for item in items}

    def answer(self, image_ref: Path | None, question: str, options: dict[str, str]) -> str:
        return self._keys.get(item_key(question, options), "")


class AntiOracleModelClient(OracleModelClient):
    """Always answers the first option that is not the key."""

    def __init__(self, items: list[McqItem], name: str = "mock-anti"):
        super().__init__(items, name=name)

    def answer(self, image_ref: Path | None, question: str, options: dict[str, str]) -> str:
        key = super().answer(image_ref, question, options)
        return next(letter for letter in sorted(options) if letter != key)


class RandomModelClient:
    """Uniform guess, reproducible per (seed, question, options)."""

    requires_image = False

    def __init__(self, seed: int = 0, name: str = "mock-random"):
        self.name = name
        self.seed = seed

    def answer(self, image_ref: Path | None, question: str, options: dict[str, str]) -> str:
        digest = hashlib.sha256(f"{self.seed}:{item_key(question, options)}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        letters = sorted(options)
        return letters[int(rng.integers(len(letters)))]


class LlmModelClient:
    """Text-only model answering through the LLM gateway (a blind baseline)."""

    requires_image = False

    def __init__(self, gateway: LlmGateway, model_tag: str = "large"):
        self.gateway = gateway
        self.model_tag = model_tag
        self.name = f"{gateway.name}:{model_tag}"

    def answer(self, image_ref: Path | None, question: str, options: dict[str, str]) -> str:
        prompt = render_prompt("blind_answer", question=question, options=format_options(options))
        return self.gateway.ask(prompt, model_tag=self.model_tag)


def format_options(options: dict[str, str]) -> str:
    """One ``A) text`` line per option."""
    return "\n".join(f"{letter}) {text}" for letter, text in sorted(options.items()))


def load_topic_merge_map(path: str | Path | None = None) -> dict[str, str]:
    """Read a topic -> category JSON map (defaults to the shipped map)."""
    path = Path(path) if path else DEFAULT_MERGE_MAP_PATH
    with open(path, "r", encoding="utf-8") as f:
        mapping = json.load(f)
    if not isinstance(mapping, dict) or not all(isinstance(v, str) for v in mapping.values()):
        raise ValueError(f"Topic merge map {path} must be a JSON object of strings")
    return mapping


def load_bench(path: str | Path) -> list[McqItem]:
    """Read a benchmark JSONL file."""
    return read_jsonl(path, McqItem)


def merge_topics(topics: list[str], topic_merge_map: dict[str, str] | None) -> list[str]:
    """Distinct merged categories of an item, in first-seen order.

    Lookup is case-insensitive; unmapped topics are kept as they are.
    """
    lookup = {k.lower(): v for k, v in (topic_merge_map or {}).items()}
    merged: list[str] = []
    for topic in topics:
        category = lookup.get(topic.lower(), topic)
        if category not in merged:
            merged.append(category)
    return merged


def _resolve_image(item: McqItem, image_root: Path | None) -> Path | None:
    if image_root is None:
        return None
    direct = image_root / item.image_id
    if direct.is_file():
        return direct
    return next(iter(sorted(image_root.glob(f"{item.image_id}.*"))), None)


def evaluate(
    client: ModelClient,
    items: list[McqItem],
    topic_merge_map: dict[str, str] | None = None,
    image_root: str | Path | None = None,
    parallelism: int = 1,
    benchmark_id: str = "bench",
) -> EvalReport:
    """Score ``client`` on ``items``.

    Args:
        client: Model under evaluation
        items: Benchmark items
        topic_merge_map: Topic -> report category
        image_root: Directory holding ``<image_id>.*`` photos, for clients
            that need the image
        parallelism: Concurrent answers
        benchmark_id: Id stored in the report

    Returns:
        EvalReport; unparsed answers count as incorrect, items whose image
        is missing are skipped and excluded from every denominator
    """
    root = Path(image_root) if image_root is not None else None
    report = EvalReport(model_name=client.name, benchmark_id=benchmark_id)

    runnable: list[tuple[McqItem, Path | None]] = []
    for item in items:
        image_ref = None
        if client.requires_image:
            image_ref = _resolve_image(item, root)
            if image_ref is None:
                logger.warning(f"Skipping {item.id}: no image for {item.image_id} under {root}")
                report.skipped_count += 1
                continue
        runnable.append((item, image_ref))

    def answer(pair: tuple[McqItem, Path | None]) -> str:
        item, image_ref = pair
        return client.answer(image_ref, item.question, item.options)

    if parallelism > 1 and len(runnable) > 1:
        with ThreadPoolExecutor(max_workers=min(parallelism, len(runnable))) as executor:
            answers = list(executor.map(answer, runnable))
    else:
        answers = [answer(pair) for pair in runnable]

    for (item, _), text in zip(runnable, answers):
        choice = extract_choice(text, item.options)
        if choice == UNPARSED:
            report.unparsed_count += 1
            logger.debug(f"Unparsed answer for {item.id}: {text[:80]!r}")
        correct = choice == item.answer
        report.overall_total += 1
        report.overall_correct += int(correct)
        for category in merge_topics(item.topics, topic_merge_map):
            report.per_topic_total[category] = report.per_topic_total.get(category, 0) + 1
            report.per_topic_correct[category] = report.per_topic_correct.get(category, 0) + int(correct)

    logger.info(
        f"{client.name} on {benchmark_id}: {report.overall_correct}/{report.overall_total} correct, "
        f"{report.unparsed_count} unparsed, {report.skipped_count} skipped"
    )
    return EvalReport.model_validate(report.model_dump(exclude={"overall_accuracy", "per_topic_accuracy"}))
