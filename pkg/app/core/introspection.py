"""Analysis tools over a trained fusor.

- gate aggregation: mean per-layer encoder weights over a sample set;
- discriminability: how far apart a view places images that differ in one
  attribute (mean pairwise distance of L2-normalized embeddings);
- forced-gate evaluation: accuracy when only one encoder is active,
  scored through the MCQ evaluation harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from app.core.adapters import MockEncoder, MockTextEncoder, SyntheticImage
from app.core.fusor import VisionFusor
from app.core.fusor_model import GateReport
from app.core.routing_task import CHECKER_LEVELS, NUM_LEVELS, TEXTURE_LEVELS, EncodedDataset
from app.core.training import predict_logits
from app.logger import logger
from app.pipeline.evaluation import evaluate, item_key
from app.pipeline.records import EvalReport, McqItem

OPTION_LETTERS = "ABCDEF"


class ZeroEmbeddingError(ValueError):
    """Raised when an embedding cannot be normalized."""


def aggregate_gates(
    model: VisionFusor,
    data: EncodedDataset,
    label: str = "all",
    batch_size: int = 512,
) -> GateReport:
    """Average the gate trace of ``model`` over every sample of ``data``.

    Args:
        model: Fusor to inspect
        data: Samples to run
        label: Grouping label stored in the report
        batch_size: Forward batch size

    Returns:
        GateReport whose per-layer vectors are renormalized to sum to 1

    Raises:
        ValueError: If ``data`` is empty
    """
    if len(data) == 0:
        raise ValueError(f"Cannot aggregate gates over an empty subset ({label})")
    total = torch.zeros(model.config.num_layers, model.config.num_encoders, dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            batch = data.take(idx)
            total += model(batch.features, batch.text).gate_trace.double().sum(dim=0)
    mean = total / len(data)
    mean = mean / mean.sum(dim=1, keepdim=True)
    return GateReport(label=label, sample_count=len(data), layers=mean.tolist())


def gate_reports_by_class(model: VisionFusor, data: EncodedDataset) -> list[GateReport]:
    """One GateReport per instruction class present in ``data``."""
    reports = []
    for cls, name in enumerate(data.class_names):
        idx = torch.nonzero(data.class_index == cls, as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        report = aggregate_gates(model, data.take(idx), label=name)
        logger.info(f"Gates for {name}: layer 1 = {[round(w, 3) for w in report.layers[0]]}")
        reports.append(report)
    return reports


@dataclass
class EmbeddingSeries:
    """Embeddings of an image series varying one attribute.

    Attributes:
        vectors: (S, D) embeddings in series order
        attribute: Name of the varied attribute
    """
    vectors: torch.Tensor
    attribute: str = "brightness"

    def __post_init__(self):
        if self.vectors.dim() != 2:
            raise ValueError(f"EmbeddingSeries needs an (S, D) tensor, got {tuple(self.vectors.shape)}")
        if self.vectors.shape[0] < 2:
            raise ValueError("EmbeddingSeries needs at least 2 embeddings")


def discriminability(series: EmbeddingSeries) -> float:
    """Mean pairwise Euclidean distance of the L2-normalized embeddings.

    Raises:
        ZeroEmbeddingError: If any embedding is the zero vector
    """
    vectors = series.vectors.detach().double()
    norms = vectors.norm(dim=1)
    if (norms == 0).any():
        bad = torch.nonzero(norms == 0, as_tuple=True)[0].tolist()
        raise ZeroEmbeddingError(f"Zero embedding at series positions {bad} ({series.attribute})")
    return torch.pdist(vectors / norms[:, None]).mean().item()


def brightness_ladder(steps: int = 5, size: int = 32) -> list[SyntheticImage]:
    """Images identical except for a uniform brightness offset.

    Each image carries a fixed checkerboard and texture on top of a gray
    level from 0.25 to 0.65, so no pixel clips and every finite difference
    is the same across the ladder.
    """
    if steps < 2:
        raise ValueError(f"A brightness ladder needs at least 2 steps, got {steps}")
    y, x = np.mgrid[0:size, 0:size]
    pattern = CHECKER_LEVELS[0] * np.where((x + y) % 2 == 0, 1.0, -1.0)
    pattern = pattern + TEXTURE_LEVELS[-1] * np.where((x // 2 + y // 2) % 2 == 0, 1.0, -1.0)
    images = []
    for level, base in enumerate(np.linspace(0.25, 0.65, steps)):
        values = np.broadcast_to(base + pattern, (3, size, size))
        images.append(
            SyntheticImage(values=torch.from_numpy(values.copy()).float(), meta={"brightness_level": level})
        )
    return images


def _stack(images: list[SyntheticImage]) -> torch.Tensor:
    return torch.stack([image.values for image in images])


def embed_series_view(
    images: list[SyntheticImage], encoder: MockEncoder, attribute: str = "brightness"
) -> EmbeddingSeries:
    """Mean-pooled raw features of one encoder view."""
    features = encoder.encode_batch(_stack(images))
    return EmbeddingSeries(vectors=features.mean(dim=(2, 3)), attribute=attribute)


def embed_series_fused(
    model: VisionFusor,
    encoders: list[MockEncoder],
    text_encoder: MockTextEncoder,
    images: list[SyntheticImage],
    instruction: str,
    attribute: str = "brightness",
) -> EmbeddingSeries:
    """Mean-pooled final fused tokens of the full model."""
    batch = _stack(images)
    features = [encoder.encode_batch(batch) for encoder in encoders]
    text = text_encoder.embed(instruction).expand(len(images), -1)
    with torch.no_grad():
        pooled = model(features, text).pooled()
    return EmbeddingSeries(vectors=pooled, attribute=attribute)


def routing_items(data: EncodedDataset, prefix: str = "toy") -> list[McqItem]:
    """Express each routing sample as a four-option MCQ over its levels."""
    items = []
    for i in range(len(data)):
        name = data.class_names[int(data.class_index[i])]
        options = {OPTION_LETTERS[level]: f"level {level}" for level in range(NUM_LEVELS)}
        items.append(
            McqItem(
                id=f"{prefix}-{i:05d}",
                image_id=f"{prefix}-{i:05d}",
                question=f"Which {name} level does sample {i} show?",
                options=options,
                answer=OPTION_LETTERS[int(data.labels[i])],
                topics=[name],
            )
        )
    return items


class FusorModelClient:
    """Answers routing MCQs with precomputed fusor predictions."""

    requires_image = False

    def __init__(self, name: str, items: list[McqItem], predictions: torch.Tensor):
        self.name = name
        self._answers = {
            item_key(item.question, item.options): OPTION_LETTERS[int(p)] for item, p in zip(items, predictions)
        }

    def answer(self, image_ref, question: str, options: dict[str, str]) -> str:
        return self._answers.get(item_key(question, options), "")


def _predict(model: VisionFusor, head: nn.Linear, data: EncodedDataset, batch_size: int = 512) -> torch.Tensor:
    predictions = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            predictions.append(predict_logits(model, head, data.take(idx)).argmax(dim=1))
    return torch.cat(predictions)


def forced_gate_eval(
    model: VisionFusor,
    head: nn.Linear,
    data: EncodedDataset,
    k: int,
    benchmark_id: str = "routing-toy",
) -> EvalReport:
    """Accuracy per instruction class with only encoder ``k`` active.

    Args:
        model: Trained fusor
        head: Its classification head
        data: Samples to score
        k: 1-based encoder kept active
        benchmark_id: Id stored in the report

    Returns:
        EvalReport with one topic per instruction class

    Raises:
        ValueError: If k is not in 1..N
    """
    n = model.config.num_encoders
    if not 1 <= k <= n:
        raise ValueError(f"Encoder index must be in 1..{n}, got {k}")
    forced = model.with_mode("single_encoder", k)
    items = routing_items(data)
    client = FusorModelClient(f"fusor-single-encoder-{k}", items, _predict(forced, head, data))
    return evaluate(client, items, benchmark_id=benchmark_id)


def forced_gate_matrix(model: VisionFusor, head: nn.Linear, data: EncodedDataset) -> dict[str, list[float]]:
    """Class name -> accuracy for each forced encoder 1..N."""
    reports = [forced_gate_eval(model, head, data, k) for k in range(1, model.config.num_encoders + 1)]
    return {
        name: [report.per_topic_accuracy.get(name, 0.0) for report in reports]
        for name in data.class_names
        if name in reports[0].per_topic_total
    }


def full_mode_report(
    model: VisionFusor, head: nn.Linear, data: EncodedDataset, benchmark_id: str = "routing-toy"
) -> EvalReport:
    """Accuracy of the model in its configured mode, in EvalReport form."""
    items = routing_items(data)
    client = FusorModelClient(f"fusor-{model.config.mode}", items, _predict(model, head, data))
    return evaluate(client, items, benchmark_id=benchmark_id)
