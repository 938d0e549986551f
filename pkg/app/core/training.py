"""Tiny trainer for the fusor on the routing task.

A linear head on mean-pooled fusor tokens is trained with cross-entropy.
Encoder features are precomputed once (see ``encode_dataset``), so each
step only runs the fusor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from torch import nn
from tqdm import tqdm

from app.core.adapters import MOCK_ENCODER_NAMES, MockEncoder, MockTextEncoder, mock_encoders
from app.core.fusor import VisionFusor
from app.core.fusor_model import FusorConfig, FusorConfigError
from app.core.routing_task import (
    NUM_LEVELS,
    EncodedDataset,
    RoutingDataset,
    RoutingTaskSpec,
    encode_dataset,
    generate_task,
)
from app.logger import logger


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, loss: float, last_finite: float | None):
        self.step = step
        self.loss = loss
        self.last_finite = last_finite
        super().__init__(f"Loss became {loss} at step {step} (last finite loss: {last_finite})")


class TrainConfig(BaseModel):
    """Optimizer settings of the tiny trainer.

    Attributes:
        optimizer: adam or sgd
        lr: Learning rate (0 freezes the parameters)
        batch_size: Samples per step; a value >= the dataset size uses the full batch
        steps: Number of optimizer steps (0 returns the initial state)
        seed: Seed for the head init and batch sampling
        log_every: Progress log interval in steps
    """
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(default=3e-3, ge=0.0)
    batch_size: int = Field(default=64, ge=1)
    steps: int = Field(default=2000, ge=0)
    seed: int = 0
    log_every: int = Field(default=100, ge=1)


@dataclass
class TrainResult:
    """Outcome of a training run.

    Attributes:
        model: Trained fusor
        head: Linear classifier over mean-pooled tokens
        losses: Loss per step
        accuracies: Batch accuracy per step
    """
    model: VisionFusor
    head: nn.Linear
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def make_head(model: VisionFusor, seed: int) -> nn.Linear:
    """Seeded linear head D_out -> NUM_LEVELS."""
    head = nn.Linear(model.config.out_dim, NUM_LEVELS)
    g = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(model.config.out_dim)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=g)
        head.bias.uniform_(-bound, bound, generator=g)
    return head


def predict_logits(model: VisionFusor, head: nn.Linear, data: EncodedDataset) -> torch.Tensor:
    """(S, NUM_LEVELS) logits for every sample."""
    return head(model(data.features, data.text).pooled())


def evaluate_accuracy(
    model: VisionFusor,
    head: nn.Linear,
    data: EncodedDataset,
    batch_size: int = 512,
) -> dict[str, float]:
    """Accuracy overall and per instruction class.

    Returns:
        Mapping with an ``overall`` entry plus one entry per class name
    """
    predictions = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            predictions.append(predict_logits(model, head, data.take(idx)).argmax(dim=1))
    correct = torch.cat(predictions) == data.labels
    result = {"overall": correct.double().mean().item()}
    for cls, name in enumerate(data.class_names):
        mask = data.class_index == cls
        if mask.any():
            result[name] = correct[mask].double().mean().item()
    return result


def train(
    model: VisionFusor,
    data: EncodedDataset,
    config: TrainConfig,
    head: nn.Linear | None = None,
    metrics_path: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Train fusor and head with cross-entropy on the encoded dataset.

    Args:
        model: Fusor to train in place
        data: Precomputed encoder features and embeddings
        config: Optimizer settings
        head: Existing head, or None for a fresh seeded one
        metrics_path: Optional JSONL file receiving {step, loss, acc} per step
        progress: Show a tqdm progress bar

    Returns:
        TrainResult with the per-step loss curve

    Raises:
        ValueError: If the dataset is empty
        TrainingDivergedError: If the loss becomes NaN or infinite
    """
    if len(data) == 0:
        raise ValueError("Cannot train on an empty dataset")
    head = head if head is not None else make_head(model, config.seed)
    params = list(model.parameters()) + list(head.parameters())
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(params, lr=config.lr)
    else:
        optimizer = torch.optim.SGD(params, lr=config.lr)

    g = torch.Generator().manual_seed(config.seed)
    full_batch = config.batch_size >= len(data)
    result = TrainResult(model=model, head=head)
    metrics_file = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    last_finite: float | None = None

    logger.info(
        f"Training {config.steps} steps with {config.optimizer} lr={config.lr} "
        f"batch={'full' if full_batch else config.batch_size} on {len(data)} samples"
    )
    try:
        for step in tqdm(range(1, config.steps + 1), disable=not progress, desc="train"):
            if full_batch:
                batch = data
            else:
                batch = data.take(torch.randint(len(data), (config.batch_size,), generator=g))
            optimizer.zero_grad()
            logits = predict_logits(model, head, batch)
            loss = F.cross_entropy(logits, batch.labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(step, loss_value, last_finite)
            loss.backward()
            optimizer.step()

            last_finite = loss_value
            acc = (logits.argmax(dim=1) == batch.labels).double().mean().item()
            result.losses.append(loss_value)
            result.accuracies.append(acc)
            if metrics_file is not None:
                metrics_file.write(json.dumps({"step": step, "loss": loss_value, "acc": acc}) + "\n")
            if step % config.log_every == 0:
                logger.info(f"step {step}: loss={loss_value:.4f} acc={acc:.3f}")
    except TrainingDivergedError:
        logger.error("Training diverged", exc_info=True)
        raise
    finally:
        if metrics_file is not None:
            metrics_file.close()

    return result


class ToySettings(BaseModel):
    """Everything ``train-toy`` reads from ``configs/toy.yaml``.

    ``fusor.num_encoders``, ``fusor.encoder_channels`` and ``fusor.text_dim``
    are filled in from the encoders when left at their defaults.
    """
    fusor: FusorConfig = Field(default_factory=lambda: FusorConfig(num_queries=4, num_layers=1))
    task: RoutingTaskSpec = Field(default_factory=RoutingTaskSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    encoders: list[str] = Field(default_factory=lambda: list(MOCK_ENCODER_NAMES), min_length=1)
    holdout_samples_per_class: int = Field(default=64, ge=1)
    probe_steps: int = Field(default=500, ge=0)


@dataclass
class ToySetup:
    """Resolved inputs of a routing-task run."""
    settings: ToySettings
    encoders: list[MockEncoder]
    text_encoder: MockTextEncoder
    dataset: RoutingDataset
    train_data: EncodedDataset
    holdout_data: EncodedDataset


def resolve_fusor_config(settings: ToySettings, encoders: list[MockEncoder]) -> FusorConfig:
    """Fusor config matching the encoders' count and native channels.

    Raises:
        FusorConfigError: If the configured encoder count or channels disagree
    """
    native = [encoder.native_shape[0] for encoder in encoders]
    data = settings.fusor.model_dump()
    if "num_encoders" in settings.fusor.model_fields_set and settings.fusor.num_encoders != len(encoders):
        raise FusorConfigError(
            f"fusor.num_encoders={settings.fusor.num_encoders} but {len(encoders)} encoders are configured"
        )
    if settings.fusor.encoder_channels is not None and settings.fusor.encoder_channels != native:
        raise FusorConfigError(
            f"fusor.encoder_channels={settings.fusor.encoder_channels} but the encoders emit {native}"
        )
    data["num_encoders"] = len(encoders)
    data["encoder_channels"] = native
    return FusorConfig.model_validate(data)


def prepare_toy(settings: ToySettings) -> ToySetup:
    """Generate and encode the training and held-out routing sets."""
    encoders = mock_encoders(settings.encoders, settings.task.image_size)
    text_encoder = MockTextEncoder(dim=settings.fusor.text_dim, seed=settings.task.seed)
    dataset = generate_task(settings.task)
    holdout_spec = settings.task.model_copy(
        update={"seed": settings.task.seed + 1, "samples_per_class": settings.holdout_samples_per_class}
    )
    holdout = generate_task(holdout_spec)
    return ToySetup(
        settings=settings,
        encoders=encoders,
        text_encoder=text_encoder,
        dataset=dataset,
        train_data=encode_dataset(dataset, encoders, text_encoder),
        holdout_data=encode_dataset(holdout, encoders, text_encoder),
    )


def train_baseline(
    setup: ToySetup,
    metrics_path: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Train a separate no-fusor model with its own head on the same data.

    The baseline sees only encoder 1's canonical map through ``out_proj`` and
    uses the same optimizer settings and seeds as the full run.
    """
    config = resolve_fusor_config(setup.settings, setup.encoders).with_mode("baseline_no_fusor")
    logger.info("Training the no-fusor baseline")
    model = VisionFusor(config)
    return train(model, setup.train_data, setup.settings.train, metrics_path=metrics_path, progress=progress)


def head_tensors(head: nn.Linear) -> dict[str, torch.Tensor]:
    """Checkpoint extras for a classification head."""
    return {"head.weight": head.weight, "head.bias": head.bias}


def head_from_tensors(extras: dict[str, torch.Tensor]) -> nn.Linear:
    """Rebuild a head saved with ``head_tensors``.

    Raises:
        KeyError: If the checkpoint carries no head
    """
    weight, bias = extras["head.weight"], extras["head.bias"]
    head = nn.Linear(weight.shape[1], weight.shape[0]).to(weight.dtype)
    with torch.no_grad():
        head.weight.copy_(weight)
        head.bias.copy_(bias)
    return head
