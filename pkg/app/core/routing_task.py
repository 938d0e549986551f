"""Synthetic instruction-routing task.

Each image is a sum of four independent attributes, one per mock encoder
view, and every instruction class asks about exactly one of them:

======== ================================ ============ ===========
class    attribute                        informative  levels
======== ================================ ============ ===========
color    uniform chroma offset (1, 0, -1) downsample   4
compos.  period-2 luminance checkerboard  edge         4
tone     period-4 zero-mean texture       stat         4
subject  half-image chroma blob (1,-2,1)  blur         4
======== ================================ ============ ===========

Attribute amplitudes are chosen so that every non-informative view is
blind to the attribute by construction (pooling windows cancel the
patterns exactly), which makes the routing ground truth known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator

from app.core.adapters import MOCK_ENCODER_NAMES, MockEncoder, MockTextEncoder, SyntheticImage
from app.logger import logger

CHROMA_LEVELS = (-0.09, -0.03, 0.03, 0.09)
CHECKER_LEVELS = (0.10, 0.14, 0.18, 0.22)
TEXTURE_LEVELS = (0.0, 0.01, 0.02, 0.03)
BLOB_LEVELS = (0.0, 0.008, 0.016, 0.024)
NUM_LEVELS = 4

CLASS_NAMES = ("color", "composition", "tone", "subject")

# class -> encoder view whose output determines its label
INFORMATIVE_ENCODER = {
    "color": "downsample",
    "composition": "edge",
    "tone": "stat",
    "subject": "blur",
}

INSTRUCTION_TEMPLATES = {
    "color": (
        "assess the color of this photo",
        "how is the color palette here",
        "evaluate the color balance",
        "comment on the colors",
    ),
    "composition": (
        "assess the composition",
        "how is the framing and composition",
        "evaluate the structure of this shot",
        "comment on the composition",
    ),
    "tone": (
        "assess the tone",
        "how is the tonal texture",
        "evaluate the tone and contrast",
        "comment on the tonal quality",
    ),
    "subject": (
        "assess the subject separation",
        "how well does the subject stand out",
        "evaluate the subject placement",
        "comment on the subject",
    ),
}


class RoutingTaskSpec(BaseModel):
    """Configuration of the synthetic routing dataset.

    Attributes:
        num_classes: Number of instruction classes K (1-4, in CLASS_NAMES order)
        samples_per_class: Samples generated per class
        image_size: Square image side (multiple of 8)
        templates_per_class: Instruction templates drawn per class
        noise_std: Optional Gaussian pixel noise
        seed: Generation seed
    """
    num_classes: int = Field(default=4, ge=1, le=len(CLASS_NAMES))
    samples_per_class: int = Field(default=256, ge=1)
    image_size: int = Field(default=32, ge=8)
    templates_per_class: int = Field(default=4, ge=1, le=4)
    noise_std: float = Field(default=0.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_size(self) -> "RoutingTaskSpec":
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size must be a multiple of 8, got {self.image_size}")
        return self

    @property
    def class_names(self) -> list[str]:
        return list(CLASS_NAMES[: self.num_classes])

    def informative_index(self, class_name: str) -> int:
        """0-based position of the class's informative view in MOCK_ENCODER_NAMES."""
        return MOCK_ENCODER_NAMES.index(INFORMATIVE_ENCODER[class_name])


@dataclass
class RoutingDataset:
    """Generated samples.

    Attributes:
        images: (S, 3, size, size) float32 images in [0, 1]
        instructions: One instruction string per sample
        class_index: (S,) instruction class of each sample
        labels: (S,) level of the class's attribute (0-3)
        levels: (S, 4) level of every attribute (color, composition, tone, subject)
        class_names: Class names indexed by class_index
    """
    images: torch.Tensor
    instructions: list[str]
    class_index: torch.Tensor
    labels: torch.Tensor
    levels: torch.Tensor
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.instructions)

    def image(self, index: int) -> SyntheticImage:
        return SyntheticImage(values=self.images[index], meta={"levels": self.levels[index].tolist()})

    def subset(self, mask: torch.Tensor) -> "RoutingDataset":
        idx = torch.nonzero(mask, as_tuple=True)[0]
        return RoutingDataset(
            images=self.images[idx],
            instructions=[self.instructions[i] for i in idx.tolist()],
            class_index=self.class_index[idx],
            labels=self.labels[idx],
            levels=self.levels[idx],
            class_names=self.class_names,
        )


@dataclass
class EncodedDataset:
    """Encoder outputs and text embeddings precomputed for training.

    Attributes:
        features: One (S, C_n, H_n, W_n) tensor per encoder
        text: (S, D_t) instruction embeddings
        labels: (S,) targets
        class_index: (S,) instruction class
        class_names: Class names indexed by class_index
    """
    features: list[torch.Tensor]
    text: torch.Tensor
    labels: torch.Tensor
    class_index: torch.Tensor
    class_names: list[str]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx: torch.Tensor) -> "EncodedDataset":
        return EncodedDataset(
            features=[f[idx] for f in self.features],
            text=self.text[idx],
            labels=self.labels[idx],
            class_index=self.class_index[idx],
            class_names=self.class_names,
        )


def render_image(levels: tuple[int, int, int, int], layout: int, size: int) -> np.ndarray:
    """Compose one (3, size, size) image from attribute levels.

    Args:
        levels: Level index of (chroma, checkerboard, texture, blob)
        layout: Blob layout 0-3 (positive half left, right, top, bottom)
        size: Image side

    Returns:
        float64 array in [0, 1]
    """
    y, x = np.mgrid[0:size, 0:size]
    checker = CHECKER_LEVELS[levels[1]] * np.where((x + y) % 2 == 0, 1.0, -1.0)
    texture = TEXTURE_LEVELS[levels[2]] * np.where((x // 2 + y // 2) % 2 == 0, 1.0, -1.0)
    half = size // 2
    positive = {0: x < half, 1: x >= half, 2: y < half, 3: y >= half}[layout]
    blob_sign = np.where(positive, 1.0, -1.0)

    chroma = CHROMA_LEVELS[levels[0]] * np.array([1.0, 0.0, -1.0])
    blob = BLOB_LEVELS[levels[3]] * np.array([1.0, -2.0, 1.0])
    luminance = 0.5 + checker + texture
    image = luminance[None] + chroma[:, None, None] + blob[:, None, None] * blob_sign[None]
    return np.clip(image, 0.0, 1.0)


def generate_task(spec: RoutingTaskSpec) -> RoutingDataset:
    """Generate the routing dataset.

    Labels are balanced per class by cycling through the four levels; the
    sample order is shuffled once from the seed. Every sample draws its
    remaining attributes from its own seed so generation order does not
    change the result.

    Args:
        spec: Task configuration

    Returns:
        RoutingDataset with ``num_classes * samples_per_class`` samples
    """
    class_names = spec.class_names
    pairs = [(c, j % NUM_LEVELS) for c in range(spec.num_classes) for j in range(spec.samples_per_class)]
    order = np.random.default_rng([spec.seed, 0]).permutation(len(pairs))
    n_templates = spec.templates_per_class if spec.num_classes > 1 else 1

    images, instructions, classes, labels, all_levels = [], [], [], [], []
    for i, pair_index in enumerate(order):
        cls, label = pairs[pair_index]
        rng = np.random.default_rng([spec.seed, 1, i])
        levels = [int(v) for v in rng.integers(0, NUM_LEVELS, size=4)]
        levels[cls] = label
        layout = int(rng.integers(0, 4))
        template = int(rng.integers(0, n_templates))
        image = render_image(tuple(levels), layout, spec.image_size)
        if spec.noise_std > 0:
            image = np.clip(image + rng.normal(0.0, spec.noise_std, size=image.shape), 0.0, 1.0)
        images.append(image)
        instructions.append(INSTRUCTION_TEMPLATES[class_names[cls]][template])
        classes.append(cls)
        labels.append(label)
        all_levels.append(levels)

    logger.info(f"Generated routing task: {len(images)} samples, {spec.num_classes} classes, seed {spec.seed}")
    return RoutingDataset(
        images=torch.from_numpy(np.stack(images)).float(),
        instructions=instructions,
        class_index=torch.tensor(classes, dtype=torch.long),
        labels=torch.tensor(labels, dtype=torch.long),
        levels=torch.tensor(all_levels, dtype=torch.long),
        class_names=class_names,
    )


def encode_dataset(
    dataset: RoutingDataset,
    encoders: list[MockEncoder],
    text_encoder: MockTextEncoder,
) -> EncodedDataset:
    """Run every encoder and the text embedder over the dataset once."""
    return EncodedDataset(
        features=[enc.encode_batch(dataset.images) for enc in encoders],
        text=text_encoder.embed_batch(dataset.instructions),
        labels=dataset.labels,
        class_index=dataset.class_index,
        class_names=dataset.class_names,
    )


def view_statistic(class_name: str, pooled: torch.Tensor) -> torch.Tensor:
    """Scalar per sample from the pooled informative view of a class.

    Args:
        class_name: Instruction class
        pooled: (S, C_n) spatially averaged informative-view features

    Returns:
        (S,) statistic monotone in the class's attribute level
    """
    if class_name == "color":
        return pooled[:, 0] - pooled[:, 2]
    if class_name == "tone":
        return pooled[:, 1:].mean(dim=1)
    return pooled.mean(dim=1)


class ThresholdOracle:
    """Fixed threshold rule recovering labels from the informative view alone.

    Thresholds are midpoints between the statistics of clean single-level
    prototypes.
    """

    def __init__(self, spec: RoutingTaskSpec, encoders: list[MockEncoder]):
        self.spec = spec
        self.encoders = encoders
        self.thresholds: dict[str, torch.Tensor] = {}
        for name in spec.class_names:
            cls = CLASS_NAMES.index(name)
            prototypes = []
            for level in range(NUM_LEVELS):
                levels = [0, 0, 0, 0]
                levels[cls] = level
                prototypes.append(render_image(tuple(levels), 0, spec.image_size))
            batch = torch.from_numpy(np.stack(prototypes)).float()
            stats = view_statistic(name, self._pooled(name, batch))
            self.thresholds[name] = (stats[1:] + stats[:-1]) / 2

    def _pooled(self, class_name: str, images: torch.Tensor) -> torch.Tensor:
        encoder = self.encoders[self.spec.informative_index(class_name)]
        return encoder.encode_batch(images).mean(dim=(2, 3))

    def predict(self, class_name: str, images: torch.Tensor) -> torch.Tensor:
        """(S,) predicted levels for images of one class."""
        stats = view_statistic(class_name, self._pooled(class_name, images))
        return torch.bucketize(stats, self.thresholds[class_name])


def probe_views(
    dataset: RoutingDataset,
    encoders: list[MockEncoder],
    steps: int = 500,
    lr: float = 0.1,
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Train a logistic probe per (view, class) on pooled view features.

    Args:
        dataset: Routing samples
        encoders: Views to probe
        steps: Full-batch Adam steps per probe
        lr: Probe learning rate
        seed: Probe initialization seed

    Returns:
        Nested mapping view name -> class name -> training accuracy
    """
    results: dict[str, dict[str, float]] = {}
    for encoder in encoders:
        pooled_all = encoder.encode_batch(dataset.images).mean(dim=(2, 3)).double()
        results[encoder.name] = {}
        for cls, name in enumerate(dataset.class_names):
            mask = dataset.class_index == cls
            x = pooled_all[mask]
            y = dataset.labels[mask]
            std = x.std(dim=0, correction=0)
            # constant features (up to rounding) carry nothing
            x = torch.where(std > 1e-4, (x - x.mean(dim=0)) / std.clamp_min(1e-4), torch.zeros_like(x))
            g = torch.Generator().manual_seed(seed)
            weight = (torch.randn(x.shape[1], NUM_LEVELS, generator=g, dtype=torch.float64) * 0.01).requires_grad_()
            bias = torch.zeros(NUM_LEVELS, dtype=torch.float64, requires_grad=True)
            optimizer = torch.optim.Adam([weight, bias], lr=lr)
            for _ in range(steps):
                optimizer.zero_grad()
                loss = torch.nn.functional.cross_entropy(x @ weight + bias, y)
                loss.backward()
                optimizer.step()
            with torch.no_grad():
                accuracy = ((x @ weight + bias).argmax(dim=1) == y).double().mean().item()
            results[encoder.name][name] = accuracy
            logger.debug(f"Probe {encoder.name} on {name}: accuracy {accuracy:.3f}")
    return results
