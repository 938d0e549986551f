"""Encoder views and text embedders feeding the fusor.

The four mock encoders are deterministic tensor programs that each keep a
different part of the image signal:

- ``downsample``: 4x4-style average pooling, the coarse appearance view;
- ``edge``: pooled |dx| + |dy| finite differences, the structure view;
- ``stat``: per-block luminance mean and per-channel standard deviation,
  the local color/tone statistics view;
- ``blur``: Gaussian-smoothed coarse map with its per-channel mean removed,
  the region/segmentation view.

Their native shapes differ on purpose so the fusor's resampling path is
always exercised.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from app.logger import logger

MOCK_ENCODER_NAMES = ("downsample", "edge", "stat", "blur")

# Output gains put every view roughly on a unit scale
DOWNSAMPLE_GAIN = 10.0
EDGE_GAIN = 2.5
STAT_MEAN_GAIN = 2.0
STAT_STD_GAIN = 30.0
BLUR_GAIN = 30.0
BLUR_SIGMA = 1.0


class UnknownEncoderError(ValueError):
    """Raised when a mock encoder name is not known."""


@dataclass
class SyntheticImage:
    """An RGB image with values in [0, 1].

    Attributes:
        values: (3, H, W) float tensor
        meta: Optional attributes used to build the image
    """
    values: torch.Tensor
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.values.dim() != 3 or self.values.shape[0] != 3:
            raise ValueError(f"SyntheticImage needs a (3, H, W) tensor, got {tuple(self.values.shape)}")
        if self.values.shape[1] < 8 or self.values.shape[2] < 8:
            raise ValueError(f"SyntheticImage must be at least 8x8, got {tuple(self.values.shape[1:])}")
        if not torch.isfinite(self.values).all():
            raise ValueError("SyntheticImage values must be finite")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("SyntheticImage values must lie in [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return (self.values.shape[1], self.values.shape[2])


class EncoderAdapter(Protocol):
    """A vision encoder view: image -> (C_n, H_n, W_n) feature map."""

    name: str
    native_shape: tuple[int, int, int]

    def encode(self, image: SyntheticImage) -> torch.Tensor: ...

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor: ...


class TextEncoderAdapter(Protocol):
    """An instruction embedder: string -> (D_t,) vector."""

    name: str
    dim: int

    def embed(self, text: str) -> torch.Tensor: ...

    def embed_batch(self, texts: list[str]) -> torch.Tensor: ...


def _pool_to(x: torch.Tensor, size: int) -> torch.Tensor:
    """Average-pool (B, C, H, W) square images down to size x size."""
    return F.avg_pool2d(x, kernel_size=x.shape[-1] // size)


def _downsample_view(x: torch.Tensor) -> torch.Tensor:
    return (_pool_to(x, 8) - 0.5) * DOWNSAMPLE_GAIN


def _edge_view(x: torch.Tensor) -> torch.Tensor:
    # replicate padding: the last row/column has zero difference
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return F.avg_pool2d(dx.abs() + dy.abs(), kernel_size=2) * EDGE_GAIN


def _stat_view(x: torch.Tensor) -> torch.Tensor:
    pooled = F.avg_pool2d(x, kernel_size=2)
    blocks = pooled.unfold(2, 4, 4).unfold(3, 4, 4)
    lum_mean = blocks.mean(dim=1).mean(dim=(-2, -1)).unsqueeze(1)
    channel_std = blocks.flatten(-2).std(dim=-1, correction=0)
    return torch.cat([lum_mean * STAT_MEAN_GAIN, channel_std * STAT_STD_GAIN], dim=1)


def _gaussian_kernel(sigma: float, radius: int) -> torch.Tensor:
    offsets = torch.arange(-radius, radius + 1, dtype=torch.float64)
    kernel = torch.exp(-(offsets**2) / (2 * sigma**2))
    return kernel / kernel.sum()


def _blur_view(x: torch.Tensor) -> torch.Tensor:
    coarse = _pool_to(x, 8)
    channels = coarse.shape[1]
    kernel = _gaussian_kernel(BLUR_SIGMA, 2).to(coarse.dtype)
    radius = kernel.numel() // 2
    horizontal = kernel.view(1, 1, 1, -1).repeat(channels, 1, 1, 1)
    vertical = kernel.view(1, 1, -1, 1).repeat(channels, 1, 1, 1)
    smooth = F.conv2d(F.pad(coarse, (radius, radius, 0, 0), mode="replicate"), horizontal, groups=channels)
    smooth = F.conv2d(F.pad(smooth, (0, 0, radius, radius), mode="replicate"), vertical, groups=channels)
    return (smooth - smooth.mean(dim=(2, 3), keepdim=True)).abs() * BLUR_GAIN


_VIEWS: dict[str, tuple[Callable[[torch.Tensor], torch.Tensor], Callable[[int], tuple[int, int, int]]]] = {
    "downsample": (_downsample_view, lambda size: (3, 8, 8)),
    "edge": (_edge_view, lambda size: (3, size // 2, size // 2)),
    "stat": (_stat_view, lambda size: (4, size // 8, size // 8)),
    "blur": (_blur_view, lambda size: (3, 8, 8)),
}


class MockEncoder:
    """Deterministic encoder view backed by a fixed tensor program."""

    def __init__(self, name: str, image_size: int = 32):
        if name not in _VIEWS:
            raise UnknownEncoderError(f"Unknown mock encoder {name!r}; choose from {', '.join(MOCK_ENCODER_NAMES)}")
        if image_size < 8 or image_size % 8 != 0:
            raise ValueError(f"Mock encoders need a square image size divisible by 8, got {image_size}")
        self.name = name
        self.image_size = image_size
        self._view, shape_fn = _VIEWS[name]
        self.native_shape = shape_fn(image_size)

    def __repr__(self) -> str:
        return f"MockEncoder({self.name!r}, native_shape={self.native_shape})"

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        """Encode a (B, 3, S, S) batch into (B, C_n, H_n, W_n) maps."""
        if tuple(images.shape[-3:]) != (3, self.image_size, self.image_size):
            raise ValueError(
                f"{self.name} expects (3, {self.image_size}, {self.image_size}) images, got {tuple(images.shape[-3:])}"
            )
        with torch.no_grad():
            return self._view(images)

    def encode(self, image: SyntheticImage) -> torch.Tensor:
        """Encode one image into its (C_n, H_n, W_n) map."""
        return self.encode_batch(image.values.unsqueeze(0))[0]


def mock_encoders(names: list[str] | tuple[str, ...] = MOCK_ENCODER_NAMES, image_size: int = 32) -> list[MockEncoder]:
    """Build mock encoders in the given order.

    Args:
        names: Subset of downsample, edge, stat, blur
        image_size: Side of the square input images

    Returns:
        One MockEncoder per name

    Raises:
        UnknownEncoderError: If a name is not a known view
    """
    encoders = [MockEncoder(name, image_size) for name in names]
    logger.debug(f"Built mock encoders: {encoders}")
    return encoders


class MockTextEncoder:
    """Hashed bag-of-words embedder.

    Lower-cased whitespace tokens are hashed (blake2b) into a seeded table of
    ``dim``-wide vectors; the embedding is their mean. The empty string maps
    to the zero vector.
    """

    def __init__(self, dim: int = 32, table_size: int = 4096, seed: int = 0):
        self.name = "mock-hash"
        self.dim = dim
        self.table_size = table_size
        g = torch.Generator().manual_seed(seed)
        self.table = torch.randn(table_size, dim, generator=g) / math.sqrt(dim)

    def token_index(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.table_size

    def embed(self, text: str) -> torch.Tensor:
        """Embed one instruction string into a (dim,) vector."""
        tokens = text.lower().split()
        if not tokens:
            return torch.zeros(self.dim)
        indices = torch.tensor([self.token_index(t) for t in tokens])
        return self.table[indices].mean(dim=0)

    def embed_batch(self, texts: list[str]) -> torch.Tensor:
        """Embed several strings into a (B, dim) tensor."""
        return torch.stack([self.embed(t) for t in texts])


def mock_text_encoder(dim: int = 32, table_size: int = 4096, seed: int = 0) -> MockTextEncoder:
    """Build the shipped hashed text embedder."""
    return MockTextEncoder(dim=dim, table_size=table_size, seed=seed)


def load_image(path: str | Path, size: int = 32) -> SyntheticImage:
    """Load a photo from disk as a square SyntheticImage.

    Args:
        path: Image file readable by Pillow
        size: Output side length

    Returns:
        SyntheticImage resized with bilinear filtering
    """
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.Resampling.BILINEAR)
        array = np.asarray(rgb, dtype=np.float32) / 255.0
    values = torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()
    return SyntheticImage(values=values, meta={"source": str(path)})


def save_image(image: SyntheticImage, path: str | Path) -> Path:
    """Write a SyntheticImage as an 8-bit PNG."""
    array = (image.values.permute(1, 2, 0).clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(array).save(path)
    return Path(path)
