"""Data models for the vision fusor.

This module defines the configuration of a fusor, the per-layer gate
vectors it records and the containers returned by a forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Literal

import torch
from pydantic import BaseModel, Field, model_validator

FUSOR_FORMAT_VERSION = "fusor-v1"

FusorMode = Literal["full", "single_encoder", "baseline_no_fusor"]


class FusorConfigError(ValueError):
    """Raised when tensors or parameters disagree with the fusor configuration."""


class FusorConfig(BaseModel):
    """Shape and mode configuration of a vision fusor.

    Attributes:
        num_encoders: Number of encoder views N
        num_queries: Size M of the learnable query bank
        num_layers: Number of fusion layers L
        channels: Canonical channel count C
        height: Canonical height H
        width: Canonical width W
        text_dim: Instruction embedding width D_t
        heads: Attention heads (must divide channels)
        gate_hidden: Hidden width of each gating MLP
        out_dim: Output token width D_out
        mode: full, single_encoder or baseline_no_fusor
        active_encoder: 1-based encoder index used by single_encoder mode
        encoder_channels: Native channel count per encoder; a learned 1x1
            projection maps any count different from ``channels``
        seed: Initialization seed
    """
    num_encoders: int = Field(default=4, ge=1)
    num_queries: int = Field(default=8, ge=1)
    num_layers: int = Field(default=3, ge=1)
    channels: int = Field(default=8, ge=1)
    height: int = Field(default=8, ge=1)
    width: int = Field(default=8, ge=1)
    text_dim: int = Field(default=32, ge=1)
    heads: int = Field(default=2, ge=1)
    gate_hidden: int = Field(default=32, ge=1)
    out_dim: int = Field(default=16, ge=1)
    mode: FusorMode = "full"
    active_encoder: int | None = None
    encoder_channels: list[int] | None = None
    seed: int = 0

    @model_validator(mode="after")
    def _check_consistency(self) -> "FusorConfig":
        if self.channels % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.mode == "single_encoder":
            if self.active_encoder is None or not 1 <= self.active_encoder <= self.num_encoders:
                raise ValueError(
                    f"single_encoder mode needs 1 <= active_encoder <= {self.num_encoders}, "
                    f"got {self.active_encoder}"
                )
        if self.encoder_channels is not None:
            if len(self.encoder_channels) != self.num_encoders:
                raise ValueError(
                    f"encoder_channels has {len(self.encoder_channels)} entries, expected {self.num_encoders}"
                )
            if any(c < 1 for c in self.encoder_channels):
                raise ValueError("encoder_channels entries must be >= 1")
        return self

    @property
    def canonical_shape(self) -> tuple[int, int, int]:
        """(C, H, W) every encoder map is resampled to."""
        return (self.channels, self.height, self.width)

    @property
    def native_channels(self) -> list[int]:
        """Channel count each encoder emits."""
        return list(self.encoder_channels or [self.channels] * self.num_encoders)

    def with_mode(self, mode: FusorMode, active_encoder: int | None = None) -> "FusorConfig":
        """Return a copy of this config running in another mode."""
        data = self.model_dump()
        data["mode"] = mode
        data["active_encoder"] = active_encoder
        return FusorConfig.model_validate(data)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary."""
        return self.model_dump(mode="json")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FusorConfig":
        """Create from dictionary."""
        return cls.model_validate(data)


class GateVector(BaseModel):
    """Encoder importances for one fusion layer.

    Attributes:
        weights: Nonnegative weights, one per encoder, summing to 1
        layer_index: 1-based fusion layer
    """
    weights: list[float]
    layer_index: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_simplex(self) -> "GateVector":
        if not self.weights:
            raise ValueError("GateVector needs at least one weight")
        if any(w < 0 for w in self.weights):
            raise ValueError(f"GateVector weights must be >= 0: {self.weights}")
        if abs(math.fsum(self.weights) - 1.0) > 1e-6:
            raise ValueError(f"GateVector weights must sum to 1, got {math.fsum(self.weights)}")
        return self

    def argmax(self) -> int:
        """0-based index of the largest weight, lowest index on ties."""
        return max(range(len(self.weights)), key=lambda i: (self.weights[i], -i))


class GateReport(BaseModel):
    """Mean gate weights per layer over a sample set.

    Attributes:
        label: Grouping label, e.g. the instruction class
        sample_count: Number of samples averaged
        layers: One N-vector per fusion layer, each summing to 1
    """
    label: str
    sample_count: int = Field(ge=1)
    layers: list[list[float]]

    @model_validator(mode="after")
    def _check_layers(self) -> "GateReport":
        for index, weights in enumerate(self.layers, start=1):
            GateVector(weights=weights, layer_index=index)
        return self

    def layer_argmax(self, layer_index: int = 1) -> int:
        """0-based encoder with the largest mean weight at ``layer_index``."""
        return GateVector(weights=self.layers[layer_index - 1], layer_index=layer_index).argmax()


@dataclass
class FusorOutput:
    """Result of one batched fusor forward pass.

    Attributes:
        tokens: (B, H*W, D_out) output tokens
        gate_trace: (B, L, N) per-layer gate weights
        query_attention: (B, M) attention over the query bank
    """
    tokens: torch.Tensor
    gate_trace: torch.Tensor
    query_attention: torch.Tensor
    fused_maps: list[torch.Tensor] = field(default_factory=list)

    def gate_vectors(self, sample: int = 0) -> list[GateVector]:
        """Gate trace of one sample as validated GateVectors."""
        trace = self.gate_trace[sample].detach().double().tolist()
        return [GateVector(weights=w, layer_index=i) for i, w in enumerate(trace, start=1)]

    def pooled(self) -> torch.Tensor:
        """(B, D_out) mean of the output tokens."""
        return self.tokens.mean(dim=1)
