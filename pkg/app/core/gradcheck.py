"""Finite-difference verification of the fusor's analytic gradients."""

from __future__ import annotations

from typing import Callable

import torch
from pydantic import BaseModel, Field

from app.core.fusor import VisionFusor, parameter_groups, randomize_parameters
from app.core.fusor_model import FusorConfig
from app.logger import logger

# Shipped tiny configuration (a few hundred parameters)
TINY_CONFIG = FusorConfig(
    num_encoders=2,
    num_queries=2,
    num_layers=2,
    channels=2,
    height=2,
    width=2,
    heads=1,
    text_dim=3,
    gate_hidden=3,
    out_dim=2,
    encoder_channels=[2, 3],
    seed=0,
)

MAX_PARAMETERS = 2000
RELATIVE_FLOOR = 1e-5

GradTransform = Callable[[str, torch.Tensor], torch.Tensor]


class GroupError(BaseModel):
    """Worst mismatch within one parameter group.

    Attributes:
        group: Parameter group name
        num_params: Scalar parameters checked
        max_rel_error: Largest relative error over the group
        passed: Whether max_rel_error is below the tolerance
    """
    group: str
    num_params: int
    max_rel_error: float
    passed: bool


class GradCheckReport(BaseModel):
    """Per-group gradient check results.

    Attributes:
        step: Central-difference step
        tolerance: Relative error threshold
        groups: One entry per checked (non-frozen) group
    """
    step: float
    tolerance: float
    groups: list[GroupError] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)


def _inputs(model: VisionFusor, seed: int, batch: int = 2):
    config = model.config
    g = torch.Generator().manual_seed(seed + 1)
    features = []
    for index, n_ch in enumerate(config.native_channels):
        # alternate native sizes so resampling is part of the graph
        scale = 2 if index % 2 else 1
        shape = (batch, n_ch, config.height * scale, config.width * scale)
        features.append(torch.randn(shape, generator=g, dtype=torch.float64))
    text = torch.randn(batch, config.text_dim, generator=g, dtype=torch.float64)
    weights = torch.randn(batch, config.height * config.width, config.out_dim, generator=g, dtype=torch.float64)
    return features, text, weights


def grad_check(
    config: FusorConfig = TINY_CONFIG,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    frozen: set[str] | None = None,
    grad_transform: GradTransform | None = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences in fp64.

    Every parameter (zero-initialized ones included) is first randomized so
    that no group sits at a degenerate point. The loss is a fixed random
    projection of the output tokens.

    Args:
        config: Fusor configuration (must stay below MAX_PARAMETERS)
        seed: Seed for parameters and inputs
        step: Central-difference step
        tolerance: Maximum accepted relative error
        frozen: Group names to exclude from the check
        grad_transform: Hook applied to each analytic gradient before the
            comparison; used to inject corrupted gradients in tests

    Returns:
        GradCheckReport with one entry per checked group
    """
    frozen = frozen or set()
    model = VisionFusor(config).double()
    randomize_parameters(model, seed)
    n_params = sum(p.numel() for p in model.parameters())
    if n_params >= MAX_PARAMETERS:
        raise ValueError(f"Gradient check needs < {MAX_PARAMETERS} parameters, config has {n_params}")

    groups = parameter_groups(model)
    for name in frozen:
        if name not in groups:
            raise KeyError(f"Unknown parameter group {name!r}")
        for _, param in groups[name]:
            param.requires_grad_(False)

    features, text, weights = _inputs(model, seed)

    def loss_fn() -> torch.Tensor:
        return (model(features, text).tokens * weights).sum()

    model.zero_grad()
    loss_fn().backward()

    report = GradCheckReport(step=step, tolerance=tolerance)
    with torch.no_grad():
        for group, members in groups.items():
            if group in frozen:
                continue
            worst = 0.0
            count = 0
            for name, param in members:
                analytic = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
                if grad_transform is not None:
                    analytic = grad_transform(name, analytic)
                flat = param.view(-1)
                for i in range(flat.numel()):
                    original = flat[i].item()
                    flat[i] = original + step
                    plus = loss_fn().item()
                    flat[i] = original - step
                    minus = loss_fn().item()
                    flat[i] = original
                    numeric = (plus - minus) / (2 * step)
                    a = analytic.view(-1)[i].item()
                    denom = max(abs(a), abs(numeric), RELATIVE_FLOOR)
                    worst = max(worst, abs(a - numeric) / denom)
                    count += 1
            entry = GroupError(group=group, num_params=count, max_rel_error=worst, passed=worst < tolerance)
            report.groups.append(entry)
            level = "info" if entry.passed else "warning"
            getattr(logger, level)(f"gradcheck {group}: {count} params, max rel error {worst:.3e}")
    return report


class GradCheckFailedError(RuntimeError):
    """Raised by callers that require every group to pass."""

    def __init__(self, report: GradCheckReport):
        self.report = report
        failed = [g.group for g in report.groups if not g.passed]
        super().__init__(
            f"Gradient check failed for {', '.join(failed)} "
            f"(max rel error {report.max_rel_error:.3e} >= {report.tolerance:.1e})"
        )


class GradCheckSettings(BaseModel):
    """Settings read from ``configs/tiny.yaml``."""
    fusor: FusorConfig = Field(default_factory=lambda: TINY_CONFIG.model_copy())
    seed: int = 0
    step: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)
    frozen: list[str] = Field(default_factory=list)


def run_grad_check(settings: GradCheckSettings) -> GradCheckReport:
    """Run ``grad_check`` from settings and require every group to pass.

    Raises:
        GradCheckFailedError: If any group exceeds the tolerance
    """
    report = grad_check(
        config=settings.fusor,
        seed=settings.seed,
        step=settings.step,
        tolerance=settings.tolerance,
        frozen=set(settings.frozen),
    )
    if not report.passed:
        raise GradCheckFailedError(report)
    return report
