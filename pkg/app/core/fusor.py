"""Language-guided multi-view vision fusor.

The fusor turns N encoder feature maps plus an instruction embedding into
H*W output tokens:

1. every encoder map is channel-adapted (when needed) and bilinearly
   resampled to the canonical (C, H, W) shape;
2. an instruction-conditioned query is synthesized from a bank of M
   learnable C x H x W queries;
3. each of L fusion layers extracts one feature per encoder by
   cross-attention from the current query, weights them with a gating MLP
   over (aligned text, pooled features), fuses them and runs the fused map
   through a pre-norm transformer block whose output is the next query;
4. the last block output is projected to D_out.

Tensors are batched ``(B, C, H, W)``; the unbatched ``(C, H, W)`` form is
accepted everywhere and returned with a leading batch of one.
"""

from __future__ import annotations

import copy
import math
import re
from collections import OrderedDict

import torch
import torch.nn.functional as F
from torch import nn

from app.core.fusor_model import FusorConfig, FusorConfigError, FusorOutput


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    """Add a batch axis to a single (C, H, W) map."""
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() != 4:
        raise FusorConfigError(f"Expected a (C, H, W) or (B, C, H, W) map, got shape {tuple(x.shape)}")
    return x


def _to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)"""
    return x.flatten(2).transpose(1, 2)


def _from_tokens(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)"""
    batch, _, channels = tokens.shape
    return tokens.transpose(1, 2).reshape(batch, channels, height, width)


def multi_head_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
) -> torch.Tensor:
    """Scaled dot-product attention over already-projected tokens.

    Args:
        q: (B, Tq, C) queries
        k: (B, Tk, C) keys
        v: (B, Tk, C) values
        heads: Number of heads; must divide C

    Returns:
        (B, Tq, C) attended values with heads merged back
    """
    batch, tq, channels = q.shape
    tk = k.shape[1]
    head_dim = channels // heads
    qh = q.reshape(batch, tq, heads, head_dim).transpose(1, 2)
    kh = k.reshape(batch, tk, heads, head_dim).transpose(1, 2)
    vh = v.reshape(batch, tk, heads, head_dim).transpose(1, 2)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(head_dim)
    out = torch.softmax(scores, dim=-1) @ vh
    return out.transpose(1, 2).reshape(batch, tq, channels)


class QueryGenerator(nn.Module):
    """Synthesizes one query map from the learnable bank and the aligned text."""

    def __init__(self, config: FusorConfig):
        super().__init__()
        c = config.channels
        self.bank = nn.Parameter(torch.empty(config.num_queries, c, config.height, config.width))
        self.w_q = nn.Linear(c, c, bias=False)
        self.w_k = nn.Linear(c, c, bias=False)
        self.w_v = nn.Linear(c, c, bias=False)


class EncoderProjection(nn.Module):
    """Per-encoder cross-attention projections of one fusion layer."""

    def __init__(self, channels: int):
        super().__init__()
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k = nn.Linear(channels, channels, bias=False)
        self.w_v = nn.Linear(channels, channels, bias=False)


class FusionBlock(nn.Module):
    """Pre-norm self-attention + feedforward block with residual links."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(channels)
        self.w_q = nn.Linear(channels, channels)
        self.w_k = nn.Linear(channels, channels)
        self.w_v = nn.Linear(channels, channels)
        self.w_o = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.ff_in = nn.Linear(channels, 2 * channels)
        self.ff_out = nn.Linear(2 * channels, channels)


class FusionLayer(nn.Module):
    """One fusion layer: N extraction projections, a gating MLP and a block."""

    def __init__(self, config: FusorConfig):
        super().__init__()
        c, n = config.channels, config.num_encoders
        self.projections = nn.ModuleList(EncoderProjection(c) for _ in range(n))
        self.gate = nn.Sequential(
            nn.Linear((n + 1) * c, config.gate_hidden),
            nn.Tanh(),
            nn.Linear(config.gate_hidden, n),
        )
        self.block = FusionBlock(c, config.heads)


def generate_query(
    text_aligned: torch.Tensor,
    generator: QueryGenerator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Build the instruction-specific query from the query bank.

    Each bank entry is scored through its spatially pooled descriptor; the
    query is the attention-weighted sum of the value-projected entries.

    Args:
        text_aligned: (B, C) text embedding after the text alignment projection
        generator: Query bank and its projections

    Returns:
        Tuple of (query (B, C, H, W), attention (B, M))
    """
    bank = generator.bank
    channels = bank.shape[1]
    if text_aligned.shape[-1] != channels:
        raise FusorConfigError(
            f"Aligned text has width {text_aligned.shape[-1]}, query bank has {channels} channels"
        )
    q = generator.w_q(text_aligned)
    keys = generator.w_k(bank.mean(dim=(2, 3)))
    attention = torch.softmax(q @ keys.T / math.sqrt(channels), dim=-1)
    values = torch.einsum("oc,mchw->mohw", generator.w_v.weight, bank)
    query = torch.einsum("bm,mchw->bchw", attention, values)
    return query, attention


def interpolate(x: torch.Tensor, target: tuple[int, int, int]) -> torch.Tensor:
    """Bilinearly resample a feature map to ``target`` = (C, H, W).

    Args:
        x: (C, H, W) or (B, C, H, W) map whose channel count already equals C
        target: Canonical shape

    Returns:
        Resampled map with the same batching as ``x``; ``x`` itself when the
        spatial shape already matches

    Raises:
        ValueError: If any target dimension is < 1
        FusorConfigError: If the channel count differs from the target
    """
    channels, height, width = target
    if min(target) < 1:
        raise ValueError(f"Target shape must be positive, got {target}")
    if x.shape[-3] != channels:
        raise FusorConfigError(
            f"Map has {x.shape[-3]} channels, target has {channels}; configure a channel adapter"
        )
    if tuple(x.shape[-2:]) == (height, width):
        return x
    unbatched = x.dim() == 3
    out = F.interpolate(_as_batch(x), size=(height, width), mode="bilinear", align_corners=False)
    return out.squeeze(0) if unbatched else out


def extract_features(
    query: torch.Tensor,
    features: list[torch.Tensor],
    layer: FusionLayer,
) -> list[torch.Tensor]:
    """Cross-attend from the query into every encoder map.

    Args:
        query: (B, C, H, W) current query
        features: N canonical (B, C, H, W) encoder maps
        layer: Fusion layer holding the per-encoder projections

    Returns:
        N extracted (B, C, H, W) maps
    """
    if len(features) != len(layer.projections):
        raise FusorConfigError(
            f"Got {len(features)} encoder maps, layer has {len(layer.projections)} projections"
        )
    _, _, height, width = query.shape
    heads = layer.block.heads
    q_tokens = _to_tokens(query)
    extracted = []
    for proj, x in zip(layer.projections, features):
        x_tokens = _to_tokens(x)
        out = multi_head_attention(proj.w_q(q_tokens), proj.w_k(x_tokens), proj.w_v(x_tokens), heads)
        extracted.append(_from_tokens(out, height, width))
    return extracted


def gate_weights(
    text_aligned: torch.Tensor,
    features: list[torch.Tensor],
    gate: nn.Module,
) -> torch.Tensor:
    """Predict the encoder weights of one layer.

    Args:
        text_aligned: (B, C) aligned instruction embedding
        features: N extracted (B, C, H, W) maps
        gate: Gating MLP

    Returns:
        (B, N) nonnegative weights summing to 1
    """
    pooled = [f.mean(dim=(2, 3)) for f in features]
    logits = gate(torch.cat([text_aligned, *pooled], dim=-1))
    return torch.softmax(logits, dim=-1)


def fuse(weights: torch.Tensor, features: list[torch.Tensor]) -> torch.Tensor:
    """Weighted sum of the N extracted maps.

    Args:
        weights: (B, N) or (N,) gate weights
        features: N maps, each (B, C, H, W) or (C, H, W)

    Returns:
        Fused map shaped like each input map

    Raises:
        ValueError: If the number of weights and maps differ
    """
    if weights.shape[-1] != len(features):
        raise ValueError(f"{weights.shape[-1]} gate weights for {len(features)} feature maps")
    stacked = torch.stack(features, dim=-4)
    return (weights[..., None, None, None] * stacked).sum(dim=-4)


def block_forward(fused: torch.Tensor, block: FusionBlock) -> torch.Tensor:
    """Run the fused map through one pre-norm transformer block.

    Args:
        fused: (B, C, H, W) fused map
        block: Block parameters

    Returns:
        (B, C, H, W) block output
    """
    _, _, height, width = fused.shape
    x = _to_tokens(fused)
    h = block.norm1(x)
    attn = multi_head_attention(block.w_q(h), block.w_k(h), block.w_v(h), block.heads)
    x = x + block.w_o(attn)
    x = x + block.ff_out(F.gelu(block.ff_in(block.norm2(x))))
    return _from_tokens(x, height, width)


class VisionFusor(nn.Module):
    """All learnable fusor parameters plus the forward pass."""

    def __init__(self, config: FusorConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.text_align = nn.Linear(config.text_dim, c)
        self.query_gen = QueryGenerator(config)
        self.adapters = nn.ModuleList(
            nn.Identity() if n_ch == c else nn.Linear(n_ch, c)
            for n_ch in config.native_channels
        )
        self.layers = nn.ModuleList(FusionLayer(config) for _ in range(config.num_layers))
        self.out_proj = nn.Sequential(nn.Linear(c, c), nn.GELU(), nn.Linear(c, config.out_dim))
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """Seeded init: fan-in uniform weights, zero sublayer outputs and gate heads."""
        g = torch.Generator().manual_seed(seed)
        zeroed = set()
        for layer in self.layers:
            zeroed.update({id(layer.block.w_o), id(layer.block.ff_out), id(layer.gate[2])})
        with torch.no_grad():
            self.query_gen.bank.uniform_(-1.0, 1.0, generator=g)
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    if id(module) in zeroed:
                        module.weight.zero_()
                        if module.bias is not None:
                            module.bias.zero_()
                        continue
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.uniform_(-bound, bound, generator=g)
                    if module.bias is not None:
                        module.bias.uniform_(-bound, bound, generator=g)
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    def prepare_features(self, features: list[torch.Tensor]) -> list[torch.Tensor]:
        """Channel-adapt and resample native encoder maps to the canonical shape."""
        config = self.config
        if len(features) != config.num_encoders:
            raise FusorConfigError(f"Expected {config.num_encoders} encoder maps, got {len(features)}")
        prepared = []
        for index, (x, adapter, n_ch) in enumerate(zip(features, self.adapters, config.native_channels)):
            x = _as_batch(x)
            if x.shape[1] != n_ch:
                raise FusorConfigError(f"Encoder {index + 1} emitted {x.shape[1]} channels, configured {n_ch}")
            if not torch.isfinite(x).all():
                raise FusorConfigError(f"Encoder {index + 1} map has non-finite values")
            if not isinstance(adapter, nn.Identity):
                x = adapter(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
            prepared.append(interpolate(x, config.canonical_shape))
        return prepared

    def align_text(self, text: torch.Tensor) -> torch.Tensor:
        """(B, D_t) or (D_t,) instruction embedding -> (B, C)."""
        if text.dim() == 1:
            text = text.unsqueeze(0)
        if text.shape[-1] != self.config.text_dim:
            raise FusorConfigError(f"Instruction embedding has dim {text.shape[-1]}, configured {self.config.text_dim}")
        return self.text_align(text)

    def forward(self, features: list[torch.Tensor], text: torch.Tensor) -> FusorOutput:
        """Fuse N native encoder maps under an instruction embedding.

        Args:
            features: N maps, each (B, C_n, H_n, W_n) or (C_n, H_n, W_n)
            text: (B, D_t) or (D_t,) instruction embedding

        Returns:
            FusorOutput with tokens, gate trace and query attention
        """
        config = self.config
        xs = self.prepare_features(features)
        aligned = self.align_text(text)
        batch = xs[0].shape[0]
        if aligned.shape[0] != batch:
            raise FusorConfigError(f"Batch of {aligned.shape[0]} embeddings for {batch} images")

        query, attention = generate_query(aligned, self.query_gen)
        n, steps = config.num_encoders, config.num_layers

        if config.mode == "baseline_no_fusor":
            trace = torch.zeros(batch, steps, n, dtype=xs[0].dtype)
            trace[:, :, 0] = 1.0
            tokens = self.out_proj(_to_tokens(xs[0]))
            return FusorOutput(tokens=tokens, gate_trace=trace, query_attention=attention, fused_maps=[xs[0]])
        if config.mode not in ("full", "single_encoder"):
            raise FusorConfigError(f"Unknown fusor mode {config.mode!r}")

        trace = []
        fused_maps = []
        for layer in self.layers:
            extracted = extract_features(query, xs, layer)
            if config.mode == "single_encoder":
                weights = F.one_hot(
                    torch.full((batch,), config.active_encoder - 1), num_classes=n
                ).to(query.dtype)
            else:
                weights = gate_weights(aligned, extracted, layer.gate)
            fused = fuse(weights, extracted)
            fused_maps.append(fused)
            query = block_forward(fused, layer.block)
            trace.append(weights)

        tokens = self.out_proj(_to_tokens(query))
        return FusorOutput(
            tokens=tokens,
            gate_trace=torch.stack(trace, dim=1),
            query_attention=attention,
            fused_maps=fused_maps,
        )

    def with_mode(self, mode: str, active_encoder: int | None = None) -> "VisionFusor":
        """Shallow view of this fusor sharing parameters but running another mode."""
        view = copy.copy(self)
        view.config = self.config.with_mode(mode, active_encoder)
        return view

    def permute_encoders(self, perm: list[int]) -> "VisionFusor":
        """Copy of this fusor whose encoder ``i`` is this fusor's encoder ``perm[i]``.

        Feeding ``[features[p] for p in perm]`` to the copy yields the same
        fused maps and a gate trace permuted the same way.
        """
        n = self.config.num_encoders
        if sorted(perm) != list(range(n)):
            raise ValueError(f"{perm} is not a permutation of range({n})")
        config_data = self.config.model_dump()
        if self.config.encoder_channels is not None:
            config_data["encoder_channels"] = [self.config.encoder_channels[p] for p in perm]
        if self.config.active_encoder is not None:
            config_data["active_encoder"] = perm.index(self.config.active_encoder - 1) + 1
        permuted = copy.deepcopy(self)
        permuted.config = FusorConfig.model_validate(config_data)
        permuted.adapters = nn.ModuleList(copy.deepcopy(self.adapters[p]) for p in perm)
        c = self.config.channels
        with torch.no_grad():
            for old, new in zip(self.layers, permuted.layers):
                new.projections = nn.ModuleList(copy.deepcopy(old.projections[p]) for p in perm)
                first, last = old.gate[0], old.gate[2]
                blocks = [first.weight[:, :c]] + [first.weight[:, (p + 1) * c:(p + 2) * c] for p in perm]
                new.gate[0].weight.copy_(torch.cat(blocks, dim=1))
                new.gate[2].weight.copy_(last.weight[perm])
                new.gate[2].bias.copy_(last.bias[perm])
        return permuted


_GROUP_PATTERNS = [
    (re.compile(r"^query_gen\.bank$"), "query_bank"),
    (re.compile(r"^query_gen\."), "qgen"),
    (re.compile(r"^text_align\."), "text_align"),
    (re.compile(r"^adapters\."), "adapters"),
    (re.compile(r"^layers\.(\d+)\.projections\."), "layers.{}.extract"),
    (re.compile(r"^layers\.(\d+)\.gate\."), "layers.{}.gate"),
    (re.compile(r"^layers\.(\d+)\.block\."), "layers.{}.block"),
    (re.compile(r"^out_proj\."), "out_proj"),
]


def parameter_group(name: str) -> str:
    """Map a parameter name to its reporting group."""
    for pattern, group in _GROUP_PATTERNS:
        match = pattern.match(name)
        if match:
            return group.format(*match.groups())
    raise KeyError(f"No parameter group for {name}")


def parameter_groups(model: VisionFusor) -> "OrderedDict[str, list[tuple[str, nn.Parameter]]]":
    """Group named parameters in registration order."""
    groups: OrderedDict[str, list[tuple[str, nn.Parameter]]] = OrderedDict()
    for name, param in model.named_parameters():
        groups.setdefault(parameter_group(name), []).append((name, param))
    return groups


def randomize_parameters(model: VisionFusor, seed: int, scale: float = 0.5) -> None:
    """Overwrite every parameter with U(-scale, scale) noise, including zero-initialized ones."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, param in model.named_parameters():
            noise = torch.empty(param.shape, dtype=torch.float64).uniform_(-scale, scale, generator=g)
            param.copy_(noise.to(param.dtype))
