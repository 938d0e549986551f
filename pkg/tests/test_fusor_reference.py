"""Fusor ops checked against a plain-float reimplementation at tiny dims."""

import math

import pytest
import torch

from app.core.fusor import (
    FusionLayer,
    VisionFusor,
    block_forward,
    extract_features,
    gate_weights,
    generate_query,
    randomize_parameters,
)
from app.core.fusor_model import FusorConfig

# ============ Scalar reference ============


def _linear(module: torch.nn.Linear, x: list[float]) -> list[float]:
    w = module.weight.tolist()
    b = module.bias.tolist() if module.bias is not None else [0.0] * len(w)
    return [sum(w[o][c] * x[c] for c in range(len(x))) + b[o] for o in range(len(w))]


def _softmax(xs: list[float]) -> list[float]:
    exps = [math.exp(x - max(xs)) for x in xs]
    return [e / sum(exps) for e in exps]


def _attend(qs: list[list[float]], ks: list[list[float]], vs: list[list[float]], heads: int) -> list[list[float]]:
    dim = len(qs[0]) // heads
    out = [[0.0] * len(qs[0]) for _ in qs]
    for h in range(heads):
        sl = slice(h * dim, (h + 1) * dim)
        for i, q in enumerate(qs):
            scores = [sum(a * b for a, b in zip(q[sl], k[sl])) / math.sqrt(dim) for k in ks]
            probs = _softmax(scores)
            for j in range(dim):
                out[i][h * dim + j] = sum(p * v[sl][j] for p, v in zip(probs, vs))
    return out


def _layer_norm(module: torch.nn.LayerNorm, x: list[float]) -> list[float]:
    mean = sum(x) / len(x)
    var = sum((v - mean) ** 2 for v in x) / len(x)
    w, b = module.weight.tolist(), module.bias.tolist()
    return [(v - mean) / math.sqrt(var + module.eps) * w[c] + b[c] for c, v in enumerate(x)]


def _gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _tokens(x: torch.Tensor) -> list[list[float]]:
    """(C, H, W) map -> H*W row-major tokens of width C."""
    c, h, w = x.shape
    return [[x[ch, i, j].item() for ch in range(c)] for i in range(h) for j in range(w)]


def _extract(query: list[list[float]], maps: list[list[list[float]]], layer: FusionLayer) -> list[list[list[float]]]:
    heads = layer.block.heads
    out = []
    for proj, tokens in zip(layer.projections, maps):
        qs = [_linear(proj.w_q, t) for t in query]
        ks = [_linear(proj.w_k, t) for t in tokens]
        vs = [_linear(proj.w_v, t) for t in tokens]
        out.append(_attend(qs, ks, vs, heads))
    return out


def _gate(aligned: list[float], extracted: list[list[list[float]]], gate: torch.nn.Sequential) -> list[float]:
    pooled = [[sum(t[c] for t in tokens) / len(tokens) for c in range(len(tokens[0]))] for tokens in extracted]
    x = list(aligned) + [v for p in pooled for v in p]
    hidden = [math.tanh(v) for v in _linear(gate[0], x)]
    return _softmax(_linear(gate[2], hidden))


def _block(tokens: list[list[float]], block) -> list[list[float]]:
    normed = [_layer_norm(block.norm1, t) for t in tokens]
    attn = _attend(
        [_linear(block.w_q, t) for t in normed],
        [_linear(block.w_k, t) for t in normed],
        [_linear(block.w_v, t) for t in normed],
        block.heads,
    )
    x = [[a + b for a, b in zip(t, _linear(block.w_o, o))] for t, o in zip(tokens, attn)]
    ff = [_linear(block.ff_out, [_gelu(v) for v in _linear(block.ff_in, _layer_norm(block.norm2, t))]) for t in x]
    return [[a + b for a, b in zip(t, f)] for t, f in zip(x, ff)]


def _random_model(config: FusorConfig, seed: int) -> VisionFusor:
    model = VisionFusor(config).double()
    randomize_parameters(model, seed)
    return model


# ============ Per-op checks ============


def test_extract_features_matches_reference():
    config = FusorConfig(num_encoders=2, channels=2, height=1, width=2, heads=1)
    layer = _random_model(config, 11).layers[0]
    g = torch.Generator().manual_seed(2)
    query = torch.randn(1, 2, 1, 2, generator=g, dtype=torch.float64)
    maps = [torch.randn(1, 2, 1, 2, generator=g, dtype=torch.float64) for _ in range(2)]
    with torch.no_grad():
        extracted = extract_features(query, maps, layer)
        expected = _extract(_tokens(query[0]), [_tokens(m[0]) for m in maps], layer)
    for out, ref in zip(extracted, expected):
        assert _tokens(out[0]) == [pytest.approx(t, abs=1e-12) for t in ref]


def test_gate_weights_match_hand_computation():
    config = FusorConfig(num_encoders=2, channels=1, height=1, width=1, heads=1, gate_hidden=2)
    layer = FusionLayer(config).double()
    w1, b1 = [[0.5, -1.0, 0.25], [0.2, 0.4, -0.6]], [0.1, -0.2]
    w2, b2 = [[1.0, -0.5], [0.3, 0.8]], [0.05, -0.05]
    with torch.no_grad():
        layer.gate[0].weight.copy_(torch.tensor(w1))
        layer.gate[0].bias.copy_(torch.tensor(b1))
        layer.gate[2].weight.copy_(torch.tensor(w2))
        layer.gate[2].bias.copy_(torch.tensor(b2))
        weights = gate_weights(
            torch.tensor([[0.7]], dtype=torch.float64),
            [torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64), torch.full((1, 1, 1, 1), -1.0, dtype=torch.float64)],
            layer.gate,
        )

    # hidden pre-activations: 0.35 - 2.0 - 0.25 + 0.1 and 0.14 + 0.8 + 0.6 - 0.2
    h = [math.tanh(-1.8), math.tanh(1.34)]
    logits = [1.0 * h[0] - 0.5 * h[1] + 0.05, 0.3 * h[0] + 0.8 * h[1] - 0.05]
    total = math.exp(logits[0]) + math.exp(logits[1])
    assert weights[0].tolist() == pytest.approx([math.exp(v) / total for v in logits], abs=1e-12)


def test_block_forward_matches_reference():
    config = FusorConfig(channels=2, height=1, width=2, heads=1)
    block = _random_model(config, 5).layers[0].block
    fused = torch.tensor([[[[0.4, -1.1]], [[0.9, 0.3]]]], dtype=torch.float64)
    with torch.no_grad():
        out = block_forward(fused, block)
    expected = _block(_tokens(fused[0]), block)
    assert _tokens(out[0]) == [pytest.approx(t, abs=1e-12) for t in expected]


def test_fusor_forward_matches_composed_reference():
    config = FusorConfig(
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
    )
    model = _random_model(config, 21)
    g = torch.Generator().manual_seed(9)
    features = [torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64) for _ in range(2)]
    text = torch.randn(1, 3, generator=g, dtype=torch.float64)
    with torch.no_grad():
        out = model(features, text)

        aligned = _linear(model.text_align, text[0].tolist())
        qgen = model.query_gen
        q = _linear(qgen.w_q, aligned)
        keys = [_linear(qgen.w_k, qgen.bank[m].mean(dim=(1, 2)).tolist()) for m in range(2)]
        attention = _softmax([sum(a * b for a, b in zip(q, k)) / math.sqrt(2) for k in keys])
        bank_values = [[_linear(qgen.w_v, t) for t in _tokens(qgen.bank[m])] for m in range(2)]
        query = [[sum(attention[m] * bank_values[m][p][c] for m in range(2)) for c in range(2)] for p in range(4)]

        maps = [_tokens(f[0]) for f in features]
        trace = []
        for layer in model.layers:
            extracted = _extract(query, maps, layer)
            weights = _gate(aligned, extracted, layer.gate)
            fused = [[sum(w * e[p][c] for w, e in zip(weights, extracted)) for c in range(2)] for p in range(4)]
            query = _block(fused, layer.block)
            trace.append(weights)
        first, last = model.out_proj[0], model.out_proj[2]
        tokens = [_linear(last, [_gelu(v) for v in _linear(first, t)]) for t in query]

    assert out.query_attention[0].tolist() == pytest.approx(attention, abs=1e-12)
    assert out.gate_trace[0].tolist() == [pytest.approx(w, abs=1e-12) for w in trace]
    assert out.tokens[0].tolist() == [pytest.approx(t, abs=1e-10) for t in tokens]


# ============ Forward-pass properties ============


def test_identical_encoders_fuse_to_the_extracted_map_under_any_gate():
    config = FusorConfig(num_encoders=3, num_layers=2, channels=2, height=2, width=2, heads=1, text_dim=3)
    model = _random_model(config, 8)
    with torch.no_grad():
        for layer in model.layers:
            for proj in layer.projections[1:]:
                proj.load_state_dict(layer.projections[0].state_dict())
    g = torch.Generator().manual_seed(4)
    shared = torch.randn(2, 2, 2, 2, generator=g, dtype=torch.float64)
    traces = []
    for _ in range(3):
        text = torch.randn(2, 3, generator=g, dtype=torch.float64)
        with torch.no_grad():
            out = model([shared] * 3, text)
            query, _ = generate_query(model.align_text(text), model.query_gen)
            extracted = extract_features(query, [shared] * 3, model.layers[0])
        assert torch.allclose(out.fused_maps[0], extracted[0], atol=1e-12)
        traces.append(out.gate_trace)
    assert not torch.allclose(traces[0], traces[1])


def test_same_seed_and_inputs_give_bit_identical_output(small_config, small_inputs):
    features, text = small_inputs
    first = VisionFusor(small_config).double()(features, text)
    second = VisionFusor(small_config).double()(features, text)
    assert torch.equal(first.tokens, second.tokens)
    assert torch.equal(first.gate_trace, second.gate_trace)
    assert torch.equal(first.query_attention, second.query_attention)
    assert all(torch.equal(a, b) for a, b in zip(first.fused_maps, second.fused_maps))
