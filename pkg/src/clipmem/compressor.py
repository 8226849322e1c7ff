"""Toy transformer encoder that compresses frame patches into context slots.

The stack is the classic post-norm encoder: selective attention with a
residual then layer norm, a gated feed-forward with a residual then layer
norm.  Position information (per-slot vectors plus a per-frame vector) is
added once before the first layer; with zero layers the encoder is the
identity.  The per-layer, per-head attention matrices are kept as traces
so frame relevance can be scored from text-to-visual attention afterwards.

An analytic configuration (single layer, single head, identity
projections, zero feed-forward and zero position vectors) makes the
layer-1 traces an exact softmax of the raw input dot products, which the
retrieval harness relies on for provable relevance ordering.

Everything is float64 and deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .attention import (
    AttentionCache,
    AttentionWeights,
    HeadConfig,
    MaskVariant,
    ScaleDenominator,
    attention_backward,
    attention_forward,
)
from .errors import ConfigError, ContractViolation, ShapeError
from .layout import LayoutSpec, TokenLayout
from .numerics import seeded_rng

__all__ = [
    "CompressorConfig",
    "LayerWeights",
    "CompressorWeights",
    "EncoderOutput",
    "init_weights",
    "analytic_weights",
    "assemble_input",
    "encode",
    "encode_with_cache",
    "encoder_backward",
    "compute_relevance",
    "extract_context",
    "seed_gradient_from_input_grad",
    "iter_parameters",
]

LN_EPS = 1e-6


@dataclass(frozen=True)
class CompressorConfig:
    """Encoder geometry plus the relevance-scoring hyper-parameters.

    ``relevance_layers`` is a 1-based inclusive range of layers whose
    traces feed the score; ``relevance_top_heads`` is how many of the
    strongest heads are averaged per layer.  Toy defaults use a 4-layer,
    4-head stack and score from its top half; production-scale values
    (e.g. 28 layers, top heads 5, layers 17..20) are equally valid.
    """

    layers: int = 4
    heads: int = 4
    model_dim: int = 32
    ff_dim: int = 64
    context_per_frame: int = 16
    relevance_top_heads: int = 2
    relevance_layers: tuple[int, int] = (3, 4)
    variant: MaskVariant = MaskVariant.GUIDED
    guide_on: bool = True
    scale_denominator: ScaleDenominator = "head_dim"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.context_per_frame < 1:
            raise ConfigError(f"context_per_frame must be >= 1, got {self.context_per_frame}")
        if not 1 <= self.relevance_top_heads <= self.heads:
            raise ConfigError(
                f"relevance_top_heads must be in 1..{self.heads}, got {self.relevance_top_heads}"
            )
        lo, hi = self.relevance_layers
        if self.layers and not 1 <= lo <= hi <= self.layers:
            raise ConfigError(
                f"relevance_layers must satisfy 1 <= lo <= hi <= {self.layers}, got {lo, hi}"
            )
        self.head_config()  # validates divisibility

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.model_dim, self.heads, self.scale_denominator)


@dataclass
class LayerWeights:
    attn: AttentionWeights
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass
class CompressorWeights:
    """All learnable state, including the context seed and position vectors."""

    context_seed: np.ndarray          # (C, D)
    layers: list[LayerWeights]
    pos_visual: np.ndarray            # (P, D) per-slot vector within a frame
    pos_context: np.ndarray           # (C, D)
    pos_frame: np.ndarray             # (max_frames, D) per-frame index vector


def init_weights(
    config: CompressorConfig, patches: int, max_frames: int
) -> CompressorWeights:
    """Seeded Gaussian init scaled by 1/sqrt(model_dim)."""
    rng = seeded_rng(config.seed)
    d, f = config.model_dim, config.ff_dim
    s = 1.0 / np.sqrt(d)

    def draw(*shape):
        return rng.standard_normal(shape) * s

    seed = draw(config.context_per_frame, d)
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerWeights(
                attn=AttentionWeights(w_q=draw(d, d), w_k=draw(d, d), w_v=draw(d, d), w_o=draw(d, d)),
                ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
                w_in=draw(d, f), b_in=np.zeros(f),
                w_out=rng.standard_normal((f, d)) / np.sqrt(f), b_out=np.zeros(d),
                ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
            )
        )
    return CompressorWeights(
        context_seed=seed,
        layers=layers,
        pos_visual=draw(patches, d),
        pos_context=draw(config.context_per_frame, d),
        pos_frame=draw(max_frames, d),
    )


def analytic_weights(
    config: CompressorConfig, patches: int, max_frames: int
) -> CompressorWeights:
    """Identity projections, zero feed-forward, zero position vectors.

    With a single layer and a single head the layer-1 attention logits
    are exactly scale * (e_in e_inᵀ), so relevance ordering is a pure
    function of the input dot products.
    """
    d, f = config.model_dim, config.ff_dim
    eye = np.eye(d)
    layers = [
        LayerWeights(
            attn=AttentionWeights(w_q=eye.copy(), w_k=eye.copy(), w_v=eye.copy(), w_o=eye.copy()),
            ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
            w_in=np.zeros((d, f)), b_in=np.zeros(f),
            w_out=np.zeros((f, d)), b_out=np.zeros(d),
            ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
        )
        for _ in range(config.layers)
    ]
    return CompressorWeights(
        context_seed=np.zeros((config.context_per_frame, d)),
        layers=layers,
        pos_visual=np.zeros((patches, d)),
        pos_context=np.zeros((config.context_per_frame, d)),
        pos_frame=np.zeros((max_frames, d)),
    )


def assemble_input(
    visual: np.ndarray, text: np.ndarray, context_seed: np.ndarray
) -> tuple[np.ndarray, TokenLayout]:
    """Lay out one encoder window: frame patches, text, tiled context seed.

    Rows are copied verbatim; the context block is the seed repeated once
    per frame.  Position vectors are the encoder's business, not the
    assembly's, so slices of the result reproduce the inputs bit-exactly.
    """
    visual = np.asarray(visual, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    context_seed = np.asarray(context_seed, dtype=np.float64)
    if visual.ndim != 3:
        raise ShapeError(f"visual must be (frames, patches, dim), got {visual.shape}")
    frames, patches, dim = visual.shape
    if text.ndim != 2 or text.shape[1] != dim:
        raise ShapeError(f"text must be (text_len, {dim}), got {text.shape}")
    if context_seed.ndim != 2 or context_seed.shape[1] != dim:
        raise ShapeError(f"context_seed must be (slots, {dim}), got {context_seed.shape}")
    layout = TokenLayout(LayoutSpec(frames, patches, context_seed.shape[0], text.shape[0]))
    e_in = np.concatenate(
        [visual.reshape(frames * patches, dim), text, np.tile(context_seed, (frames, 1))]
    )
    return e_in, layout


@dataclass
class EncoderOutput:
    visual: np.ndarray    # (frames, patches, dim)
    text: np.ndarray      # (text_len, dim)
    context: np.ndarray   # (frames, slots, dim)
    traces: np.ndarray    # (layers, heads, n, n)
    flat: np.ndarray      # (n, dim); row i corresponds to input row i


@dataclass
class _LayerCache:
    attn: AttentionCache
    x_in: np.ndarray
    ln1: tuple
    u: np.ndarray
    act: np.ndarray
    h1: np.ndarray
    ln2: tuple


@dataclass
class EncoderCache:
    layout: TokenLayout
    config: CompressorConfig
    weights: CompressorWeights
    frame_ids: tuple[int, ...]
    layers: list[_LayerCache]


def _ln_forward(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _ln_backward(cache, d_y):
    xhat, inv, gain = cache
    d_xhat = d_y * gain
    d_gain = (d_y * xhat).sum(axis=0)
    d_bias = d_y.sum(axis=0)
    d_x = inv * (
        d_xhat
        - d_xhat.mean(axis=1, keepdims=True)
        - xhat * (d_xhat * xhat).mean(axis=1, keepdims=True)
    )
    return d_x, d_gain, d_bias


def _silu(u):
    # Smooth gated unit: u * sigmoid(u).  Chosen for a well-behaved,
    # everywhere-differentiable feed-forward that passes central-difference
    # gradient checks.
    sig = 1.0 / (1.0 + np.exp(-u))
    return u * sig, sig


def _positional(layout: TokenLayout, weights: CompressorWeights, frame_ids) -> np.ndarray:
    s = layout.spec
    if frame_ids is None:
        frame_ids = tuple(range(1, s.frames + 1))
    frame_ids = tuple(int(i) for i in frame_ids)
    if len(frame_ids) != s.frames:
        raise ShapeError(f"frame_ids must have length {s.frames}, got {len(frame_ids)}")
    if any(not 1 <= i <= weights.pos_frame.shape[0] for i in frame_ids):
        raise ShapeError(
            f"frame_ids must lie in 1..{weights.pos_frame.shape[0]}, got {frame_ids}"
        )
    if weights.pos_visual.shape[0] != s.patches_per_frame:
        raise ShapeError(
            f"pos_visual rows {weights.pos_visual.shape[0]} != patches {s.patches_per_frame}"
        )
    if weights.pos_context.shape[0] != s.context_per_frame:
        raise ShapeError(
            f"pos_context rows {weights.pos_context.shape[0]} != slots {s.context_per_frame}"
        )
    pos = np.zeros((layout.total_len, weights.pos_visual.shape[1]))
    for k, fid in enumerate(frame_ids, start=1):
        pos[list(layout.visual_indices(k))] = weights.pos_visual + weights.pos_frame[fid - 1]
        pos[list(layout.context_indices(k))] = weights.pos_context + weights.pos_frame[fid - 1]
    return pos


def _split_output(flat: np.ndarray, layout: TokenLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = layout.spec
    visual = flat[: s.frames * s.patches_per_frame].reshape(s.frames, s.patches_per_frame, -1)
    text = flat[list(layout.text_indices)]
    context = extract_context(flat, layout)
    return visual, text, context


def extract_context(flat: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Slice the per-frame context rows, frame-major: (frames, slots, dim)."""
    s = layout.spec
    start = s.frames * s.patches_per_frame + s.text_len
    return flat[start:].reshape(s.frames, s.context_per_frame, -1).copy()


def _run(e_in, layout, config, weights, frame_ids, want_cache):
    e_in = np.asarray(e_in, dtype=np.float64)
    n = layout.total_len
    if e_in.shape != (n, config.model_dim):
        raise ShapeError(f"input must be {(n, config.model_dim)}, got {e_in.shape}")
    if len(weights.layers) != config.layers:
        raise ShapeError(f"weights carry {len(weights.layers)} layers, config says {config.layers}")
    head_cfg = config.head_config()
    traces = np.empty((config.layers, config.heads, n, n))
    layer_caches: list[_LayerCache] = []
    used_frame_ids = tuple(frame_ids) if frame_ids is not None else tuple(range(1, layout.frames + 1))

    if config.layers == 0:
        x = e_in.copy()
    else:
        x = e_in + _positional(layout, weights, used_frame_ids)

    for li, lw in enumerate(weights.layers):
        res = attention_forward(
            x, lw.attn, layout, head_cfg, config.variant, config.guide_on, want_cache=want_cache
        )
        traces[li] = res.attn
        r1 = x + res.y
        h1, ln1_cache = _ln_forward(r1, lw.ln1_gain, lw.ln1_bias)
        u = h1 @ lw.w_in + lw.b_in
        act, sig = _silu(u)
        r2 = h1 + (act @ lw.w_out + lw.b_out)
        x2, ln2_cache = _ln_forward(r2, lw.ln2_gain, lw.ln2_bias)
        if want_cache:
            layer_caches.append(
                _LayerCache(attn=res.cache, x_in=x, ln1=ln1_cache, u=u, act=act, h1=h1, ln2=ln2_cache)
            )
        x = x2

    visual, text, context = _split_output(x, layout)
    out = EncoderOutput(visual=visual, text=text, context=context, traces=traces, flat=x)
    cache = EncoderCache(layout, config, weights, used_frame_ids, layer_caches) if want_cache else None
    return out, cache


def encode(
    e_in: np.ndarray,
    layout: TokenLayout,
    config: CompressorConfig,
    weights: CompressorWeights,
    frame_ids: Sequence[int] | None = None,
) -> EncoderOutput:
    """Run the encoder stack; row i of the output corresponds to input row i.

    ``frame_ids`` selects which per-frame position vector each frame gets
    (defaults to the window order 1..frames); it lets a frame be encoded
    standalone with the same position signal it had inside a window.
    """
    out, _ = _run(e_in, layout, config, weights, frame_ids, want_cache=False)
    return out


def encode_with_cache(e_in, layout, config, weights, frame_ids=None):
    return _run(e_in, layout, config, weights, frame_ids, want_cache=True)


def encoder_backward(cache: EncoderCache | None, d_flat: np.ndarray):
    """Gradients of every parameter and of the assembled input.

    Returns ``(grads, d_e_in)`` where ``grads`` maps the names produced by
    :func:`iter_parameters` to arrays of matching shape.
    """
    if cache is None:
        raise ContractViolation("encoder_backward needs the forward cache")
    config = cache.config
    d_x = np.asarray(d_flat, dtype=np.float64).copy()
    grads: dict[str, np.ndarray] = {}

    for li in reversed(range(config.layers)):
        lc = cache.layers[li]
        lw = cache.weights.layers[li]
        d_r2, d_ln2_g, d_ln2_b = _ln_backward(lc.ln2, d_x)
        d_h1 = d_r2.copy()
        d_f = d_r2
        grads[f"layers.{li}.w_out"] = lc.act.T @ d_f
        grads[f"layers.{li}.b_out"] = d_f.sum(axis=0)
        d_act = d_f @ lw.w_out.T
        _, sig = _silu(lc.u)
        d_u = d_act * (sig * (1.0 + lc.u * (1.0 - sig)))
        grads[f"layers.{li}.w_in"] = lc.h1.T @ d_u
        grads[f"layers.{li}.b_in"] = d_u.sum(axis=0)
        d_h1 += d_u @ lw.w_in.T
        d_r1, d_ln1_g, d_ln1_b = _ln_backward(lc.ln1, d_h1)
        ag = attention_backward(lc.attn, d_r1)
        grads[f"layers.{li}.ln1_gain"] = d_ln1_g
        grads[f"layers.{li}.ln1_bias"] = d_ln1_b
        grads[f"layers.{li}.ln2_gain"] = d_ln2_g
        grads[f"layers.{li}.ln2_bias"] = d_ln2_b
        grads[f"layers.{li}.attn.w_q"] = ag.d_w_q
        grads[f"layers.{li}.attn.w_k"] = ag.d_w_k
        grads[f"layers.{li}.attn.w_v"] = ag.d_w_v
        grads[f"layers.{li}.attn.w_o"] = ag.d_w_o
        d_x = d_r1 + ag.d_x

    layout = cache.layout
    w = cache.weights
    d_pos_visual = np.zeros_like(w.pos_visual)
    d_pos_context = np.zeros_like(w.pos_context)
    d_pos_frame = np.zeros_like(w.pos_frame)
    if config.layers:
        for k, fid in enumerate(cache.frame_ids, start=1):
            dv = d_x[list(layout.visual_indices(k))]
            dc = d_x[list(layout.context_indices(k))]
            d_pos_visual += dv
            d_pos_context += dc
            d_pos_frame[fid - 1] += dv.sum(axis=0) + dc.sum(axis=0)
    grads["pos_visual"] = d_pos_visual
    grads["pos_context"] = d_pos_context
    grads["pos_frame"] = d_pos_frame
    return grads, d_x


def seed_gradient_from_input_grad(d_e_in: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Fold the input gradient back onto the tiled context seed."""
    s = layout.spec
    start = s.frames * s.patches_per_frame + s.text_len
    block = d_e_in[start:].reshape(s.frames, s.context_per_frame, -1)
    return block.sum(axis=0)


def iter_parameters(weights: CompressorWeights) -> Iterator[tuple[str, np.ndarray]]:
    """Named view of every trainable array (the context seed is separate:
    it reaches the encoder only through the assembled input)."""
    for li, lw in enumerate(weights.layers):
        yield f"layers.{li}.attn.w_q", lw.attn.w_q
        yield f"layers.{li}.attn.w_k", lw.attn.w_k
        yield f"layers.{li}.attn.w_v", lw.attn.w_v
        yield f"layers.{li}.attn.w_o", lw.attn.w_o
        yield f"layers.{li}.ln1_gain", lw.ln1_gain
        yield f"layers.{li}.ln1_bias", lw.ln1_bias
        yield f"layers.{li}.w_in", lw.w_in
        yield f"layers.{li}.b_in", lw.b_in
        yield f"layers.{li}.w_out", lw.w_out
        yield f"layers.{li}.b_out", lw.b_out
        yield f"layers.{li}.ln2_gain", lw.ln2_gain
        yield f"layers.{li}.ln2_bias", lw.ln2_bias
    yield "pos_visual", weights.pos_visual
    yield "pos_context", weights.pos_context
    yield "pos_frame", weights.pos_frame


def compute_relevance(
    traces: np.ndarray, layout: TokenLayout, config: CompressorConfig
) -> np.ndarray:
    """Per-frame relevance from text-to-visual attention.

    For each layer in the configured range and each head, take the mean
    attention over (text rows x frame-i visual columns); per layer keep
    the top ``relevance_top_heads`` head means and average them; average
    those layer values.  Scores land in [0, 1].
    """
    traces = np.asarray(traces, dtype=np.float64)
    text = list(layout.text_indices)
    if not text:
        raise ContractViolation("relevance needs at least one text token")
    lo, hi = config.relevance_layers
    if traces.ndim != 4 or traces.shape[0] < hi:
        raise ConfigError(
            f"traces must cover layers 1..{hi}, got shape {traces.shape}"
        )
    if traces.shape[1] < config.heads:
        raise ConfigError(f"traces carry {traces.shape[1]} heads, config says {config.heads}")
    k_h = config.relevance_top_heads
    sub = traces[lo - 1 : hi, : config.heads]
    scores = np.empty(layout.frames)
    for i in range(1, layout.frames + 1):
        vis = list(layout.visual_indices(i))
        cells = sub[:, :, text, :][:, :, :, vis]
        head_means = cells.mean(axis=(2, 3))          # (layers_in_range, heads)
        top = np.sort(head_means, axis=1)[:, -k_h:]   # per-layer strongest heads
        scores[i - 1] = top.mean(axis=1).mean()
    return scores
