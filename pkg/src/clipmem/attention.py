"""Selective multi-head attention over a frame/text/context token layout.

Three additive operations shape the pre-softmax logits:

* the framewise mask: plain causal order everywhere, and each context
  slot may only see its own frame's visual tokens and earlier slots of
  the same frame (cross-frame visual and earlier frames' context are cut);
* the context-to-text block: context slots never read text tokens, so
  compressed frame content stays grounded in pixels;
* the text-guidance bias: the mean text-row logit of each visual column
  is re-broadcast onto the own-frame context-to-visual cells, steering
  compression toward question-relevant columns.

Masks are boolean patterns consumed by :func:`~.numerics.masked_softmax`
(exact zeros on disallowed cells); the guidance bias is a dense additive
matrix.  The guide is computed per head from that head's own raw logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Literal

import numpy as np

from .errors import ContractViolation, ShapeError
from .layout import TokenLayout
from .numerics import masked_softmax

__all__ = [
    "MaskVariant",
    "HeadConfig",
    "AttentionWeights",
    "AttentionResult",
    "build_mask",
    "build_block",
    "build_guide",
    "variant_pattern",
    "attention_forward",
    "attention_backward",
]


class MaskVariant(Enum):
    """Masking ladder, weakest isolation last.

    SINGLE_FRAME   isolated causal block per frame; text sees only text
    MULTI_CAUSAL   plain causal over the whole window
    FRAMEWISE      causal + framewise context scoping
    FRAMEWISE_BLOCKED  framewise + context-to-text block
    GUIDED         framewise + block + text-guidance bias
    """

    SINGLE_FRAME = "single_frame"
    MULTI_CAUSAL = "multi_causal"
    FRAMEWISE = "framewise"
    FRAMEWISE_BLOCKED = "framewise_blocked"
    GUIDED = "guided"


ScaleDenominator = Literal["head_dim", "model_dim"]


@dataclass(frozen=True)
class HeadConfig:
    model_dim: int
    heads: int
    scale_denominator: ScaleDenominator = "head_dim"

    def __post_init__(self) -> None:
        if self.model_dim < 1 or self.heads < 1:
            raise ShapeError(f"model_dim and heads must be >= 1, got {self}")
        if self.model_dim % self.heads:
            raise ShapeError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.scale_denominator not in ("head_dim", "model_dim"):
            raise ShapeError(f"unknown scale_denominator {self.scale_denominator!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def scale(self) -> float:
        denom = self.head_dim if self.scale_denominator == "head_dim" else self.model_dim
        return 1.0 / np.sqrt(denom)


@dataclass
class AttentionWeights:
    """Packed per-head projections: columns h*head_dim:(h+1)*head_dim."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def check(self, model_dim: int) -> None:
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (model_dim, model_dim):
                raise ShapeError(f"{name} must be {(model_dim, model_dim)}, got {w.shape}")


def _causal(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def build_mask(layout: TokenLayout) -> np.ndarray:
    """Framewise mask: True where attention is allowed.

    Disallows (i, j) iff j comes after i, or i is a context slot of frame
    k and j is a visual token of another frame or a context slot of an
    earlier frame.
    """
    kind = layout.kind_array()
    frame = layout.frame_array()
    ctx_row = (kind == 2)[:, None]
    vis_col = (kind == 0)[None, :]
    ctx_col = (kind == 2)[None, :]
    other_frame = frame[:, None] != frame[None, :]
    earlier_frame = frame[None, :] < frame[:, None]
    disallow = (ctx_row & vis_col & other_frame) | (ctx_row & ctx_col & earlier_frame)
    return _causal(layout.total_len) & ~disallow


def build_block(layout: TokenLayout) -> np.ndarray:
    """Context-to-text block: True everywhere except context-row x text-col."""
    kind = layout.kind_array()
    return ~((kind == 2)[:, None] & (kind == 1)[None, :])


def build_guide(layout: TokenLayout, logits: np.ndarray) -> np.ndarray:
    """Text-guidance bias from one head's raw logit matrix.

    Column j gets the mean of the text rows of ``logits`` at column j,
    placed on own-frame context-to-visual cells only; everything else 0.
    """
    n = layout.total_len
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (n, n):
        raise ShapeError(f"logits must be {(n, n)}, got {logits.shape}")
    text = layout.text_indices
    if len(text) == 0:
        raise ContractViolation("guidance is undefined without text tokens")
    g = logits[list(text), :].mean(axis=0)
    kind = layout.kind_array()
    frame = layout.frame_array()
    scope = (
        ((kind == 2)[:, None])
        & ((kind == 0)[None, :])
        & (frame[:, None] == frame[None, :])
    )
    return np.where(scope, g[None, :], 0.0)


def _guide_scope(layout: TokenLayout) -> np.ndarray:
    kind = layout.kind_array()
    frame = layout.frame_array()
    return (
        ((kind == 2)[:, None])
        & ((kind == 0)[None, :])
        & (frame[:, None] == frame[None, :])
    )


def variant_pattern(layout: TokenLayout, variant: MaskVariant) -> np.ndarray:
    """Boolean pattern for one masking-ladder rung.

    SINGLE_FRAME isolates token groups (one group per frame, one for
    text) under causal order, so text and visual never mix and each
    frame compresses independently.  GUIDED shares the
    FRAMEWISE_BLOCKED pattern; the guidance term is additive, not a
    mask.
    """
    if variant is MaskVariant.SINGLE_FRAME:
        kind = layout.kind_array()
        frame = layout.frame_array()
        # Text tokens form group 0; frames are 1-based so groups are disjoint.
        group = np.where(kind == 1, 0, frame)
        return _causal(layout.total_len) & (group[:, None] == group[None, :])
    if variant is MaskVariant.MULTI_CAUSAL:
        return _causal(layout.total_len)
    if variant is MaskVariant.FRAMEWISE:
        return build_mask(layout)
    if variant in (MaskVariant.FRAMEWISE_BLOCKED, MaskVariant.GUIDED):
        return build_mask(layout) & build_block(layout)
    raise ShapeError(f"unknown variant {variant!r}")


@dataclass
class AttentionResult:
    y: np.ndarray  # (n, model_dim)
    attn: np.ndarray  # (heads, n, n), rows sum to 1 over allowed entries
    cache: "AttentionCache | None" = None


@dataclass
class AttentionCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    heads_out: np.ndarray  # (n, model_dim) pre-output-projection
    pattern: np.ndarray
    guide_scope: np.ndarray | None  # None when the guide is inactive
    layout: TokenLayout
    config: HeadConfig
    weights: AttentionWeights


def attention_forward(
    x: np.ndarray,
    weights: AttentionWeights,
    layout: TokenLayout,
    config: HeadConfig,
    variant: MaskVariant = MaskVariant.GUIDED,
    guide_on: bool = True,
    want_cache: bool = False,
) -> AttentionResult:
    """One multi-head selective-attention pass.

    Per head: logits = scale * Q Kᵀ, plus the guidance bias when the
    variant is GUIDED and ``guide_on``; rows are softmax-normalised over
    the variant pattern; head outputs are concatenated and projected.
    The per-head attention matrices are returned for relevance scoring.
    """
    x = np.asarray(x, dtype=np.float64)
    n = layout.total_len
    if x.shape != (n, config.model_dim):
        raise ShapeError(f"x must be {(n, config.model_dim)}, got {x.shape}")
    weights.check(config.model_dim)

    pattern = variant_pattern(layout, variant)
    use_guide = guide_on and variant is MaskVariant.GUIDED
    scope = _guide_scope(layout) if use_guide else None

    q = x @ weights.w_q
    k = x @ weights.w_k
    v = x @ weights.w_v
    dh = config.head_dim
    attn = np.empty((config.heads, n, n))
    heads_out = np.empty_like(x)
    text_rows = list(layout.text_indices)
    for h in range(config.heads):
        cols = slice(h * dh, (h + 1) * dh)
        logits = config.scale * (q[:, cols] @ k[:, cols].T)
        if use_guide:
            if not text_rows:
                raise ContractViolation("guidance is undefined without text tokens")
            g = logits[text_rows, :].mean(axis=0)
            logits = logits + np.where(scope, g[None, :], 0.0)
        attn[h] = masked_softmax(logits, pattern)
        heads_out[:, cols] = attn[h] @ v[:, cols]
    y = heads_out @ weights.w_o

    cache = None
    if want_cache:
        cache = AttentionCache(
            x=x, q=q, k=k, v=v, attn=attn, heads_out=heads_out,
            pattern=pattern, guide_scope=scope, layout=layout,
            config=config, weights=weights,
        )
    return AttentionResult(y=y, attn=attn, cache=cache)


@dataclass
class AttentionGrads:
    d_x: np.ndarray
    d_w_q: np.ndarray
    d_w_k: np.ndarray
    d_w_v: np.ndarray
    d_w_o: np.ndarray


def attention_backward(cache: AttentionCache | None, d_y: np.ndarray) -> AttentionGrads:
    """Analytic gradients for :func:`attention_forward`.

    Disallowed logits carry exactly zero gradient (they never entered the
    normalisation); the guidance term routes gradient from guided cells
    back into the text rows of the raw logits.
    """
    if cache is None:
        raise ContractViolation("attention_backward needs the forward cache")
    cfg = cache.config
    layout = cache.layout
    w = cache.weights
    n = layout.total_len
    d_y = np.asarray(d_y, dtype=np.float64)
    if d_y.shape != (n, cfg.model_dim):
        raise ShapeError(f"d_y must be {(n, cfg.model_dim)}, got {d_y.shape}")

    d_w_o = cache.heads_out.T @ d_y
    d_heads = d_y @ w.w_o.T

    dh = cfg.head_dim
    d_q = np.zeros_like(cache.q)
    d_k = np.zeros_like(cache.k)
    d_v = np.zeros_like(cache.v)
    text_rows = list(layout.text_indices)
    for h in range(cfg.heads):
        cols = slice(h * dh, (h + 1) * dh)
        attn = cache.attn[h]
        d_ctx = d_heads[:, cols]
        d_attn = d_ctx @ cache.v[:, cols].T
        d_v[:, cols] = attn.T @ d_ctx
        # Softmax backward; attn is 0 on disallowed cells so d_z is too.
        d_z = attn * (d_attn - (attn * d_attn).sum(axis=1, keepdims=True))
        d_s = d_z.copy()
        if cache.guide_scope is not None:
            d_g = np.where(cache.guide_scope, d_z, 0.0).sum(axis=0)
            d_s[text_rows, :] += d_g[None, :] / len(text_rows)
        d_q[:, cols] = cfg.scale * (d_s @ cache.k[:, cols])
        d_k[:, cols] = cfg.scale * (d_s.T @ cache.q[:, cols])

    d_x = d_q @ w.w_q.T + d_k @ w.w_k.T + d_v @ w.w_v.T
    return AttentionGrads(
        d_x=d_x,
        d_w_q=cache.x.T @ d_q,
        d_w_k=cache.x.T @ d_k,
        d_w_v=cache.x.T @ d_v,
        d_w_o=d_w_o,
    )
