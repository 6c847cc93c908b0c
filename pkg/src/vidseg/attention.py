"""Multi-scale spatio-temporal attention blocks.

Feature maps live as [S, T, C] tensors (S = H*W spatial positions, T frames,
C channels). Three attention granularities are provided:

* per-position temporal attention within one scale (keys/values range over
  the T frames at the same spatial position),
* joint attention over all S*T tokens of a fused scale pair,
* the enrichment module that chains them coarse-to-fine across a pyramid.

All blocks are pre-norm: y = attn(LN(x)) + x, followed by z = MLP(LN(y)) + y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, LayerNorm, Mlp, Module
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    reshape,
    softmax,
    transpose,
    bilinear_upsample_x2,
)


class ConfigurationError(ValueError):
    """Raised for structurally impossible module configurations."""


@dataclass
class ScaleFeatures:
    """Features of one pyramid level: data [S, T, C] with S = height*width."""

    data: Tensor
    height: int
    width: int

    def __post_init__(self):
        s, t, c = self.data.shape
        if s != self.height * self.width:
            raise ShapeError(
                f"ScaleFeatures: S={s} != height*width={self.height * self.width}"
            )


class SelfAttentionParams(Module):
    """Projections plus the norm/MLP pair of one pre-norm attention block."""

    def __init__(self, rng, dim, heads=1, mlp_ratio=4, dtype=np.float32):
        if dim % heads != 0:
            raise ConfigurationError(f"heads={heads} must divide dim={dim}")
        self.wq = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.wk = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.wv = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.ln_attn = LayerNorm(dim, dtype=dtype)
        self.ln_mlp = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, ratio=mlp_ratio, dtype=dtype)
        self.heads = heads


def _split_heads(x, heads):
    b, n, c = x.shape
    x = reshape(x, (b, n, heads, c // heads))
    return transpose(x, (0, 2, 1, 3))  # [B, h, N, d]


def _merge_heads(x):
    b, h, n, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def scaled_dot_attention(q, k, v, heads=1, return_weights=False):
    """Tokenwise attention over the middle axis of [B, N, C] operands."""
    dim = q.shape[-1]
    if heads > 1:
        q, k, v = (_split_heads(x, heads) for x in (q, k, v))
    scale = 1.0 / np.sqrt(dim // heads)
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = softmax(scores * scale, axis=-1)
    out = matmul(weights, v)
    if heads > 1:
        out = _merge_heads(out)
    if return_weights:
        return out, weights
    return out


def attention_block(x, params, pos=None, return_weights=False):
    """Pre-norm self-attention block over [B, N, C] tokens.

    When `pos` is given (a constant [N, C] array), it is added to the inputs
    of the query/key projections only.
    """
    h = params.ln_attn(x)
    if pos is not None:
        hp = h + Tensor(np.broadcast_to(pos, h.shape).astype(h.dtype.type))
    else:
        hp = h
    q, k, v = params.wq(hp), params.wk(hp), params.wv(h)
    attended = scaled_dot_attention(q, k, v, params.heads, return_weights)
    if return_weights:
        attended, weights = attended
    y = x + attended
    z = y + params.mlp(params.ln_mlp(y))
    if return_weights:
        return z, weights
    return z


def intra_scale_attention(z, params, return_weights=False):
    """Temporal attention at one scale: each spatial position attends over
    its own T frames only; no spatial mixing. Input and output are [S, T, C].
    """
    return attention_block(z, params, return_weights=return_weights)


def inter_scale_attention(h, params, return_weights=False):
    """Joint attention over all S*T tokens of a fused scale. [S, T, C] in/out."""
    s, t, c = h.shape
    flat = reshape(h, (1, s * t, c))
    out = attention_block(flat, params, return_weights=return_weights)
    if return_weights:
        out, weights = out
        return reshape(out, (s, t, c)), weights
    return reshape(out, (s, t, c))


class CrossScaleParams(Module):
    """Fusion of two neighbouring scales: 2C->C projection + joint attention."""

    def __init__(self, rng, dim, heads=1, mlp_ratio=4, dtype=np.float32):
        self.proj = Linear(rng, 2 * dim, dim, bias=False, dtype=dtype)
        self.attn = SelfAttentionParams(rng, dim, heads, mlp_ratio, dtype=dtype)


def combine_scales(fine, coarse, proj):
    """Upsample the coarser level x2, concat channelwise with the finer
    level and project 2C -> C. Returns a [S_fine, T, C] tensor.
    """
    if coarse.height * 2 != fine.height or coarse.width * 2 != fine.width:
        raise ShapeError(
            f"combine_scales: coarse {coarse.height}x{coarse.width} does not "
            f"halve fine {fine.height}x{fine.width}"
        )
    s, t, c = coarse.data.shape
    grid = reshape(coarse.data, (coarse.height, coarse.width, t, c))
    grid = transpose(grid, (2, 3, 0, 1))  # [T, C, h, w]
    up = bilinear_upsample_x2(grid)
    up = transpose(up, (2, 3, 0, 1))  # [H, W, T, C]
    up = reshape(up, (fine.height * fine.width, t, c))
    fused = concat([fine.data, up], axis=2)
    return proj(fused)


class MultiScaleTemporalEnricher(Module):
    """Spatio-temporal enrichment of a feature pyramid.

    Every level first runs per-position temporal attention. The coarsest
    level passes through; finer levels are then fused with their coarser
    neighbour (upsample+concat+project) and refined by joint attention,
    sweeping coarse to fine. With `progressive` the sweep feeds each level
    the already-refined coarser output; otherwise the temporally-attended
    features are used directly.
    """

    def __init__(self, rng, dim, num_levels, heads=1, mlp_ratio=4,
                 progressive=True, dtype=np.float32):
        if num_levels < 2:
            raise ConfigurationError(
                f"enrichment needs >= 2 pyramid levels, got {num_levels}"
            )
        self.intra = [
            SelfAttentionParams(rng, dim, heads, mlp_ratio, dtype=dtype)
            for _ in range(num_levels)
        ]
        self.cross = [
            CrossScaleParams(rng, dim, heads, mlp_ratio, dtype=dtype)
            for _ in range(num_levels - 1)
        ]
        self.progressive = progressive
        self.num_levels = num_levels

    def __call__(self, pyramid, return_intermediates=False):
        if len(pyramid) != self.num_levels:
            raise ConfigurationError(
                f"expected {self.num_levels} levels, got {len(pyramid)}"
            )
        tilde = [
            intra_scale_attention(level.data, p)
            for level, p in zip(pyramid, self.intra)
        ]
        enriched = [None] * self.num_levels
        enriched[-1] = tilde[-1]
        fused = [None] * self.num_levels
        for l in range(self.num_levels - 2, -1, -1):
            source = enriched[l + 1] if self.progressive else tilde[l + 1]
            coarse = ScaleFeatures(
                source, pyramid[l + 1].height, pyramid[l + 1].width
            )
            fine = ScaleFeatures(tilde[l], pyramid[l].height, pyramid[l].width)
            fused[l] = combine_scales(fine, coarse, self.cross[l].proj)
            enriched[l] = inter_scale_attention(fused[l], self.cross[l].attn)
        if return_intermediates:
            return enriched, {"temporal": tilde, "fused": fused}
        return enriched


@dataclass(frozen=True)
class AttentionCost:
    """Multiply-add counts for one attention configuration.

    `pairwise` counts the q.k score products, which is where split and joint
    schedules differ; projection and MLP costs are itemized separately.
    """

    pairwise: int
    projections: int
    mlp: int

    @property
    def total(self):
        return self.pairwise + self.projections + self.mlp


def attention_flops(spatial_sizes, t, c, mode):
    """Analytic cost of attending over a pyramid of `spatial_sizes` tokens.

    split: per-position temporal attention at every level plus joint
    attention over each of the L-1 fused neighbour pairs.
    joint: one attention over all levels' tokens at once.
    """
    sizes = [int(s) for s in spatial_sizes]
    if any(s <= 0 for s in sizes) or t <= 0 or c <= 0:
        raise ConfigurationError("attention_flops needs positive extents")
    if mode == "split":
        intra = sum(s * t * t * c for s in sizes)
        inter = sum((s * t) ** 2 * c for s in sizes[:-1])
        pairwise = intra + inter
        intra_tokens = sum(sizes) * t
        inter_tokens = sum(sizes[:-1]) * t
        proj = (intra_tokens + inter_tokens) * 3 * c * c
        proj += inter_tokens * 2 * c * c  # 2C->C fusion projections
        mlp = (intra_tokens + inter_tokens) * 8 * c * c
    elif mode == "joint":
        tokens = sum(sizes) * t
        pairwise = tokens * tokens * c
        proj = tokens * 3 * c * c
        mlp = tokens * 8 * c * c
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    return AttentionCost(pairwise=pairwise, projections=proj, mlp=mlp)
