"""Encoder-decoder over a small convolutional stem.

The encoder runs two paths per layer: a per-frame self-attention base path
(with fixed 2-D sinusoidal positions) and the multi-scale temporal
enrichment path. Their block increments are concatenated channelwise and
projected back to C; the projection starts as identity-on-base /
zero-on-enriched so an untrained network computes exactly the base path.

The decoder turns n learned instance queries into per-frame box queries,
refines them with self / temporal / cross attention sub-blocks and
aggregates over frames into instance features.
"""

from __future__ import annotations

import functools

import numpy as np

from .attention import (
    ConfigurationError,
    MultiScaleTemporalEnricher,
    ScaleFeatures,
    SelfAttentionParams,
    attention_block,
    scaled_dot_attention,
)
from .nn import Conv2d, LayerNorm, Linear, Mlp, Module, parameter
from .tensor import (
    Tensor,
    concat,
    expand,
    leaky_relu,
    reshape,
    tmean,
    transpose,
)


@functools.lru_cache(maxsize=64)
def sinusoidal_pos_2d(height, width, dim):
    """Fixed 2-D sin/cos position table, [height*width, dim]."""
    if dim % 4 != 0:
        raise ConfigurationError(f"positional dim must be divisible by 4, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half // 2, dtype=np.float64) * 2 / half)
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height * 2 * np.pi
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width * 2 * np.pi

    def table(coords):
        ang = coords[:, None] * freqs[None, :]
        out = np.zeros((coords.size, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    ty = np.repeat(table(ys), width, axis=0)
    tx = np.tile(table(xs), (height, 1))
    return np.concatenate([ty, tx], axis=1).astype(np.float32)


def to_tokens(x):
    """[T, C, H, W] -> [H*W, T, C]."""
    t, c, h, w = x.shape
    return reshape(transpose(x, (2, 3, 0, 1)), (h * w, t, c))


def to_grid(x, height, width):
    """[S, T, C] -> [T, C, H, W]."""
    s, t, c = x.shape
    return transpose(reshape(x, (height, width, t, c)), (2, 3, 0, 1))


class ConvStem(Module):
    """Strided conv stack producing L levels at strides 8 * 2**(l-1).

    Inputs not divisible by the coarsest stride are zero-padded on the
    bottom/right; the applied padding is kept in `last_pad`.
    """

    def __init__(self, rng, out_dim, levels=2, widths=(16, 32, 32),
                 dtype=np.float32):
        w1, w2, w3 = widths
        self.conv1 = Conv2d(rng, 3, w1, 3, stride=2, pad=1, dtype=dtype)
        self.conv2 = Conv2d(rng, w1, w2, 3, stride=2, pad=1, dtype=dtype)
        self.conv3 = Conv2d(rng, w2, w3, 3, stride=2, pad=1, dtype=dtype)
        self.extra = [
            Conv2d(rng, w3, w3, 3, stride=2, pad=1, dtype=dtype)
            for _ in range(levels - 1)
        ]
        self.proj = [
            Conv2d(rng, w3, out_dim, 1, stride=1, pad=0, dtype=dtype)
            for _ in range(levels)
        ]
        self.levels = levels
        self.last_pad = (0, 0)

    def __call__(self, frames):
        t, c, h, w = frames.shape
        div = 8 * 2 ** (self.levels - 1)
        ph = (-h) % div
        pw = (-w) % div
        self.last_pad = (ph, pw)
        if ph or pw:
            data = np.pad(frames.data, ((0, 0), (0, 0), (0, ph), (0, pw)))
            frames = Tensor(data, requires_grad=frames.requires_grad)
        act = lambda z: leaky_relu(z, 0.1)
        x = act(self.conv1(frames))
        x = act(self.conv2(x))
        x = act(self.conv3(x))
        pyramid = []
        trunk = x
        for l in range(self.levels):
            if l > 0:
                trunk = act(self.extra[l - 1](trunk))
            feat = self.proj[l](trunk)
            _, _, hl, wl = feat.shape
            pyramid.append(ScaleFeatures(to_tokens(feat), hl, wl))
        return pyramid


class EncoderLayer(Module):
    def __init__(self, rng, dim, levels, heads=1, use_enrichment=True,
                 progressive=True, dtype=np.float32):
        self.base = [
            SelfAttentionParams(rng, dim, heads, dtype=dtype)
            for _ in range(levels)
        ]
        self.enrich = (
            MultiScaleTemporalEnricher(
                rng, dim, levels, heads, progressive=progressive, dtype=dtype
            )
            if use_enrichment
            else None
        )
        in_dim = 2 * dim if use_enrichment else dim
        self.fuse = [
            Linear(rng, in_dim, dim, bias=True, dtype=dtype) for _ in range(levels)
        ]
        # identity on the base increment, zero on the enriched increment:
        # at initialization the layer computes exactly the base path.
        eye = np.eye(dim, dtype=dtype)
        for f in self.fuse:
            f.w.data[:] = 0.0
            f.w.data[:dim] = eye
        self.dim = dim
        self.levels = levels

    def __call__(self, pyramid):
        enriched = self.enrich(pyramid) if self.enrich is not None else None
        out = []
        for l, level in enumerate(pyramid):
            x = level.data  # [S, T, C]
            pos = sinusoidal_pos_2d(level.height, level.width, self.dim)
            frames_first = transpose(x, (1, 0, 2))  # [T, S, C]
            base = transpose(
                attention_block(frames_first, self.base[l], pos=pos), (1, 0, 2)
            )
            # fuse the two paths' increments on top of an untouched residual
            # stream; identity/zero init reproduces the base-only variant
            # bit for bit at initialization
            if enriched is not None:
                parts = concat([base - x, enriched[l] - x], axis=2)
            else:
                parts = base - x
            fused = x + self.fuse[l](parts)
            out.append(ScaleFeatures(fused, level.height, level.width))
        return out


class Encoder(Module):
    def __init__(self, rng, dim, levels, depth, heads=1, use_enrichment=True,
                 progressive=True, dtype=np.float32):
        self.layers = [
            EncoderLayer(rng, dim, levels, heads, use_enrichment, progressive,
                         dtype=dtype)
            for _ in range(depth)
        ]

    def __call__(self, pyramid):
        for layer in self.layers:
            pyramid = layer(pyramid)
        return pyramid


class AttentionSubBlock(Module):
    """One pre-norm attention sub-block: x + attn(LN(x))."""

    def __init__(self, rng, dim, heads=1, dtype=np.float32):
        self.wq = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.wk = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.wv = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.ln = LayerNorm(dim, dtype=dtype)
        self.heads = heads

    def self_attend(self, x, return_weights=False):
        h = self.ln(x)
        out = scaled_dot_attention(
            self.wq(h), self.wk(h), self.wv(h), self.heads, return_weights
        )
        if return_weights:
            out, w = out
            return x + out, w
        return x + out

    def cross_attend(self, x, memory, mem_pos=None):
        h = self.ln(x)
        km = memory
        if mem_pos is not None:
            km = memory + Tensor(
                np.broadcast_to(mem_pos, memory.shape).astype(memory.dtype.type)
            )
        out = scaled_dot_attention(
            self.wq(h), self.wk(km), self.wv(memory), self.heads
        )
        return x + out


class DecoderLayer(Module):
    """Self-attention over queries per frame, temporal attention per query,
    cross-attention into the finest encoder level per frame, then an MLP.
    """

    def __init__(self, rng, dim, heads=1, use_temporal=True, dtype=np.float32):
        self.self_attn = AttentionSubBlock(rng, dim, heads, dtype=dtype)
        if use_temporal:
            self.temporal = AttentionSubBlock(rng, dim, heads, dtype=dtype)
            # open the temporal path gently: a small value projection keeps
            # the sub-block near-identity early without stalling its training
            self.temporal.wv.w.data *= 0.25
        else:
            self.temporal = None
        self.cross = AttentionSubBlock(rng, dim, heads, dtype=dtype)
        self.ln_mlp = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, dtype=dtype)

    def __call__(self, queries, memory, mem_pos):
        # queries [T, n, C]; memory [T, S, C]
        x = self.self_attn.self_attend(queries)
        if self.temporal is not None:
            per_query = transpose(x, (1, 0, 2))  # [n, T, C]
            per_query = self.temporal.self_attend(per_query)
            x = transpose(per_query, (1, 0, 2))
        x = self.cross.cross_attend(x, memory, mem_pos)
        return x + self.mlp(self.ln_mlp(x))


class Decoder(Module):
    def __init__(self, rng, dim, depth, num_queries, heads=1, use_temporal=True,
                 cross_all_levels=False, dtype=np.float32):
        self.queries = parameter(
            rng.normal(0.0, 0.02, size=(num_queries, dim)), dtype=dtype
        )
        self.layers = [
            DecoderLayer(rng, dim, heads, use_temporal, dtype=dtype)
            for _ in range(depth)
        ]
        self.cross_all_levels = cross_all_levels
        self.dim = dim

    def memory_from(self, pyramid):
        levels = pyramid if self.cross_all_levels else pyramid[:1]
        mems, poss = [], []
        for level in levels:
            mems.append(transpose(level.data, (1, 0, 2)))  # [T, S, C]
            poss.append(sinusoidal_pos_2d(level.height, level.width, self.dim))
        return concat(mems, axis=1) if len(mems) > 1 else mems[0], np.concatenate(
            poss, axis=0
        )

    def __call__(self, pyramid):
        memory, mem_pos = self.memory_from(pyramid)
        t = memory.shape[0]
        n, c = self.queries.shape
        box_queries = expand(reshape(self.queries, (1, n, c)), (t, n, c))
        for layer in self.layers:
            box_queries = layer(box_queries, memory, mem_pos)
        instance_features = tmean(box_queries, axis=0)  # [n, C]
        return box_queries, instance_features
