"""Temporal self-attention over per-seed feature patches.

Per-frame seed features (all frames share the seed set) are grouped into
tokens: for each seed and each temporal window position, the window's
frame features are concatenated and passed through a learned linear map.
Scaled dot-product self-attention then mixes all tokens, followed by a
residual connection, a pointwise feed-forward network, and layer
normalization, in that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    ContractError,
    DenseLayer,
    DimensionError,
    Param,
    Tensor,
    add,
    concat,
    div_scalar,
    layer_norm,
    make_mlp,
    matmul,
    mean_over_axis,
    mlp_forward,
    softmax_rows,
    transpose_last2,
)


@dataclass
class STSAParams:
    wq: Param  # [d, d]
    wk: Param  # [d, d]
    wv: Param  # [d, d]
    temporal_conv: Param  # [window * d_in, d]
    ffn: list[DenseLayer]  # d -> hidden -> d
    ln_gain: Param  # [d]
    ln_bias: Param  # [d]
    ln_eps: float = 1e-5


@dataclass
class PatchSet:
    """Aligned spatio-temporal tokens plus their (seed, window) bookkeeping."""

    tokens: Tensor  # [N, d], ordered window-major then seed
    index_map: np.ndarray  # [N, 2] rows of (seed index, window index)
    T: int
    m: int
    window: int
    stride: int

    @property
    def num_windows(self) -> int:
        return self.tokens.shape[0] // self.m


@dataclass
class AttentionTrace:
    """Intermediate attention matrices: raw, scaled, and row-normalized."""

    a1: Tensor  # [N, N] raw query-key scores
    a2: Tensor  # [N, N] scores divided by sqrt(d)
    a3: Tensor  # [N, N] row-stochastic weights


def init_stsa_params(rng: np.random.Generator, d_in: int, d: int, window: int,
                     ffn_hidden: int | None = None, dtype=np.float32) -> STSAParams:
    def square(size_in, size_out):
        bound = 1.0 / math.sqrt(size_in)
        return Param(rng.uniform(-bound, bound, size=(size_in, size_out)), dtype=dtype)

    ffn_hidden = ffn_hidden if ffn_hidden is not None else 2 * d
    return STSAParams(
        wq=square(d, d),
        wk=square(d, d),
        wv=square(d, d),
        temporal_conv=square(window * d_in, d),
        ffn=make_mlp(rng, d, [ffn_hidden, d], dtype, final_act=None),
        ln_gain=Param(np.ones(d), dtype=dtype),
        ln_bias=Param(np.zeros(d), dtype=dtype),
    )


def patch_division(frame_feats: Sequence[Tensor], conv: Param, window: int,
                   stride: int = 1) -> PatchSet:
    """Build one token per (seed, temporal window) via a learned linear map.

    Token (j, w) sees only seed j's features in frames [w*stride, w*stride
    + window); tokens are ordered window-major, seed-minor.
    """
    T = len(frame_feats)
    if T < 1:
        raise ContractError("patch_division: empty frame list")
    sizes = {f.shape[0] for f in frame_feats}
    if len(sizes) > 1:
        raise DimensionError(f"patch_division: frames disagree on seed count: {sorted(sizes)}")
    if not 1 <= window <= T:
        raise ContractError(f"patch_division: need 1 <= window <= T, got window={window}, T={T}")
    if stride < 1:
        raise ContractError(f"patch_division: stride must be >= 1, got {stride}")
    m = frame_feats[0].shape[0]
    num_windows = (T - window) // stride + 1
    window_tokens = []
    for w in range(num_windows):
        frames = [frame_feats[w * stride + u] for u in range(window)]
        stacked = frames[0] if window == 1 else concat(frames, axis=-1)  # [m, window*d_in]
        window_tokens.append(matmul(stacked, conv.value))
    tokens = window_tokens[0] if num_windows == 1 else concat(window_tokens, axis=0)
    seeds = np.tile(np.arange(m), num_windows)
    windows = np.repeat(np.arange(num_windows), m)
    index_map = np.stack([seeds, windows], axis=1)
    return PatchSet(tokens, index_map, T, m, window, stride)


def self_attention(patches: PatchSet, params: STSAParams) -> tuple[Tensor, AttentionTrace]:
    """Scaled dot-product self-attention over all tokens."""
    f = patches.tokens
    if f.shape[0] < 1:
        raise ContractError("self_attention: no tokens")
    d = params.wq.shape[0]
    if f.shape[-1] != d:
        raise DimensionError(f"self_attention: token width {f.shape[-1]} vs weights {params.wq.shape}")
    q = matmul(f, params.wq.value)
    k = matmul(f, params.wk.value)
    v = matmul(f, params.wv.value)
    a1 = matmul(q, transpose_last2(k))
    a2 = div_scalar(a1, math.sqrt(d))
    a3 = softmax_rows(a2)
    out = matmul(a3, v)
    return out, AttentionTrace(a1, a2, a3)


def mean_mixing(patches: PatchSet) -> Tensor:
    """Ablation stand-in for attention: every token becomes the token mean."""
    n = patches.tokens.shape[0]
    mean = mean_over_axis(patches.tokens, axis=0, keepdims=True)  # [1, d]
    anchor = Tensor(np.zeros((n, 1), dtype=patches.tokens.dtype))
    return add(anchor, mean)  # broadcast to [N, d]


def stsa_forward(patches: PatchSet, params: STSAParams, mixing: str = "attention") -> Tensor:
    """Residual connection, feed-forward, then layer normalization.

    ``mixing`` selects scaled dot-product attention or the uniform mean
    (the ablation baseline); everything downstream is identical.
    """
    if mixing == "attention":
        mixed, _ = self_attention(patches, params)
    elif mixing == "mean":
        mixed = mean_mixing(patches)
    else:
        raise ContractError(f"unknown mixing {mixing!r}")
    x = add(mixed, patches.tokens)
    h = mlp_forward(x, params.ffn)
    return layer_norm(h, params.ln_gain.value, params.ln_bias.value, params.ln_eps)
