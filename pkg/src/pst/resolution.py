"""Resolution fusion block: a set-abstraction branch and a spatial
split/concat branch, merged per row by a two-way softmax attention.

The block halves the spatial size: an input of m seed rows produces m/2
fused rows. Both branches must emit the same width so the weighted sum is
well formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    ContractError,
    DenseLayer,
    DimensionError,
    Tensor,
    add,
    concat,
    make_mlp,
    mlp_forward,
    mul,
    softmax_rows,
    split,
)
from .pointops import FeatureMap, NeighborhoodGrouping, set_abstraction


@dataclass
class REConfig:
    """Layer widths and grouping hyperparameters for the fusion block."""

    output_dim: int
    feature_mlp: list[int]  # widths of the set-abstraction branch MLP
    resolution_mlp: list[int]  # widths of the split/concat branch MLP
    fusion_hidden: int  # hidden width of the 2-logit attention MLP
    radius: float = 1.0
    k: int = 16

    def __post_init__(self):
        if self.feature_mlp[-1] != self.output_dim or self.resolution_mlp[-1] != self.output_dim:
            raise ContractError("both branch MLPs must end at output_dim for the weighted sum")


@dataclass
class REParams:
    feature_layers: list[DenseLayer]
    f_layers: list[DenseLayer]
    gamma_layers: list[DenseLayer]


@dataclass
class REState:
    """Branch outputs and fusion weights, kept for inspection and tests."""

    n_feat: Tensor  # set-abstraction branch, [m', d']
    k_feat: Tensor  # split/concat branch, [m', d']
    fusion_weights: Tensor  # [m', 2] rows summing to 1


def init_re_params(rng: np.random.Generator, input_dim: int, cfg: REConfig,
                   dtype=np.float32) -> REParams:
    feature_layers = make_mlp(rng, input_dim + 3, cfg.feature_mlp, dtype, final_act="relu")
    f_layers = make_mlp(rng, 2 * input_dim, cfg.resolution_mlp, dtype, final_act="relu")
    gamma_layers = make_mlp(rng, 2 * cfg.output_dim, [cfg.fusion_hidden, 2], dtype, final_act=None)
    return REParams(feature_layers, f_layers, gamma_layers)


def feature_block(h: FeatureMap, grouping: NeighborhoodGrouping,
                  layers: Sequence[DenseLayer]) -> Tensor:
    """Further set abstraction over the input feature map."""
    return set_abstraction(h, grouping, layers, frame_index=h.frame_index).feats


def pad_rows_even(x: Tensor) -> Tensor:
    """Repeat the last row once so the spatial size is even."""
    if x.shape[0] % 2 == 0:
        return x
    head, tail = split(x, [x.shape[0] - 1, 1], axis=0)
    return concat([head, tail, tail], axis=0)


def resolution_block(h_feats: Tensor, layers: Sequence[DenseLayer]) -> Tensor:
    """Split rows into halves, stack the halves along channels, then MLP."""
    m = h_feats.shape[0]
    if m % 2 != 0:
        raise ContractError(f"resolution_block: spatial size must be even, got {m}")
    first, second = split(h_feats, [m // 2, m // 2], axis=0)
    g = concat([first, second], axis=-1)  # [m/2, 2d]
    return mlp_forward(g, layers)


def re_fuse(k_feat: Tensor, n_feat: Tensor, gamma_layers: Sequence[DenseLayer]) -> tuple[Tensor, Tensor]:
    """Weighted sum of the two branches with per-row softmax attention.

    Returns the fused features and the [m', 2] attention weights.
    """
    if k_feat.shape != n_feat.shape:
        raise DimensionError(f"re_fuse: branch shapes differ: {k_feat.shape} vs {n_feat.shape}")
    logits = mlp_forward(concat([k_feat, n_feat], axis=-1), gamma_layers)
    if logits.shape[-1] != 2:
        raise DimensionError(f"re_fuse: attention MLP must emit 2 logits, got {logits.shape}")
    weights = softmax_rows(logits)
    a1, a2 = split(weights, [1, 1], axis=-1)  # each [m', 1]
    fused = add(mul(a1, k_feat), mul(a2, n_feat))
    return fused, weights


def apply_re(h: FeatureMap, grouping: NeighborhoodGrouping, params: REParams) -> tuple[Tensor, REState]:
    """Run both branches on one frame and fuse them.

    The caller supplies the grouping for the set-abstraction branch (seeds
    are half of the input seeds so branch shapes match). Odd spatial sizes
    are padded by repeating the last row.
    """
    feats = pad_rows_even(h.feats)
    n_feat = feature_block(h, grouping, params.feature_layers)
    k_feat = resolution_block(feats, params.f_layers)
    if n_feat.shape != k_feat.shape:
        raise DimensionError(
            f"apply_re: branch shapes {n_feat.shape} vs {k_feat.shape}; "
            "check grouping seed count and branch widths"
        )
    fused, weights = re_fuse(k_feat, n_feat, params.gamma_layers)
    return fused, REState(n_feat, k_feat, weights)
