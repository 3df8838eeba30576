"""Point cloud geometry: sampling, grouping, set abstraction, interpolation.

Coordinates are plain numpy arrays (geometry is never differentiated);
per-point features travel as autodiff Tensors so gradients flow through
feature gathering, the shared MLPs, and the decoder interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import (
    ContractError,
    DenseLayer,
    DimensionError,
    Tensor,
    concat,
    gather_rows,
    max_over_axis,
    mlp_forward,
    mul,
    sum_over_axis,
)


@dataclass
class PointCloudFrame:
    """One frame: coordinates in meters, unitless features, optional labels."""

    coords: np.ndarray  # [n, 3]
    feats: np.ndarray  # [n, f], f may be 0
    labels: Optional[np.ndarray] = None  # [n] ints

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise DimensionError(f"frame coords must be [n, 3], got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ContractError("frame must contain at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ContractError("frame coords contain non-finite values")
        self.feats = np.asarray(self.feats)
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise DimensionError(
                f"frame feats must be [n, f] with n={self.coords.shape[0]}, got {self.feats.shape}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise DimensionError(f"labels shape {self.labels.shape} vs n={self.coords.shape[0]}")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_width(self) -> int:
        return self.feats.shape[1]


@dataclass
class PointCloudSequence:
    """Ordered frames sharing feature width and class count."""

    frames: list[PointCloudFrame]
    num_classes: int = 0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ContractError("sequence must contain at least one frame")
        widths = {f.feat_width for f in self.frames}
        if len(widths) > 1:
            raise ContractError(f"frames disagree on feature width: {sorted(widths)}")
        if self.num_classes:
            for f in self.frames:
                if f.labels is not None and f.labels.size and (
                    f.labels.min() < 0 or f.labels.max() >= self.num_classes
                ):
                    raise ContractError("label outside [0, num_classes)")

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def feat_width(self) -> int:
        return self.frames[0].feat_width


@dataclass
class SeedSet:
    """Representative points chosen in the first frame and reused in all others."""

    indices: np.ndarray  # [m] unique ints into the sampled cloud
    coords: np.ndarray  # [m, 3]

    @property
    def m(self) -> int:
        return self.indices.shape[0]


@dataclass
class NeighborhoodGrouping:
    """Per-seed neighbor index lists, padded by repeating the first entry."""

    seed_set: SeedSet
    neighbor_idx: np.ndarray  # [m, k]
    radius: float
    k: int


@dataclass
class FeatureMap:
    """Per-seed features for one frame."""

    seed_coords: np.ndarray  # [m, 3]
    feats: Tensor  # [m, d]
    frame_index: int = 0

    @property
    def m(self) -> int:
        return self.seed_coords.shape[0]


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances [len(a), len(b)]."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def fps(coords: np.ndarray, m: int, start: int = 0) -> SeedSet:
    """Greedy farthest point sampling under squared Euclidean distance.

    Each new seed maximizes its minimum distance to all previously chosen
    seeds; ties break to the lowest index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"fps: need 1 <= m <= n, got m={m}, n={n}")
    if not 0 <= start < n:
        raise ContractError(f"fps: start {start} out of range for n={n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    min_sq = np.einsum("ij,ij->i", coords - coords[start], coords - coords[start])
    for i in range(1, m):
        nxt = int(np.argmax(min_sq))
        chosen[i] = nxt
        diff = coords - coords[nxt]
        np.minimum(min_sq, np.einsum("ij,ij->i", diff, diff), out=min_sq)
    return SeedSet(chosen, coords[chosen])


def ball_query(seeds: SeedSet, coords: np.ndarray, radius: float, k: int,
               chunk: int = 512) -> NeighborhoodGrouping:
    """Up to ``k`` in-radius point indices per seed, in ascending index order.

    Seeds with fewer than ``k`` neighbors repeat the first one found; a seed
    with none falls back to its own index (or the nearest point when the
    seed index is not valid for this cloud, e.g. when grouping a later frame
    with fewer points).
    """
    if radius <= 0:
        raise ContractError(f"ball_query: radius must be positive, got {radius}")
    if k < 1:
        raise ContractError(f"ball_query: k must be >= 1, got {k}")
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    m = seeds.m
    r2 = float(radius) ** 2
    out = np.empty((m, k), dtype=np.int64)
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        d2 = _sq_dists(seeds.coords[lo:hi], coords)
        for row in range(hi - lo):
            hits = np.nonzero(d2[row] <= r2)[0]
            if hits.size == 0:
                own = int(seeds.indices[lo + row])
                fallback = own if 0 <= own < n else int(np.argmin(d2[row]))
                out[lo + row] = fallback
            elif hits.size >= k:
                out[lo + row] = hits[:k]
            else:
                out[lo + row, : hits.size] = hits
                out[lo + row, hits.size :] = hits[0]
    return NeighborhoodGrouping(seeds, out, float(radius), k)


SetAbstractionInput = Union[PointCloudFrame, FeatureMap, tuple]


def _coords_feats(source: SetAbstractionInput):
    if isinstance(source, PointCloudFrame):
        return source.coords, source.feats
    if isinstance(source, FeatureMap):
        return source.seed_coords, source.feats
    coords, feats = source
    return np.asarray(coords), feats


def set_abstraction(source: SetAbstractionInput, grouping: NeighborhoodGrouping,
                    layers: Sequence[DenseLayer], frame_index: int = 0) -> FeatureMap:
    """Gather neighbors, append seed-relative coordinates, MLP, max-pool.

    Relative coordinates make the block translation-equivariant; max pooling
    over the neighbor axis makes it invariant to neighbor order.
    """
    coords, feats = _coords_feats(source)
    idx = grouping.neighbor_idx
    if idx.size and idx.max() >= coords.shape[0]:
        raise DimensionError("set_abstraction: grouping indices exceed input size")
    dtype = layers[0].w.value.dtype
    rel = coords[idx].astype(dtype) - grouping.seed_set.coords[:, None, :].astype(dtype)
    parts = [Tensor(rel)]
    if feats is not None:
        feats_t = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=dtype))
        if feats_t.shape[1] > 0:
            parts.insert(0, gather_rows(feats_t, idx))
    grouped = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    hidden = mlp_forward(grouped, layers)  # [m, k, d_out]
    pooled = max_over_axis(hidden, axis=1)
    return FeatureMap(grouping.seed_set.coords, pooled, frame_index)


def interpolate_features(targets: np.ndarray, sources: FeatureMap, p: int = 3,
                         eps: float = 1e-8) -> Tensor:
    """Inverse-distance-weighted average of the ``p`` nearest source features.

    Weights are 1/(dist+eps), normalized to sum to 1 per target; ties in
    distance resolve to the lowest source index.
    """
    targets = np.asarray(targets, dtype=np.float64)
    m = sources.m
    if m < 1:
        raise ContractError("interpolate_features: no source points")
    p = min(p, m)
    d2 = _sq_dists(targets, sources.seed_coords.astype(np.float64))
    order = np.argsort(d2, axis=1, kind="stable")[:, :p]
    dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
    w = 1.0 / (dist + eps)
    w /= w.sum(axis=1, keepdims=True)
    dtype = sources.feats.dtype
    gathered = gather_rows(sources.feats, order)  # [q, p, d]
    weights = Tensor(w[:, :, None].astype(dtype))
    return sum_over_axis(mul(gathered, weights), axis=1)
