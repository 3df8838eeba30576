"""End-to-end pipelines: the 4D segmentation encoder-decoder and the
sequence-level classifier, plus the loss and evaluation metrics.

Both networks share the same encoder idea: seeds are sampled once in the
first frame, every frame is grouped around those seeds, and stacked set
abstraction stages produce per-frame seed features. The segmentation net
optionally applies the resolution fusion block, runs temporal
self-attention over per-seed patches, scatters token outputs back to
frames, and decodes with inverse-distance interpolation stages down to
every input point. The classifier pools the attention tokens globally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DenseLayer, DimensionError, Param, Tensor
from .attention import STSAParams, init_stsa_params, patch_division, stsa_forward
from .pointops import (
    FeatureMap,
    NeighborhoodGrouping,
    PointCloudSequence,
    SeedSet,
    ball_query,
    fps,
    interpolate_features,
    set_abstraction,
)
from .resolution import REConfig, REParams, apply_re, init_re_params


@dataclass
class SAStage:
    points: int
    radius: float
    k: int
    mlp: list[int]


@dataclass
class SegNetConfig:
    num_classes: int
    sa_stages: list[SAStage]
    fp_mlps: list[list[int]]  # one stage per encoder level, top-down
    head: list[int]  # hidden widths before the final class layer
    feat_width: int = 0
    use_re: bool = True
    re: Optional[REConfig] = None
    use_stsa: bool = True
    stsa_dim: int = 64
    window: int = 3
    stride: int = 1
    ffn_hidden: Optional[int] = None
    fps_start: int = 0

    def __post_init__(self):
        points = [s.points for s in self.sa_stages]
        if any(b >= a for a, b in zip(points, points[1:])):
            raise ContractError(f"sa stage points must be strictly decreasing, got {points}")
        if len(self.fp_mlps) != len(self.sa_stages):
            raise ContractError("decoder must mirror encoder: one fp stage per sa stage")
        if self.use_re and self.re is None:
            raise ContractError("use_re requires an REConfig")


@dataclass
class ClsNetConfig:
    num_classes: int
    sa_stages: list[SAStage]
    head: list[int]
    feat_width: int = 0
    use_stsa: bool = True  # False substitutes uniform mean mixing
    stsa_dim: int = 64
    window: int = 2
    stride: int = 1
    ffn_hidden: Optional[int] = None
    fps_start: int = 0


@dataclass
class SegParams:
    sa: list[list[DenseLayer]]
    re: Optional[REParams]
    stsa: Optional[STSAParams]
    fp: list[list[DenseLayer]]
    head: list[DenseLayer]


@dataclass
class ClsParams:
    sa: list[list[DenseLayer]]
    stsa: STSAParams
    head: list[DenseLayer]


@dataclass
class SegPrediction:
    logits: Tensor  # [T, n, num_classes]
    labels: np.ndarray  # [T, n] argmax of logits


def _encoder_dims(feat_width: int, sa_stages: Sequence[SAStage]) -> list[int]:
    dims = [feat_width]
    for stage in sa_stages:
        dims.append(stage.mlp[-1])
    return dims


def init_seg_params(cfg: SegNetConfig, rng: np.random.Generator, dtype=np.float32) -> SegParams:
    dims = _encoder_dims(cfg.feat_width, cfg.sa_stages)
    sa = [
        ad.make_mlp(rng, dims[i] + 3, stage.mlp, dtype, final_act="relu")
        for i, stage in enumerate(cfg.sa_stages)
    ]
    re = init_re_params(rng, dims[-1], cfg.re, dtype) if cfg.use_re else None
    top_dim = cfg.re.output_dim if cfg.use_re else dims[-1]
    stsa = None
    if cfg.use_stsa:
        stsa = init_stsa_params(rng, top_dim, cfg.stsa_dim, cfg.window, cfg.ffn_hidden, dtype)
        top_dim = cfg.stsa_dim
    fp = []
    cur = top_dim
    skips = list(reversed(dims[:-1]))  # level L-1 down to raw features
    for widths, skip in zip(cfg.fp_mlps, skips):
        fp.append(ad.make_mlp(rng, cur + skip, widths, dtype, final_act="relu"))
        cur = widths[-1]
    head = ad.make_mlp(rng, cur, cfg.head + [cfg.num_classes], dtype, final_act=None)
    return SegParams(sa, re, stsa, fp, head)


def init_cls_params(cfg: ClsNetConfig, rng: np.random.Generator, dtype=np.float32) -> ClsParams:
    dims = _encoder_dims(cfg.feat_width, cfg.sa_stages)
    sa = [
        ad.make_mlp(rng, dims[i] + 3, stage.mlp, dtype, final_act="relu")
        for i, stage in enumerate(cfg.sa_stages)
    ]
    stsa = init_stsa_params(rng, dims[-1], cfg.stsa_dim, cfg.window, cfg.ffn_hidden, dtype)
    head = ad.make_mlp(rng, cfg.stsa_dim, cfg.head + [cfg.num_classes], dtype, final_act=None)
    return ClsParams(sa, stsa, head)


@dataclass
class EncoderStatic:
    """Geometry shared by every training step on one sequence."""

    level_seeds: list[SeedSet]
    frame_groupings: list[NeighborhoodGrouping]  # stage 1, one per frame
    deep_groupings: list[NeighborhoodGrouping]  # stages 2.., shared across frames
    re_seeds: Optional[SeedSet] = None
    re_grouping: Optional[NeighborhoodGrouping] = None


def prepare_encoder(seq: PointCloudSequence, sa_stages: Sequence[SAStage],
                    fps_start: int, re_cfg: Optional[REConfig] = None) -> EncoderStatic:
    """Sample seeds in frame 1 and group every frame around them.

    Deeper stages operate on seed coordinates, which are identical in all
    frames, so their groupings are computed once.
    """
    first = sa_stages[0]
    seeds = fps(seq.frames[0].coords, first.points, fps_start)
    frame_groupings = [
        ball_query(seeds, frame.coords, first.radius, first.k) for frame in seq.frames
    ]
    level_seeds = [seeds]
    deep_groupings = []
    for stage in sa_stages[1:]:
        deeper = fps(level_seeds[-1].coords, stage.points, 0)
        deep_groupings.append(ball_query(deeper, level_seeds[-1].coords, stage.radius, stage.k))
        level_seeds.append(deeper)
    re_seeds = re_grouping = None
    if re_cfg is not None:
        top = level_seeds[-1]
        re_seeds = fps(top.coords, (top.m + 1) // 2, 0)
        re_grouping = ball_query(re_seeds, top.coords, re_cfg.radius, re_cfg.k)
    return EncoderStatic(level_seeds, frame_groupings, deep_groupings, re_seeds, re_grouping)


def _encode_frame(seq: PointCloudSequence, t: int, sa: Sequence[Sequence[DenseLayer]],
                  static: EncoderStatic) -> list[FeatureMap]:
    """Run the set abstraction stack on frame t; returns one map per level."""
    frame = seq.frames[t]
    dtype = sa[0][0].w.value.dtype
    feats = Tensor(frame.feats.astype(dtype)) if frame.feat_width else None
    maps = [set_abstraction((frame.coords, feats), static.frame_groupings[t], sa[0], t)]
    for layers, grouping in zip(sa[1:], static.deep_groupings):
        maps.append(set_abstraction(maps[-1], grouping, layers, t))
    return maps


def _window_for_frame(T: int, window: int, stride: int, num_windows: int) -> list[int]:
    """Nearest window center per frame; ties and uncovered frames clamp to
    the earliest window."""
    centers = [w * stride + window // 2 for w in range(num_windows)]
    return [min(range(num_windows), key=lambda w: (abs(centers[w] - t), w)) for t in range(T)]


def seg_forward(seq: PointCloudSequence, cfg: SegNetConfig, params: SegParams,
                static: Optional[EncoderStatic] = None) -> SegPrediction:
    """Segment every point of every frame; returns [T, n, C] logits."""
    if static is None:
        static = prepare_encoder(seq, cfg.sa_stages, cfg.fps_start, cfg.re if cfg.use_re else None)
    T = seq.T
    level_maps = [_encode_frame(seq, t, params.sa, static) for t in range(T)]

    if cfg.use_re:
        top_coords = static.re_seeds.coords
        top_feats = [
            apply_re(level_maps[t][-1], static.re_grouping, params.re)[0] for t in range(T)
        ]
    else:
        top_coords = static.level_seeds[-1].coords
        top_feats = [level_maps[t][-1].feats for t in range(T)]

    if cfg.use_stsa:
        patches = patch_division(top_feats, params.stsa.temporal_conv, cfg.window, cfg.stride)
        mixed = stsa_forward(patches, params.stsa)
        nw = patches.num_windows
        parts = ad.split(mixed, [patches.m] * nw, axis=0) if nw > 1 else [mixed]
        frame_window = _window_for_frame(T, cfg.window, cfg.stride, nw)
        top_feats = [parts[frame_window[t]] for t in range(T)]

    dtype = params.sa[0][0].w.value.dtype
    frame_logits = []
    for t in range(T):
        cur = FeatureMap(top_coords, top_feats[t], t)
        for stage_idx, level in enumerate(range(len(cfg.sa_stages) - 1, -1, -1)):
            if level >= 1:
                coords = static.level_seeds[level - 1].coords
                skip = level_maps[t][level - 1].feats
            else:
                coords = seq.frames[t].coords
                frame = seq.frames[t]
                skip = Tensor(frame.feats.astype(dtype)) if frame.feat_width else None
            up = interpolate_features(coords, cur)
            x = up if skip is None else ad.concat([up, skip], axis=-1)
            cur = FeatureMap(coords, ad.mlp_forward(x, params.fp[stage_idx]), t)
        frame_logits.append(ad.reshape(ad.mlp_forward(cur.feats, params.head),
                                       (1, cur.m, cfg.num_classes)))
    logits = frame_logits[0] if T == 1 else ad.concat(frame_logits, axis=0)
    return SegPrediction(logits, np.argmax(logits.data, axis=-1))


def cls_forward(seq: PointCloudSequence, cfg: ClsNetConfig, params: ClsParams,
                static: Optional[EncoderStatic] = None) -> Tensor:
    """Predict one label for the whole sequence; returns [C] logits."""
    if static is None:
        static = prepare_encoder(seq, cfg.sa_stages, cfg.fps_start)
    top_feats = [_encode_frame(seq, t, params.sa, static)[-1].feats for t in range(seq.T)]
    patches = patch_division(top_feats, params.stsa.temporal_conv, cfg.window, cfg.stride)
    mixed = stsa_forward(patches, params.stsa, mixing="attention" if cfg.use_stsa else "mean")
    pooled = ad.max_over_axis(mixed, axis=0, keepdims=True)  # [1, d]
    logits = ad.mlp_forward(pooled, params.head)
    return ad.reshape(logits, (cfg.num_classes,))


def cross_entropy_loss(logits: Tensor, labels: np.ndarray,
                       ignore_class: Optional[int] = None) -> Tensor:
    """Mean negative log-softmax of the true class over non-ignored entries.

    Accepts logits of any leading shape; the class axis is last.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    flat = ad.reshape(logits, (-1, n_classes)) if logits.ndim != 2 else logits
    return ad.cross_entropy(flat, labels.reshape(-1), ignore_class)


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise DimensionError(f"metrics: {pred.shape} predictions vs {true.shape} labels")
    counts = np.bincount(num_classes * true + pred, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def metrics(pred: np.ndarray, true: np.ndarray, num_classes: int) -> dict:
    """Per-class IoU, mean IoU, mean per-class recall, and overall accuracy.

    mIoU averages over classes present in the ground truth or predictions;
    per-class entries for absent classes are None.
    """
    cm = confusion_matrix(pred, true, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)  # true counts per class
    predicted = cm.sum(axis=0).astype(np.float64)
    union = support + predicted - tp
    present = union > 0
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=present)
    recall_present = support > 0
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=recall_present)
    return {
        "per_class_iou": [float(iou[c]) if present[c] else None for c in range(num_classes)],
        "miou": float(iou[present].mean()) if present.any() else 0.0,
        "macc": float(recall[recall_present].mean()) if recall_present.any() else 0.0,
        "oacc": float(tp.sum() / cm.sum()) if cm.sum() else 0.0,
    }


def named_params(obj, prefix: str = "") -> list[tuple[str, Param]]:
    """Flatten any nesting of dataclasses, lists, and dicts into named Params.

    Traversal order is deterministic (field order, list order, sorted dict
    keys) so checkpoints and optimizer state line up across runs.
    """
    out: list[tuple[str, Param]] = []

    def walk(node, path):
        if isinstance(node, Param):
            out.append((path, node))
        elif isinstance(node, DenseLayer):
            walk(node.w, f"{path}.w")
            walk(node.b, f"{path}.b")
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{path}.{i}")
        elif isinstance(node, dict):
            for key in sorted(node):
                walk(node[key], f"{path}.{key}")
        elif hasattr(node, "__dataclass_fields__"):
            for name in node.__dataclass_fields__:
                walk(getattr(node, name), f"{path}.{name}" if path else name)

    walk(obj, prefix)
    return out
