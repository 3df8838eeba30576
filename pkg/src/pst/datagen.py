"""Synthetic point-cloud-sequence generation and depth back-projection.

Segmentation scenes are a static ground plane (class 0) plus rigid clusters
translating at constant per-sequence velocities (classes 1..K). The
classification task is a single cluster moving along one of four canonical
directions; the direction index is the sequence label. Everything is a pure
function of the scene spec's seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ContractError
from .formats import save_sequence, write_json_atomic
from .pointops import PointCloudFrame, PointCloudSequence

CLS_DIRECTIONS = np.array(
    [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]
)


@dataclass
class SceneSpec:
    num_static_points: int = 256
    num_objects: int = 2
    object_points: int = 32
    velocity: tuple[float, float] = (0.2, 0.5)  # speed range, units per frame
    noise_sigma: float = 0.01
    T: int = 3
    seed: int = 0
    extent: float = 4.0  # half-width of the ground plane
    object_size: float = 0.3  # cluster standard deviation

    def __post_init__(self):
        if min(self.num_static_points, self.num_objects, self.object_points, self.T) < 1:
            raise ContractError("scene spec counts and T must be >= 1")
        lo, hi = self.velocity
        if lo < 0 or hi < lo:
            raise ContractError(f"velocity range must satisfy 0 <= lo <= hi, got {self.velocity}")
        if self.noise_sigma < 0:
            raise ContractError("noise sigma must be >= 0")


def _finish_frames(base: np.ndarray, shifts: np.ndarray, labels: np.ndarray,
                   rng: np.random.Generator, sigma: float, num_classes: int) -> PointCloudSequence:
    """Assemble frames: base points plus per-frame shifts and fresh noise."""
    frames = []
    for t in range(shifts.shape[0]):
        coords = base + shifts[t]
        if sigma > 0:
            coords = coords + rng.normal(0.0, sigma, size=coords.shape)
        coords = coords.astype(np.float32)
        feats = coords[:, 2:3].copy()  # height above the plane as the input feature
        frames.append(PointCloudFrame(coords, feats, labels.copy()))
    return PointCloudSequence(frames, num_classes)


def gen_seg_scene(spec: SceneSpec) -> PointCloudSequence:
    """Labeled segmentation sequence; every cluster point keeps its class in
    all frames because motion is rigid."""
    rng = np.random.default_rng(spec.seed)
    ext = spec.extent
    static = np.column_stack([
        rng.uniform(-ext, ext, spec.num_static_points),
        rng.uniform(-ext, ext, spec.num_static_points),
        np.zeros(spec.num_static_points),
    ])
    parts = [static]
    labels = [np.zeros(spec.num_static_points, dtype=np.int64)]
    velocities = np.zeros((spec.num_static_points + spec.num_objects * spec.object_points, 3))
    row = spec.num_static_points
    for k in range(1, spec.num_objects + 1):
        # one angular sector per object keeps clusters apart for any seed
        theta = 2.0 * np.pi * (k - 1) / spec.num_objects + rng.uniform(-0.3, 0.3)
        rho = rng.uniform(0.3 * ext, 0.6 * ext)
        center = np.array([
            rho * np.cos(theta),
            rho * np.sin(theta),
            rng.uniform(0.9, 1.5),
        ])
        sigma = np.array([spec.object_size, spec.object_size, 0.5 * spec.object_size])
        cluster = center + sigma * rng.normal(0.0, 1.0, size=(spec.object_points, 3))
        speed = rng.uniform(*spec.velocity)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        velocities[row:row + spec.object_points] = speed * np.array(
            [np.cos(angle), np.sin(angle), 0.0]
        )
        row += spec.object_points
        parts.append(cluster)
        labels.append(np.full(spec.object_points, k, dtype=np.int64))
    base = np.concatenate(parts)
    shifts = np.arange(spec.T)[:, None, None] * velocities[None, :, :]
    return _finish_frames(base, shifts, np.concatenate(labels), rng,
                          spec.noise_sigma, spec.num_objects + 1)


def gen_cls_scene(spec: SceneSpec, class_id: int) -> tuple[PointCloudSequence, int]:
    """One cluster translating along the canonical direction ``class_id``."""
    if not 0 <= class_id < len(CLS_DIRECTIONS):
        raise ContractError(f"class_id must be in [0, {len(CLS_DIRECTIONS)}), got {class_id}")
    rng = np.random.default_rng(spec.seed)
    center = np.array([
        rng.uniform(-0.3 * spec.extent, 0.3 * spec.extent),
        rng.uniform(-0.3 * spec.extent, 0.3 * spec.extent),
        rng.uniform(0.8, 1.2),
    ])
    cluster = center + rng.normal(0.0, spec.object_size, size=(spec.object_points, 3))
    speed = rng.uniform(*spec.velocity)
    velocity = speed * CLS_DIRECTIONS[class_id]
    shifts = np.arange(spec.T)[:, None, None] * velocity[None, None, :]
    labels = np.full(spec.object_points, class_id, dtype=np.int64)
    seq = _finish_frames(cluster, shifts, labels, rng, spec.noise_sigma,
                         len(CLS_DIRECTIONS))
    return seq, class_id


def gen_cls_dataset(spec: SceneSpec, count: int) -> list[tuple[PointCloudSequence, int]]:
    """Class-balanced dataset (counts per class differ by at most 1)."""
    out = []
    for i in range(count):
        child = replace(spec, seed=(spec.seed * 1000003 + i) % 2**63)
        out.append(gen_cls_scene(child, i % len(CLS_DIRECTIONS)))
    return out


def depth_backproject(depth: np.ndarray, intrinsics: dict) -> np.ndarray:
    """Pinhole inverse projection of a depth map to 3D points.

    x = (u - cx) z / fx, y = (v - cy) z / fy; pixels with zero, negative,
    or non-finite depth are dropped. Points come out in row-major pixel
    scan order.
    """
    fx, fy = float(intrinsics["fx"]), float(intrinsics["fy"])
    cx, cy = float(intrinsics["cx"]), float(intrinsics["cy"])
    if fx <= 0 or fy <= 0:
        raise ContractError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ContractError(f"depth must be [H, W], got shape {depth.shape}")
    v, u = np.indices(depth.shape)
    valid = np.isfinite(depth) & (depth > 0)
    z = depth[valid]
    x = (u[valid] - cx) * z / fx
    y = (v[valid] - cy) * z / fy
    return np.column_stack([x, y, z])


# ---------------------------------------------------------------------------
# dataset directories


def _spec_from_config(cfg: dict[str, str]) -> SceneSpec:
    def geti(key, default):
        return int(cfg.get(key, default))

    def getf(key, default):
        return float(cfg.get(key, default))

    return SceneSpec(
        num_static_points=geti("static_points", 256),
        num_objects=geti("objects", 2),
        object_points=geti("object_points", 32),
        velocity=(getf("velocity_lo", 0.2), getf("velocity_hi", 0.5)),
        noise_sigma=getf("noise_sigma", 0.01),
        T=geti("frames", 3),
        seed=geti("seed", 0),
        extent=getf("extent", 4.0),
        object_size=getf("object_size", 0.3),
    )


def write_dataset(out_dir: str, cfg: dict[str, str]) -> dict:
    """Generate and save the dataset described by a parsed config.

    Layout: <out>/train/seq_NNNN.psts, <out>/test/seq_NNNN.psts, and a
    dataset.json manifest echoing the resolved spec.
    """
    task = cfg.get("task", "seg")
    if task not in ("seg", "cls"):
        raise ContractError(f"task must be seg or cls, got {task!r}")
    spec = _spec_from_config(cfg)
    counts = {"train": int(cfg.get("train", 4)), "test": int(cfg.get("test", 0))}
    offset = 0
    for split, count in counts.items():
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        if task == "cls":
            base = replace(spec, seed=spec.seed + offset)
            for i, (seq, _) in enumerate(gen_cls_dataset(base, count)):
                save_sequence(os.path.join(split_dir, f"seq_{i:04d}.psts"), seq)
        else:
            for i in range(count):
                seq = gen_seg_scene(replace(spec, seed=spec.seed + offset + i))
                save_sequence(os.path.join(split_dir, f"seq_{i:04d}.psts"), seq)
        offset += count
    manifest = {
        "task": task,
        "num_classes": len(CLS_DIRECTIONS) if task == "cls" else spec.num_objects + 1,
        "counts": counts,
        "spec": {k: cfg[k] for k in sorted(cfg)},
    }
    write_json_atomic(os.path.join(out_dir, "dataset.json"), manifest)
    return manifest


def load_split(data_dir: str, split: str) -> list[PointCloudSequence]:
    """Load every .psts file in <dir>/<split> (or <dir> itself), sorted by name."""
    from .formats import load_sequence

    split_dir = os.path.join(data_dir, split)
    if not os.path.isdir(split_dir):
        split_dir = data_dir
    names = sorted(f for f in os.listdir(split_dir) if f.endswith(".psts"))
    return [load_sequence(os.path.join(split_dir, name)) for name in names]


def sequence_label(seq: PointCloudSequence) -> int:
    """Classification label stored as the per-point label of every point."""
    labels = seq.frames[0].labels
    if labels is None or labels.size == 0:
        raise ContractError("sequence has no labels to derive a class from")
    return int(labels[0])
