"""Named run presets and network configuration builders.

The three benchmark presets (synthia, kitti, msr) carry the published
hyperparameters: learning rate, batch size, frame count, and point count,
plus the four-stage encoder sampling sizes [2048, 512, 128, 64] for the
segmentation networks. The msr preset's batch and point count depend on the
frame count, so the full table is exposed. The desk preset is a scaled-down
configuration that trains in minutes on one CPU core.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ContractError
from .datagen import SceneSpec
from .networks import ClsNetConfig, SAStage, SegNetConfig
from .resolution import REConfig

# frame count -> (batch size, point count) for the msr preset
MSR_TABLE = {4: (16, 2048), 8: (8, 8192), 12: (8, 8192), 16: (8, 10240)}

BENCHMARK_ENCODER_POINTS = (2048, 512, 128, 64)


@dataclass(frozen=True)
class RunPreset:
    name: str
    task: str  # "seg" or "cls"
    lr: float
    batch: int
    nframe: int
    points: int
    encoder_points: tuple[int, ...]
    steps: int  # default training length at this preset's scale
    train_seqs: int
    test_seqs: int


PRESETS: dict[str, RunPreset] = {
    "synthia": RunPreset("synthia", "seg", 0.0016, 2, 3, 16384,
                         BENCHMARK_ENCODER_POINTS, 500, 4, 0),
    "kitti": RunPreset("kitti", "seg", 0.012, 2, 3, 16384,
                       BENCHMARK_ENCODER_POINTS, 500, 4, 0),
    "msr": RunPreset("msr", "cls", 0.001, MSR_TABLE[8][0], 8, MSR_TABLE[8][1],
                     (2048, 512), 600, 160, 40),
    "desk": RunPreset("desk", "seg", 0.001, 2, 3, 336, (256, 64), 500, 4, 0),
    "desk-cls": RunPreset("desk-cls", "cls", 0.001, 8, 8, 64, (16,), 300, 160, 40),
}


def resolve_preset(name: str, task: str | None = None, nframe: int | None = None) -> RunPreset:
    """Look up a preset; "desk" resolves per task, msr per frame count."""
    if name == "desk" and task == "cls":
        name = "desk-cls"
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[name]
    if name == "msr" and nframe is not None:
        if nframe not in MSR_TABLE:
            raise ContractError(f"msr preset defines nframe in {sorted(MSR_TABLE)}, got {nframe}")
        batch, points = MSR_TABLE[nframe]
        preset = RunPreset("msr", "cls", preset.lr, batch, nframe, points,
                           preset.encoder_points, preset.steps,
                           preset.train_seqs, preset.test_seqs)
    return preset


# ---------------------------------------------------------------------------
# desk-scale network configs


def desk_seg_config(num_classes: int = 3, feat_width: int = 1,
                    use_re: bool = True, use_stsa: bool = True) -> SegNetConfig:
    """Two-stage encoder with seeds [256, 64], fusion/attention width 128."""
    return SegNetConfig(
        num_classes=num_classes,
        sa_stages=[
            SAStage(256, 0.9, 16, [32, 64]),
            SAStage(64, 1.8, 16, [64, 128]),
        ],
        fp_mlps=[[128], [64]],
        head=[],
        feat_width=feat_width,
        use_re=use_re,
        re=REConfig(output_dim=128, feature_mlp=[128], resolution_mlp=[128],
                    fusion_hidden=128, radius=2.4, k=8) if use_re else None,
        use_stsa=use_stsa,
        stsa_dim=128,
        window=3,
        stride=1,
    )


def desk_cls_config(num_classes: int = 4, feat_width: int = 1,
                    use_stsa: bool = True) -> ClsNetConfig:
    return ClsNetConfig(
        num_classes=num_classes,
        sa_stages=[SAStage(16, 1.0, 16, [32, 64])],
        head=[32],
        feat_width=feat_width,
        use_stsa=use_stsa,
        stsa_dim=64,
        window=2,
        stride=1,
    )


def benchmark_seg_config(num_classes: int = 3, feat_width: int = 1) -> SegNetConfig:
    """Benchmark-scale encoder with sampling sizes [2048, 512, 128, 64]."""
    return SegNetConfig(
        num_classes=num_classes,
        sa_stages=[
            SAStage(2048, 0.5, 32, [32, 32, 64]),
            SAStage(512, 1.0, 32, [64, 64, 128]),
            SAStage(128, 2.0, 32, [128, 128, 256]),
            SAStage(64, 4.0, 32, [256, 256, 512]),
        ],
        fp_mlps=[[256], [256], [128], [128]],
        head=[],
        feat_width=feat_width,
        use_re=True,
        re=REConfig(output_dim=512, feature_mlp=[512], resolution_mlp=[512],
                    fusion_hidden=512, radius=8.0, k=16),
        use_stsa=True,
        stsa_dim=512,
        window=3,
        stride=1,
    )


def desk_scene_spec(task: str, seed: int = 0) -> SceneSpec:
    """Data spec matching the desk network configs."""
    if task == "seg":
        return SceneSpec(num_static_points=288, num_objects=2, object_points=24,
                         velocity=(0.2, 0.4), noise_sigma=0.01, T=3, seed=seed,
                         extent=4.0, object_size=0.3)
    if task == "cls":
        return SceneSpec(num_static_points=1, num_objects=1, object_points=64,
                         velocity=(0.06, 0.12), noise_sigma=0.01, T=8, seed=seed,
                         extent=2.0, object_size=0.3)
    raise ContractError(f"task must be seg or cls, got {task!r}")
