"""Point-cloud-sequence networks with spatio-temporal self-attention.

A self-contained numpy implementation: reverse-mode autodiff, farthest
point sampling and set abstraction, resolution fusion, temporal
self-attention, end-to-end segmentation and classification pipelines, Adam,
synthetic data, binary formats, and a CLI.
"""

from .autodiff import (
    ContractError,
    DenseLayer,
    DimensionError,
    NonFiniteError,
    Param,
    Tensor,
    backward,
    zero_grads,
)
from .attention import AttentionTrace, PatchSet, STSAParams, patch_division, self_attention, stsa_forward
from .datagen import SceneSpec, depth_backproject, gen_cls_dataset, gen_cls_scene, gen_seg_scene
from .formats import (
    FormatError,
    load_checkpoint,
    load_sequence,
    save_checkpoint,
    save_sequence,
)
from .gradcheck import run_checks
from .networks import (
    ClsNetConfig,
    SAStage,
    SegNetConfig,
    cls_forward,
    cross_entropy_loss,
    init_cls_params,
    init_seg_params,
    metrics,
    named_params,
    seg_forward,
)
from .optim import AdamConfig, AdamState, adam_init, adam_step
from .pointops import (
    FeatureMap,
    NeighborhoodGrouping,
    PointCloudFrame,
    PointCloudSequence,
    SeedSet,
    ball_query,
    fps,
    interpolate_features,
    set_abstraction,
)
from .presets import PRESETS, MSR_TABLE, RunPreset, resolve_preset
from .resolution import REConfig, REParams, REState, apply_re, re_fuse, resolution_block
from .train import evaluate_checkpoint, run_ablation, run_training

__version__ = "0.1.0"
