"""Training loop, evaluation, and the ablation harness.

A run resolves a preset plus optional config-file overrides into a RunConfig,
generates (or loads) its dataset, trains with Adam, and writes three
artifacts into the output directory:

    checkpoint.pstw   parameters + embedded model config (self-describing)
    metrics.json      {config_hash, seed, per_class_iou, miou, macc, oacc, steps}
    manifest.json     wall time, preset echo, loss curve, and extras

metrics.json holds only run-deterministic values so that two runs with the
same seed in single-threaded mode are bit-identical; timing lives in the
manifest.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .datagen import gen_cls_dataset, gen_seg_scene, load_split, sequence_label
from .formats import (
    config_hash,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    write_json_atomic,
)
from .networks import (
    ClsNetConfig,
    ClsParams,
    SAStage,
    SegNetConfig,
    SegParams,
    cls_forward,
    cross_entropy_loss,
    init_cls_params,
    init_seg_params,
    metrics,
    named_params,
    prepare_encoder,
    seg_forward,
)
from .optim import AdamConfig, adam_init, adam_step
from .presets import (
    RunPreset,
    desk_cls_config,
    desk_scene_spec,
    desk_seg_config,
    benchmark_seg_config,
    resolve_preset,
)
from .resolution import REConfig


@dataclass
class RunConfig:
    task: str
    preset: RunPreset
    lr: float
    batch: int
    steps: int
    train_seqs: int
    test_seqs: int
    use_re: bool = True
    use_stsa: bool = True
    data_dir: Optional[str] = None
    seed: int = 0


def _get(cfg: dict[str, str], key: str, cast, default):
    if key not in cfg:
        return default
    raw = cfg[key]
    if cast is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"config key {key}: expected a boolean, got {raw!r}")
    return cast(raw)


def resolve_run_config(task: str, preset_name: str, overrides: Optional[dict[str, str]],
                       seed: int) -> RunConfig:
    overrides = overrides or {}
    nframe = _get(overrides, "nframe", int, None)
    preset = resolve_preset(preset_name, task, nframe)
    return RunConfig(
        task=task,
        preset=preset,
        lr=_get(overrides, "lr", float, preset.lr),
        batch=_get(overrides, "batch", int, preset.batch),
        steps=_get(overrides, "steps", int, preset.steps),
        train_seqs=_get(overrides, "train", int, preset.train_seqs),
        test_seqs=_get(overrides, "test", int, preset.test_seqs),
        use_re=_get(overrides, "use_re", bool, True),
        use_stsa=_get(overrides, "use_stsa", bool, True),
        data_dir=overrides.get("data_dir"),
        seed=seed,
    )


def net_config_for(run: RunConfig, num_classes: int, feat_width: int):
    name = run.preset.name
    if run.task == "seg":
        if name in ("synthia", "kitti"):
            cfg = benchmark_seg_config(num_classes, feat_width)
            cfg.use_re, cfg.use_stsa = run.use_re, run.use_stsa
            if not run.use_re:
                cfg.re = None
            return cfg
        return desk_seg_config(num_classes, feat_width, run.use_re, run.use_stsa)
    if name == "msr":
        return ClsNetConfig(
            num_classes=num_classes,
            sa_stages=[SAStage(2048, 0.5, 32, [32, 32, 64]),
                       SAStage(512, 1.0, 32, [64, 64, 128])],
            head=[128],
            feat_width=feat_width,
            use_stsa=run.use_stsa,
            stsa_dim=256,
            window=min(3, run.preset.nframe),
        )
    return desk_cls_config(num_classes, feat_width, run.use_stsa)


def _seg_dataset(run: RunConfig) -> tuple[list, list]:
    if run.data_dir:
        return load_split(run.data_dir, "train"), load_split(run.data_dir, "test")
    spec = desk_scene_spec("seg", seed=run.seed)
    train = [gen_seg_scene(dataclasses.replace(spec, seed=run.seed + i))
             for i in range(run.train_seqs)]
    test = [gen_seg_scene(dataclasses.replace(spec, seed=run.seed + run.train_seqs + i))
            for i in range(run.test_seqs)]
    return train, test


def _cls_dataset(run: RunConfig) -> tuple[list, list]:
    if run.data_dir:
        train = [(s, sequence_label(s)) for s in load_split(run.data_dir, "train")]
        test = [(s, sequence_label(s)) for s in load_split(run.data_dir, "test")]
        return train, test
    spec = desk_scene_spec("cls", seed=run.seed)
    both = gen_cls_dataset(spec, run.train_seqs + run.test_seqs)
    return both[:run.train_seqs], both[run.train_seqs:]


def _batches(n: int, batch: int, steps: int, rng: np.random.Generator):
    """Yield `steps` index batches, reshuffling each pass over the data."""
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch:
            order = list(rng.permutation(n))
        yield order[:batch]
        order = order[batch:]


def run_config_dict(run: RunConfig, net_cfg) -> dict:
    d = {
        "task": run.task,
        "preset": dataclasses.asdict(run.preset),
        "lr": run.lr,
        "batch": run.batch,
        "steps": run.steps,
        "train_seqs": run.train_seqs,
        "test_seqs": run.test_seqs,
        "use_re": run.use_re,
        "use_stsa": run.use_stsa,
        "net": dataclasses.asdict(net_cfg),
    }
    d["preset"]["encoder_points"] = list(d["preset"]["encoder_points"])
    return d


@dataclass
class TrainOutcome:
    metrics: dict
    manifest: dict
    params: object
    net_cfg: object
    num_classes: int


def train_seg(train_seqs: Sequence, cfg: SegNetConfig, lr: float, steps: int,
              batch: int, seed: int) -> tuple[SegParams, list[float], dict]:
    rng = np.random.default_rng(seed)
    params = init_seg_params(cfg, rng, np.float32)
    named = named_params(params)
    state = adam_init(named)
    adam_cfg = AdamConfig(lr=lr)
    statics = [prepare_encoder(s, cfg.sa_stages, cfg.fps_start,
                               cfg.re if cfg.use_re else None) for s in train_seqs]
    labels = [np.concatenate([f.labels for f in s.frames]) for s in train_seqs]

    def seq_loss(i: int):
        pred = seg_forward(train_seqs[i], cfg, params, statics[i])
        return cross_entropy_loss(pred.logits, labels[i]), pred

    losses = []
    initial = float(np.mean([seq_loss(i)[0].data for i in range(len(train_seqs))]))
    for idx_batch in _batches(len(train_seqs), batch, steps, rng):
        parts = [seq_loss(i)[0] for i in idx_batch]
        total = parts[0]
        for part in parts[1:]:
            total = ad.add(total, part)
        loss = ad.scale(total, 1.0 / len(parts))
        ad.backward(loss, [p for _, p in named])
        adam_step(state, adam_cfg)
        ad.zero_grads(p for _, p in named)
        losses.append(float(loss.data))
    final = float(np.mean([seq_loss(i)[0].data for i in range(len(train_seqs))]))
    return params, losses, {"initial_loss": initial, "final_loss": final}


def evaluate_seg(seqs: Sequence, cfg: SegNetConfig, params: SegParams,
                 num_classes: int) -> dict:
    preds, trues = [], []
    for seq in seqs:
        pred = seg_forward(seq, cfg, params)
        preds.append(pred.labels.reshape(-1))
        trues.append(np.concatenate([f.labels for f in seq.frames]))
    return metrics(np.concatenate(preds), np.concatenate(trues), num_classes)


def train_cls(train_set: Sequence, cfg: ClsNetConfig, lr: float, steps: int,
              batch: int, seed: int) -> tuple[ClsParams, list[float], dict]:
    rng = np.random.default_rng(seed)
    params = init_cls_params(cfg, rng, np.float32)
    named = named_params(params)
    state = adam_init(named)
    adam_cfg = AdamConfig(lr=lr)
    statics = [prepare_encoder(seq, cfg.sa_stages, cfg.fps_start) for seq, _ in train_set]

    def batch_loss(idx: list[int]):
        rows = [ad.reshape(cls_forward(train_set[i][0], cfg, params, statics[i]),
                           (1, cfg.num_classes)) for i in idx]
        logits = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
        y = np.array([train_set[i][1] for i in idx], dtype=np.int64)
        return cross_entropy_loss(logits, y)

    losses = []
    all_idx = list(range(len(train_set)))
    initial = float(batch_loss(all_idx).data) if len(train_set) <= 64 else None
    for idx_batch in _batches(len(train_set), batch, steps, rng):
        loss = batch_loss(idx_batch)
        ad.backward(loss, [p for _, p in named])
        adam_step(state, adam_cfg)
        ad.zero_grads(p for _, p in named)
        losses.append(float(loss.data))
    extras = {"initial_loss": initial if initial is not None else losses[0],
              "final_loss": losses[-1]}
    return params, losses, extras


def evaluate_cls(dataset: Sequence, cfg: ClsNetConfig, params: ClsParams) -> dict:
    preds, trues = [], []
    for seq, label in dataset:
        logits = cls_forward(seq, cfg, params)
        preds.append(int(np.argmax(logits.data)))
        trues.append(int(label))
    return metrics(np.array(preds), np.array(trues), cfg.num_classes)


def run_training(task: str, preset_name: str, overrides: Optional[dict[str, str]],
                 seed: int, out_dir: Optional[str] = None) -> TrainOutcome:
    """Resolve, train, evaluate, and (optionally) write run artifacts."""
    run = resolve_run_config(task, preset_name, overrides, seed)
    start = time.perf_counter()
    if task == "seg":
        train_set, test_set = _seg_dataset(run)
        num_classes = train_set[0].num_classes
        feat_width = train_set[0].feat_width
        cfg = net_config_for(run, num_classes, feat_width)
        params, losses, extras = train_seg(train_set, cfg, run.lr, run.steps,
                                           run.batch, seed)
        scored = evaluate_seg(test_set or train_set, cfg, params, num_classes)
    elif task == "cls":
        train_set, test_set = _cls_dataset(run)
        num_classes = max(train_set[0][0].num_classes,
                          max(label for _, label in train_set) + 1)
        feat_width = train_set[0][0].feat_width
        cfg = net_config_for(run, num_classes, feat_width)
        params, losses, extras = train_cls(train_set, cfg, run.lr, run.steps,
                                           run.batch, seed)
        scored = evaluate_cls(test_set or train_set, cfg, params)
    else:
        raise ContractError(f"task must be seg or cls, got {task!r}")
    wall = time.perf_counter() - start

    cfg_dict = run_config_dict(run, cfg)
    digest = config_hash(cfg_dict)
    metrics_doc = {
        "config_hash": digest,
        "seed": seed,
        "per_class_iou": scored["per_class_iou"],
        "miou": scored["miou"],
        "macc": scored["macc"],
        "oacc": scored["oacc"],
        "steps": run.steps,
    }
    manifest = {
        "task": task,
        "preset": cfg_dict["preset"],
        "config_hash": digest,
        "seed": seed,
        "wall_time": wall,
        "initial_loss": extras["initial_loss"],
        "final_loss": extras["final_loss"],
        "loss_curve": losses,
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.pstw"), named_params(params),
                        meta={"task": task, "num_classes": num_classes,
                              "config": cfg_dict, "seed": seed})
        write_json_atomic(os.path.join(out_dir, "metrics.json"), metrics_doc)
        write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)
    return TrainOutcome(metrics_doc, manifest, params, cfg, num_classes)


def _net_cfg_from_dict(task: str, d: dict):
    stages = [SAStage(**s) for s in d["sa_stages"]]
    if task == "seg":
        re = REConfig(**d["re"]) if d.get("re") else None
        return SegNetConfig(
            num_classes=d["num_classes"], sa_stages=stages, fp_mlps=d["fp_mlps"],
            head=d["head"], feat_width=d["feat_width"], use_re=d["use_re"], re=re,
            use_stsa=d["use_stsa"], stsa_dim=d["stsa_dim"], window=d["window"],
            stride=d["stride"], ffn_hidden=d.get("ffn_hidden"),
            fps_start=d.get("fps_start", 0),
        )
    return ClsNetConfig(
        num_classes=d["num_classes"], sa_stages=stages, head=d["head"],
        feat_width=d["feat_width"], use_stsa=d["use_stsa"], stsa_dim=d["stsa_dim"],
        window=d["window"], stride=d["stride"], ffn_hidden=d.get("ffn_hidden"),
        fps_start=d.get("fps_start", 0),
    )


def evaluate_checkpoint(checkpoint_path: str, data_dir: str) -> dict:
    """Side-effect-free evaluation: rebuild the model and score a dataset."""
    meta, stored = load_checkpoint(checkpoint_path)
    task = meta["task"]
    cfg = _net_cfg_from_dict(task, meta["config"]["net"])
    rng = np.random.default_rng(0)
    params = init_seg_params(cfg, rng) if task == "seg" else init_cls_params(cfg, rng)
    named = named_params(params)
    restore_params(named, stored)
    if task == "seg":
        seqs = load_split(data_dir, "test") or load_split(data_dir, "train")
        scored = evaluate_seg(seqs, cfg, params, meta["num_classes"])
    else:
        seqs = load_split(data_dir, "test") or load_split(data_dir, "train")
        dataset = [(s, sequence_label(s)) for s in seqs]
        scored = evaluate_cls(dataset, cfg, params)
    return {
        "config_hash": config_hash(meta["config"]),
        "seed": meta.get("seed", 0),
        "per_class_iou": scored["per_class_iou"],
        "miou": scored["miou"],
        "macc": scored["macc"],
        "oacc": scored["oacc"],
        "steps": meta["config"]["steps"],
    }


# ---------------------------------------------------------------------------
# ablation harness


def ablation_grid(flags: Sequence[str]) -> list[dict[str, bool]]:
    """All on/off combinations of the requested flags, base config first."""
    known = {"re": "use_re", "stsa": "use_stsa"}
    keys = []
    for flag in flags:
        if flag not in known:
            raise ContractError(f"unknown ablation flag {flag!r}; choose from {sorted(known)}")
        keys.append(known[flag])
    grid = []
    for mask in range(2 ** len(keys)):
        grid.append({key: bool(mask >> i & 1) for i, key in enumerate(keys)})
    return grid


def run_ablation(task: str, flags: Sequence[str], seeds: Sequence[int],
                 steps: Optional[int] = None, overrides: Optional[dict[str, str]] = None,
                 out_dir: Optional[str] = None) -> dict:
    """Train every flag combination across seeds; report per-variant medians.

    Classification treats use_stsa=False as replacing attention with uniform
    mean pooling; segmentation drops the corresponding block entirely.
    """
    overrides = dict(overrides or {})
    if steps is not None:
        overrides["steps"] = str(steps)
    grid = ablation_grid(flags)
    score_key = "miou" if task == "seg" else "oacc"
    rows = []
    for variant in grid:
        var_overrides = dict(overrides)
        for key, value in variant.items():
            var_overrides[key] = str(value)
        scores = []
        for seed in seeds:
            outcome = run_training(task, "desk", var_overrides, seed)
            scores.append(outcome.metrics[score_key])
            rows.append({"variant": variant, "seed": seed,
                         "metrics": outcome.metrics})
        tag = "+".join(k for k, v in sorted(variant.items()) if v) or "base"
        for row in rows[-len(seeds):]:
            row["tag"] = tag
    medians = {}
    for row in rows:
        medians.setdefault(row["tag"], []).append(row["metrics"][score_key])
    medians = {tag: float(np.median(vals)) for tag, vals in medians.items()}
    base = medians.get("base")
    deltas = {tag: (val - base if base is not None else None)
              for tag, val in medians.items() if tag != "base"}
    manifest = {
        "task": task,
        "flags": list(flags),
        "seeds": list(seeds),
        "metric": score_key,
        "runs": rows,
        "medians": medians,
        "deltas_vs_base": deltas,
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_json_atomic(os.path.join(out_dir, "ablation.json"), manifest)
    return manifest
