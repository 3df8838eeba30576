"""Central finite-difference verification of every differentiable op and
composite block, at 64-bit precision.

Elementary ops get per-coordinate checks against a weighted-sum scalar loss
(the weights make per-element gradients distinct). Composite blocks get
directional-derivative checks over all their parameters, which scales to
whole networks. Instance generation is seeded and avoids kinks: inputs near
a ReLU hinge or a max-pool tie are nudged away so the finite difference
stays on one linear piece.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Param, Tensor
from .attention import PatchSet, init_stsa_params, patch_division, self_attention, stsa_forward
from .datagen import SceneSpec, gen_cls_scene, gen_seg_scene
from .networks import (
    ClsNetConfig,
    SAStage,
    SegNetConfig,
    cls_forward,
    cross_entropy_loss,
    init_cls_params,
    init_seg_params,
    named_params,
    prepare_encoder,
    seg_forward,
)
from .pointops import FeatureMap, ball_query, fps, interpolate_features, set_abstraction
from .resolution import REConfig, apply_re, init_re_params

BASE_SEED = 20240811
TOL = 1e-4
FD_H = 1e-6


@dataclass
class CheckResult:
    module: str
    name: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rng(name: str, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([BASE_SEED, zlib.crc32(name.encode()), k]))


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def _safe(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    """Uniform values kept at least `margin` away from zero (ReLU hinge)."""
    x = rng.uniform(-2.0, 2.0, size=shape)
    return np.where(np.abs(x) < margin, x + np.where(x >= 0, margin, -margin), x)


def _grad_tensor(data: np.ndarray) -> Tensor:
    t = Tensor(np.asarray(data, dtype=np.float64))
    t.requires_grad = True
    return t


def _weighted_sum(out, rng: np.random.Generator) -> Tensor:
    """Scalarize one tensor or a list with fixed random weights."""
    outs = out if isinstance(out, (list, tuple)) else [out]
    total = None
    for o in outs:
        w = Tensor(rng.uniform(0.5, 1.5, size=o.shape).astype(o.dtype))
        term = ad.sum_all(ad.mul(o, w))
        total = term if total is None else ad.add(total, term)
    return total


def _per_coordinate_check(name: str, gen, instances: int) -> float:
    """gen(rng) -> (list of input arrays, build(tensors) -> output).

    Compares analytic input gradients against central differences on every
    coordinate of every input.
    """
    worst = 0.0
    for k in range(instances):
        rng = _rng(name, k)
        inputs, build = gen(rng)
        loss_rng_state = rng.bit_generator.state  # identical weights on every eval

        def scalar(arrays) -> Tensor:
            local = np.random.Generator(np.random.PCG64())
            local.bit_generator.state = loss_rng_state
            return _weighted_sum(build([Tensor(a) for a in arrays]), local)

        tensors = [_grad_tensor(a) for a in inputs]
        local = np.random.Generator(np.random.PCG64())
        local.bit_generator.state = loss_rng_state
        loss = _weighted_sum(build(tensors), local)
        ad.backward(loss)
        for i, base in enumerate(inputs):
            analytic = tensors[i].grad
            if analytic is None:
                raise ContractError(f"{name}: input {i} received no gradient")
            flat = base.reshape(-1)
            fd = np.zeros_like(flat)
            for j in range(flat.size):
                bumped = [a.copy() for a in inputs]
                bumped[i].reshape(-1)[j] = flat[j] + FD_H
                up = float(scalar(bumped).data)
                bumped[i].reshape(-1)[j] = flat[j] - FD_H
                down = float(scalar(bumped).data)
                fd[j] = (up - down) / (2 * FD_H)
            scale = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-6)
            worst = max(worst, float(np.abs(fd - analytic.reshape(-1)).max() / scale))
    return worst


def _directional_check(name: str, gen, instances: int) -> float:
    """gen(rng) -> (params: list[(name, Param)], loss_fn() -> scalar Tensor).

    Analytic directional derivative (sum of grad . direction) against the
    central difference of the loss along one random direction.
    """
    worst = 0.0
    for k in range(instances):
        rng = _rng(name, k)
        named, loss_fn = gen(rng)
        ad.zero_grads(p for _, p in named)
        loss = loss_fn()
        ad.backward(loss, [p for _, p in named])
        directions = [rng.standard_normal(p.shape) for _, p in named]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in directions))
        directions = [d / norm for d in directions]
        analytic = sum(float(np.sum(p.grad * d)) for (_, p), d in zip(named, directions))
        base = [p.value.data.copy() for _, p in named]
        for sign in (+1.0, -1.0):
            for (_, p), d, b in zip(named, directions, base):
                p.assign(b + sign * FD_H * d)
            if sign > 0:
                up = float(loss_fn().data)
            else:
                down = float(loss_fn().data)
        for (_, p), b in zip(named, base):
            p.assign(b)
        ad.zero_grads(p for _, p in named)
        fd = (up - down) / (2 * FD_H)
        worst = max(worst, _rel(fd, analytic))
    return worst


# ---------------------------------------------------------------------------
# elementary op instance generators


def _gen_matmul(rng):
    if rng.integers(2):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))
    else:
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    return [a, b], lambda t: ad.matmul(t[0], t[1])


def _gen_add(rng):
    shapes = [(3, 4), (1, 4)] if rng.integers(2) else [(3, 4), (3, 4)]
    return [rng.standard_normal(s) for s in shapes], lambda t: ad.add(t[0], t[1])


def _gen_sub(rng):
    return [rng.standard_normal((3, 4)), rng.standard_normal((4,))], \
        lambda t: ad.sub(t[0], t[1])


def _gen_mul(rng):
    return [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))], \
        lambda t: ad.mul(t[0], t[1])


def _gen_scale(rng):
    return [rng.standard_normal((3, 4))], lambda t: ad.scale(t[0], -1.7)


def _gen_div_scalar(rng):
    return [rng.standard_normal((3, 4))], lambda t: ad.div_scalar(t[0], 2.3)


def _gen_relu(rng):
    return [_safe(rng, (3, 5))], lambda t: ad.relu(t[0])


def _gen_transpose(rng):
    return [rng.standard_normal((2, 3, 4))], lambda t: ad.transpose_last2(t[0])


def _gen_reshape(rng):
    return [rng.standard_normal((3, 4))], lambda t: ad.reshape(t[0], (2, 6))


def _gen_concat(rng):
    axis = int(rng.integers(2))
    return [rng.standard_normal((2, 3)) for _ in range(3)], \
        lambda t: ad.concat(list(t), axis=axis)


def _gen_split(rng):
    if rng.integers(2):
        return [rng.standard_normal((4, 6))], lambda t: ad.split(t[0], [2, 2], axis=0)
    return [rng.standard_normal((4, 6))], lambda t: ad.split(t[0], [2, 4], axis=1)


def _tie_free(rng, shape, axis) -> np.ndarray:
    """Random array whose top-2 gap along `axis` exceeds the FD step."""
    while True:
        x = rng.standard_normal(shape)
        s = np.sort(x, axis=axis)
        gap = np.take(s, -1, axis=axis) - np.take(s, -2, axis=axis)
        if np.min(gap) > 1e-3:
            return x


def _gen_max(rng):
    axis = int(rng.integers(2))
    return [_tie_free(rng, (3, 5), axis)], lambda t: ad.max_over_axis(t[0], axis=axis)


def _gen_mean(rng):
    return [rng.standard_normal((3, 5))], lambda t: ad.mean_over_axis(t[0], axis=1)


def _gen_sum_axis(rng):
    return [rng.standard_normal((3, 5))], \
        lambda t: ad.sum_over_axis(t[0], axis=0, keepdims=True)


def _gen_sum_all(rng):
    return [rng.standard_normal((3, 4))], lambda t: ad.sum_all(t[0])


def _gen_gather(rng):
    idx = rng.integers(0, 5, size=(4,)) if rng.integers(2) else rng.integers(0, 5, size=(2, 3))
    return [rng.standard_normal((5, 3))], lambda t: ad.gather_rows(t[0], idx)


def _gen_softmax(rng):
    return [rng.standard_normal((3, 5))], lambda t: ad.softmax_rows(t[0])


def _gen_layer_norm(rng):
    return [rng.standard_normal((4, 6)), rng.standard_normal((6,)),
            rng.standard_normal((6,))], \
        lambda t: ad.layer_norm(t[0], t[1], t[2], eps=1e-5)


def _gen_cross_entropy(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    ignore = 0 if rng.integers(2) else None
    if ignore is not None:
        labels[0] = ignore  # keep at least one ignored row in play
        labels[1:] = np.where(labels[1:] == ignore, 1, labels[1:])
    return [logits], lambda t: ad.cross_entropy(t[0], labels, ignore)


def _gen_mlp(rng):
    w1, b1 = rng.standard_normal((4, 5)), rng.standard_normal((5,))
    w2, b2 = rng.standard_normal((5, 3)), rng.standard_normal((3,))
    x = rng.standard_normal((6, 4))

    def build(t):
        h = ad.relu(ad.add(ad.matmul(t[4], t[0]), t[1]))
        return ad.add(ad.matmul(h, t[2]), t[3])

    return [w1, b1, w2, b2, x], build


# ---------------------------------------------------------------------------
# composite block generators (directional checks)


def _as_param_list(obj) -> list[tuple[str, Param]]:
    return named_params(obj)


def _gen_set_abstraction(rng):
    coords = rng.uniform(-1, 1, size=(12, 3))
    seeds = fps(coords, 4, 0)
    grouping = ball_query(seeds, coords, 1.5, 4)
    feats = Param(rng.standard_normal((12, 3)), dtype=np.float64)
    layers = ad.make_mlp(rng, 6, [5, 4], np.float64, final_act="relu")
    named = [("feats", feats)] + _as_param_list(layers)
    w = rng.uniform(0.5, 1.5, size=(4, 4))

    def loss_fn():
        out = set_abstraction((coords, feats.value), grouping, layers)
        return ad.sum_all(ad.mul(out.feats, Tensor(w)))

    return named, loss_fn


def _gen_interpolate(rng):
    src_coords = rng.uniform(-1, 1, size=(6, 3))
    targets = rng.uniform(-1, 1, size=(9, 3))
    feats = Param(rng.standard_normal((6, 4)), dtype=np.float64)
    named = [("feats", feats)]
    w = rng.uniform(0.5, 1.5, size=(9, 4))

    def loss_fn():
        out = interpolate_features(targets, FeatureMap(src_coords, feats.value))
        return ad.sum_all(ad.mul(out, Tensor(w)))

    return named, loss_fn


def _gen_re_block(rng):
    coords = rng.uniform(-1, 1, size=(6, 3))
    feats = Param(rng.standard_normal((6, 5)), dtype=np.float64)
    cfg = REConfig(output_dim=4, feature_mlp=[4], resolution_mlp=[4],
                   fusion_hidden=4, radius=3.0, k=3)
    params = init_re_params(rng, 5, cfg, np.float64)
    seeds = fps(coords, 3, 0)
    grouping = ball_query(seeds, coords, cfg.radius, cfg.k)
    named = [("feats", feats)] + _as_param_list(params)
    w = rng.uniform(0.5, 1.5, size=(3, 4))

    def loss_fn():
        fused, _ = apply_re(FeatureMap(coords, feats.value), grouping, params)
        return ad.sum_all(ad.mul(fused, Tensor(w)))

    return named, loss_fn


def _gen_self_attention(rng):
    n, d = 4, 3
    tokens = Param(rng.standard_normal((n, d)), dtype=np.float64)
    params = init_stsa_params(rng, d, d, 1, None, np.float64)
    named = [("tokens", tokens), ("wq", params.wq), ("wk", params.wk), ("wv", params.wv)]
    w = rng.uniform(0.5, 1.5, size=(n, d))

    def loss_fn():
        patches = PatchSet(tokens.value, np.zeros((n, 2), dtype=np.int64), 1, n, 1, 1)
        out, _ = self_attention(patches, params)
        return ad.sum_all(ad.mul(out, Tensor(w)))

    return named, loss_fn


def _gen_stsa_block(rng):
    t_frames, m, d_in, d = 3, 3, 5, 4
    frames = [Param(rng.standard_normal((m, d_in)), dtype=np.float64) for _ in range(t_frames)]
    params = init_stsa_params(rng, d_in, d, 2, 6, np.float64)
    named = [(f"frame.{i}", f) for i, f in enumerate(frames)] + _as_param_list(params)
    n_tokens = m * 2
    w = rng.uniform(0.5, 1.5, size=(n_tokens, d))

    def loss_fn():
        patches = patch_division([f.value for f in frames], params.temporal_conv, 2, 1)
        out = stsa_forward(patches, params)
        return ad.sum_all(ad.mul(out, Tensor(w)))

    return named, loss_fn


def _tiny_seg_instance(rng):
    spec = SceneSpec(num_static_points=16, num_objects=2, object_points=4,
                     velocity=(0.1, 0.2), noise_sigma=0.0, T=3,
                     seed=int(rng.integers(2**31)), extent=1.5, object_size=0.2)
    seq = gen_seg_scene(spec)
    cfg = SegNetConfig(
        num_classes=3,
        sa_stages=[SAStage(8, 1.5, 4, [8, 8]), SAStage(4, 3.0, 4, [8, 8])],
        fp_mlps=[[8], [8]],
        head=[],
        feat_width=1,
        use_re=True,
        re=REConfig(output_dim=8, feature_mlp=[8], resolution_mlp=[8],
                    fusion_hidden=8, radius=6.0, k=4),
        use_stsa=True,
        stsa_dim=8,
        window=3,
    )
    params = init_seg_params(cfg, rng, np.float64)
    static = prepare_encoder(seq, cfg.sa_stages, cfg.fps_start, cfg.re)
    labels = np.concatenate([f.labels for f in seq.frames])
    return seq, cfg, params, static, labels


def _gen_seg_forward(rng):
    seq, cfg, params, static, labels = _tiny_seg_instance(rng)
    named = _as_param_list(params)

    def loss_fn():
        pred = seg_forward(seq, cfg, params, static)
        return cross_entropy_loss(pred.logits, labels)

    return named, loss_fn


def _gen_cls_forward(rng):
    spec = SceneSpec(num_static_points=1, num_objects=1, object_points=12,
                     velocity=(0.1, 0.2), noise_sigma=0.0, T=4,
                     seed=int(rng.integers(2**31)), extent=1.0, object_size=0.2)
    seq, label = gen_cls_scene(spec, int(rng.integers(4)))
    cfg = ClsNetConfig(
        num_classes=4,
        sa_stages=[SAStage(4, 1.5, 4, [8, 8])],
        head=[8],
        feat_width=1,
        use_stsa=True,
        stsa_dim=8,
        window=2,
    )
    params = init_cls_params(cfg, rng, np.float64)
    static = prepare_encoder(seq, cfg.sa_stages, cfg.fps_start)
    named = _as_param_list(params)

    def loss_fn():
        logits = cls_forward(seq, cfg, params, static)
        return cross_entropy_loss(ad.reshape(logits, (1, 4)), np.array([label]))

    return named, loss_fn


# ---------------------------------------------------------------------------
# registry and driver

_OP_CHECKS: dict[str, Callable] = {
    "matmul": _gen_matmul,
    "add": _gen_add,
    "sub": _gen_sub,
    "mul": _gen_mul,
    "scale": _gen_scale,
    "div_scalar": _gen_div_scalar,
    "relu": _gen_relu,
    "transpose_last2": _gen_transpose,
    "reshape": _gen_reshape,
    "concat": _gen_concat,
    "split": _gen_split,
    "max_over_axis": _gen_max,
    "mean_over_axis": _gen_mean,
    "sum_over_axis": _gen_sum_axis,
    "sum_all": _gen_sum_all,
    "gather_rows": _gen_gather,
    "softmax_rows": _gen_softmax,
    "layer_norm": _gen_layer_norm,
    "cross_entropy": _gen_cross_entropy,
    "mlp_forward": _gen_mlp,
}

_BLOCK_CHECKS: dict[str, tuple[str, Callable]] = {
    "set_abstraction": ("pointops", _gen_set_abstraction),
    "interpolate_features": ("pointops", _gen_interpolate),
    "re_block": ("re", _gen_re_block),
    "self_attention": ("stsa", _gen_self_attention),
    "stsa_block": ("stsa", _gen_stsa_block),
    "seg_forward": ("networks", _gen_seg_forward),
    "cls_forward": ("networks", _gen_cls_forward),
}

MODULES = ("autodiff", "pointops", "re", "stsa", "networks")


def run_checks(module: Optional[str] = None, instances: int = 10,
               tol: float = TOL) -> list[CheckResult]:
    if module is not None and module not in MODULES:
        raise ContractError(f"unknown module {module!r}; choose from {MODULES}")
    results = []
    if module in (None, "autodiff"):
        for name, gen in _OP_CHECKS.items():
            err = _per_coordinate_check(name, gen, instances)
            results.append(CheckResult("autodiff", name, instances, err, tol))
    for name, (mod, gen) in _BLOCK_CHECKS.items():
        if module in (None, mod):
            err = _directional_check(name, gen, instances)
            results.append(CheckResult(mod, name, instances, err, tol))
    return results


def format_report(results: Sequence[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.module}.{r.name}: max_rel_err={r.max_rel_err:.3e} "
                     f"tol={r.tol:.0e} ({r.instances} instances)")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return "\n".join(lines)
