"""Synthetic scenes, on-disk formats, and the optimizer's update contract."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pst import autodiff as ad
from pst.autodiff import ContractError, NonFiniteError, Param, backward
from pst.datagen import (
    CLS_DIRECTIONS,
    SceneSpec,
    depth_backproject,
    gen_cls_dataset,
    gen_cls_scene,
    gen_seg_scene,
    load_split,
    sequence_label,
    write_dataset,
)
from pst.formats import (
    FormatError,
    canonical_json,
    config_hash,
    decode_checkpoint,
    decode_sequence,
    encode_checkpoint,
    encode_sequence,
    load_checkpoint,
    load_sequence,
    parse_config_text,
    restore_params,
    save_checkpoint,
    save_sequence,
)
from pst.optim import AdamConfig, adam_init, adam_step
from pst.pointops import PointCloudFrame, PointCloudSequence


def seq_equal(a, b):
    assert a.T == b.T and a.num_classes == b.num_classes
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(np.asarray(fa.coords), np.asarray(fb.coords))
        np.testing.assert_array_equal(np.asarray(fa.feats), np.asarray(fb.feats))
        if fa.labels is None:
            assert fb.labels is None
        else:
            np.testing.assert_array_equal(fa.labels, fb.labels)


def random_sequence(rng, T=None, n=None, f=None, labeled=True):
    T = T if T is not None else int(rng.integers(1, 5))
    n = n if n is not None else int(rng.integers(1, 40))
    f = f if f is not None else int(rng.integers(0, 4))
    frames = []
    for _ in range(T):
        coords = rng.uniform(-5, 5, size=(n, 3)).astype(np.float32)
        feats = rng.standard_normal((n, f)).astype(np.float32)
        labels = rng.integers(0, 7, size=n) if labeled else None
        frames.append(PointCloudFrame(coords, feats, labels))
    return PointCloudSequence(frames, num_classes=7)


# ---------------------------------------------------------------------------
# scene generation


def test_seg_scene_static_when_motionless():
    spec = SceneSpec(num_static_points=20, num_objects=2, object_points=5,
                     velocity=(0.0, 0.0), noise_sigma=0.0, T=3, seed=1)
    seq = gen_seg_scene(spec)
    for frame in seq.frames[1:]:
        np.testing.assert_array_equal(np.asarray(frame.coords),
                                      np.asarray(seq.frames[0].coords))


def test_seg_scene_deterministic_per_seed():
    spec = SceneSpec(num_static_points=30, T=3, seed=7)
    seq_equal(gen_seg_scene(spec), gen_seg_scene(spec))


def test_seg_scene_different_seeds_differ():
    a = gen_seg_scene(SceneSpec(seed=1))
    b = gen_seg_scene(SceneSpec(seed=2))
    assert not np.array_equal(np.asarray(a.frames[0].coords),
                              np.asarray(b.frames[0].coords))


def test_seg_scene_cluster_velocity_constant():
    # rigid translation: centroid steps are equal frame to frame, and their
    # magnitude sits in the requested speed band (up to noise 3*sigma/sqrt(n))
    spec = SceneSpec(num_static_points=40, num_objects=2, object_points=64,
                     velocity=(0.2, 0.5), noise_sigma=0.01, T=4, seed=3)
    seq = gen_seg_scene(spec)
    tol = 3 * spec.noise_sigma / np.sqrt(spec.object_points)
    for k in (1, 2):
        mask = seq.frames[0].labels == k
        cents = [np.asarray(f.coords)[mask].mean(axis=0) for f in seq.frames]
        steps = np.diff(np.stack(cents), axis=0)
        for step in steps[1:]:
            np.testing.assert_allclose(step, steps[0], atol=3 * tol)
        speed = np.linalg.norm(steps[0])
        assert 0.2 - 3 * tol <= speed <= 0.5 + 3 * tol


def test_seg_scene_labels_track_clusters():
    spec = SceneSpec(num_static_points=10, num_objects=3, object_points=4, T=3, seed=5)
    seq = gen_seg_scene(spec)
    assert seq.num_classes == 4
    for frame in seq.frames:
        np.testing.assert_array_equal(frame.labels, seq.frames[0].labels)
    counts = np.bincount(seq.frames[0].labels, minlength=4)
    np.testing.assert_array_equal(counts, [10, 4, 4, 4])


def test_cls_scene_direction_x_increases():
    spec = SceneSpec(object_points=16, velocity=(0.2, 0.4), noise_sigma=0.0, T=5, seed=2)
    seq, label = gen_cls_scene(spec, 0)  # +x
    assert label == 0
    xs = [np.asarray(f.coords)[:, 0].mean() for f in seq.frames]
    assert all(b > a for a, b in zip(xs, xs[1:]))


def test_cls_scene_directions_distinguishable_by_sign():
    spec = SceneSpec(object_points=16, velocity=(0.2, 0.4), noise_sigma=0.0, T=3, seed=4)
    for class_id, direction in enumerate(CLS_DIRECTIONS):
        seq, _ = gen_cls_scene(spec, class_id)
        c0 = np.asarray(seq.frames[0].coords).mean(axis=0)
        c1 = np.asarray(seq.frames[-1].coords).mean(axis=0)
        step = c1 - c0
        np.testing.assert_array_equal(np.sign(np.round(step, 6)), np.sign(direction))


def test_cls_dataset_balanced():
    spec = SceneSpec(object_points=8, T=2, seed=11)
    data = gen_cls_dataset(spec, 200)
    counts = np.bincount([label for _, label in data], minlength=4)
    assert counts.max() - counts.min() <= 1
    assert counts.sum() == 200
    # stored per-point labels carry the class
    for seq, label in data[:8]:
        assert sequence_label(seq) == label


def test_scene_spec_validation():
    with pytest.raises(ContractError):
        SceneSpec(num_static_points=0)
    with pytest.raises(ContractError):
        SceneSpec(velocity=(0.5, 0.2))
    with pytest.raises(ContractError):
        SceneSpec(noise_sigma=-0.1)


# ---------------------------------------------------------------------------
# depth back-projection


def test_backproject_principal_point():
    depth = np.zeros((5, 7))
    depth[2, 3] = 4.0
    pts = depth_backproject(depth, {"fx": 50, "fy": 50, "cx": 3, "cy": 2})
    np.testing.assert_allclose(pts, [[0.0, 0.0, 4.0]])


def test_backproject_empty_for_invalid_depth():
    depth = np.zeros((4, 4))
    depth[0, 0] = -1.0
    depth[1, 1] = np.nan
    pts = depth_backproject(depth, {"fx": 10, "fy": 10, "cx": 2, "cy": 2})
    assert pts.shape == (0, 3)


def test_backproject_plane_recovery():
    # depth map synthesized from the plane z = 2 + 0.1 x + 0.05 y
    fx = fy = 40.0
    cx, cy = 8.0, 6.0
    v, u = np.indices((13, 17)).astype(np.float64)
    denom = 1.0 - 0.1 * (u - cx) / fx - 0.05 * (v - cy) / fy
    depth = 2.0 / denom
    pts = depth_backproject(depth, {"fx": fx, "fy": fy, "cx": cx, "cy": cy})
    assert pts.shape == (13 * 17, 3)
    residual = pts[:, 2] - 0.1 * pts[:, 0] - 0.05 * pts[:, 1] - 2.0
    assert np.abs(residual).max() < 1e-5


def test_backproject_rejects_bad_intrinsics():
    with pytest.raises(ContractError):
        depth_backproject(np.ones((2, 2)), {"fx": 0, "fy": 1, "cx": 0, "cy": 0})


# ---------------------------------------------------------------------------
# sequence files


def test_sequence_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    seq = random_sequence(rng, T=3, n=17, f=2)
    seq_equal(decode_sequence(encode_sequence(seq)), seq)


def test_sequence_round_trip_without_labels_or_feats():
    rng = np.random.default_rng(1)
    seq = random_sequence(rng, T=2, n=5, f=0, labeled=False)
    seq_equal(decode_sequence(encode_sequence(seq)), seq)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sequence_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    seq = random_sequence(rng, labeled=bool(rng.integers(0, 2)))
    seq_equal(decode_sequence(encode_sequence(seq)), seq)


def test_sequence_rejects_non_float32():
    coords = np.zeros((3, 3), dtype=np.float64)
    seq = PointCloudSequence([PointCloudFrame(coords, np.zeros((3, 0), np.float32))], 1)
    with pytest.raises(FormatError):
        encode_sequence(seq)


def test_sequence_rejects_label_space_beyond_u16():
    frame = PointCloudFrame(np.zeros((2, 3), np.float32), np.zeros((2, 0), np.float32),
                            np.array([0, 70000]))
    with pytest.raises(FormatError):
        encode_sequence(PointCloudSequence([frame], num_classes=70001))


def test_sequence_decode_rejects_corruption():
    rng = np.random.default_rng(2)
    blob = encode_sequence(random_sequence(rng, T=2, n=6, f=1))
    with pytest.raises(FormatError):
        decode_sequence(b"JUNK" + blob[4:])
    with pytest.raises(FormatError):
        decode_sequence(blob[:-3])  # truncated payload
    with pytest.raises(FormatError):
        decode_sequence(blob + b"\x00")  # trailing bytes
    bad_version = bytearray(blob)
    bad_version[4] = 99
    with pytest.raises(FormatError):
        decode_sequence(bytes(bad_version))
    with pytest.raises(FormatError):
        decode_sequence(blob[:5])  # shorter than the header


def test_save_sequence_is_atomic(tmp_path):
    rng = np.random.default_rng(3)
    seq = random_sequence(rng, T=1, n=4, f=1)
    path = tmp_path / "a.psts"
    save_sequence(str(path), seq)
    seq_equal(load_sequence(str(path)), seq)
    leftovers = [f for f in os.listdir(tmp_path) if f != "a.psts"]
    assert leftovers == []


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip():
    rng = np.random.default_rng(4)
    named = [("enc.w", rng.standard_normal((3, 4)).astype(np.float32)),
             ("enc.b", rng.standard_normal(4).astype(np.float32)),
             ("head", rng.standard_normal((4, 2)).astype(np.float32))]
    meta = {"task": "seg", "steps": 10}
    got_meta, got = decode_checkpoint(encode_checkpoint(named, meta))
    assert got_meta == meta
    assert list(got.keys()) == [n for n, _ in named]  # table order preserved
    for name, arr in named:
        np.testing.assert_array_equal(got[name], arr)


def test_checkpoint_round_trip_scalar_param():
    named = [("t", np.float32(2.5).reshape(()))]
    _, got = decode_checkpoint(encode_checkpoint(named))
    assert got["t"].shape == ()
    assert got["t"] == np.float32(2.5)


def test_checkpoint_decode_rejects_corruption():
    blob = encode_checkpoint([("w", np.ones((2, 2), np.float32))], {"k": 1})
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-2])
    with pytest.raises(FormatError):
        decode_checkpoint(blob + b"\x01")
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:3])


def test_checkpoint_param_save_restore(tmp_path):
    rng = np.random.default_rng(5)
    p1 = Param(rng.standard_normal((2, 3)).astype(np.float32))
    p2 = Param(rng.standard_normal(3).astype(np.float32))
    named = [("a", p1), ("b", p2)]
    path = str(tmp_path / "m.pstw")
    save_checkpoint(path, named, {"v": 1})
    meta, stored = load_checkpoint(path)
    assert meta == {"v": 1}

    fresh = [("a", Param(np.zeros((2, 3), np.float32))),
             ("b", Param(np.zeros(3, np.float32)))]
    restore_params(fresh, stored)
    np.testing.assert_array_equal(fresh[0][1].value.data, p1.value.data)
    np.testing.assert_array_equal(fresh[1][1].value.data, p2.value.data)

    with pytest.raises(FormatError):
        restore_params([("a", Param(np.zeros((2, 3), np.float32)))], stored)
    with pytest.raises(FormatError):
        restore_params([("a", Param(np.zeros((3, 2), np.float32))),
                        ("b", Param(np.zeros(3, np.float32)))], stored)


# ---------------------------------------------------------------------------
# config text and canonical JSON


def test_parse_config_basics():
    text = "# run settings\nlr = 0.01\n\nsteps=20\nname = desk run\n"
    assert parse_config_text(text) == {"lr": "0.01", "steps": "20", "name": "desk run"}


def test_parse_config_rejects_malformed_lines():
    with pytest.raises(FormatError):
        parse_config_text("lr 0.01")
    with pytest.raises(FormatError):
        parse_config_text("= 3")


def test_canonical_json_is_key_sorted_and_compact():
    s = canonical_json({"b": 1, "a": [1, 2]})
    assert s == '{"a":[1,2],"b":1}'
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_config_hash_stable_under_key_order():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


# ---------------------------------------------------------------------------
# dataset directories


def test_write_dataset_and_load_split_seg(tmp_path):
    cfg = {"task": "seg", "train": "3", "test": "2", "static_points": "12",
           "objects": "2", "object_points": "4", "frames": "2", "seed": "9"}
    manifest = write_dataset(str(tmp_path), cfg)
    assert manifest["num_classes"] == 3
    train = load_split(str(tmp_path), "train")
    test = load_split(str(tmp_path), "test")
    assert len(train) == 3 and len(test) == 2
    assert all(s.T == 2 and s.frames[0].n == 20 for s in train)
    with open(tmp_path / "dataset.json") as fh:
        assert json.load(fh)["task"] == "seg"


def test_write_dataset_cls_labels(tmp_path):
    cfg = {"task": "cls", "train": "8", "test": "0", "object_points": "6",
           "frames": "3", "seed": "1"}
    write_dataset(str(tmp_path), cfg)
    seqs = load_split(str(tmp_path), "train")
    labels = [sequence_label(s) for s in seqs]
    assert sorted(set(labels)) == [0, 1, 2, 3]


# ---------------------------------------------------------------------------
# optimizer


def quad_grad(p):
    """Analytic gradient of sum(w^2) placed on the param, via the tape."""
    loss = ad.sum_all(ad.mul(p.value, p.value))
    backward(loss, [p])


def test_adam_zero_gradients_leave_params():
    p = Param(np.array([1.0, -2.0]), dtype=np.float64)
    state = adam_init([("w", p)])
    p.value.grad = np.zeros(2)
    adam_step(state, AdamConfig(lr=0.1))
    np.testing.assert_array_equal(p.value.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_zero_lr_is_identity():
    p = Param(np.array([3.0]), dtype=np.float64)
    state = adam_init([("w", p)])
    quad_grad(p)
    adam_step(state, AdamConfig(lr=0.0))
    np.testing.assert_array_equal(p.value.data, [3.0])


def test_adam_single_step_hand_oracle():
    p = Param(np.array([1.0]), dtype=np.float64)
    state = adam_init([("w", p)])
    quad_grad(p)  # g = 2w = 2
    adam_step(state, AdamConfig(lr=0.1))

    g = 2.0
    m = 0.1 * g
    v = 0.001 * g * g
    m_hat = m / (1 - 0.9)
    v_hat = v / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.value.data, [expected], rtol=1e-12)


def test_adam_two_steps_match_reference_recursion():
    rng = np.random.default_rng(6)
    w0 = rng.standard_normal(4)
    p = Param(w0.copy(), dtype=np.float64)
    state = adam_init([("w", p)])
    cfg = AdamConfig(lr=0.05)

    w, m, v = w0.copy(), np.zeros(4), np.zeros(4)
    for t in (1, 2):
        quad_grad(p)
        adam_step(state, cfg)
        g = 2 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - cfg.lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + cfg.eps)
        np.testing.assert_allclose(p.value.data, w, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = Param(np.array([1.0]), dtype=np.float64)
    state = adam_init([("w", p)])
    p.value.grad = np.array([np.inf])
    with pytest.raises(NonFiniteError, match="w"):
        adam_step(state, AdamConfig(lr=0.1))


def test_adam_moment_shapes_and_step_counter():
    p = Param(np.zeros((2, 3)), dtype=np.float64)
    state = adam_init([("w", p)])
    p.value.grad = np.ones((2, 3))
    adam_step(state, AdamConfig(lr=0.01))
    assert state.m["w"].shape == (2, 3)
    assert state.v["w"].shape == (2, 3)
    assert state.t == 1
