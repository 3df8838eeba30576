"""Dual-resolution fusion block: both branches and the attention-weighted sum."""

import numpy as np
import pytest

from pst.autodiff import ContractError, DenseLayer, DimensionError, Param, Tensor, make_mlp
from pst.pointops import FeatureMap, ball_query, fps, set_abstraction
from pst.resolution import (
    REConfig,
    apply_re,
    feature_block,
    init_re_params,
    pad_rows_even,
    re_fuse,
    resolution_block,
)


def identity_layers(dim):
    return [DenseLayer(Param(np.eye(dim), dtype=np.float64),
                       Param(np.zeros(dim), dtype=np.float64), None)]


def zero_gamma(d):
    """Attention MLP emitting two identical logits for every row."""
    return [DenseLayer(Param(np.zeros((2 * d, 2)), dtype=np.float64),
                       Param(np.zeros(2), dtype=np.float64), None)]


def random_map(rng, m, d):
    coords = rng.uniform(-1, 1, size=(m, 3))
    return FeatureMap(coords, Tensor(rng.standard_normal((m, d))), frame_index=0)


# ---------------------------------------------------------------------------
# feature block


def test_feature_block_single_neighbor_identity_gathers_input():
    rng = np.random.default_rng(0)
    h = random_map(rng, 6, 2)
    seeds = fps(h.seed_coords, 3)
    grouping = ball_query(seeds, h.seed_coords, radius=1e-6, k=1)  # own point only
    out = feature_block(h, grouping, identity_layers(5)).data
    expected = np.concatenate([h.feats.data[seeds.indices], np.zeros((3, 3))], axis=1)
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_feature_block_output_shape():
    rng = np.random.default_rng(1)
    h = random_map(rng, 8, 4)
    seeds = fps(h.seed_coords, 4)
    grouping = ball_query(seeds, h.seed_coords, radius=1.5, k=3)
    layers = make_mlp(rng, 4 + 3, [6, 5], dtype=np.float64)
    assert feature_block(h, grouping, layers).shape == (4, 5)


def test_feature_block_matches_set_abstraction_composition():
    rng = np.random.default_rng(2)
    h = random_map(rng, 10, 3)
    seeds = fps(h.seed_coords, 5)
    grouping = ball_query(seeds, h.seed_coords, radius=2.0, k=4)
    layers = make_mlp(rng, 6, [7], dtype=np.float64)
    via_block = feature_block(h, grouping, layers).data
    via_ops = set_abstraction(h, grouping, layers).feats.data
    np.testing.assert_array_equal(via_block, via_ops)


# ---------------------------------------------------------------------------
# resolution block


def test_resolution_block_forced_two_rows():
    h = Tensor(np.array([[1.0], [2.0]]))
    out = resolution_block(h, identity_layers(2)).data
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_resolution_block_shapes():
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal((8, 4)))
    layers = make_mlp(rng, 8, [6], dtype=np.float64)  # input is 2*d after concat
    assert resolution_block(h, layers).shape == (4, 6)


def test_resolution_block_hand_computed():
    h = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 3.0]])
    w = np.array([[1.0], [2.0], [3.0], [4.0]])  # concat order: row i then row i+m/2
    b = np.array([0.5])
    layers = [DenseLayer(Param(w, dtype=np.float64), Param(b, dtype=np.float64), None)]
    out = resolution_block(Tensor(h), layers).data
    g = np.concatenate([h[:2], h[2:]], axis=1)
    np.testing.assert_allclose(out, g @ w + b, atol=1e-12)


def test_resolution_block_rejects_odd_rows():
    with pytest.raises(ContractError):
        resolution_block(Tensor(np.ones((3, 2))), identity_layers(4))


def test_pad_rows_even_repeats_last_row():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    out = pad_rows_even(x).data
    np.testing.assert_array_equal(out, [[1.0], [2.0], [3.0], [3.0]])
    y = Tensor(np.ones((4, 2)))
    assert pad_rows_even(y) is y


# ---------------------------------------------------------------------------
# fusion


def test_re_fuse_zero_gamma_is_midpoint():
    rng = np.random.default_rng(4)
    k = Tensor(rng.standard_normal((5, 3)))
    n = Tensor(rng.standard_normal((5, 3)))
    fused, weights = re_fuse(k, n, zero_gamma(3))
    np.testing.assert_allclose(fused.data, 0.5 * (k.data + n.data), atol=1e-12)
    np.testing.assert_allclose(weights.data, 0.5, atol=1e-12)


def test_re_fuse_equal_branches_fixed_point():
    rng = np.random.default_rng(5)
    k = Tensor(rng.standard_normal((4, 6)))
    n = Tensor(k.data.copy())
    gamma = make_mlp(rng, 12, [8, 2], dtype=np.float64, final_act=None)
    fused, _ = re_fuse(k, n, gamma)
    np.testing.assert_allclose(fused.data, k.data, atol=1e-9)


def test_re_fuse_hand_computed_single_row():
    k = Tensor(np.array([[1.0, 2.0]]))
    n = Tensor(np.array([[3.0, -1.0]]))
    w = np.array([[0.5], [0.0], [-0.5], [1.0]])  # logit gap from one linear map
    gamma = [DenseLayer(Param(np.concatenate([w, -w], axis=1), dtype=np.float64),
                        Param(np.zeros(2), dtype=np.float64), None)]
    fused, weights = re_fuse(k, n, gamma)
    z = (np.concatenate([k.data, n.data], axis=1) @ w).item()
    a1 = np.exp(z) / (np.exp(z) + np.exp(-z))
    np.testing.assert_allclose(weights.data, [[a1, 1 - a1]], atol=1e-12)
    np.testing.assert_allclose(fused.data, a1 * k.data + (1 - a1) * n.data, atol=1e-12)


def test_re_fuse_weights_sum_to_one():
    rng = np.random.default_rng(6)
    k = Tensor(rng.standard_normal((32, 8)))
    n = Tensor(rng.standard_normal((32, 8)))
    gamma = make_mlp(rng, 16, [8, 2], dtype=np.float64, final_act=None)
    _, weights = re_fuse(k, n, gamma)
    np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-6)
    assert weights.data.min() >= 0.0


def test_re_fuse_output_is_convex_combination():
    rng = np.random.default_rng(7)
    k = Tensor(rng.standard_normal((16, 4)))
    n = Tensor(rng.standard_normal((16, 4)))
    gamma = make_mlp(rng, 8, [6, 2], dtype=np.float64, final_act=None)
    fused, _ = re_fuse(k, n, gamma)
    lo = np.minimum(k.data, n.data)
    hi = np.maximum(k.data, n.data)
    assert np.all(fused.data >= lo - 1e-9) and np.all(fused.data <= hi + 1e-9)


def test_re_fuse_logit_shift_invariance():
    rng = np.random.default_rng(8)
    k = Tensor(rng.standard_normal((6, 3)))
    n = Tensor(rng.standard_normal((6, 3)))
    w = rng.standard_normal((6, 2))
    base = [DenseLayer(Param(w, dtype=np.float64),
                       Param(np.zeros(2), dtype=np.float64), None)]
    shifted = [DenseLayer(Param(w, dtype=np.float64),
                          Param(np.full(2, 17.0), dtype=np.float64), None)]
    _, w0 = re_fuse(k, n, base)
    _, w1 = re_fuse(k, n, shifted)
    np.testing.assert_allclose(w0.data, w1.data, atol=1e-6)


def test_re_fuse_shape_mismatch():
    with pytest.raises(DimensionError):
        re_fuse(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))), zero_gamma(2))


# ---------------------------------------------------------------------------
# end to end


def test_apply_re_shapes_and_state_consistency():
    rng = np.random.default_rng(9)
    cfg = REConfig(output_dim=6, feature_mlp=[6], resolution_mlp=[6], fusion_hidden=4,
                   radius=2.0, k=4)
    h = random_map(rng, 8, 3)
    params = init_re_params(rng, 3, cfg, dtype=np.float64)
    seeds = fps(h.seed_coords, 4)
    grouping = ball_query(seeds, h.seed_coords, radius=cfg.radius, k=cfg.k)
    fused, state = apply_re(h, grouping, params)
    assert fused.shape == (4, 6)
    assert state.fusion_weights.shape == (4, 2)
    np.testing.assert_allclose(state.fusion_weights.data.sum(axis=1), 1.0, atol=1e-6)
    a = state.fusion_weights.data
    recombined = a[:, :1] * state.k_feat.data + a[:, 1:] * state.n_feat.data
    np.testing.assert_allclose(fused.data, recombined, atol=1e-9)


def test_apply_re_pads_odd_input():
    rng = np.random.default_rng(10)
    cfg = REConfig(output_dim=4, feature_mlp=[4], resolution_mlp=[4], fusion_hidden=4)
    h = random_map(rng, 7, 2)  # odd spatial size: branch rows become (7+1)/2 = 4
    params = init_re_params(rng, 2, cfg, dtype=np.float64)
    seeds = fps(h.seed_coords, 4)
    grouping = ball_query(seeds, h.seed_coords, radius=3.0, k=4)
    fused, state = apply_re(h, grouping, params)
    assert fused.shape == (4, 4)
    assert state.k_feat.shape == state.n_feat.shape == (4, 4)


def test_re_config_rejects_mismatched_branch_widths():
    with pytest.raises(ContractError):
        REConfig(output_dim=6, feature_mlp=[6], resolution_mlp=[5], fusion_hidden=4)
