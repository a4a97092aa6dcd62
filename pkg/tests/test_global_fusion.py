import numpy as np
import pytest

from depthbev import tensor as T
from depthbev.depth import (DepthEncoding, GridSpec, build_depth_matrix, positional_encoding_2d,
                            sinusoidal_encode)
from depthbev.errors import ConfigError, DimensionError
from depthbev.geometry import BevFeatureMap
from depthbev.gradcheck import check_grads
from depthbev.global_fusion import GlobalFusionBlock
from depthbev.tensor import GradTape, Tensor


def softmax_rows_ref(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_attention_ref(q_tok, k_tok, v_tok, block):
    """Plain multi-head cross-attention with the block's weights, no depth term."""
    outs = []
    for h in range(block.heads):
        q = q_tok @ block.q_proj[h].data
        k = k_tok @ block.k_proj[h].data
        v = v_tok @ block.v_proj[h].data
        att = softmax_rows_ref(q @ k.T / np.sqrt(block.head_dim))
        outs.append(att @ v)
    return np.concatenate(outs, axis=-1) @ block.out_proj.data


def make_setup(w=3, h=3, c=8, heads=2, seed=0, embed_mode="multiply"):
    rng = np.random.default_rng(seed)
    grid = GridSpec(width=w, height=h, cell_size=2.0)
    block = GlobalFusionBlock(c, heads, rng, embed_mode=embed_mode)
    v = BevFeatureMap(grid=grid, features=Tensor(rng.normal(size=(w, h, c))))
    i = BevFeatureMap(grid=grid, features=Tensor(rng.normal(size=(w, h, c))))
    pos = positional_encoding_2d(grid, c)
    denc = sinusoidal_encode(build_depth_matrix(grid), c)
    return grid, block, v, i, pos, denc


def neutral_encoding(grid, c, value):
    return DepthEncoding(channels=np.full((grid.width, grid.height, c), value))


class TestNeutralEncoding:
    def test_multiply_with_ones_matches_reference(self):
        grid, block, v, i, pos, _ = make_setup()
        ones = neutral_encoding(grid, 8, 1.0)
        out = block.attend(v, i, pos, ones)
        n = grid.n_cells
        ref = cross_attention_ref(
            v.features.data.reshape(n, 8) + pos.reshape(n, 8),
            i.features.data.reshape(n, 8) + pos.reshape(n, 8),
            i.features.data.reshape(n, 8), block)
        assert np.max(np.abs(out.features.data.reshape(n, 8) - ref)) < 1e-9

    def test_sum_with_zeros_matches_reference(self):
        grid, block, v, i, pos, _ = make_setup(embed_mode="sum")
        zeros = neutral_encoding(grid, 8, 0.0)
        out = block.attend(v, i, pos, zeros)
        n = grid.n_cells
        ref = cross_attention_ref(
            v.features.data.reshape(n, 8) + pos.reshape(n, 8),
            i.features.data.reshape(n, 8) + pos.reshape(n, 8),
            i.features.data.reshape(n, 8), block)
        assert np.max(np.abs(out.features.data.reshape(n, 8) - ref)) < 1e-9


class TestAttend:
    def test_single_cell_weight_is_one(self):
        grid, block, v, i, pos, denc = make_setup(w=1, h=1)
        out, atts = block.attend(v, i, pos, denc, return_attention=True)
        for att in atts:
            np.testing.assert_array_equal(att, [[1.0]])
        vals = np.concatenate(
            [i.features.data.reshape(1, 8) @ block.v_proj[h].data for h in range(block.heads)],
            axis=-1)
        np.testing.assert_allclose(out.features.data.reshape(1, 8),
                                   vals @ block.out_proj.data, atol=1e-12)

    def test_hand_rolled_single_head(self):
        rng = np.random.default_rng(1)
        grid = GridSpec(width=2, height=2, cell_size=1.0)
        c = 4
        block = GlobalFusionBlock(c, 1, rng)
        block.q_proj[0].data[...] = np.eye(c)
        block.k_proj[0].data[...] = np.eye(c)
        block.v_proj[0].data[...] = np.eye(c)
        block.out_proj.data[...] = np.eye(c)

        v_feat = np.arange(16.0).reshape(2, 2, 4) / 10.0
        i_feat = np.linspace(-1, 1, 16).reshape(2, 2, 4)
        pos = np.zeros((2, 2, 4))
        d = np.full((2, 2, 4), 0.5)
        out = block.attend(BevFeatureMap(grid=grid, features=Tensor(v_feat)),
                           BevFeatureMap(grid=grid, features=Tensor(i_feat)),
                           pos, DepthEncoding(channels=d))

        q = (v_feat.reshape(4, 4)) * 0.5
        k = i_feat.reshape(4, 4)
        att = softmax_rows_ref(q @ k.T / 2.0)
        expect = att @ k
        assert np.max(np.abs(out.features.data.reshape(4, 4) - expect)) < 1e-9

    def test_attention_rows_sum_to_one(self):
        _, block, v, i, pos, denc = make_setup(w=4, h=5, seed=3)
        _, atts = block.attend(v, i, pos, denc, return_attention=True)
        for att in atts:
            np.testing.assert_allclose(att.sum(axis=-1), np.ones(20), atol=1e-9)

    def test_permutation_equivariance(self):
        grid, block, v, i, pos, denc = make_setup(w=3, h=4, seed=4)
        n, c = grid.n_cells, 8
        rng = np.random.default_rng(5)
        perm = rng.permutation(n)

        def permuted(map_arr):
            return map_arr.reshape(n, c)[perm].reshape(grid.width, grid.height, c)

        out = block.attend(v, i, pos, denc).features.data.reshape(n, c)
        v2 = BevFeatureMap(grid=grid, features=Tensor(permuted(v.features.data)))
        i2 = BevFeatureMap(grid=grid, features=Tensor(permuted(i.features.data)))
        out2 = block.attend(v2, i2, permuted(pos),
                            DepthEncoding(channels=permuted(denc.channels))
                            ).features.data.reshape(n, c)
        np.testing.assert_allclose(out2, out[perm], atol=1e-12)

    def test_depth_sensitivity_is_row_local(self):
        grid, block, v, i, pos, denc = make_setup(w=3, h=3, seed=6)
        _, base_atts = block.attend(v, i, pos, denc, return_attention=True)
        perturbed = denc.channels.copy().reshape(grid.n_cells, 8)
        j = 4
        perturbed[j] *= 0.3
        _, new_atts = block.attend(v, i, pos,
                                   DepthEncoding(channels=perturbed.reshape(3, 3, 8)),
                                   return_attention=True)
        for a, b in zip(base_atts, new_atts):
            delta = np.abs(a - b)
            assert delta[j].max() > 1e-6
            mask = np.ones(grid.n_cells, dtype=bool)
            mask[j] = False
            assert delta[mask].max() == 0.0

    def test_taped_and_tiled_paths_agree(self):
        grid, block, v, i, pos, denc = make_setup(w=4, h=4, seed=7)
        plain = block.attend(v, i, pos, denc).features.data
        with GradTape():
            taped = block.attend(v, i, pos, denc).features.data
        np.testing.assert_allclose(plain, taped, atol=1e-12)
        tiled, _, _ = block._attend_arrays(
            v.features.data.reshape(16, 8), i.features.data.reshape(16, 8),
            pos.reshape(16, 8), denc.channels.reshape(16, 8), tile=3)
        np.testing.assert_allclose(tiled, plain.reshape(16, 8), atol=1e-12)

    def test_grid_mismatch(self):
        _, block, v, i, pos, denc = make_setup()
        other = GridSpec(width=4, height=3, cell_size=2.0)
        bad = BevFeatureMap(grid=other, features=Tensor(np.zeros((4, 3, 8))))
        with pytest.raises(DimensionError):
            block.attend(bad, i, pos, denc)

    def test_column_mass_uniform_for_identical_scores(self):
        grid, block, v, i, pos, denc = make_setup(w=3, h=3, seed=8)
        zero = BevFeatureMap(grid=grid, features=Tensor(np.zeros((3, 3, 8))))
        mass = block.attention_column_mass(zero, zero, np.zeros((3, 3, 8)),
                                           neutral_encoding(grid, 8, 0.0))
        np.testing.assert_allclose(mass, np.full(9, 1.0 / 9), atol=1e-12)
        assert mass.sum() == pytest.approx(1.0)


class TestFuse:
    def test_collapsed_ffn(self):
        grid, block, v, i, pos, denc = make_setup(seed=9)
        block.ffn_w1.data[...] = 0.0
        block.ffn_b1.data[...] = 0.0
        block.ffn_w2.data[...] = 0.0
        block.ffn_b2.data[...] = 0.0
        v_hat = BevFeatureMap(grid=grid, features=Tensor(
            np.random.default_rng(10).normal(size=(3, 3, 8))))
        out = block.fuse(v_hat, v)
        r = T.layer_norm(Tensor(v_hat.features.data + v.features.data),
                         block.norm1_gain, block.norm1_bias)
        expect = T.layer_norm(r, block.norm2_gain, block.norm2_bias)
        np.testing.assert_allclose(out.features.data, expect.data, atol=1e-12)

    def test_opposite_inputs_zero_residual(self):
        grid, block, v, _, _, _ = make_setup(seed=11)
        neg = BevFeatureMap(grid=grid, features=Tensor(-v.features.data))
        out = block.fuse(neg, v)
        # r = LN(0) = bias term; just confirm finite and matching manual composition
        r = T.layer_norm(Tensor(np.zeros((3, 3, 8))), block.norm1_gain, block.norm1_bias)
        ffn = T.linear(T.softplus(T.linear(r, block.ffn_w1, block.ffn_b1)),
                       block.ffn_w2, block.ffn_b2)
        expect = T.layer_norm(T.add(ffn, r), block.norm2_gain, block.norm2_bias)
        np.testing.assert_allclose(out.features.data, expect.data, atol=1e-12)

    def test_random_case_step_by_step_oracle(self):
        grid, block, v, i, pos, denc = make_setup(seed=12)
        v_hat = block.attend(v, i, pos, denc)
        out = block.fuse(v_hat, v)
        r = T.layer_norm(T.add(v_hat.features, v.features), block.norm1_gain, block.norm1_bias)
        ffn = T.linear(T.softplus(T.linear(r, block.ffn_w1, block.ffn_b1)),
                       block.ffn_w2, block.ffn_b2)
        expect = T.layer_norm(T.add(ffn, r), block.norm2_gain, block.norm2_bias)
        np.testing.assert_allclose(out.features.data, expect.data, atol=1e-12)

    def test_shape_mismatch(self):
        grid, block, v, _, _, _ = make_setup()
        other = GridSpec(width=2, height=2, cell_size=2.0)
        bad = BevFeatureMap(grid=other, features=Tensor(np.zeros((2, 2, 8))))
        with pytest.raises(DimensionError):
            block.fuse(bad, v)


class TestConfigAndGradients:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            GlobalFusionBlock(10, 4, np.random.default_rng(0))

    def test_bad_embed_mode(self):
        with pytest.raises(ConfigError):
            GlobalFusionBlock(8, 2, np.random.default_rng(0), embed_mode="divide")

    @pytest.mark.parametrize("embed_mode", ["multiply", "sum", "concat"])
    def test_composite_gradient(self, embed_mode):
        rng = np.random.default_rng(13)
        grid = GridSpec(width=2, height=2, cell_size=2.0)
        c = 4
        block = GlobalFusionBlock(c, 2, rng, embed_mode=embed_mode)
        pos = positional_encoding_2d(grid, c)
        denc = sinusoidal_encode(build_depth_matrix(grid), c)
        v_feat = Tensor(rng.normal(size=(2, 2, c)), requires_grad=True)
        i_feat = Tensor(rng.normal(size=(2, 2, c)), requires_grad=True)
        proj = rng.normal(size=(2, 2, c))

        def build():
            v = BevFeatureMap(grid=grid, features=v_feat)
            i = BevFeatureMap(grid=grid, features=i_feat)
            out = block.forward(v, i, pos, denc)
            return T.sum_all(T.mul(out.features, Tensor(proj)))

        probes = {"v": v_feat, "i": i_feat,
                  "q0": block.q_proj[0], "ffn_w1": block.ffn_w1,
                  "norm1_gain": block.norm1_gain}
        assert check_grads(build, probes) < 1e-4
