import numpy as np
import pytest

from recloud import autograd as ag
from recloud.autograd import Tensor, backward
from recloud.corruption import mask_patches
from recloud.geometry import normalize_patches, patchify
from recloud.layers import LayerNorm, Linear, SelfAttention, TransformerBlock
from recloud.models import (CloudAutoencoder, FCDecoder, FoldDecoder, GlobalCenterHead,
                            PatchAutoencoder, PatchDecoder, PatchFCHead,
                            PointNetEncoder, PointNetEncoderConfig, PositionalEmbed,
                            TokenEmbedder, TransformerConfig, TransformerEncoder,
                            embed_tokens, folding_grid)


def rng_():
    return np.random.default_rng(0)


class TestConfigs:
    def test_decoder_must_be_shallower(self):
        with pytest.raises(ValueError, match="smaller"):
            TransformerConfig(encoder_depth=2, decoder_depth=2)

    def test_heads_divide_dim(self):
        with pytest.raises(ValueError, match="divisible"):
            TransformerConfig(feature_dim=30, num_heads=4)

    def test_pointnet_widths(self):
        with pytest.raises(ValueError):
            PointNetEncoderConfig(widths=(4, 8))


class TestPointNetEncoder:
    def test_permutation_invariance_bitwise(self):
        enc = PointNetEncoder(PointNetEncoderConfig((3, 16, 8)), rng_())
        pts = np.random.default_rng(1).standard_normal((40, 3))
        perm = np.random.default_rng(2).permutation(40)
        a = enc(pts).data
        b = enc(pts[perm]).data
        np.testing.assert_array_equal(a, b)

    def test_single_point_equals_mlp(self):
        enc = PointNetEncoder(PointNetEncoderConfig((3, 16, 8)), rng_())
        pt = np.array([[0.3, -0.2, 0.9]])
        from recloud.layers import run_mlp
        direct = run_mlp(enc.layers, Tensor(pt.astype(np.float32))).data[0]
        np.testing.assert_array_equal(enc(pt).data, direct)

    def test_output_dim_independent_of_count(self):
        enc = PointNetEncoder(PointNetEncoderConfig((3, 16, 8)), rng_())
        for w in (1, 5, 64):
            assert enc(np.zeros((w, 3))).shape == (8,)


class TestTokenEmbedder:
    def _patches(self, n=4, k=6, w=50):
        rng = np.random.default_rng(3)
        return normalize_patches(patchify(rng.standard_normal((w, 3)), n, k, rng))

    def test_within_patch_permutation(self):
        emb = TokenEmbedder(16, 32, rng_())
        ps = self._patches()
        shuffled = ps.patches.copy()
        shuffled[1] = shuffled[1][::-1]
        np.testing.assert_array_equal(emb(ps.patches).data, emb(shuffled).data)

    def test_shape(self):
        emb = TokenEmbedder(16, 32, rng_())
        ps = self._patches(n=5, k=7)
        assert embed_tokens(emb, ps).shape == (5, 16)

    def test_identical_patches_identical_tokens(self):
        emb = TokenEmbedder(16, 32, rng_())
        patch = np.random.default_rng(4).standard_normal((1, 6, 3))
        two = np.concatenate([patch, patch], axis=0)
        tokens = emb(two).data
        np.testing.assert_array_equal(tokens[0], tokens[1])

    def test_unnormalized_rejected(self):
        emb = TokenEmbedder(16, 32, rng_())
        rng = np.random.default_rng(5)
        ps = patchify(rng.standard_normal((30, 3)), 3, 4, rng)
        with pytest.raises(ValueError, match="normalized"):
            embed_tokens(emb, ps)


class TestPositionalEmbed:
    def test_zero_init_final_layer(self):
        pe = PositionalEmbed(16, 32, rng_())
        out = pe(np.random.default_rng(6).standard_normal((5, 3)))
        np.testing.assert_array_equal(out.data, np.zeros((5, 16)))

    def test_separate_instances_diverge_after_update(self):
        rng = np.random.default_rng(7)
        a = PositionalEmbed(8, 16, rng)
        b = PositionalEmbed(8, 16, rng)
        # independent update of one instance only
        a.fc2.weight.data = a.fc2.weight.data + 0.1
        centers = np.random.default_rng(8).standard_normal((4, 3))
        assert not np.array_equal(a(centers).data, b(centers).data)

    def test_shape(self):
        pe = PositionalEmbed(16, 32, rng_())
        assert pe(np.zeros((9, 3))).shape == (9, 16)


class TestTransformerEncoder:
    def test_shape_preserved(self):
        enc = TransformerEncoder(16, 3, 4, 2, rng_())
        x = Tensor(np.random.default_rng(9).standard_normal((6, 16)).astype(np.float32))
        pe = Tensor(np.zeros((6, 16), dtype=np.float32))
        assert enc(x, pe).shape == (6, 16)

    def test_depth_zero_is_identity(self):
        enc = TransformerEncoder(16, 0, 4, 2, rng_())
        x = Tensor(np.random.default_rng(10).standard_normal((6, 16)))
        pe = Tensor(np.random.default_rng(11).standard_normal((6, 16)))
        assert enc(x, pe) is x

    def test_permutation_equivariance(self):
        # float64 keeps the reordered reductions at round-off scale
        enc = TransformerEncoder(16, 2, 4, 2, rng_(), dtype=np.float64)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((7, 16))
        pe = rng.standard_normal((7, 16))
        perm = rng.permutation(7)
        out = enc(Tensor(x), Tensor(pe)).data
        out_perm = enc(Tensor(x[perm]), Tensor(pe[perm])).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


class TestPatchDecoder:
    def test_mask_rows_identical_before_first_block(self):
        dec = PatchDecoder(8, 0, 2, 2, rng_())
        plan = mask_patches(6, 0.6, np.random.default_rng(13))
        encoded = Tensor(np.random.default_rng(14)
                         .standard_normal((len(plan.visible), 8)).astype(np.float32))
        seq = dec.assemble(encoded, plan).data
        for idx in plan.masked:
            np.testing.assert_array_equal(seq[idx], dec.mask_token.data[0])
        for row, idx in enumerate(plan.visible):
            np.testing.assert_array_equal(seq[idx], encoded.data[row])

    def test_single_visible_token(self):
        dec = PatchDecoder(8, 1, 2, 2, rng_())
        plan = mask_patches(5, 0.8, np.random.default_rng(15))
        assert len(plan.visible) == 1
        encoded = Tensor(np.zeros((1, 8), dtype=np.float32))
        pe = Tensor(np.zeros((5, 8), dtype=np.float32))
        assert dec(encoded, pe, plan).shape == (4, 8)

    def test_output_order_is_ascending_masked_index(self):
        # with no blocks the output rows are exactly the assembled rows at
        # the (sorted) masked indices
        dec = PatchDecoder(8, 0, 2, 2, rng_())
        plan = mask_patches(7, 0.5, np.random.default_rng(16))
        assert np.all(np.diff(plan.masked) > 0)
        encoded = Tensor(np.random.default_rng(17)
                         .standard_normal((len(plan.visible), 8)).astype(np.float32))
        pe = Tensor(np.zeros((7, 8), dtype=np.float32))
        out = dec(encoded, pe, plan).data
        seq = dec.assemble(encoded, plan).data
        np.testing.assert_array_equal(out, seq[plan.masked])

    def test_inconsistent_plan_rejected(self):
        dec = PatchDecoder(8, 1, 2, 2, rng_())
        plan = mask_patches(6, 0.5, np.random.default_rng(18))
        bad = Tensor(np.zeros((2, 8), dtype=np.float32))  # plan has 3 visible
        with pytest.raises(ValueError, match="visible"):
            dec(bad, Tensor(np.zeros((6, 8), dtype=np.float32)), plan)


class TestHeads:
    def test_fc_decoder_shapes(self):
        head = FCDecoder(16, 32, 64, rng_())
        assert head(Tensor(np.zeros(16, dtype=np.float32))).shape == (32, 3)

    def test_fc_decoder_nondegenerate(self):
        head = FCDecoder(16, 32, 64, rng_())
        rng = np.random.default_rng(19)
        a = head(Tensor(rng.standard_normal(16).astype(np.float32))).data
        b = head(Tensor(rng.standard_normal(16).astype(np.float32))).data
        assert not np.array_equal(a, b)

    def test_fold_decoder_shapes(self):
        head = FoldDecoder(16, 9, 32, rng_())
        feats = Tensor(np.random.default_rng(20).standard_normal((5, 16)).astype(np.float32))
        assert head(feats).shape == (5, 9, 3)

    def test_fold_identical_features_identical_patches(self):
        head = FoldDecoder(16, 8, 32, rng_())
        row = np.random.default_rng(21).standard_normal((1, 16)).astype(np.float32)
        out = head(Tensor(np.concatenate([row, row]))).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_fold_grid_k1(self):
        head = FoldDecoder(16, 1, 32, rng_())
        assert head(Tensor(np.zeros((3, 16), dtype=np.float32))).shape == (3, 1, 3)

    def test_folding_grid_properties(self):
        for k in (1, 2, 9, 10, 16, 37):
            g = folding_grid(k)
            assert g.shape == (k, 2)
            assert g.min() >= -0.5 and g.max() <= 0.5

    def test_center_head_shapes_and_pooling_invariance(self):
        head = GlobalCenterHead(16, 12, rng_())
        rng = np.random.default_rng(22)
        enc = rng.standard_normal((5, 16)).astype(np.float32)
        out = head(Tensor(enc)).data
        assert out.shape == (12, 3)
        perm = rng.permutation(5)
        np.testing.assert_array_equal(head(Tensor(enc[perm])).data, out)

    def test_center_head_single_token_pools_to_itself(self):
        from recloud.models import pool_tokens
        enc = Tensor(np.random.default_rng(23).standard_normal((1, 16)))
        np.testing.assert_array_equal(pool_tokens(enc, "max").data, enc.data[0])
        np.testing.assert_array_equal(pool_tokens(enc, "mean").data, enc.data[0])


def linear_count(i, o):
    return i * o + o


def block_count(d, mult):
    attn = 4 * linear_count(d, d)
    ffn = linear_count(d, d * mult) + linear_count(d * mult, d)
    return attn + ffn + 2 * (2 * d)


class TestParameterCounts:
    def test_pointnet_autoencoder(self):
        cfg = PointNetEncoderConfig((3, 32, 64, 16))
        model = CloudAutoencoder(cfg, num_points=50, decoder="fc", fc_hidden=128,
                                 rng=rng_())
        expected = (linear_count(3, 32) + linear_count(32, 64) + linear_count(64, 16)
                    + linear_count(16, 128) + linear_count(128, 150))
        assert model.num_parameters() == expected

    def test_patch_autoencoder(self):
        tc = TransformerConfig(feature_dim=16, encoder_depth=2, decoder_depth=1,
                               num_heads=2, ffn_mult=2, num_patches=8, patch_size=8,
                               pe_hidden=32, token_hidden=32, fc_hidden=64, fold_hidden=32)
        model = PatchAutoencoder(tc, rng=rng_())
        d = 16
        expected = (
            linear_count(3, 32) + linear_count(32, d)          # token embed
            + 2 * (linear_count(3, 32) + linear_count(32, d))  # two PEs
            + 2 * block_count(d, 2)                            # encoder blocks
            + d + 1 * block_count(d, 2)                        # mask token + decoder
            + linear_count(d + 2, 32) + linear_count(32, 32) + linear_count(32, 3)  # fold
            + linear_count(d, 64) + linear_count(64, 3 * 8)    # center head
        )
        assert model.num_parameters() == expected

    def test_patch_fc_head_count(self):
        head = PatchFCHead(16, 8, 64, rng_())
        assert head.num_parameters() == linear_count(16, 64) + linear_count(64, 24)


class TestGradientFlow:
    def test_every_parameter_reached_by_decomposed_loss(self):
        from recloud.losses import loss_all, loss_global, loss_local
        tc = TransformerConfig(feature_dim=16, encoder_depth=2, decoder_depth=1,
                               num_heads=2, ffn_mult=2, num_patches=8, patch_size=8,
                               pe_hidden=16, token_hidden=16, fc_hidden=32, fold_hidden=16)
        model = PatchAutoencoder(tc, rng=rng_(), dtype=np.float64)
        rng = np.random.default_rng(24)
        pts = rng.standard_normal((64, 3))
        ps = normalize_patches(patchify(pts, 8, 8, rng))
        plan = mask_patches(8, 0.6, rng)
        from recloud.geometry import PatchSet
        vis = PatchSet(centers=ps.centers[plan.visible], patches=ps.patches[plan.visible],
                       indices=None, normalized=True)
        encoded = model.encode_visible(vis)
        pred = model.predict_masked_patches(encoded, ps.centers, plan)
        local = loss_local(pred, ps.patches[plan.masked])
        global_ = loss_global(model.predict_centers(encoded), ps.centers)
        total, _ = loss_all(local, global_, 1.0)
        backward(total)
        missing = [name for name, p in model.named_parameters() if p.grad is None]
        assert missing == []
