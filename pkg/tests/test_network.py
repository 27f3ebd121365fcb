import numpy as np
import pytest

from dabseg import autodiff as ad
from dabseg import nn
from dabseg.autodiff import ShapeError, Tensor
from dabseg.gradcheck import check_module_gradients
from dabseg.network import (
    CrossModalBlock,
    DabsegNet,
    DamiConfig,
    DamiEncoder,
    Fdmds,
    FdmdsConfig,
)

RNG = np.random.default_rng


def tiny_config():
    return DamiConfig(embed_dim=8, patch_stride=2, encoder_depths=(1, 1, 1), stage_channels=(8, 16, 32))


def fd_config():
    # deepest fused scale must stay >= 2^3: instance norm over a single voxel
    # is constant in its input, which would legitimately kill the gradient of
    # everything feeding it. With 3 stages on an 8^3 input that forces ps=1.
    return DamiConfig(embed_dim=8, patch_stride=1, encoder_depths=(1, 1, 1), stage_channels=(8, 16, 32))


class TestAttentionOp:
    def test_single_token_returns_value_row(self):
        rng = RNG(0)
        q, k, v = (Tensor(rng.normal(size=(1, 5))) for _ in range(3))
        out = nn.attention(q, k, v)
        np.testing.assert_allclose(out.data, v.data, atol=1e-12)

    def test_identical_keys_give_value_mean(self):
        rng = RNG(1)
        q = Tensor(rng.normal(size=(6, 4)))
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (6, 1)))
        v = Tensor(rng.normal(size=(6, 4)))
        out = nn.attention(q, k, v)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (6, 1)), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = RNG(2)
        q, k = Tensor(rng.normal(size=(16, 8))), Tensor(rng.normal(size=(16, 8)))
        logits = (q @ ad.permute(k, (1, 0))) * (1.0 / np.sqrt(8))
        weights = ad.softmax(logits, axis=-1).data
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            nn.attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


class TestFdmds:
    def test_shape_preserved(self):
        rng = RNG(3)
        stem = Fdmds(FdmdsConfig(c_mid=6), rng)
        for dims in ((6, 6, 6), (4, 6, 8)):
            x = Tensor(rng.normal(size=(1, 4) + dims))
            assert stem(x).shape == x.shape

    def test_zero_final_conv_gives_leaky_identity(self):
        rng = RNG(4)
        stem = Fdmds(FdmdsConfig(c_mid=6), rng)
        stem.conv3.w.data[:] = 0.0
        stem.conv3.b.data[:] = 0.0
        x = rng.normal(size=(1, 4, 5, 5, 5))
        out = stem(Tensor(x))
        np.testing.assert_array_equal(out.data, np.where(x > 0, x, 0.01 * x))

    def test_gradients_match_finite_differences(self):
        rng = RNG(5)
        stem = Fdmds(FdmdsConfig(c_mid=4), rng)
        x = rng.normal(size=(1, 4, 6, 6, 6))
        worst, _ = check_module_gradients(stem, lambda: stem(Tensor(x)).sum(), max_coords=3, seed=0)
        assert worst < 1e-4

    def test_wrong_channel_count_rejected(self):
        stem = Fdmds(FdmdsConfig(), RNG(6))
        with pytest.raises(ShapeError):
            stem(Tensor(np.zeros((1, 3, 4, 4, 4))))

    def test_literal_second_stage_reads_input(self):
        rng = RNG(7)
        literal = Fdmds(FdmdsConfig(c_mid=6, literal_eq3=True), rng)
        assert literal.block2.conv.w.shape[1] == 4
        stacked = Fdmds(FdmdsConfig(c_mid=6, literal_eq3=False), RNG(7))
        assert stacked.block2.conv.w.shape[1] == 6


class TestCrossModalBlock:
    def _block(self, channels=6, seed=8, **kw):
        return CrossModalBlock(channels, channels, RNG(seed), **kw)

    def test_identical_inputs_identical_outputs(self):
        block = self._block()
        x = Tensor(RNG(9).normal(size=(10, 6)))
        outs = block([x, x, x, x])
        for other in outs[1:]:
            np.testing.assert_array_equal(outs[0].data, other.data)

    def test_permutation_equivariance(self):
        block = self._block()
        rng = RNG(10)
        xs = [Tensor(rng.normal(size=(7, 6))) for _ in range(4)]
        perm = [2, 0, 3, 1]
        base = block(xs)
        permuted = block([xs[i] for i in perm])
        for slot, src in enumerate(perm):
            np.testing.assert_allclose(permuted[slot].data, base[src].data, atol=1e-12)

    def test_all_attention_rows_sum_to_one(self):
        block = self._block()
        rng = RNG(11)
        xs = [Tensor(rng.normal(size=(9, 6))) for _ in range(4)]
        normed = [block.ln_attn(x) for x in xs]
        qs = [block._split_heads(block.wq[0](x)) for x in normed]
        ks = [block._split_heads(block.wk[0](x)) for x in normed]
        for m in range(4):
            for mp in range(4):
                logits = (qs[m] @ ad.permute(ks[mp], (0, 2, 1))) * (1.0 / np.sqrt(block.attn_dim))
                rows = ad.softmax(logits, axis=-1).data.sum(axis=-1)
                np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_wrong_modality_count_rejected(self):
        block = self._block()
        with pytest.raises(ValueError):
            block([Tensor(np.zeros((4, 6)))] * 3)

    def test_multihead_shapes(self):
        block = self._block(channels=8, heads=2)
        xs = [Tensor(RNG(12).normal(size=(6, 8))) for _ in range(4)]
        outs = block(xs)
        assert all(o.shape == (6, 8) for o in outs)


class TestEncoder:
    def test_token_counts_and_scales_default_config(self):
        # paper-scale defaults on a 32^3 input: tokens (32/4)^3, fused maps at
        # 8^3/4^3/2^3 with 32/64/128 channels
        cfg = DamiConfig()
        enc = DamiEncoder(cfg, RNG(13))
        x = Tensor(RNG(14).normal(size=(1, 4, 32, 32, 32)))
        toks = [enc.embeds[m](x[:, m : m + 1]) for m in range(4)]
        assert all(t.shape == (512, 32) for t in toks)
        fused, shallow = enc(x)
        assert len(fused) == 3
        assert fused[0].shape == (1, 32, 8, 8, 8)
        assert fused[1].shape == (1, 64, 4, 4, 4)
        assert fused[2].shape == (1, 128, 2, 2, 2)
        assert shallow.shape[2:] == (32, 32, 32)

    def test_fusion_input_channels(self):
        cfg = tiny_config()
        enc = DamiEncoder(cfg, RNG(15))
        for l, fuse in enumerate(enc.fuses):
            assert fuse.conv.w.shape[1] == 4 * cfg.stage_channels[l]

    def test_single_voxel_tokens_when_stride_one(self):
        cfg = DamiConfig(embed_dim=4, patch_stride=1, encoder_depths=(1,), stage_channels=(4,))
        enc = DamiEncoder(cfg, RNG(16))
        x = Tensor(RNG(17).normal(size=(1, 4, 3, 4, 5)))
        toks = enc.embeds[0](x[:, 0:1])
        assert toks.shape == (3 * 4 * 5, 4)

    def test_indivisible_dims_rejected(self):
        enc = DamiEncoder(tiny_config(), RNG(18))
        with pytest.raises(ShapeError):
            enc(Tensor(np.zeros((1, 4, 6, 6, 6))))

    def test_identical_modalities_identical_tokens_under_same_weights(self):
        cfg = tiny_config()
        enc = DamiEncoder(cfg, RNG(19))
        for m in range(1, 4):
            for (_, p0), (_, pm) in zip(
                enc.embeds[0].named_parameters().items(), enc.embeds[m].named_parameters().items()
            ):
                pm.data = p0.data.copy()
        x = RNG(20).normal(size=(1, 1, 8, 8, 8))
        t0 = enc.embeds[0](Tensor(x))
        t1 = enc.embeds[1](Tensor(x))
        np.testing.assert_array_equal(t0.data, t1.data)


class TestFullNetwork:
    def test_output_shapes_and_ranges(self):
        net = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=0)
        out = net(RNG(21).normal(size=(4, 8, 8, 8)))
        assert out.prediction.probs.shape == (3, 8, 8, 8)
        assert out.prediction.logits.shape == (3, 8, 8, 8)
        assert out.deblurred.shape == (4, 8, 8, 8)
        p = out.prediction.probs.data
        assert ((p > 0) & (p < 1)).all()

    def test_zero_logits_give_half_probability(self):
        net = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=0)
        net.head.conv.w.data[:] = 0.0
        net.head.conv.b.data[:] = 0.0
        out = net(RNG(22).normal(size=(4, 8, 8, 8)))
        np.testing.assert_array_equal(out.prediction.probs.data, np.full((3, 8, 8, 8), 0.5))

    def test_decoder_returns_to_voxel_resolution(self):
        for size, cfg in [
            (8, tiny_config()),
            (16, DamiConfig(embed_dim=8, patch_stride=4, encoder_depths=(1, 1), stage_channels=(8, 16))),
        ]:
            net = DabsegNet(dami=cfg, fdmds=FdmdsConfig(c_mid=4), seed=1)
            out = net(RNG(23).normal(size=(4, size, size, size)))
            assert out.prediction.probs.shape == (3, size, size, size)

    def test_default_decoder_counts_five_stages(self):
        assert DamiConfig().decoder_stages == 5

    def test_skips_are_live_paths(self):
        net = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=2)
        x = RNG(24).normal(size=(4, 8, 8, 8))
        with_skips = net(x).prediction.logits.data
        without = net(x, zero_skips=True).prediction.logits.data
        assert np.abs(with_skips - without).max() > 1e-6

    def test_forward_bitwise_deterministic(self):
        net = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=3)
        x = RNG(25).normal(size=(4, 8, 8, 8))
        a = net(x).prediction.probs.data
        b = net(x).prediction.probs.data
        assert np.array_equal(a, b)

    def test_every_parameter_receives_gradient(self):
        net = DabsegNet(dami=fd_config(), fdmds=FdmdsConfig(c_mid=4), seed=4)
        rng = RNG(26)
        x = rng.normal(size=(4, 8, 8, 8))
        target = (rng.normal(size=(3, 8, 8, 8)) > 0).astype(np.float64)
        net.zero_grad()
        out = net(x)
        p = out.prediction.probs
        loss = ((p - target) * (p - target)).mean() + (out.deblurred * out.deblurred).mean()
        loss.backward()
        dead = [name for name, p in net.named_parameters().items() if not np.any(p.grad)]
        assert not dead, f"parameters with zero gradient: {dead}"

    def test_bad_input_shape_rejected(self):
        net = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=5)
        with pytest.raises(ShapeError):
            net(np.zeros((3, 8, 8, 8)))
        with pytest.raises(ShapeError):
            net(np.zeros((4, 6, 6, 6)))

    def test_fdmds_bypass(self):
        net = DabsegNet(dami=tiny_config(), use_fdmds=False, seed=6)
        out = net(RNG(27).normal(size=(4, 8, 8, 8)))
        assert out.deblurred is None
        assert out.prediction.probs.shape == (3, 8, 8, 8)

    def test_full_network_gradcheck(self):
        net = DabsegNet(dami=fd_config(), fdmds=FdmdsConfig(c_mid=6), seed=7)
        rng = RNG(28)
        x = rng.normal(size=(4, 8, 8, 8))
        target = (rng.normal(size=(3, 8, 8, 8)) > 0).astype(np.float64)

        def loss_fn():
            out = net(x)
            p = out.prediction.probs
            return ((p - target) * (p - target)).mean() + (out.deblurred * out.deblurred).mean() * 0.1

        worst, _ = check_module_gradients(net, loss_fn, max_coords=2, seed=0)
        assert worst < 1e-3


class TestDamiConfigValidation:
    def test_depth_channel_length_mismatch(self):
        with pytest.raises(ValueError):
            DamiConfig(encoder_depths=(2, 2), stage_channels=(32, 64, 128))

    def test_non_power_of_two_stride(self):
        with pytest.raises(ValueError):
            DamiConfig(patch_stride=3)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            DamiConfig(heads=5)


class TestParamBlob:
    def test_roundtrip(self, tmp_path):
        net = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=8)
        path = tmp_path / "params.bin"
        nn.save_params(path, net, dtype=np.float64)
        other = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=99)
        nn.load_params(path, other)
        for (na, pa), (nb, pb) in zip(
            net.named_parameters().items(), other.named_parameters().items()
        ):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_shape_mismatch_rejected(self, tmp_path):
        net = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=4), seed=9)
        path = tmp_path / "params.bin"
        nn.save_params(path, net)
        other = DabsegNet(dami=tiny_config(), fdmds=FdmdsConfig(c_mid=6), seed=9)
        with pytest.raises(ValueError):
            nn.load_params(path, other)
