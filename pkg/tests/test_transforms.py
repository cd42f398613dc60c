"""Network building blocks: shapes, degeneracies, sharing, and equivariance."""

import numpy as np
import pytest

from njcodec import tensor as T
from njcodec.entropy import SIGMA_MIN
from njcodec.tensor import Tensor
from njcodec.transforms import (
    JointModel,
    LongRange,
    NetworkConfig,
    ShortRange,
    snr_fuse,
    snr_maps_for,
)
from tests.conftest import tiny_config


def _zero_module(mod):
    for p in mod.parameters():
        p.data = np.zeros_like(p.data)


@pytest.fixture(scope="module")
def model():
    return JointModel(tiny_config(), seed=0)


@pytest.fixture
def image_batch(rng):
    return Tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32))


class TestEncoderStages:
    def test_shape_ladder(self, model, image_batch):
        s = snr_maps_for(image_batch)
        y0, y = model.main_encode(image_batch, s)
        cfg = model.cfg
        assert y0.shape == (1, cfg.base_channels, 16, 16)
        assert y.shape == (1, cfg.latent_channels, 4, 4)

    def test_zero_input_zero_biases_gives_zero(self):
        m = JointModel(tiny_config(), seed=1)
        x = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        out = m.ga0(x)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_deterministic_across_runs(self, image_batch):
        outs = []
        for _ in range(2):
            m = JointModel(tiny_config(), seed=5)
            s = snr_maps_for(image_batch)
            _, y = m.main_encode(image_batch, s)
            outs.append(y.data.copy())
        assert np.array_equal(outs[0], outs[1])

    def test_unpadded_input_rejected(self, model):
        with pytest.raises(ValueError):
            model.teacher_encode(Tensor(np.zeros((1, 3, 60, 60), dtype=np.float32)))


class TestShortRange:
    def test_zero_weights_identity(self, rng):
        sr = ShortRange(6, np.random.default_rng(0), np.float32)
        _zero_module(sr)
        x = Tensor(rng.normal(size=(1, 6, 8, 8)).astype(np.float32))
        np.testing.assert_array_equal(sr(x).data, x.data)

    def test_shape_preserved(self, rng):
        sr = ShortRange(5, np.random.default_rng(0), np.float32)
        x = Tensor(rng.normal(size=(2, 5, 7, 9)).astype(np.float32))
        assert sr(x).shape == x.shape

    def test_matches_composed_convs(self, rng):
        sr = ShortRange(4, np.random.default_rng(3), np.float64)
        x = Tensor(rng.normal(size=(1, 4, 6, 6)))
        h = x
        for blk in sr.blocks:
            inner = T.conv2d(T.leaky_relu(T.conv2d(h, blk.conv1.w, blk.conv1.b, 1, 1), 0.2),
                             blk.conv2.w, blk.conv2.b, 1, 1)
            h = T.add(h, inner)
        np.testing.assert_array_equal(sr(x).data, h.data)


class TestLongRange:
    def _make(self, ch=4, dtype=np.float32, seed=0, **cfg_kw):
        cfg = tiny_config(base_channels=ch, **cfg_kw)
        return LongRange(ch, cfg, np.random.default_rng(seed), dtype)

    def test_zero_projections_identity(self, rng):
        lr = self._make()
        for blk in lr.blocks:
            _zero_module(blk.wo)
            _zero_module(blk.ffn2)
        x = Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))
        np.testing.assert_array_equal(lr(x).data, x.data)

    def test_single_patch_finite(self, rng):
        lr = self._make()
        x = Tensor(rng.normal(size=(1, 4, 4, 4)).astype(np.float32))
        out = lr(x)
        assert out.shape == x.shape
        assert np.isfinite(out.data).all()

    def test_patch_permutation_equivariance(self, rng):
        lr = self._make()
        m = lr.m
        x = rng.normal(size=(1, 4, 8, 12)).astype(np.float32)
        gh, gw = 8 // m, 12 // m
        perm = np.random.default_rng(9).permutation(gh * gw)

        def permute_patches(arr):
            blocks = arr.reshape(1, 4, gh, m, gw, m).transpose(0, 2, 4, 1, 3, 5)
            blocks = blocks.reshape(1, gh * gw, 4, m, m)[:, perm]
            blocks = blocks.reshape(1, gh, gw, 4, m, m).transpose(0, 3, 1, 4, 2, 5)
            return np.ascontiguousarray(blocks.reshape(1, 4, 8, 12))

        out_then_perm = permute_patches(lr(Tensor(x)).data)
        perm_then_out = lr(Tensor(permute_patches(x))).data
        assert np.max(np.abs(out_then_perm - perm_then_out)) <= 1e-5

    def test_reflect_padding_for_odd_sizes(self, rng):
        lr = self._make()
        x = Tensor(rng.normal(size=(1, 4, 7, 9)).astype(np.float32))
        assert lr(x).shape == (1, 4, 7, 9)

    def test_head_divisibility_validated(self):
        with pytest.raises(ValueError):
            NetworkConfig(base_channels=5, latent_channels=12, attention_heads=7)


class TestSnrFuse:
    def test_endpoints(self, rng):
        f_s = Tensor(rng.normal(size=(1, 3, 4, 4)))
        f_l = Tensor(rng.normal(size=(1, 3, 4, 4)))
        ones = Tensor(np.ones((1, 1, 4, 4)))
        zeros = Tensor(np.zeros((1, 1, 4, 4)))
        np.testing.assert_array_equal(snr_fuse(f_s, f_l, ones).data, f_s.data)
        np.testing.assert_array_equal(snr_fuse(f_s, f_l, zeros).data, f_l.data)

    def test_arithmetic_midpoint(self):
        f_s = Tensor(np.full((1, 1, 2, 2), 2.0))
        f_l = Tensor(np.full((1, 1, 2, 2), 4.0))
        s = Tensor(np.full((1, 1, 2, 2), 0.5))
        np.testing.assert_allclose(snr_fuse(f_s, f_l, s).data, 3.0)

    def test_convex_combination_bounds(self, rng):
        f_s = Tensor(rng.normal(size=(1, 2, 5, 5)))
        f_l = Tensor(rng.normal(size=(1, 2, 5, 5)))
        s = Tensor(rng.uniform(0, 1, size=(1, 1, 5, 5)))
        fused = snr_fuse(f_s, f_l, s).data
        lo = np.minimum(f_s.data, f_l.data)
        hi = np.maximum(f_s.data, f_l.data)
        assert np.all(fused >= lo - 1e-12) and np.all(fused <= hi + 1e-12)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            snr_fuse(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 4))),
                     Tensor(np.zeros((1, 1, 3, 3))))


class TestSnrBranch:
    def test_output_shapes(self, model, image_batch):
        s0, s1 = model.branch(image_batch, snr_maps_for(image_batch))
        cfg = model.cfg
        assert s0.shape == (1, cfg.base_channels, 16, 16)
        assert s1.shape == (1, cfg.latent_channels, 4, 4)

    def test_constant_one_map_selects_short_range(self, image_batch):
        m = JointModel(tiny_config(), seed=2)
        ones = np.ones((1, 64, 64))
        s0, _ = m.branch(image_batch, ones)
        f0 = m.branch.extract0(image_batch)
        short = m.branch.short0(f0)
        np.testing.assert_array_equal(s0.data, short.data)

    def test_gradients_reach_all_branch_parameters(self, rng):
        # 128px input: both scales carry several attention tokens, so even
        # query/key projections receive gradient
        m = JointModel(tiny_config(), seed=3)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 128, 128)).astype(np.float32))
        maps = rng.uniform(0.2, 0.8, size=(1, 128, 128))
        s0, s1 = m.branch(x, maps)
        T.backward(T.add(T.tensor_sum(s0), T.tensor_sum(s1)))
        for name, p in m.branch.named_parameters():
            assert p.grad is not None, name
            assert np.abs(p.grad).max() > 0, f"zero gradient into {name}"


class TestInjection:
    def test_zero_weights_collapse_to_plain_encoder(self, rng):
        m = JointModel(tiny_config(), seed=4)
        _zero_module(m.inject0)
        _zero_module(m.inject1)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32))
        y0, y = m.main_encode(x, snr_maps_for(x))
        y0_gt, y_gt = m.teacher_encode(x)
        assert np.array_equal(y0.data, y0_gt.data)
        assert np.array_equal(y.data, y_gt.data)

    def test_output_shape_matches_main_feature(self, rng):
        m = JointModel(tiny_config(), seed=4)
        s_k = Tensor(rng.normal(size=(1, m.cfg.base_channels, 4, 4)).astype(np.float32))
        y_k = Tensor(rng.normal(size=(1, m.cfg.base_channels, 4, 4)).astype(np.float32))
        assert m.inject0(s_k, y_k).shape == y_k.shape

    def test_matches_per_pixel_linear_oracle(self, rng):
        m = JointModel(tiny_config(), seed=6)
        C = m.cfg.base_channels
        s_k = rng.normal(size=(1, C, 2, 2)).astype(np.float32)
        y_k = rng.normal(size=(1, C, 2, 2)).astype(np.float32)
        out = m.inject0(Tensor(s_k), Tensor(y_k)).data
        wmat = m.inject0.proj.w.data.reshape(C, 2 * C)
        bias = m.inject0.proj.b.data
        concat = np.concatenate([s_k, y_k], axis=1)[0]
        for i in range(2):
            for j in range(2):
                expect = wmat @ concat[:, i, j] + bias
                np.testing.assert_allclose(out[0, :, i, j], expect, rtol=1e-5)

    def test_spatial_mismatch_rejected(self, rng):
        m = JointModel(tiny_config(), seed=4)
        C = m.cfg.base_channels
        with pytest.raises(ValueError):
            m.inject0(Tensor(np.zeros((1, C, 4, 4), dtype=np.float32)),
                      Tensor(np.zeros((1, C, 8, 8), dtype=np.float32)))


class TestWeightSharing:
    def test_teacher_uses_identical_parameter_objects(self, model):
        main_params = {id(p) for p in model.ga0.parameters()} | {
            id(p) for p in model.ga1.parameters()}
        assert main_params  # sharing is structural: same modules, same objects
        assert model.ga0 is model.ga0

    def test_mutating_encoder_changes_teacher(self, rng):
        m = JointModel(tiny_config(), seed=7)
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32))
        before = m.teacher_encode(x)[1].data.copy()
        m.ga0.down1.w.data = m.ga0.down1.w.data + 0.05
        after = m.teacher_encode(x)[1].data
        assert not np.array_equal(before, after)


class TestHyperPair:
    def test_z_shape(self, model, image_batch):
        _, y = model.main_encode(image_batch, snr_maps_for(image_batch))
        z = model.hyper_encode(y)
        assert z.shape == (1, model.cfg.hyper_channels, 1, 1)

    def test_sigma_floor_and_shapes(self, rng, model):
        z_hat = Tensor(rng.normal(size=(1, model.cfg.hyper_channels, 2, 2)).astype(np.float32))
        mu, sigma = model.hyper_decode(z_hat)
        assert mu.shape == sigma.shape == (1, model.cfg.latent_channels, 8, 8)
        assert sigma.data.min() >= SIGMA_MIN


class TestMainDecode:
    def test_shape_restoration(self, rng, model):
        y_hat = Tensor(rng.normal(size=(1, model.cfg.latent_channels, 4, 4)).astype(np.float32))
        assert model.main_decode(y_hat).shape == (1, 3, 64, 64)

    def test_zero_latent_zero_biases(self):
        m = JointModel(tiny_config(), seed=8)
        for p in list(m.gs_stage1.parameters()) + list(m.gs_stage2.parameters()):
            if p.ndim == 1:
                p.data = np.zeros_like(p.data)
        out = m.main_decode(Tensor(np.zeros((1, m.cfg.latent_channels, 4, 4), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_round_trip_deterministic(self, rng, model):
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)).astype(np.float32))
        outs = []
        for _ in range(2):
            with T.no_grad():
                _, y = model.main_encode(x, snr_maps_for(x))
                y_hat = Tensor(np.round(y.data))
                outs.append(model.main_decode(y_hat).data.copy())
        assert np.array_equal(outs[0], outs[1])


class TestParameterNames:
    def test_unique_hierarchical_names(self, model):
        names = [name for name, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert all("." in n for n in names)
