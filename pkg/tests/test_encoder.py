"""Encoder init, perturbation layers, dual-stream forward, pretrain probe."""
import math

import numpy as np
import pytest

from afa import tensor as T
from afa.encoder import (
    BETA_STD,
    GAMMA_STD,
    AfaLayer,
    AfaParams,
    ConfigError,
    EncoderConfig,
    afa_apply,
    afa_apply_nonlinear,
    encode,
    forward_dual,
    init_afa,
    init_afa_identity,
    init_afa_nonlinear,
    init_classifier,
    init_encoder,
    lift,
    pretrain_forward,
    softplus,
)
from afa.rng import Rng
from afa.tensor import Tape, Tensor


def small_cfg(blocks=(4, 6), h=8, w=8):
    return EncoderConfig(in_channels=3, in_h=h, in_w=w, block_channels=blocks)


def make_encoder(seed=0, **kw):
    cfg = small_cfg(**kw)
    return cfg, init_encoder(cfg, Rng(seed).substream("init"))


class TestInitEncoder:
    def test_parameter_count_formula(self):
        cfg = EncoderConfig(in_channels=3, in_h=16, in_w=16, block_channels=(8, 16))
        enc = init_encoder(cfg, Rng(1))
        expected = (3 * 3 * 3 * 8 + 2 * 8) + (3 * 3 * 8 * 16 + 2 * 16)
        assert enc.param_count() == expected

    def test_same_seed_identical(self):
        _, a = make_encoder(seed=5)
        _, b = make_encoder(seed=5)
        for k, v in a.named().items():
            np.testing.assert_array_equal(v, b.named()[k])

    def test_zero_blocks_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(block_channels=())

    def test_odd_spatial_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(in_h=6, in_w=6, block_channels=(4, 4))  # 3x3 cannot pool

    def test_pool_plan_skips_tiny_maps(self):
        cfg = EncoderConfig(in_h=1, in_w=1, block_channels=(4, 4))
        assert cfg.pool_plan() == [False, False]
        cfg2 = EncoderConfig(in_h=16, in_w=16, block_channels=(4, 4, 4, 4, 4))
        assert cfg2.pool_plan() == [True, True, True, True, False]


class TestInitAfa:
    def test_softplus_values(self):
        assert abs(softplus(0.5) - 0.974077) < 1e-6
        assert abs(softplus(0.3) - 0.854355) < 1e-6
        assert GAMMA_STD == softplus(0.5)
        assert BETA_STD == softplus(0.3)

    def test_gamma_sample_mean(self):
        afa = init_afa([100000], Rng(3).substream("init"))
        assert abs(afa.layers[0].gamma.mean() - 1.0) < 0.02

    def test_beta_sample_std(self):
        afa = init_afa([100000], Rng(4).substream("init"))
        layer = afa.layers[0]
        assert abs(layer.beta.mean()) < 0.02
        assert abs(layer.beta.std() - BETA_STD) < 0.02

    def test_one_layer_per_site(self):
        afa = init_afa([4, 6, 8], Rng(0))
        assert [l.gamma.shape[0] for l in afa.layers] == [4, 6, 8]

    def test_mismatched_vectors_rejected(self):
        with pytest.raises(ConfigError):
            AfaLayer(np.ones(3), np.zeros(4))


class TestAfaApply:
    def test_identity_is_bitwise(self):
        x = Rng(5).normal(0, 1, (2, 3, 4, 4))
        out = afa_apply(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_scalar_channel_arithmetic(self):
        out = afa_apply(Tensor(np.full((1, 1, 1, 1), 2.0)),
                        Tensor([1.5]), Tensor([0.5]))
        assert out.data[0, 0, 0, 0] == 3.5

    def test_moment_mapping(self):
        rng = Rng(6).substream("moments")
        for _ in range(50):
            m = rng.normal(0.5, 2.0, (3, 4, 5, 5))
            gamma = rng.normal(1.0, 0.7, (4,))
            beta = rng.normal(0.0, 0.7, (4,))
            out = afa_apply(Tensor(m), Tensor(gamma), Tensor(beta)).data
            for c in range(4):
                mu, sd = m[:, c].mean(), m[:, c].std()
                assert abs(out[:, c].mean() - (gamma[c] * mu + beta[c])) <= 1e-9
                assert abs(out[:, c].std() - abs(gamma[c]) * sd) <= 1e-9

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeMismatch):
            afa_apply(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestAfaApplyNonlinear:
    def test_delta_kernel_identity(self):
        x = Rng(7).normal(0, 1, (2, 3, 4, 4))
        w = np.zeros((3, 3, 3, 3))
        w[np.arange(3), np.arange(3), 1, 1] = 1.0
        out = afa_apply_nonlinear(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_zero_kernel(self):
        out = afa_apply_nonlinear(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 2, 4, 4)))

    def test_ones_kernel_center(self):
        out = afa_apply_nonlinear(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.data[0, 0, 1, 1] == 9.0

    def test_init_is_near_identity(self):
        afa = init_afa_nonlinear([8], Rng(8).substream("init"))
        w = afa.layers[0]
        diag_centers = w[np.arange(8), np.arange(8), 1, 1]
        assert abs(diag_centers.mean() - 1.0) < 1.5
        off = w.copy()
        off[np.arange(8), np.arange(8), 1, 1] = 0.0
        assert np.abs(off).max() < 0.2


class TestForwardDual:
    def test_identity_afa_streams_bitwise_equal(self):
        cfg, enc = make_encoder(seed=9)
        afa = init_afa_identity(list(cfg.block_channels))
        p = lift(None, {**enc.named(), **afa.named()})
        x = Tensor(Rng(10).normal(0, 1, (6, 3, 8, 8)))
        dual = forward_dual(x, cfg, p, enc.bn_states, afa)
        np.testing.assert_array_equal(dual.f_o.data, dual.f_a.data)
        assert len(dual.sites) == len(cfg.block_channels)
        for m_o, m_a in dual.sites:
            np.testing.assert_array_equal(m_o.data, m_a.data)

    def test_single_site_manual_composition(self):
        cfg = EncoderConfig(in_channels=2, in_h=4, in_w=4, block_channels=(3,))
        enc = init_encoder(cfg, Rng(11).substream("init"))
        afa = init_afa([3], Rng(11).substream("afa"))
        p = lift(None, {**enc.named(), **afa.named()})
        x = Rng(12).normal(0, 1, (5, 2, 4, 4))
        dual = forward_dual(Tensor(x), cfg, p, enc.bn_states, afa)

        conv = T.conv2d(Tensor(x), Tensor(enc.conv[0])).data
        mean = conv.mean(axis=(0, 2, 3), keepdims=True)
        var = conv.var(axis=(0, 2, 3), keepdims=True)
        bn = (conv - mean) / np.sqrt(var + 1e-5)
        g, b = afa.layers[0].gamma, afa.layers[0].beta
        manual = bn * g[None, :, None, None] + b[None, :, None, None]
        np.testing.assert_allclose(dual.sites[0][1].data, manual, atol=1e-10)

    def test_eval_mode_returns_original_only(self):
        cfg, enc = make_encoder(seed=13)
        afa = init_afa(list(cfg.block_channels), Rng(13).substream("afa"))
        p = lift(None, enc.named())
        x = Tensor(Rng(14).normal(0, 1, (4, 3, 8, 8)))
        dual = forward_dual(x, cfg, p, enc.bn_states, afa, mode="eval")
        assert dual.f_a is None and dual.sites == []
        assert dual.f_o.shape == (4, cfg.out_channels)

    def test_weight_sharing_at_first_site(self):
        cfg, enc = make_encoder(seed=15)
        afa = init_afa(list(cfg.block_channels), Rng(15).substream("afa"))
        p = lift(None, {**enc.named(), **afa.named()})
        x = Tensor(Rng(16).normal(0, 1, (6, 3, 8, 8)))
        dual = forward_dual(x, cfg, p, enc.bn_states, afa)
        m_o, m_a = dual.sites[0]
        g = afa.layers[0].gamma[None, :, None, None]
        b = afa.layers[0].beta[None, :, None, None]
        # both streams share the conv/BN below the first site
        np.testing.assert_allclose((m_a.data - b) / g, m_o.data, atol=1e-9)

    def test_gradients_reach_afa_only_through_augmented_stream(self):
        cfg, enc = make_encoder(seed=17)
        afa = init_afa(list(cfg.block_channels), Rng(17).substream("afa"))
        tape = Tape()
        p = lift(tape, {**enc.named(), **afa.named()})
        x = Tensor(Rng(18).normal(0, 1, (5, 3, 8, 8)))
        dual = forward_dual(x, cfg, p, enc.bn_states, afa)
        loss = T.reduce_mean(T.mul(dual.f_o, dual.f_o))
        grads = tape.backward(loss)
        for i in range(len(cfg.block_channels)):
            np.testing.assert_array_equal(grads[p[f"afa.s{i}.gamma"].tape_id], 0.0)
            np.testing.assert_array_equal(grads[p[f"afa.s{i}.beta"].tape_id], 0.0)
        assert np.abs(grads[p["enc.b0.conv"].tape_id]).max() > 0.0

    def test_eval_output_independent_of_afa(self):
        cfg, enc = make_encoder(seed=19)
        x = Tensor(Rng(20).normal(0, 1, (4, 3, 8, 8)))
        outs = []
        for afa_seed in (1, 2):
            afa = init_afa(list(cfg.block_channels), Rng(afa_seed))
            p = lift(None, {**enc.named(), **afa.named()})
            outs.append(forward_dual(x, cfg, p, enc.bn_states, afa, mode="eval").f_o.data)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_shared_bn_stats_mode(self):
        cfg, enc = make_encoder(seed=21)
        afa = init_afa_identity(list(cfg.block_channels))
        p = lift(None, {**enc.named(), **afa.named()})
        x = Tensor(Rng(22).normal(0, 1, (4, 3, 8, 8)))
        dual = forward_dual(x, cfg, p, enc.bn_states, afa, shared_bn_stats=True)
        # identity perturbation: shared stats change nothing
        np.testing.assert_allclose(dual.f_a.data, dual.f_o.data, atol=1e-12)

    def test_site_count_mismatch_rejected(self):
        cfg, enc = make_encoder(seed=23)
        afa = init_afa([cfg.block_channels[0]], Rng(23))
        p = lift(None, {**enc.named(), **afa.named()})
        with pytest.raises(ConfigError):
            forward_dual(Tensor(np.ones((4, 3, 8, 8))), cfg, p, enc.bn_states, afa)


class TestPretrainForward:
    def test_zero_weights_give_uniform_ce(self):
        cfg, enc = make_encoder(seed=24)
        head = {"head.w": np.zeros((cfg.out_channels, 7)), "head.b": np.zeros(7)}
        p = lift(None, {**enc.named(), **head})
        x = Tensor(Rng(25).normal(0, 1, (8, 3, 8, 8)))
        logits = pretrain_forward(x, cfg, p, enc.bn_states)
        loss = T.softmax_cross_entropy(logits, np.zeros(8, dtype=int))
        np.testing.assert_allclose(float(loss.data), math.log(7.0), atol=1e-9)

    def test_logits_shape(self):
        cfg, enc = make_encoder(seed=26)
        head = init_classifier(cfg.out_channels, 5, Rng(26))
        p = lift(None, {**enc.named(), **head})
        logits = pretrain_forward(Tensor(np.ones((3, 3, 8, 8))), cfg, p, enc.bn_states)
        assert logits.shape == (3, 5)

    def test_separable_toy_converges(self):
        from afa.optim import AdamState, adam_step

        cfg = EncoderConfig(in_channels=2, in_h=4, in_w=4, block_channels=(4,))
        enc = init_encoder(cfg, Rng(27).substream("init"))
        head = init_classifier(cfg.out_channels, 2, Rng(27).substream("head"))
        params = {**enc.named(), **head}
        # class 0 lights channel 0, class 1 lights channel 1
        rng = Rng(28).substream("toy")
        x = np.zeros((16, 2, 4, 4))
        y = np.arange(16) % 2
        for i in range(16):
            x[i, y[i]] = 1.0
        x += rng.normal(0, 0.05, x.shape)
        state = AdamState(lr=0.01)
        for _ in range(300):
            tape = Tape()
            p = lift(tape, params)
            logits = pretrain_forward(Tensor(x), cfg, p, enc.bn_states)
            loss = T.softmax_cross_entropy(logits, y)
            grads = tape.backward(loss)
            adam_step(params, {k: grads[p[k].tape_id] for k in params}, state)
        p = lift(None, params)
        logits = pretrain_forward(Tensor(x), cfg, p, enc.bn_states, mode="train")
        acc = (logits.data.argmax(axis=1) == y).mean()
        assert acc >= 0.95
