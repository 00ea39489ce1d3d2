import numpy as np
import pytest

from tsnet import tensor as T
from tsnet.ctc import ctc_mean_loss
from tsnet.network import (
    ConfigError,
    Model,
    NetworkConfig,
    blstm,
    conv_stage,
    features,
    frn,
    init_params,
    multiscale_rnn,
    param_shapes,
)
from tsnet.tensor import Tensor, grad_check
from tsnet.tsb import UnknownTsiError


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def ref_lstm(x, wx, wh, b):
    """Plain per-step LSTM (gates i, f, g, o), one direction, zero initial state."""
    n, t_len, _ = x.shape
    hid = wh.shape[0]
    h, c = np.zeros((n, hid)), np.zeros((n, hid))
    out = []
    for t in range(t_len):
        z = x[:, t] @ wx + h @ wh + b
        i, f, g, o = sig(z[:, :hid]), sig(z[:, hid:2 * hid]), np.tanh(z[:, 2 * hid:3 * hid]), sig(z[:, 3 * hid:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.stack(out, axis=1)


def ref_blstm(x, wx, wh, b):
    fwd = ref_lstm(x, wx[0], wh[0], b[0])
    bwd = ref_lstm(x[:, ::-1], wx[1], wh[1], b[1])[:, ::-1]
    return np.concatenate([fwd, bwd], axis=-1)


def tiny_config(**kw):
    base = dict(num_classes=4, conv_channels=[2, 3], rnn_hidden=4, input_height=8, embedding_dim=3)
    base.update(kw)
    return NetworkConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig(num_classes=14)
        assert cfg.conv_channels == [8, 16] and cfg.rnn_hidden == 64 and cfg.embedding_dim == 32
        assert cfg.pool_schedule == [[2, 2], [2, 2]]
        assert cfg.width_factor == 4 and cfg.time_multiple == 16

    def test_later_pools_keep_width(self):
        assert NetworkConfig(num_classes=3, conv_channels=[4, 4, 4]).pool_schedule == [[2, 2], [2, 2], [2, 1]]

    @pytest.mark.parametrize("kw", [dict(rnn_scales=4), dict(num_classes=1), dict(embedding_dim=0),
                                    dict(head_mode="lhuc"), dict(input_height=2)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            NetworkConfig(**{"num_classes": 5, **kw})

    def test_dict_round_trip(self):
        cfg = tiny_config(head_mode="frn_baseline")
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_parameter_names_depend_only_on_config(self):
        cfg = tiny_config()
        a = init_params(cfg, np.random.default_rng(0))
        b = init_params(cfg, np.random.default_rng(99))
        assert list(a) == list(b) == list(param_shapes(cfg))
        assert "head.frn.gamma" in param_shapes(tiny_config(head_mode="frn_baseline"))


class TestFrn:
    def test_hand_values(self):
        x = Tensor(np.array([[[3.0, 4.0]]]))
        one = Tensor(np.ones(1))
        y = frn(x, one, Tensor(np.zeros(1)), Tensor(np.array([-np.inf])), 0.0)
        np.testing.assert_allclose(y.data.reshape(-1), [0.8485, 1.1314], atol=1e-4)

    def test_zero_input_gives_max_beta_tau(self):
        x = Tensor(np.zeros((1, 2, 3, 3)))
        y = frn(x, Tensor(np.ones(2)), Tensor(np.array([0.3, -0.5])), Tensor(np.array([0.1, 0.2])), 1e-6)
        np.testing.assert_array_equal(y.data[0, 0], 0.3)
        np.testing.assert_array_equal(y.data[0, 1], 0.2)

    def test_threshold(self):
        # mean square of [-1, 2] is 2.5, so gamma = sqrt(2.5) yields y = [-1, 2] before the TLU
        x = np.array([[[-1.0, 2.0]]])
        y = frn(Tensor(x), Tensor(np.array([np.sqrt(2.5)])), Tensor(np.zeros(1)), Tensor(np.zeros(1)), 0.0)
        np.testing.assert_allclose(y.data.reshape(-1), [0.0, 2.0], atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 3, 4, 5)))
        g, b, tau = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
        w = Tensor(rng.standard_normal((2, 3, 4, 5)))
        # a few input gradients are ~1e-5 on an O(10) objective, where central
        # differences carry ~1e-10 of roundoff; the floor keeps that from scoring
        rep = grad_check(lambda: T.sum(T.mul(frn(x, g, b, tau, 1e-6), w)), [x, g, b, tau], floor=1e-4)
        assert rep.passed, rep


class TestBlstm:
    def test_matches_reference_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 5, 3))
        wx, wh, b = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 2, 8)), rng.standard_normal((2, 8))
        got = blstm(Tensor(x), Tensor(wx), Tensor(wh), Tensor(b)).data
        np.testing.assert_allclose(got, ref_blstm(x, wx, wh, b), atol=1e-12)

    def test_zero_weights_zero_output(self):
        y = blstm(Tensor(np.ones((1, 4, 3))), Tensor(np.zeros((2, 3, 8))), Tensor(np.zeros((2, 2, 8))),
                  Tensor(np.zeros((2, 8))))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_single_step_is_one_cell(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 1, 3))
        wx, wh, b = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 2, 8)), rng.standard_normal((2, 8))
        y = blstm(Tensor(x), Tensor(wx), Tensor(wh), Tensor(b)).data
        z = x[0, 0] @ wx[0] + b[0]
        c = sig(z[:2]) * np.tanh(z[4:6])
        np.testing.assert_allclose(y[0, 0, :2], sig(z[6:]) * np.tanh(c), atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 3, 4)))
        wx, wh, b = (Tensor(rng.standard_normal(s) * 0.5) for s in ((2, 4, 8), (2, 2, 8), (2, 8)))
        w = Tensor(rng.standard_normal((1, 3, 4)))
        rep = grad_check(lambda: T.sum(T.mul(blstm(x, wx, wh, b), w)), [x, wx, wh, b])
        assert rep.passed, rep


class TestStages:
    def test_conv_stage_default_shape(self):
        cfg = NetworkConfig(num_classes=14)
        params = init_params(cfg, np.random.default_rng(0))
        y = conv_stage(params, Tensor(np.random.default_rng(1).random((1, 1, 32, 128), dtype=np.float32)), cfg)
        assert y.shape == (1, 16, 1, 32)
        wide = conv_stage(params, Tensor(np.zeros((1, 1, 32, 256), np.float32)), cfg)
        assert wide.shape[-1] == 64

    def test_conv_stage_zero_weights(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(0), np.float64)
        for k, p in params.items():
            if k.endswith("weight") and k.startswith("conv"):
                p.data[:] = 0
        y = conv_stage(params, Tensor(np.random.default_rng(1).random((2, 1, 8, 16))), cfg)
        np.testing.assert_array_equal(y.data, 0.0)

    def test_wrong_input_height(self):
        cfg = tiny_config()
        with pytest.raises(ConfigError):
            conv_stage(init_params(cfg, np.random.default_rng(0)), Tensor(np.zeros((1, 1, 9, 16))), cfg)

    def test_single_scale_is_stacked_blstm(self):
        cfg = tiny_config(rnn_scales=1)
        params = init_params(cfg, np.random.default_rng(2), np.float64)
        x = np.random.default_rng(3).standard_normal((2, 5, 3))
        h = x
        for pre in ("rnn.branch0.layer0", "rnn.branch0.layer1", "rnn.final"):
            h = ref_blstm(h, params[f"{pre}.wx"].data, params[f"{pre}.wh"].data, params[f"{pre}.b"].data)
        np.testing.assert_allclose(multiscale_rnn(params, Tensor(x), cfg).data, h, atol=1e-12)

    def test_zero_branches_give_zero_output(self):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(4), np.float64)
        for k, p in params.items():
            if k.startswith("rnn.branch"):
                p.data[:] = 0
        params["rnn.final.b"].data[:] = 0
        y = multiscale_rnn(params, Tensor(np.random.default_rng(5).standard_normal((1, 8, 3))), cfg)
        np.testing.assert_array_equal(y.data, 0.0)

    @pytest.mark.parametrize("t_len", [4, 8, 12])
    def test_multiscale_shape(self, t_len):
        cfg = tiny_config()
        params = init_params(cfg, np.random.default_rng(6), np.float64)
        y = multiscale_rnn(params, Tensor(np.ones((2, t_len, 3))), cfg)
        assert y.shape == (2, t_len, 8)

    def test_indivisible_length(self):
        cfg = tiny_config()
        with pytest.raises(ConfigError):
            multiscale_rnn(init_params(cfg, np.random.default_rng(0)), Tensor(np.ones((1, 6, 3))), cfg)


class TestModel:
    def test_logit_shape(self):
        cfg = tiny_config()
        model = Model.create(cfg, [0, 1], seed=0, dtype=np.float64)
        y = model.forward(np.random.default_rng(0).random((3, 1, 8, 48)), tsi=[0, 1, 1])
        assert y.shape == (3, 12, 4)

    def test_baseline_ignores_tsi(self):
        cfg = tiny_config(head_mode="frn_baseline")
        model = Model.create(cfg, [0, 1, 2], seed=0)
        x = np.random.default_rng(1).random((3, 1, 8, 16)).astype(np.float32)
        a = model.forward(x, tsi=[0, 1, 2]).data
        b = model.forward(x, tsi=[2, 0, 1]).data
        c = model.forward(x).data
        assert a.tobytes() == b.tobytes() == c.tobytes()
        assert model.table is None

    def test_tsb_head_depends_on_tsi(self):
        model = Model.create(tiny_config(), [0, 1], seed=0)
        x = np.random.default_rng(2).random((1, 1, 8, 16)).astype(np.float32)
        assert not np.array_equal(model.forward(x, tsi=[0]).data, model.forward(x, tsi=[1]).data)

    def test_unknown_tsi(self):
        model = Model.create(tiny_config(), [0], seed=0)
        with pytest.raises(UnknownTsiError):
            model.forward(np.zeros((1, 1, 8, 16), np.float32), tsi=[3])

    def test_same_seed_same_model(self):
        a = Model.create(tiny_config(), [0, 1], seed=5)
        b = Model.create(tiny_config(), [1, 0], seed=5)
        for k, p in a.parameters().items():
            assert p.data.tobytes() == b.parameters()[k].data.tobytes()

    def test_features_are_style_independent(self):
        model = Model.create(tiny_config(), [0, 1], seed=0, dtype=np.float64)
        x = Tensor(np.random.default_rng(3).random((2, 1, 8, 16)))
        assert features(model.params, x, model.config).shape == (2, 4, 8)


@pytest.mark.parametrize("head_mode", ["tsb", "frn_baseline"])
def test_full_network_gradient(head_mode):
    """Every parameter of a tiny f64 network against central differences (T = 8)."""
    cfg = tiny_config(head_mode=head_mode)
    model = Model.create(cfg, [0, 1], seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    x = Tensor(rng.random((2, 1, 8, 32)))
    labels = [[1, 2, 3], [2, 2]]

    def loss():
        return ctc_mean_loss(model.log_probs(x, tsi=[0, 1]), labels)

    params = list(model.parameters().values())
    rep = grad_check(loss, params, tolerance=1e-4, max_coords=12, rng=np.random.default_rng(5))
    assert rep.checked > 200
    assert rep.passed, rep
