import numpy as np
import pytest

from qarv.autodiff import Tensor, gradient_check
from qarv.nn import (Conv2d, DepthwiseConv2d, Linear, conv2d, depthwise_conv2d,
                     gelu, group_norm, group_size_for, instance_norm,
                     layer_norm, pad2d, pixel_shuffle_up)
from qarv.optim import Adam, EmaTracker, NumericsError, clip_global_norm


def randt(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def naive_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[ni, :, yi * stride:yi * stride + kh,
                               xi * stride:xi * stride + kw]
                    out[ni, oi, yi, xi] = (patch * w[oi]).sum() + b[oi]
    return out


class TestConv2d:
    def test_identity_1x1(self):
        x = randt((2, 3, 5, 5), seed=1)
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = conv2d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_patch_embed_shape(self):
        x = randt((1, 3, 4, 4), seed=2)
        w = randt((5, 3, 2, 2), seed=3)
        assert conv2d(x, w, stride=2).shape == (1, 5, 2, 2)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 3, 6, 7)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        b = Tensor(rng.normal(size=(4,)))
        for stride, pad in [(1, 0), (1, 1), (2, 1), (3, 0)]:
            got = conv2d(x, w, b, stride=stride, padding=pad).data
            ref = naive_conv2d(x.data, w.data, b.data, stride, pad)
            assert np.abs(got - ref).max() < 1e-6

    def test_gradients(self):
        x = randt((2, 3, 5, 6), seed=5)
        w = randt((4, 3, 3, 3), seed=6)
        b = randt((4,), seed=7)
        err = gradient_check(
            lambda: (conv2d(x, w, b, stride=2, padding=1) ** 2).sum(), [x, w, b])
        assert err < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d(randt((1, 3, 4, 4)), randt((2, 4, 1, 1)))


class TestDepthwiseConv2d:
    def test_delta_kernel_is_identity(self):
        x = randt((2, 4, 6, 6), seed=8)
        w = np.zeros((4, 3, 3))
        w[:, 1, 1] = 1.0
        out = depthwise_conv2d(x, Tensor(w), padding=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_box_kernel_on_constant(self):
        x = Tensor(np.full((1, 2, 6, 6), 0.5))
        out = depthwise_conv2d(x, Tensor(np.ones((2, 3, 3))), padding=1)
        # interior sees all 9 taps
        np.testing.assert_allclose(out.data[:, :, 1:-1, 1:-1], 9 * 0.5)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 3, 5, 8)))
        w = Tensor(rng.normal(size=(3, 3, 3)))
        b = Tensor(rng.normal(size=(3,)))
        got = depthwise_conv2d(x, w, b, padding=1).data
        ref = np.zeros_like(got)
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for c in range(3):
            ref[:, c] = naive_conv2d(xp[:, c:c + 1], w.data[c][None, None],
                                     np.array([b.data[c]]), 1, 0)[:, 0]
        assert np.abs(got - ref).max() < 1e-6

    def test_gradients(self):
        x = randt((2, 3, 5, 5), seed=10)
        w = randt((3, 3, 3), seed=11)
        b = randt((3,), seed=12)
        err = gradient_check(
            lambda: (depthwise_conv2d(x, w, b, padding=1) ** 2).sum(), [x, w, b])
        assert err < 1e-5


class TestPadding:
    def test_replicate_values(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = pad2d(x, (1, 1, 1, 1), mode="replicate").data[0, 0]
        np.testing.assert_array_equal(out[0], [0, 0, 1, 1])
        np.testing.assert_array_equal(out[-1], [2, 2, 3, 3])

    @pytest.mark.parametrize("mode", ["zero", "replicate"])
    def test_gradients(self, mode):
        x = randt((2, 2, 3, 4), seed=13)
        scale = Tensor(np.random.default_rng(14).normal(size=(2, 2, 5, 6)))
        err = gradient_check(
            lambda: (pad2d(x, (1, 1, 1, 1), mode=mode) * scale).sum(), [x])
        assert err < 1e-5


class TestNorms:
    def test_constant_input_is_zeroed(self):
        x = Tensor(np.full((2, 4, 3, 3), 7.0))
        np.testing.assert_allclose(layer_norm(x).data, 0.0, atol=1e-3)

    def test_layer_norm_statistics(self):
        x = randt((2, 16, 4, 4), seed=15)
        y = layer_norm(x).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5)

    def test_group_equals_instance_when_groups_are_channels(self):
        x = randt((2, 6, 5, 5), seed=16)
        np.testing.assert_allclose(group_norm(x, 6).data, instance_norm(x).data,
                                   rtol=1e-6, atol=1e-7)

    def test_too_small_axis_rejected(self):
        with pytest.raises(ValueError):
            layer_norm(randt((1, 1, 4, 4)))
        with pytest.raises(ValueError):
            instance_norm(randt((1, 3, 1, 1)))

    def test_group_size_helper(self):
        assert group_size_for(64) == 32
        assert group_size_for(48) == 24
        assert group_size_for(32) == 32
        assert group_size_for(24) == 24
        assert group_size_for(7) == 7

    @pytest.mark.parametrize("norm", [layer_norm, instance_norm,
                                      lambda t: group_norm(t, 2)])
    def test_gradients(self, norm):
        x = randt((2, 4, 3, 3), seed=17)
        scale = Tensor(np.random.default_rng(18).normal(size=(2, 4, 3, 3)))
        err = gradient_check(lambda: (norm(x) * scale).sum(), [x])
        assert err < 1e-5


class TestPixelShuffle:
    def test_r2_layout(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = pixel_shuffle_up(x, 2).data[0, 0]
        np.testing.assert_array_equal(out, [[1, 2], [3, 4]])

    def test_inverse_rearrangement(self):
        x = randt((2, 8, 3, 5), seed=19)
        y = pixel_shuffle_up(x, 2).data
        # invert by hand
        n, c, h, w = y.shape
        back = y.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
        back = back.reshape(n, c * 4, h // 2, w // 2)
        np.testing.assert_array_equal(back, x.data)

    def test_shapes(self):
        assert pixel_shuffle_up(randt((2, 16, 3, 3)), 4).shape == (2, 1, 12, 12)

    def test_indivisible_channels(self):
        with pytest.raises(ValueError):
            pixel_shuffle_up(randt((1, 6, 2, 2)), 2)

    def test_gradients(self):
        x = randt((1, 8, 2, 3), seed=20)
        scale = Tensor(np.random.default_rng(21).normal(size=(1, 2, 4, 6)))
        err = gradient_check(lambda: (pixel_shuffle_up(x, 2) * scale).sum(), [x])
        assert err < 1e-5


class TestGelu:
    def test_fixed_points(self):
        x = Tensor(np.array([0.0, 10.0, -10.0]))
        out = gelu(x).data
        assert out[0] == 0.0
        np.testing.assert_allclose(out[1], 10.0, atol=1e-6)
        np.testing.assert_allclose(out[2], 0.0, atol=1e-6)

    def test_gradients(self):
        x = randt((32,), seed=22)
        err = gradient_check(lambda: (gelu(x) * x).sum(), [x])
        assert err < 1e-5


class TestOptim:
    def _params(self, seed=23):
        rng = np.random.default_rng(seed)
        from qarv.autodiff import Parameter
        return [Parameter(rng.normal(size=(3, 2)).astype(np.float32), name=f"p{i}")
                for i in range(2)]

    def test_zero_gradients_leave_params(self):
        params = self._params()
        before = [p.data.copy() for p in params]
        opt = Adam(params, lr=1e-2)
        for p in params:
            p.grad = np.zeros_like(p.data)
        opt.step()
        assert opt.step_count == 1
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p.data, b)

    def test_global_norm_halves_gradients(self):
        params = self._params()
        n_entries = params[0].data.size
        g0 = np.full(params[0].shape, 4.0 / np.sqrt(n_entries), dtype=np.float32)
        params[0].grad = g0.copy()
        params[1].grad = np.zeros_like(params[1].data)
        norm = clip_global_norm(params, max_norm=2.0)
        np.testing.assert_allclose(norm, 4.0, rtol=1e-6)
        np.testing.assert_allclose(params[0].grad, g0 / 2.0, rtol=1e-6)

    def test_nan_gradient_aborts(self):
        params = self._params()
        params[0].grad = np.full(params[0].shape, np.nan, dtype=np.float32)
        with pytest.raises(NumericsError):
            clip_global_norm(params)
        opt = Adam(params)
        with pytest.raises(NumericsError):
            opt.step()

    def test_adam_three_step_trajectory(self):
        # hand-rolled scalar recurrence as the oracle
        from qarv.autodiff import Parameter
        p = Parameter(np.array([1.0], dtype=np.float64))
        opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        grads = [0.5, -0.25, 1.5]
        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p.grad = np.array([g])
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            theta -= 0.1 * mh / (np.sqrt(vh) + 1e-8)
            np.testing.assert_allclose(p.data, [theta], rtol=1e-12)
        assert opt.step_count == 3

    def test_ema_update_rule(self):
        params = self._params(seed=24)
        ema = EmaTracker(params, decay=0.9)
        start = [s.copy() for s in ema.shadow]
        for p in params:
            p.data = p.data + 1.0
        ema.update()
        for s0, s, p in zip(start, ema.shadow, params):
            np.testing.assert_allclose(s, 0.9 * s0 + 0.1 * p.data, rtol=1e-6)

    def test_ema_bad_decay(self):
        with pytest.raises(ValueError):
            EmaTracker(self._params(), decay=1.0)


class TestLayers:
    def test_layer_params_discovered_in_order(self):
        rng = np.random.default_rng(0)
        conv = Conv2d(3, 4, 3, rng=rng)
        names = [n for n, _ in conv.named_parameters()]
        assert names == ["weight", "bias"]

    def test_nested_container_discovery(self):
        from qarv.nn import Module
        rng = np.random.default_rng(0)

        class Holder(Module):
            def __init__(self):
                self.stages = [[Linear(2, 2, rng=rng), Linear(2, 2, rng=rng)],
                               [Linear(2, 2, rng=rng)]]
                self.single = Linear(2, 2, rng=rng)

        names = [n for n, _ in Holder().named_parameters()]
        assert "stages.0.1.weight" in names
        assert "stages.1.0.bias" in names
        assert len(names) == 8

    def test_zero_init_layers(self):
        rng = np.random.default_rng(0)
        lin = Linear(4, 6, zero_init=True, rng=rng)
        assert not lin.weight.data.any() and not lin.bias.data.any()

    def test_depthwise_layer_applies(self):
        rng = np.random.default_rng(0)
        dw = DepthwiseConv2d(4, rng=rng)
        x = randt((2, 4, 8, 8), seed=25)
        assert dw(x).shape == x.shape
