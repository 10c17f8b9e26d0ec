import unittest

import numpy as np

from lpnet.exceptions import DataError, ShapeMismatchError, StaleCacheError, UsageError
from lpnet.models.model import DualCopyParam, LayerState, Model
from lpnet.models.network import LayerDescriptor, LayerKind, NetDescriptor
from lpnet.models.quant import FixedPointFormat, QuantSpec, RoundingScheme
from lpnet.services.fixedpoint import on_grid
from lpnet.services.inference import (ForwardMode, accuracy, check_input_range, forward,
                                      lp_act_forward, lp_conv_forward, lp_fc_forward, max_pool_forward, predict,
                                      requantize, scale_input, softmax, sparse_conv_forward, to_sparse)
from lpnet.services.netdesc import build_desk_net, with_quantization
from lpnet.services.training import build_model

Q = FixedPointFormat.parse
DISABLED = QuantSpec(enabled=False)


def conv_state(weights, bias=None, pad=0, stride=1, quant=None):
    weights = np.asarray(weights, dtype=np.float32)
    out_channels, in_channels, k, _ = weights.shape
    desc = LayerDescriptor(name='conv', kind=LayerKind.CONV, in_channels=in_channels, out_channels=out_channels,
                           kernel=k, pad=pad, stride=stride, bias=bias is not None, quant=quant or QuantSpec())
    state = LayerState(desc=desc, weight=DualCopyParam(weights),
                       bias=None if bias is None else DualCopyParam(np.asarray(bias, dtype=np.float32)))
    return state.refresh()


def fc_state(weights, bias=None, quant=None):
    weights = np.asarray(weights, dtype=np.float32)
    desc = LayerDescriptor(name='fc', kind=LayerKind.FC, in_channels=weights.shape[1], out_channels=weights.shape[0],
                           bias=bias is not None, quant=quant or QuantSpec())
    state = LayerState(desc=desc, weight=DualCopyParam(weights),
                       bias=None if bias is None else DualCopyParam(np.asarray(bias, dtype=np.float32)))
    return state.refresh()


def reference_conv(x, w, b, stride, pad):
    n, c, h, width = x.shape
    o, _, k, _ = w.shape
    padded = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    for i in range(n):
        for oc in range(o):
            for y in range(out_h):
                for xx in range(out_w):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += padded[i, ic, y * stride + ky, xx * stride + kx] * float(w[oc, ic, ky, kx])
                    out[i, oc, y, xx] = acc
    return out.astype(np.float32)


class TestInputScaling(unittest.TestCase):

    def test_scale_for_pixels(self):
        s = 1.0 / 255.0
        pixels = np.linspace(0, 255, 50, dtype=np.float32)
        self.assertIsNone(check_input_range(scale_input(pixels, s), Q('Q8.8')))

    def test_identity_and_errors(self):
        t = np.arange(6, dtype=np.float32)
        np.testing.assert_array_equal(scale_input(t, 1.0), t)
        for bad in (0.0, -1.0):
            with self.assertRaises(UsageError):
                scale_input(t, bad)

    def test_range_violation_is_reported(self):
        net = build_desk_net(input_scale=1.0)
        model = build_model(net, seed=0)
        x = np.full((1, 1, 16, 16), 255.0, dtype=np.float32)
        with self.assertLogs('lpnet.services.inference', level='WARNING'):
            result = forward(net, model, x)
        self.assertEqual(len(result.warnings), 1)
        self.assertIn('Q8.8', result.warnings[0])


class TestConv(unittest.TestCase):

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 4, 4)).astype(np.float32)
        out = lp_conv_forward(x, conv_state(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out, x)

    def test_ramp_against_nested_loops(self):
        x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
        w = np.array([[[[0.5, -0.25, 0.125], [1.0, 0.0, -1.0], [0.75, 0.5, -0.5]]]])
        state = conv_state(w, bias=[0.25])
        for pad, stride in [(0, 1), (1, 1), (1, 2)]:
            state.desc = LayerDescriptor(name='conv', kind=LayerKind.CONV, in_channels=1, out_channels=1, kernel=3,
                                         pad=pad, stride=stride)
            np.testing.assert_array_equal(lp_conv_forward(x, state), reference_conv(x, w, [0.25], stride, pad))

    def test_disabled_quantization_matches_reference(self):
        rng = np.random.default_rng(1)
        x = rng.integers(-4, 5, (2, 3, 6, 6)).astype(np.float32)
        w = rng.integers(-3, 4, (4, 3, 3, 3)).astype(np.float32) / 8
        b = rng.integers(-3, 4, 4).astype(np.float32) / 4
        state = conv_state(w, b, pad=1, quant=DISABLED)
        np.testing.assert_array_equal(lp_conv_forward(x, state), reference_conv(x, w, b, 1, 1))

    def test_quantized_weights_are_used(self):
        state = conv_state(np.full((1, 1, 1, 1), 0.3), quant=QuantSpec(weight_fmt=Q('Q1.3')))
        out = lp_conv_forward(np.ones((1, 1, 2, 2), dtype=np.float32), state)
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 0.25, dtype=np.float32))
        np.testing.assert_array_equal(lp_conv_forward(np.ones((1, 1, 2, 2), dtype=np.float32), state,
                                                      quantized=False),
                                      np.full((1, 1, 2, 2), 0.3, dtype=np.float32))

    def test_stale_cache(self):
        state = conv_state(np.ones((1, 1, 1, 1)))
        state.weight.apply_update(np.full((1, 1, 1, 1), 0.5))
        with self.assertRaises(StaleCacheError):
            lp_conv_forward(np.ones((1, 1, 2, 2), dtype=np.float32), state)

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            lp_conv_forward(np.ones((1, 2, 3, 3), dtype=np.float32), conv_state(np.ones((1, 1, 1, 1))))


class TestFcAndActivations(unittest.TestCase):

    def test_identity_fc(self):
        x = np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_array_equal(lp_fc_forward(x, fc_state(np.eye(4))), x)

    def test_fc_against_dot_products(self):
        rng = np.random.default_rng(3)
        w = rng.integers(-16, 17, (4, 8)) / 16
        x = rng.integers(-8, 9, (5, 8)).astype(np.float32)
        out = lp_fc_forward(x, fc_state(w, bias=np.zeros(4)))
        expected = np.array([[sum(float(x[i, k]) * float(w[j, k]) for k in range(8)) for j in range(4)]
                             for i in range(5)], dtype=np.float32)
        np.testing.assert_array_equal(out, expected)
        disabled = lp_fc_forward(x, fc_state(w, quant=DISABLED))
        np.testing.assert_allclose(disabled, x @ w.T.astype(np.float32), rtol=1e-6)

    def test_act_examples(self):
        fmt = Q('Q1.3')
        np.testing.assert_array_equal(lp_act_forward(-np.arange(1, 5, dtype=np.float32), fmt), np.zeros(4))
        self.assertEqual(lp_act_forward(np.array([0.3]), fmt)[0], 0.25)
        tiny = np.array([0.06, -0.06, 0.0624, -0.01])
        np.testing.assert_array_equal(lp_act_forward(tiny, fmt), np.zeros(4))

    def test_pool_and_softmax(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(max_pool_forward(x, 2, 2)[0, 0], [[5, 7], [13, 15]])
        p = softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]))
        np.testing.assert_allclose(p.sum(axis=1), [1.0, 1.0])
        np.testing.assert_allclose(p[1], [1 / 3] * 3)


class TestZeroSkipping(unittest.TestCase):

    def test_all_zero_input_is_bias_only(self):
        state = conv_state(np.ones((2, 3, 3, 3)) / 4, bias=[0.5, -0.25], pad=1)
        out, stats = sparse_conv_forward(to_sparse(np.zeros((1, 3, 4, 4), dtype=np.float32)), state)
        np.testing.assert_array_equal(out[0, 0], np.full((4, 4), 0.5))
        np.testing.assert_array_equal(out[0, 1], np.full((4, 4), -0.25))
        self.assertEqual(stats.skipped_macs, stats.total_macs)
        self.assertGreater(stats.total_macs, 0)

    def test_dense_input_skips_nothing(self):
        rng = np.random.default_rng(4)
        x = rng.integers(1, 5, (2, 2, 5, 5)).astype(np.float32)
        state = conv_state(rng.integers(-4, 5, (3, 2, 3, 3)) / 4, pad=1, stride=2)
        out, stats = sparse_conv_forward(to_sparse(x), state)
        self.assertEqual(stats.skipped_macs, 0)
        np.testing.assert_array_equal(out, lp_conv_forward(x, state))

    def test_sparse_map_round_trip(self):
        x = np.zeros((1, 2, 3, 3), dtype=np.float32)
        x[0, 1, 2, 0] = 1.5
        x[0, 0, 0, 1] = -2.0
        sparse = to_sparse(x)
        self.assertEqual(len(sparse), 2)
        self.assertEqual(list(sparse.channel), [0, 1])
        np.testing.assert_array_equal(sparse.to_dense(), x)

    def test_randomized_equivalence(self):
        rng = np.random.default_rng(5)
        fmt = Q('Q8.8')
        for trial in range(1000):
            c_in, c_out = rng.integers(1, 4, 2)
            k = int(rng.integers(1, 4))
            h, w = rng.integers(k, 9, 2)
            stride = int(rng.integers(1, 3))
            full = trial % 2 == 0
            pad = k - 1 if full else int(rng.integers(0, k))
            target = rng.uniform(0.0, 0.95)
            x = np.ldexp(rng.integers(-512, 512, (int(rng.integers(1, 3)), c_in, h, w)), -fmt.ad)
            x[rng.random(x.shape) < target] = 0.0
            x = x.astype(np.float32)
            weights = np.ldexp(rng.integers(-512, 512, (c_out, c_in, k, k)), -8)
            state = conv_state(weights, bias=np.ldexp(rng.integers(-64, 64, c_out), -6), pad=pad, stride=stride)
            dense = lp_conv_forward(x, state)
            sparse, stats = sparse_conv_forward(to_sparse(x), state)
            np.testing.assert_array_equal(sparse, dense)
            if full and stride == 1:
                # every input position reaches k*k outputs, so the skipped share is the zero share
                self.assertAlmostEqual(stats.skipped_fraction, np.mean(x == 0), places=12)

    def test_skipped_fraction_tracks_sparsity(self):
        rng = np.random.default_rng(6)
        x = rng.integers(1, 100, (1, 4, 32, 32)).astype(np.float32) / 16
        x[rng.random(x.shape) < 0.7] = 0.0
        state = conv_state(rng.integers(-8, 8, (4, 4, 3, 3)) / 8, pad=1)
        _, stats = sparse_conv_forward(to_sparse(x), state)
        self.assertAlmostEqual(stats.skipped_fraction, 0.7, delta=0.02)
        self.assertAlmostEqual(stats.skipped_fraction, np.mean(x == 0), delta=0.01)


class TestForward(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.net = build_desk_net()
        cls.model = build_model(cls.net, seed=3)
        cls.x = np.random.default_rng(7).uniform(0, 255, (5, 1, 16, 16)).astype(np.float32)

    def test_logits_shape_and_probabilities(self):
        result = forward(self.net, self.model, self.x)
        self.assertEqual(result.logits.shape, (5, 4))
        np.testing.assert_allclose(result.output.sum(axis=1), np.ones(5), rtol=1e-5)

    def test_quantized_activations_on_grid(self):
        result = forward(self.net, self.model, self.x)
        for layer in self.net.act_layers():
            self.assertTrue(np.all(on_grid(result.activations[layer.name], layer.quant.act_fmt)), layer.name)

    def test_float_mode_equals_disabled_quantized_mode(self):
        net = with_quantization(self.net, weights=False, activations=False)
        model = requantize(self.model, net)
        a = forward(net, model, self.x, ForwardMode.FLOAT).logits
        b = forward(net, model, self.x, ForwardMode.QUANTIZED).logits
        np.testing.assert_array_equal(a, b)

    def test_stochastic_needs_seed_and_is_reproducible(self):
        net = NetDescriptor(layers=tuple(
            layer.with_quant(scheme=RoundingScheme.STOCHASTIC) if layer.kind.low_precision else layer
            for layer in self.net.layers))
        model = requantize(self.model, net, seed=1)
        with self.assertRaises(UsageError):
            forward(net, model, self.x)
        a = forward(net, model, self.x, seed=11, step=2).logits
        b = forward(net, model, self.x, seed=11, step=2).logits
        np.testing.assert_array_equal(a, b)

    def test_input_shape_and_model_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            forward(self.net, self.model, np.zeros((1, 1, 8, 8), dtype=np.float32))
        other = Model(net=self.net, layers={k: v for k, v in self.model.layers.items() if k != 'fc3'})
        with self.assertRaises(DataError):
            forward(self.net, other, self.x)

    def test_predict_and_accuracy(self):
        labels = predict(self.net, self.model, self.x, batch_size=2)
        self.assertEqual(labels.shape, (5,))
        self.assertEqual(accuracy(self.net, self.model, self.x, labels), 1.0)
        with self.assertRaises(DataError):
            accuracy(self.net, self.model, self.x[:0], labels[:0])


if __name__ == '__main__':
    unittest.main()
