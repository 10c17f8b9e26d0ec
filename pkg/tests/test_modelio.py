import os
import struct
import tempfile
import unittest
import zlib

import numpy as np

from lpnet.exceptions import ChecksumError, ContainerError, OffGridError
from lpnet.models.model import DualCopyParam, LayerState, Model
from lpnet.models.network import LayerDescriptor, LayerKind, NetDescriptor
from lpnet.models.quant import FixedPointFormat, QuantSpec
from lpnet.models.reports import BitAllocation
from lpnet.services.inference import requantize
from lpnet.services.modelio import (dumps_export, dumps_model, export_accelerator, load_model, loads_export,
                                    loads_model, models_identical, read_accelerator, save_model, verify_export)
from lpnet.services.netdesc import build_desk_net, with_quantization
from lpnet.services.training import build_model


def fc_model(weights, bias=None, quant=None):
    weights = np.asarray(weights, dtype=np.float32)
    out_channels, in_channels = weights.shape
    desc = LayerDescriptor(name='fc', kind=LayerKind.FC, in_channels=in_channels, out_channels=out_channels,
                           bias=bias is not None, quant=quant or QuantSpec())
    net = NetDescriptor(layers=(LayerDescriptor(name='data', kind=LayerKind.INPUT, shape=(in_channels,)), desc))
    state = LayerState(desc=desc, weight=DualCopyParam(weights),
                       bias=None if bias is None else DualCopyParam(np.asarray(bias, dtype=np.float32)))
    return Model(net=net, layers={'fc': state.refresh()})


class TestContainer(unittest.TestCase):

    def test_round_trip(self):
        model = build_model(build_desk_net(), seed=7)
        loaded = loads_model(dumps_model(model))
        self.assertTrue(models_identical(model, loaded))
        self.assertEqual(loaded.provenance, {'init': 'glorot-uniform', 'seed': 7})
        self.assertEqual(loaded.net, model.net)

    def test_file_round_trip(self):
        model = build_model(build_desk_net(), seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'desk.lpm')
            save_model(model, path)
            self.assertTrue(models_identical(model, load_model(path)))

    def test_bit_patterns_survive(self):
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2 ** 32, 10 ** 4, dtype=np.uint64).astype(np.uint32).view(np.float32)
        bits = np.where(np.isfinite(bits), bits, np.float32(0.5)).reshape(100, 100)
        bits[0, :3] = [np.float32(-0.0), np.float32(1e-45), np.finfo(np.float32).max]
        model = fc_model(bits, quant=QuantSpec(enabled=False))
        loaded = loads_model(dumps_model(model))
        self.assertEqual(loaded['fc'].weights.tobytes(), bits.tobytes())
        self.assertTrue(models_identical(model, loaded))

    def test_truncated_container(self):
        data = dumps_model(build_model(build_desk_net()))
        for cut in (10, 40, len(data) - 3):
            with self.assertRaises(ChecksumError):
                loads_model(data[:cut])

    def test_corrupt_blob(self):
        data = bytearray(dumps_model(build_model(build_desk_net())))
        data[-1] ^= 0xFF
        with self.assertRaises(ChecksumError):
            loads_model(bytes(data))

    def test_wrong_magic_and_version(self):
        data = dumps_model(build_model(build_desk_net()))
        with self.assertRaises(ContainerError):
            loads_model(b'XXXX' + data[4:])
        with self.assertRaises(ContainerError):
            loads_model(data[:4] + struct.pack('<H', 9) + data[6:])

    def test_stale_copies_are_not_stored(self):
        model = build_model(build_desk_net())
        model['conv2'].weight.apply_update(np.full(model['conv2'].weights.shape, 1e-3))
        names = set(loads_model(dumps_model(model)).params())
        self.assertIn('conv2.weight', names)
        loaded = loads_model(dumps_model(model))
        self.assertTrue(loaded['conv2'].weight.stale)
        self.assertFalse(loaded['conv1'].weight.stale)
        np.testing.assert_array_equal(loaded['conv2'].weights, model['conv2'].weights)


class TestExport(unittest.TestCase):

    def test_codes_of_smallest_steps(self):
        fmt = FixedPointFormat(1, 15)
        model = fc_model([[0.0, fmt.step(), -fmt.step()]], bias=[0.0], quant=QuantSpec(weight_fmt=fmt))
        layer, = loads_export(dumps_export(model))
        np.testing.assert_array_equal(layer.weight_codes, [[0, 1, -1]])
        np.testing.assert_array_equal(layer.bias_codes, [0])
        self.assertEqual(layer.weight_fmt, fmt)

    def test_golden_bytes(self):
        model = fc_model([[0.5, -0.25]], bias=[1.0])
        body = struct.pack('<4sHHI', b'LPAX', 1, 0, 1)
        body += struct.pack('<H', 2) + b'fc'
        body += struct.pack('<BBHHHHH6B', 2, 1, 2, 1, 1, 1, 0, 2, 14, 8, 8, 2, 14)
        body += struct.pack('<I', 2) + struct.pack('<2h', 8192, -4096)
        body += struct.pack('<I', 1) + struct.pack('<h', 16384)
        self.assertEqual(dumps_export(model), body + struct.pack('<I', zlib.crc32(body)))

    def test_round_trip_and_verify(self):
        model = build_model(build_desk_net(), seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'desk.lpx')
            export_accelerator(model, None, path)
            layers = read_accelerator(path)
        self.assertEqual([layer.name for layer in layers], ['conv1', 'conv2', 'fc3'])
        self.assertEqual(layers[0].weight_codes.shape, (8, 1, 3, 3))
        verify_export(model, layers)
        with self.assertRaises(ContainerError):
            verify_export(build_model(build_desk_net(), seed=3), layers)

    def test_float_model_is_off_grid(self):
        net = with_quantization(build_desk_net(), weights=False, activations=False)
        with self.assertRaises(OffGridError):
            dumps_export(build_model(net, seed=0))

    def test_only_16_bit_formats(self):
        model = build_model(build_desk_net())
        narrow = BitAllocation.uniform(['conv1'], FixedPointFormat(4, 4), FixedPointFormat(4, 4))
        with self.assertRaises(ContainerError):
            dumps_export(model, narrow)

    def test_tampered_export(self):
        data = bytearray(dumps_export(build_model(build_desk_net())))
        data[20] ^= 0x01
        with self.assertRaises(ChecksumError):
            loads_export(bytes(data))
        with self.assertRaises(ChecksumError):
            loads_export(bytes(data[:6]))

    def test_export_is_about_half_the_float_container(self):
        net = build_desk_net()
        trained = build_model(net, seed=4)
        float_net = with_quantization(net, weights=False, activations=False)
        float_model = requantize(trained, float_net)
        ratio = len(dumps_export(trained)) / len(dumps_model(float_model))
        self.assertLessEqual(ratio, 0.55)


if __name__ == '__main__':
    unittest.main()
