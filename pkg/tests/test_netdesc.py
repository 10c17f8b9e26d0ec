import os
import tempfile
import unittest

from lpnet.exceptions import DescriptorError
from lpnet.models.network import LayerDescriptor, LayerKind, NetDescriptor
from lpnet.models.quant import FixedPointFormat, QuantSpec, RoundingScheme
from lpnet.models.reports import BitAllocation, LayerAllocation
from lpnet.services.netdesc import (apply_allocation, build_desk_net, build_giga1net, count_ops, count_params,
                                    emit_descriptor, giga1net_table, infer_shapes, load_descriptor,
                                    parse_descriptor, save_descriptor, validate, with_quantization, with_scheme)

GIGA1NET_OPS = 1050107904
GIGA1NET_PARAMS = 5583512
TEST_DATA = os.path.join(os.path.dirname(__file__), 'test_data')


def data(shape, scale=1.0):
    return LayerDescriptor(name='data', kind=LayerKind.INPUT, shape=shape, scale=scale)


def single_fc_net():
    return NetDescriptor(layers=(data((128,)), LayerDescriptor(name='fc', kind=LayerKind.FC, in_channels=128,
                                                                 out_channels=1000)))


class TestGiga1Net(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.net = build_giga1net()
        cls.table = giga1net_table(cls.net)

    def test_table_rows(self):
        self.assertEqual(len(self.table), 13)
        row4 = self.table.iloc[3]
        self.assertEqual((row4['input_maps'], row4['output_maps'], row4['kernel'], row4['input_size'],
                          row4['pooling']), (32, 64, 5, '24x24', 'No'))
        row13 = self.table.iloc[12]
        self.assertEqual((row13['layer'], row13['input_maps'], row13['output_maps']), ('13 - FC', 4096, 1000))
        self.assertEqual(list(self.table['input_size'][:11]),
                         ['224x224', '112x112', '54x54', '24x24', '22x22', '20x20', '18x18', '18x18', '18x18',
                          '18x18', '18x18'])
        self.assertEqual(list(self.table['pooling'][:3]), ['Yes', 'Yes', 'Yes'])
        self.assertTrue((self.table['relu'][:12] == 'Yes').all())
        self.assertEqual(self.table['relu'].iloc[12], 'No')

    def test_counts(self):
        self.assertEqual(count_ops(self.net), GIGA1NET_OPS)
        self.assertLess(abs(count_ops(self.net) - 1e9), 0.15e9)
        self.assertEqual(count_params(self.net), GIGA1NET_PARAMS)

    def test_shapes_compose(self):
        shapes = infer_shapes(self.net)
        self.assertEqual(shapes[-1], (1000,))

    def test_round_trip(self):
        text = emit_descriptor(self.net)
        self.assertEqual(parse_descriptor(text), self.net)
        self.assertEqual(emit_descriptor(parse_descriptor(text)), text)


class TestCounters(unittest.TestCase):

    def test_single_fc(self):
        net = single_fc_net()
        self.assertEqual(count_ops(net), 256000)
        self.assertEqual(count_params(net), 129000)

    def test_pointwise_conv(self):
        net = NetDescriptor(layers=(data((3, 224, 224)), LayerDescriptor(
            name='conv', kind=LayerKind.CONV, in_channels=3, out_channels=16, kernel=1)))
        expected = 0
        for _ in range(16 * 224 * 224):
            expected += 2 * 3
        self.assertEqual(count_ops(net), expected)
        self.assertEqual(count_ops(net), 4816896)
        self.assertEqual(count_params(net), 64)


class TestDescriptorText(unittest.TestCase):

    def test_q_format_field(self):
        net = parse_descriptor("""
[data]
kind = Input
shape = 8

[fc]
kind = LPInnerProduct
in = 8
out = 2
wfmt = Q2.14
afmt = Q14.2
scheme = STOACHASTIC
""")
        quant = net.layer('fc').quant
        self.assertEqual((quant.weight_fmt.bd, quant.weight_fmt.ad), (2, 14))
        self.assertEqual(quant.act_fmt, FixedPointFormat(14, 2))
        self.assertIs(quant.scheme, RoundingScheme.STOCHASTIC)

    def test_channel_mismatch_names_line(self):
        text = emit_descriptor(build_desk_net()).replace('in = 8\n', 'in = 9\n')
        with self.assertRaises(DescriptorError) as ctx:
            parse_descriptor(text)
        self.assertIsNotNone(ctx.exception.line)
        self.assertEqual(ctx.exception.field, 'in')

    def test_errors_carry_line_and_field(self):
        cases = [
            ('[data]\nkind = Input\nshape = 4\n\n[x]\nkind = Dropout\n', 6, 'kind'),
            ('[data]\nkind = Input\nshape = 4\n\n[fc]\nkind = LPInnerProduct\nin = 4\nout = 2\nwfmt = Q2.x\n',
             9, 'wfmt'),
            ('[data]\nkind = Input\nshape = 4\nbogus = 1\n', 4, 'bogus'),
            ('version = 2\n[data]\nkind = Input\nshape = 4\n', 1, 'version'),
        ]
        for text, line, field in cases:
            with self.assertRaises(DescriptorError) as ctx:
                parse_descriptor(text)
            self.assertEqual((ctx.exception.line, ctx.exception.field), (line, field), text)
            self.assertIn(f"line {line}", str(ctx.exception))

    def test_mixed_bits_needs_flag(self):
        net = build_desk_net()
        wide = [layer.with_quant(weight_fmt=FixedPointFormat(4, 20)) if layer.name == 'conv1' else layer
                for layer in net.layers]
        with self.assertRaises(DescriptorError):
            validate(net.replace_layers(wide))

    def test_file_round_trip(self):
        net = build_desk_net(QuantSpec(scheme=RoundingScheme.STOCHASTIC))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'desk.net')
            save_descriptor(net, path)
            self.assertEqual(load_descriptor(path), net)

    def test_hand_written_fixture(self):
        net = load_descriptor(os.path.join(TEST_DATA, 'desk.net'))
        reference = build_desk_net()
        self.assertEqual([layer.name for layer in net.layers], [layer.name for layer in reference.layers])
        self.assertAlmostEqual(net.layer('data').scale, 1.0 / 255.0)
        self.assertIs(net.layer('act2').quant.scheme, RoundingScheme.STOCHASTIC)
        self.assertEqual(net.layer('pool1').stride, 2)
        for name in ('conv1', 'act1', 'pool1', 'conv2', 'fc3', 'prob'):
            self.assertEqual(net.layer(name), reference.layer(name))
        self.assertEqual(count_ops(net), count_ops(reference))


class TestTransforms(unittest.TestCase):

    def test_apply_allocation(self):
        net = build_desk_net()
        allocation = BitAllocation(layers={
            'conv1': LayerAllocation(FixedPointFormat(1, 15), FixedPointFormat(4, 12)),
            'fc3': LayerAllocation(FixedPointFormat(3, 13), FixedPointFormat(9, 7)),
        }, total_bits=16, loss_threshold=0.01)
        result = apply_allocation(net, allocation)
        self.assertEqual(result.layer('conv1').quant.weight_fmt, FixedPointFormat(1, 15))
        self.assertEqual(result.layer('act1').quant.act_fmt, FixedPointFormat(4, 12))
        self.assertEqual(result.layer('conv2').quant.weight_fmt, FixedPointFormat(2, 14))
        self.assertEqual(result.layer('fc3').quant.act_fmt, FixedPointFormat(9, 7))
        self.assertFalse(result.mixed_bits)

    def test_unknown_layer_in_allocation(self):
        allocation = BitAllocation.uniform(['nope'], FixedPointFormat(1, 15), FixedPointFormat(8, 8))
        with self.assertRaises(DescriptorError):
            apply_allocation(build_desk_net(), allocation)

    def test_toggles(self):
        net = with_quantization(build_desk_net(), weights=True, activations=False)
        self.assertTrue(net.layer('conv1').quant.enabled)
        self.assertFalse(net.layer('act1').quant.enabled)
        stoch = with_scheme(net, 'stoch')
        self.assertTrue(all(layer.quant.scheme is RoundingScheme.STOCHASTIC
                            for layer in stoch.layers if layer.kind.low_precision))
        self.assertFalse(stoch.layer('act1').quant.enabled)

    def test_descriptor_validation(self):
        with self.assertRaises(DescriptorError):
            NetDescriptor(layers=(LayerDescriptor(name='fc', kind=LayerKind.FC, in_channels=1, out_channels=1),))
        with self.assertRaises(DescriptorError):
            NetDescriptor(layers=(data((1,)), data((1,))))
        with self.assertRaises(DescriptorError):
            data((1,), scale=0.0)


if __name__ == '__main__':
    unittest.main()
