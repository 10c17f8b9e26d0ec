"""Network descriptors: shape validation, builders, op/parameter counting and
the line-oriented descriptor text format (grammar in docs/formats.md)."""
import logging
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import pandas as pd

from lpnet.exceptions import DescriptorError, UsageError
from lpnet.models.network import LayerDescriptor, LayerKind, NetDescriptor
from lpnet.models.quant import FixedPointFormat, QuantSpec, RoundingScheme
from lpnet.models.reports import BitAllocation
from lpnet.services.tensorcore import conv_output_size

logger = logging.getLogger(__name__)

DESCRIPTOR_VERSION = 1

# (in, out, kernel, pad, pooling window) per convolution row of the Giga1Net
# table. Paddings reproduce the tabulated input sizes; the last pooling
# collapses 18x18 so the first FC layer sees 128 inputs.
GIGA1NET_CONVS = [
    (3, 16, 1, 0, 2),
    (16, 16, 7, 1, 2),
    (16, 32, 7, 0, 2),
    (32, 64, 5, 1, 0),
    (64, 64, 5, 1, 0),
    (64, 64, 5, 1, 0),
    (64, 128, 3, 1, 0),
    (128, 128, 3, 1, 0),
    (128, 128, 3, 1, 0),
    (128, 128, 3, 1, 0),
    (128, 128, 3, 1, 18),  # global 18x18 pool: 128 x 1 x 1 into fc12
]


def infer_shapes(net: NetDescriptor) -> List[Tuple[int, ...]]:
    """Per-sample output shape of every layer; raises DescriptorError when
    adjacent layers do not compose."""
    shapes = []
    shape = None
    for layer in net.layers:
        if layer.kind is LayerKind.INPUT:
            shape = tuple(layer.shape)
        elif layer.kind is LayerKind.CONV:
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise DescriptorError(
                    f"layer '{layer.name}' expects {layer.in_channels} input channels but receives shape {shape}",
                    field='in')
            out_h = conv_output_size(shape[1], layer.kernel, layer.stride, layer.pad)
            out_w = conv_output_size(shape[2], layer.kernel, layer.stride, layer.pad)
            if out_h < 1 or out_w < 1:
                raise DescriptorError(f"kernel of layer '{layer.name}' does not fit input {shape}", field='k')
            shape = (layer.out_channels, out_h, out_w)
        elif layer.kind is LayerKind.FC:
            flat = 1
            for d in shape:
                flat *= d
            if flat != layer.in_channels:
                raise DescriptorError(
                    f"layer '{layer.name}' expects {layer.in_channels} inputs but receives shape {shape} ({flat})",
                    field='in')
            shape = (layer.out_channels,)
        elif layer.kind is LayerKind.POOL:
            if len(shape) != 3:
                raise DescriptorError(f"pooling layer '{layer.name}' needs a CHW input, got {shape}", field='pool')
            out_h = (shape[1] - layer.pool) // layer.stride + 1
            out_w = (shape[2] - layer.pool) // layer.stride + 1
            if out_h < 1 or out_w < 1:
                raise DescriptorError(f"pooling window of '{layer.name}' exceeds input {shape}", field='pool')
            shape = (shape[0], out_h, out_w)
        elif layer.kind is LayerKind.SOFTMAX:
            if len(shape) != 1:
                raise DescriptorError(f"softmax layer '{layer.name}' needs a flat input, got {shape}")
        shapes.append(shape)
    return shapes


def validate(net: NetDescriptor) -> List[Tuple[int, ...]]:
    shapes = infer_shapes(net)
    if not net.mixed_bits:
        budgets = set()
        for layer in net.layers:
            if layer.kind.low_precision and layer.quant.enabled:
                if layer.kind.weighted:
                    budgets.add(layer.quant.weight_fmt.total_bits)
                else:
                    budgets.add(layer.quant.act_fmt.total_bits)
        if len(budgets) > 1:
            raise DescriptorError(f"bit budgets differ across layers {sorted(budgets)}; set mixed_bits to allow it",
                                  field='mixed_bits')
    return shapes


def layer_input_shapes(net: NetDescriptor) -> Dict[str, Tuple[int, ...]]:
    shapes = validate(net)
    result = {}
    for i, layer in enumerate(net.layers[1:], start=1):
        result[layer.name] = shapes[i - 1]
    return result


def count_ops(net: NetDescriptor) -> int:
    """Arithmetic operations per frame, one multiply-accumulate counted as 2 Ops."""
    shapes = validate(net)
    ops = 0
    for layer, out_shape in zip(net.layers, shapes):
        if layer.kind is LayerKind.CONV:
            ops += 2 * layer.out_channels * layer.in_channels * layer.kernel ** 2 * out_shape[1] * out_shape[2]
        elif layer.kind is LayerKind.FC:
            ops += 2 * layer.in_channels * layer.out_channels
    return ops


def count_params(net: NetDescriptor) -> int:
    validate(net)
    total = 0
    for layer in net.weighted_layers():
        weights = 1
        for d in layer.weight_shape:
            weights *= d
        total += weights + (layer.out_channels if layer.bias else 0)
    return total


def _stage(index, conv, quant, pool_window):
    layers = [conv, LayerDescriptor(name=f"act{index}", kind=LayerKind.ACT, relu=True, quant=quant)]
    if pool_window:
        layers.append(LayerDescriptor(name=f"pool{index}", kind=LayerKind.POOL, pool=pool_window,
                                      stride=pool_window))
    return layers


def build_giga1net(quant: Optional[QuantSpec] = None) -> NetDescriptor:
    quant = quant or QuantSpec()
    layers = [LayerDescriptor(name='data', kind=LayerKind.INPUT, shape=(3, 224, 224))]
    for i, (c_in, c_out, k, pad, pool) in enumerate(GIGA1NET_CONVS, start=1):
        conv = LayerDescriptor(name=f"conv{i}", kind=LayerKind.CONV, in_channels=c_in, out_channels=c_out,
                               kernel=k, stride=1, pad=pad, quant=quant)
        layers.extend(_stage(i, conv, quant, pool))
    layers.append(LayerDescriptor(name='fc12', kind=LayerKind.FC, in_channels=128, out_channels=4096, quant=quant))
    layers.append(LayerDescriptor(name='act12', kind=LayerKind.ACT, relu=True, quant=quant))
    layers.append(LayerDescriptor(name='fc13', kind=LayerKind.FC, in_channels=4096, out_channels=1000, quant=quant))
    layers.append(LayerDescriptor(name='prob', kind=LayerKind.SOFTMAX))
    net = NetDescriptor(layers=tuple(layers))
    validate(net)
    return net


def build_desk_net(quant: Optional[QuantSpec] = None, input_scale: float = 1.0 / 255.0) -> NetDescriptor:
    """Two convolutions and one classifier over 1x16x16 oriented-pattern images."""
    quant = quant or QuantSpec()
    layers = [LayerDescriptor(name='data', kind=LayerKind.INPUT, shape=(1, 16, 16), scale=input_scale)]
    layers.extend(_stage(1, LayerDescriptor(name='conv1', kind=LayerKind.CONV, in_channels=1, out_channels=8,
                                            kernel=3, pad=1, quant=quant), quant, 2))
    layers.extend(_stage(2, LayerDescriptor(name='conv2', kind=LayerKind.CONV, in_channels=8, out_channels=16,
                                            kernel=3, pad=1, quant=quant), quant, 2))
    layers.append(LayerDescriptor(name='fc3', kind=LayerKind.FC, in_channels=256, out_channels=4, quant=quant))
    layers.append(LayerDescriptor(name='prob', kind=LayerKind.SOFTMAX))
    net = NetDescriptor(layers=tuple(layers))
    validate(net)
    return net


def giga1net_table(net: NetDescriptor) -> pd.DataFrame:
    """One row per weighted layer in the column layout of the Giga1Net table."""
    inputs = layer_input_shapes(net)
    rows = []
    for number, layer in enumerate(net.weighted_layers(), start=1):
        i = net.index(layer.name)
        act = net.following_act(layer.name)
        after = net.layers[i + 2] if act is not None and i + 2 < len(net.layers) else None
        conv = layer.kind is LayerKind.CONV
        shape = inputs[layer.name]
        rows.append({
            'layer': f"{number} - {'conv' if conv else 'FC'}",
            'input_maps': layer.in_channels,
            'output_maps': layer.out_channels,
            'kernel': layer.kernel if conv else '-',
            'input_size': f"{shape[1]}x{shape[2]}" if conv else '-',
            'pooling': 'Yes' if after is not None and after.kind is LayerKind.POOL else 'No',
            'relu': 'Yes' if act is not None and act.relu else 'No',
            'stride': layer.stride if conv else '-',
        })
    return pd.DataFrame(rows)


def apply_allocation(net: NetDescriptor, allocation: BitAllocation) -> NetDescriptor:
    """New descriptor carrying the allocated per-layer weight and activation formats."""
    layers = list(net.layers)
    for name, chosen in allocation.layers.items():
        try:
            i = net.index(name)
        except KeyError:
            raise DescriptorError(f"allocation names unknown layer '{name}'") from None
        layers[i] = layers[i].with_quant(weight_fmt=chosen.weight_fmt, act_fmt=chosen.act_fmt)
        act = net.following_act(name)
        if act is not None:
            layers[i + 1] = layers[i + 1].with_quant(weight_fmt=chosen.weight_fmt, act_fmt=chosen.act_fmt)
        logger.debug('layer %s: weights %s, activations %s', name, chosen.weight_fmt, chosen.act_fmt)
    mixed = net.mixed_bits or len({a.weight_fmt.total_bits for a in allocation.layers.values()} |
                                  {a.act_fmt.total_bits for a in allocation.layers.values()}) > 1
    result = replace(net, layers=tuple(layers), mixed_bits=mixed)
    validate(result)
    return result


def with_quantization(net: NetDescriptor, weights: bool = True, activations: bool = True,
                      scheme: Optional[RoundingScheme] = None) -> NetDescriptor:
    layers = []
    for layer in net.layers:
        if layer.kind.low_precision:
            changes = {'enabled': weights if layer.kind.weighted else activations}
            if scheme is not None:
                changes['scheme'] = RoundingScheme.parse(scheme)
            layer = layer.with_quant(**changes)
        layers.append(layer)
    return net.replace_layers(layers)


# --- text format -----------------------------------------------------------

_KEYS = {
    LayerKind.INPUT: {'kind', 'shape', 'scale'},
    LayerKind.CONV: {'kind', 'in', 'out', 'k', 'stride', 'pad', 'bias', 'wfmt', 'afmt', 'bfmt', 'scheme', 'enabled'},
    LayerKind.FC: {'kind', 'in', 'out', 'bias', 'wfmt', 'afmt', 'bfmt', 'scheme', 'enabled'},
    LayerKind.ACT: {'kind', 'relu', 'wfmt', 'afmt', 'bfmt', 'scheme', 'enabled'},
    LayerKind.POOL: {'kind', 'pool', 'stride'},
    LayerKind.SOFTMAX: {'kind'},
}


def _bool_text(value: bool) -> str:
    return 'true' if value else 'false'


def emit_descriptor(net: NetDescriptor) -> str:
    lines = ['# lpnet network descriptor', f"version = {DESCRIPTOR_VERSION}",
             f"mixed_bits = {_bool_text(net.mixed_bits)}"]
    for layer in net.layers:
        lines += ['', f"[{layer.name}]", f"kind = {layer.kind.value}"]
        kind = layer.kind
        if kind is LayerKind.INPUT:
            lines.append(f"shape = {'x'.join(str(d) for d in layer.shape)}")
            lines.append(f"scale = {layer.scale!r}")
        if kind.weighted:
            lines += [f"in = {layer.in_channels}", f"out = {layer.out_channels}"]
        if kind is LayerKind.CONV:
            lines += [f"k = {layer.kernel}", f"stride = {layer.stride}", f"pad = {layer.pad}"]
        if kind.weighted:
            lines.append(f"bias = {_bool_text(layer.bias)}")
        if kind is LayerKind.ACT:
            lines.append(f"relu = {_bool_text(layer.relu)}")
        if kind is LayerKind.POOL:
            lines += [f"pool = {layer.pool}", f"stride = {layer.stride}"]
        if kind.low_precision:
            q = layer.quant
            lines += [f"wfmt = {q.weight_fmt}", f"afmt = {q.act_fmt}"]
            if q.bias_fmt is not None:
                lines.append(f"bfmt = {q.bias_fmt}")
            lines += [f"scheme = {q.scheme}", f"enabled = {_bool_text(q.enabled)}"]
    return '\n'.join(lines) + '\n'


class _Stanza:
    def __init__(self, name, line):
        self.name = name
        self.line = line
        self.values = {}
        self.lines = {}

    def take(self, key, convert, default=None, required=False):
        if key not in self.values:
            if required:
                raise DescriptorError(f"layer '{self.name}' is missing required key", line=self.line, field=key)
            return default
        try:
            return convert(self.values[key])
        except (ValueError, UsageError) as err:
            raise DescriptorError(str(err), line=self.lines[key], field=key) from None


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered not in ('true', 'false'):
        raise ValueError(f"expected true/false, got {text!r}")
    return lowered == 'true'


def _parse_shape(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.lower().split('x'))


def _layer_from_stanza(stanza: _Stanza) -> LayerDescriptor:
    kind_text = stanza.take('kind', str, required=True)
    try:
        kind = LayerKind(kind_text)
    except ValueError:
        raise DescriptorError(f"unknown layer kind {kind_text!r}", line=stanza.lines['kind'], field='kind') from None
    unknown = set(stanza.values) - _KEYS[kind]
    if unknown:
        key = sorted(unknown, key=lambda k: stanza.lines[k])[0]
        raise DescriptorError(f"key not allowed for {kind.value}", line=stanza.lines[key], field=key)
    args = {'name': stanza.name, 'kind': kind}
    if kind is LayerKind.INPUT:
        args['shape'] = stanza.take('shape', _parse_shape, required=True)
        args['scale'] = stanza.take('scale', float, 1.0)
    if kind.weighted:
        args['in_channels'] = stanza.take('in', int, required=True)
        args['out_channels'] = stanza.take('out', int, required=True)
        args['bias'] = stanza.take('bias', _parse_bool, True)
    if kind is LayerKind.CONV:
        args['kernel'] = stanza.take('k', int, required=True)
        args['stride'] = stanza.take('stride', int, 1)
        args['pad'] = stanza.take('pad', int, 0)
    if kind is LayerKind.POOL:
        args['pool'] = stanza.take('pool', int, required=True)
        args['stride'] = stanza.take('stride', int, args['pool'])
    if kind is LayerKind.ACT:
        args['relu'] = stanza.take('relu', _parse_bool, True)
    if kind.low_precision:
        default = QuantSpec()
        args['quant'] = QuantSpec(
            weight_fmt=stanza.take('wfmt', FixedPointFormat.parse, default.weight_fmt),
            act_fmt=stanza.take('afmt', FixedPointFormat.parse, default.act_fmt),
            scheme=stanza.take('scheme', RoundingScheme.parse, default.scheme),
            enabled=stanza.take('enabled', _parse_bool, True),
            bias_fmt=stanza.take('bfmt', FixedPointFormat.parse, None),
        )
    try:
        return LayerDescriptor(**args)
    except DescriptorError as err:
        raise DescriptorError(err.message, line=stanza.line, field=err.field) from None


def parse_descriptor(text: str) -> NetDescriptor:
    header = {}
    stanzas: List[_Stanza] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if line.startswith('['):
            if not line.endswith(']') or len(line) < 3:
                raise DescriptorError(f"malformed stanza header {raw.strip()!r}", line=number)
            stanzas.append(_Stanza(line[1:-1].strip(), number))
            continue
        if '=' not in line:
            raise DescriptorError(f"expected 'key = value', got {raw.strip()!r}", line=number)
        key, value = (part.strip() for part in line.split('=', 1))
        target = stanzas[-1] if stanzas else None
        if target is None:
            if key not in ('version', 'mixed_bits'):
                raise DescriptorError('unknown header key', line=number, field=key)
            header[key] = (value, number)
            continue
        if key in target.values:
            raise DescriptorError('duplicate key', line=number, field=key)
        target.values[key] = value
        target.lines[key] = number

    if 'version' in header and header['version'][0] != str(DESCRIPTOR_VERSION):
        raise DescriptorError(f"unsupported descriptor version {header['version'][0]}",
                              line=header['version'][1], field='version')
    mixed = False
    if 'mixed_bits' in header:
        try:
            mixed = _parse_bool(header['mixed_bits'][0])
        except ValueError as err:
            raise DescriptorError(str(err), line=header['mixed_bits'][1], field='mixed_bits') from None

    layers = [_layer_from_stanza(stanza) for stanza in stanzas]
    lines = {stanza.name: stanza.line for stanza in stanzas}
    try:
        net = NetDescriptor(layers=tuple(layers), mixed_bits=mixed)
        validate(net)
    except DescriptorError as err:
        line = None
        for name, number in lines.items():
            if f"'{name}'" in str(err):
                line = number
                break
        if line is None or err.line is not None:
            raise
        raise DescriptorError(err.message, line=line, field=err.field) from None
    return net


def load_descriptor(path) -> NetDescriptor:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_descriptor(f.read())


def save_descriptor(net: NetDescriptor, path) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(emit_descriptor(net))


def any_quantized(net: NetDescriptor) -> bool:
    return any(layer.kind.low_precision and layer.quant.enabled for layer in net.layers)


def with_scheme(net: NetDescriptor, scheme: RoundingScheme) -> NetDescriptor:
    scheme = RoundingScheme.parse(scheme)
    return net.replace_layers([layer.with_quant(scheme=scheme) if layer.kind.low_precision else layer
                               for layer in net.layers])
