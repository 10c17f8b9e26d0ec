"""Forward pass of low-precision networks.

LPConvolution/LPInnerProduct run with quantized weights and biases and return
unquantized sums; LPAct quantizes its input and then applies ReLU. Sums
accumulate in float64 so grid-valued operands produce exact results, which is
what makes the zero-skipping path bit-identical to the dense one.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lpnet.exceptions import DataError, ShapeMismatchError, UsageError
from lpnet.models.model import LayerState, Model
from lpnet.models.network import LayerKind, NetDescriptor
from lpnet.models.quant import FixedPointFormat, RoundingScheme
from lpnet.services.fixedpoint import quantize_tensor
from lpnet.services.tensorcore import conv_output_size, im2col, matmul, max_abs, relu, scale
from lpnet.utils.helpers import STREAM_ACT, STREAM_BIAS, STREAM_EVAL, STREAM_WEIGHT, derive_rng

logger = logging.getLogger(__name__)


class ForwardMode(Enum):
    FLOAT = 'float'
    QUANTIZED = 'quantized'


@dataclass
class ForwardResult:
    mode: ForwardMode
    inputs: Dict[str, np.ndarray]
    activations: Dict[str, np.ndarray]
    logits: np.ndarray
    warnings: List[str] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return next(reversed(self.activations.values()))

    @property
    def has_cache(self) -> bool:
        return bool(self.inputs)


@dataclass
class SparseFeatureMap:
    """Coordinate list of the nonzero activations of an NCHW tensor, sorted by
    (sample, channel, row, col)."""
    shape: Tuple[int, int, int, int]
    batch: np.ndarray
    channel: np.ndarray
    row: np.ndarray
    col: np.ndarray
    value: np.ndarray

    def __len__(self):
        return int(self.value.size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.shape, dtype=self.value.dtype)
        dense[self.batch, self.channel, self.row, self.col] = self.value
        return dense


@dataclass(frozen=True)
class SkipStats:
    total_macs: int
    skipped_macs: int

    @property
    def skipped_fraction(self) -> float:
        return self.skipped_macs / self.total_macs if self.total_macs else 0.0


def scale_input(t: np.ndarray, s: float) -> np.ndarray:
    if not s > 0:
        raise UsageError(f"input scale must be positive, got {s}")
    return scale(t, s)


def check_input_range(t: np.ndarray, fmt: FixedPointFormat) -> Optional[str]:
    peak = max_abs(t)
    if peak > fmt.max_value():
        return f"scaled input reaches {peak:g}, beyond the {fmt} maximum {fmt.max_value():g}; activations will saturate"
    return None


def _dense_conv(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray], stride: int, pad: int) -> np.ndarray:
    n = x.shape[0]
    out_channels, _, k, _ = weights.shape
    cols, (out_h, out_w) = im2col(x, k, stride, pad)
    out = matmul(cols, weights.reshape(out_channels, -1).T, bias)
    return out.reshape(n, out_h, out_w, out_channels).transpose(0, 3, 1, 2).astype(np.result_type(x, weights))


def lp_conv_forward(x: np.ndarray, layer: LayerState, quantized: bool = True) -> np.ndarray:
    desc = layer.desc
    if desc.kind is not LayerKind.CONV:
        raise DataError(f"layer '{desc.name}' is not an LPConvolution")
    if x.ndim != 4 or x.shape[1] != desc.in_channels:
        raise ShapeMismatchError(x.shape, (None, desc.in_channels, None, None), f"input of '{desc.name}'")
    weights, bias = layer.forward_params(quantized)
    return _dense_conv(x, weights, bias, desc.stride, desc.pad)


def lp_fc_forward(x: np.ndarray, layer: LayerState, quantized: bool = True) -> np.ndarray:
    desc = layer.desc
    if desc.kind is not LayerKind.FC:
        raise DataError(f"layer '{desc.name}' is not an LPInnerProduct")
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != desc.in_channels:
        raise ShapeMismatchError(flat.shape, (flat.shape[0], desc.in_channels), f"input of '{desc.name}'")
    weights, bias = layer.forward_params(quantized)
    return matmul(flat, weights.T, bias).astype(np.result_type(x, weights), copy=False)


def lp_act_forward(x: np.ndarray, fmt: FixedPointFormat, scheme: RoundingScheme = RoundingScheme.DETERMINISTIC,
                   rng: Optional[np.random.Generator] = None, apply_relu: bool = True) -> np.ndarray:
    """Quantize, then ReLU: values within half a step of zero land exactly on 0."""
    quantized = quantize_tensor(x, fmt, scheme, rng)
    return relu(quantized) if apply_relu else quantized


def max_pool_forward(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    windows = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    return windows.max(axis=(4, 5))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(logits.dtype)


def to_sparse(t: np.ndarray) -> SparseFeatureMap:
    t = np.asarray(t)
    if t.ndim != 4:
        raise DataError(f"sparse feature maps need an NCHW tensor, got shape {t.shape}")
    batch, channel, row, col = np.nonzero(t)
    return SparseFeatureMap(shape=tuple(t.shape), batch=batch, channel=channel, row=row, col=col,
                            value=t[batch, channel, row, col])


def _target_positions(coords: np.ndarray, offset: int, pad: int, stride: int, out_size: int):
    shifted = coords + pad - offset
    valid = (shifted >= 0) & (shifted % stride == 0) & (shifted // stride < out_size)
    return valid, shifted // stride


def sparse_conv_forward(sparse: SparseFeatureMap, layer: LayerState,
                        quantized: bool = True) -> Tuple[np.ndarray, SkipStats]:
    """Input-stationary convolution touching only nonzero activations.

    Each nonzero input scatters value * W[:, c, ky, kx] into every output it
    reaches. Multiply-accumulates are counted over real (unpadded) input
    positions, so a fully dense input skips nothing.
    """
    desc = layer.desc
    if desc.kind is not LayerKind.CONV:
        raise DataError(f"layer '{desc.name}' is not an LPConvolution")
    n, c, h, w = sparse.shape
    if c != desc.in_channels:
        raise ShapeMismatchError(sparse.shape, (n, desc.in_channels, h, w), f"input of '{desc.name}'")
    weights, bias = layer.forward_params(quantized)
    k, stride, pad = desc.kernel, desc.stride, desc.pad
    out_h = conv_output_size(h, k, stride, pad)
    out_w = conv_output_size(w, k, stride, pad)
    out_channels = desc.out_channels
    acc = np.zeros((n, out_h, out_w, out_channels), dtype=np.float64)
    w64 = weights.astype(np.float64)
    values = sparse.value.astype(np.float64)

    performed = 0
    reachable = 0
    all_rows, all_cols = np.arange(h), np.arange(w)
    for ky in range(k):
        row_ok, oy = _target_positions(sparse.row, ky, pad, stride, out_h)
        dense_rows = np.count_nonzero(_target_positions(all_rows, ky, pad, stride, out_h)[0])
        for kx in range(k):
            col_ok, ox = _target_positions(sparse.col, kx, pad, stride, out_w)
            reachable += dense_rows * np.count_nonzero(_target_positions(all_cols, kx, pad, stride, out_w)[0])
            valid = row_ok & col_ok
            count = int(np.count_nonzero(valid))
            if not count:
                continue
            contrib = values[valid, None] * w64[:, sparse.channel[valid], ky, kx].T
            np.add.at(acc, (sparse.batch[valid], oy[valid], ox[valid]), contrib)
            performed += count

    if bias is not None:
        acc += bias.astype(np.float64)
    total = n * c * reachable * out_channels
    stats = SkipStats(total_macs=int(total), skipped_macs=int(total - performed * out_channels))
    dtype = np.result_type(sparse.value, weights)
    return acc.transpose(0, 3, 1, 2).astype(dtype), stats


def _check_model(net: NetDescriptor, model: Model):
    for desc in net.weighted_layers():
        state = model.layers.get(desc.name)
        if state is None:
            raise DataError(f"model has no parameters for layer '{desc.name}'")
        if state.weight.shadow.shape != desc.weight_shape:
            raise ShapeMismatchError(state.weight.shadow.shape, desc.weight_shape,
                                     f"model and descriptor weights of '{desc.name}'")


def forward(net: NetDescriptor, model: Model, x: np.ndarray, mode: ForwardMode = ForwardMode.QUANTIZED,
            seed: Optional[int] = None, step: int = 0, stream: int = STREAM_ACT,
            keep_cache: bool = True) -> ForwardResult:
    """Run every layer, keeping each layer's input (for backprop) and output.

    Stochastic activation rounding draws from (seed, stream, layer index, step),
    so results never depend on scheduling. FLOAT mode bypasses every quantizer.
    """
    mode = ForwardMode(mode)
    quantized = mode is ForwardMode.QUANTIZED
    _check_model(net, model)
    x = np.asarray(x)
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeMismatchError(x.shape[1:], net.input_shape, 'input batch and descriptor input')

    acts = net.act_layers()
    first_act = acts[0] if acts else None
    inputs, activations, warnings = {}, {}, []
    logits = None
    h = x
    for index, layer in enumerate(net.layers):
        if keep_cache:
            inputs[layer.name] = h
        kind = layer.kind
        if kind is LayerKind.INPUT:
            h = scale_input(h.astype(model.dtype, copy=False), layer.scale)
            if quantized and first_act is not None and first_act.quant.enabled:
                message = check_input_range(h, first_act.quant.act_fmt)
                if message:
                    logger.warning(message)
                    warnings.append(message)
        elif kind is LayerKind.CONV:
            h = lp_conv_forward(h, model[layer.name], quantized)
        elif kind is LayerKind.FC:
            h = lp_fc_forward(h, model[layer.name], quantized)
        elif kind is LayerKind.ACT:
            q = layer.quant
            if quantized and q.enabled:
                rng = derive_rng(seed, stream, index, step) if q.scheme is RoundingScheme.STOCHASTIC else None
                h = lp_act_forward(h, q.act_fmt, q.scheme, rng, apply_relu=layer.relu)
            elif layer.relu:
                h = relu(h)
        elif kind is LayerKind.POOL:
            h = max_pool_forward(h, layer.pool, layer.stride)
        elif kind is LayerKind.SOFTMAX:
            logits = h
            h = softmax(h)
        activations[layer.name] = h
    return ForwardResult(mode=mode, inputs=inputs, activations=activations,
                         logits=h if logits is None else logits, warnings=warnings)


def predict(net: NetDescriptor, model: Model, x: np.ndarray, mode: ForwardMode = ForwardMode.QUANTIZED,
            seed: Optional[int] = None, batch_size: int = 256) -> np.ndarray:
    labels = []
    for batch, start in enumerate(range(0, len(x), batch_size)):
        result = forward(net, model, x[start:start + batch_size], mode, seed=seed, step=batch,
                         stream=STREAM_EVAL, keep_cache=False)
        labels.append(np.argmax(result.logits, axis=1))
    return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)


def accuracy(net: NetDescriptor, model: Model, x: np.ndarray, y: np.ndarray,
             mode: ForwardMode = ForwardMode.QUANTIZED, seed: Optional[int] = None,
             batch_size: int = 256) -> float:
    if len(x) == 0:
        raise DataError('accuracy of an empty dataset is undefined')
    return float(np.mean(predict(net, model, x, mode, seed, batch_size) == np.asarray(y)))


def requantize(model: Model, net: Optional[NetDescriptor] = None, seed: Optional[int] = None,
               step: int = 0) -> Model:
    """Copy of `model` bound to `net` (e.g. after a bit allocation) with every
    quantized copy refreshed from its shadow."""
    net = net or model.net
    _check_model(net, model)
    result = model.copy()
    result.net = net
    for index, desc in enumerate(net.layers):
        if desc.kind.weighted:
            state = result.layers[desc.name]
            state.desc = desc
            state.refresh(derive_rng(seed, STREAM_WEIGHT, index, step), derive_rng(seed, STREAM_BIAS, index, step))
    return result
