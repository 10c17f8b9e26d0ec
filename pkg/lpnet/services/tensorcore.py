"""NCHW array primitives backing the low-precision layers.

Tensors are plain numpy arrays (float32 storage by default). No function
mutates its inputs; products accumulate in float64 and are cast back to the
operands' result dtype.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lpnet.exceptions import DataError, ShapeMismatchError

DTYPE = np.float32


@dataclass(frozen=True)
class SparsityStat:
    zero_count: int
    total_count: int

    @property
    def sparsity(self) -> float:
        return self.zero_count / self.total_count


def _result_dtype(*arrays):
    dtype = np.result_type(*arrays)
    return dtype if np.issubdtype(dtype, np.floating) else np.float64


def sparsity(t: np.ndarray, tolerance: float = 0.0) -> SparsityStat:
    t = np.asarray(t)
    if t.size == 0:
        raise DataError('sparsity of an empty tensor is undefined')
    if tolerance < 0:
        raise DataError(f"tolerance must be >= 0, got {tolerance}")
    zeros = int(np.count_nonzero(np.abs(t) <= tolerance))
    return SparsityStat(zero_count=zeros, total_count=int(t.size))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(np.shape(a), np.shape(b), 'add operands')
    return np.add(a, b)


def scale(t: np.ndarray, s: float) -> np.ndarray:
    t = np.asarray(t)
    return (t * s).astype(_result_dtype(t), copy=False)


def max_abs(t: np.ndarray) -> float:
    t = np.asarray(t)
    return float(np.max(np.abs(t))) if t.size else 0.0


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0).astype(np.asarray(t).dtype, copy=False)


def matmul(a: np.ndarray, b: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """a @ b (+ bias per output column), summed in float64 and cast once at the end."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(a.shape, b.shape, 'matmul operands')
    out = a.astype(np.float64) @ b.astype(np.float64)
    if bias is not None:
        if np.shape(bias) != (b.shape[1],):
            raise ShapeMismatchError(np.shape(bias), (b.shape[1],), 'bias and matmul output')
        out += np.asarray(bias, dtype=np.float64)
    return out.astype(_result_dtype(a, b), copy=False)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int = 1, pad: int = 0) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Patch matrix of shape (N*outH*outW, C*k*k), rows ordered (n, oy, ox),
    columns ordered (c, ky, kx) to match an (O, C, k, k) weight reshape."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise DataError(f"im2col expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    out_h = conv_output_size(h, kernel, stride, pad)
    out_w = conv_output_size(w, kernel, stride, pad)
    if out_h < 1 or out_w < 1:
        raise DataError(f"kernel {kernel} with pad {pad} does not fit input {h}x{w}")
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kernel * kernel)
    return cols, (out_h, out_w)


def col2im(cols: np.ndarray, x_shape, kernel: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch gradients back onto the input grid."""
    n, c, h, w = x_shape
    out_h = conv_output_size(h, kernel, stride, pad)
    out_w = conv_output_size(w, kernel, stride, pad)
    patches = cols.reshape(n, out_h, out_w, c, kernel, kernel)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ky in range(kernel):
        for kx in range(kernel):
            padded[:, :, ky:ky + stride * out_h:stride, kx:kx + stride * out_w:stride] += \
                patches[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return padded[:, :, pad:pad + h, pad:pad + w]
