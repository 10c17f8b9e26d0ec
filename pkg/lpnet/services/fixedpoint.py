"""Qm.f quantization: deterministic and stochastic rounding onto a fixed-point grid.

All rounding runs in float64 on integer codes (x * 2^ad is exact for any
finite float), then scales back. Out-of-range inputs saturate to the nearer
bound for both schemes; deterministic ties round half away from zero.
"""
import logging
from typing import Optional, Union

import numpy as np

from lpnet.exceptions import CorruptTensorError, OffGridError, UsageError
from lpnet.models.quant import FixedPointFormat, RoundingScheme

logger = logging.getLogger(__name__)

Number = Union[int, float]


def _first_non_finite(values: np.ndarray):
    bad = np.argwhere(~np.isfinite(values))
    return tuple(int(i) for i in bad[0]) if len(bad) else None


def _check_finite(values: np.ndarray):
    index = _first_non_finite(values)
    if index is not None:
        raise CorruptTensorError(f"non-finite value at element {index}: corrupt tensor data", index=index)


def _round_half_away(codes: np.ndarray) -> np.ndarray:
    magnitude = np.abs(codes)
    floor = np.floor(magnitude)
    rounded = floor + (magnitude - floor >= 0.5)
    return np.copysign(rounded, codes)


def quantize_codes(values, fmt: FixedPointFormat, scheme: RoundingScheme = RoundingScheme.DETERMINISTIC,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Integer codes (as float64) of the quantized values; input must be finite."""
    scheme = RoundingScheme.parse(scheme)
    scaled = np.ldexp(np.asarray(values, dtype=np.float64), fmt.ad)
    clipped = np.clip(scaled, fmt.min_code, fmt.max_code)
    if scheme is RoundingScheme.DETERMINISTIC:
        codes = _round_half_away(clipped)
    else:
        if rng is None:
            raise UsageError('STOCHASTIC rounding requires an explicitly seeded random source')
        lower = np.floor(clipped)
        # P(upper neighbour) equals the distance above the lower one, so E[code] == clipped
        codes = lower + (rng.random(np.shape(clipped)) < clipped - lower)
    return codes + 0.0


def quantize_array(values: np.ndarray, fmt: FixedPointFormat,
                   scheme: RoundingScheme = RoundingScheme.DETERMINISTIC,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    values = np.asarray(values)
    _check_finite(values)
    out_dtype = values.dtype if np.issubdtype(values.dtype, np.floating) else np.float64
    return np.ldexp(quantize_codes(values, fmt, scheme, rng), -fmt.ad).astype(out_dtype, copy=False)


def quantize_det(x: Number, fmt: FixedPointFormat) -> float:
    return float(quantize_array(np.float64(x), fmt, RoundingScheme.DETERMINISTIC))


def quantize_stoch(x: Number, fmt: FixedPointFormat, rng: np.random.Generator) -> float:
    if rng is None:
        raise UsageError('quantize_stoch needs an explicit random source')
    return float(quantize_array(np.float64(x), fmt, RoundingScheme.STOCHASTIC, rng))


def quantize_tensor(t: np.ndarray, fmt: FixedPointFormat,
                    scheme: RoundingScheme = RoundingScheme.DETERMINISTIC,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Elementwise quantization. Stochastic draws are taken in row-major element
    order from `rng`, so element i always consumes the i-th uniform of the stream."""
    t = np.asarray(t)
    result = quantize_array(t, fmt, scheme, rng)
    logger.debug('quantized tensor %s to %s (%s)', t.shape, fmt, RoundingScheme.parse(scheme))
    return result


def on_grid(t, fmt: FixedPointFormat) -> np.ndarray:
    scaled = np.ldexp(np.asarray(t, dtype=np.float64), fmt.ad)
    return (scaled == np.round(scaled)) & (scaled >= fmt.min_code) & (scaled <= fmt.max_code)


def to_code(x: Number, fmt: FixedPointFormat) -> int:
    codes = to_codes(np.float64(x), fmt)
    return int(codes)


def to_codes(t, fmt: FixedPointFormat) -> np.ndarray:
    """Vector form of to_code; raises OffGridError naming the first offending element."""
    values = np.asarray(t, dtype=np.float64)
    _check_finite(values)
    inside = on_grid(values, fmt)
    if not np.all(inside):
        index = tuple(int(i) for i in np.argwhere(~inside)[0]) if values.ndim else ()
        bad = values[index] if values.ndim else values
        raise OffGridError(f"value {float(bad)!r} at element {index} is not on the {fmt} grid")
    return np.ldexp(values, fmt.ad).astype(np.int64)


def from_code(k: int, fmt: FixedPointFormat) -> float:
    return float(from_codes(np.int64(k), fmt))


def from_codes(codes, fmt: FixedPointFormat) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if np.any(codes < fmt.min_code) or np.any(codes > fmt.max_code):
        raise OffGridError(f"code outside [{fmt.min_code}, {fmt.max_code}] for {fmt}")
    return np.ldexp(codes.astype(np.float64), -fmt.ad)


def representable_fraction(values, fmt: FixedPointFormat) -> float:
    """Fraction of values inside [min_value, max_value] of `fmt`."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return 1.0
    inside = (values >= fmt.min_value()) & (values <= fmt.max_value())
    return float(np.mean(inside))

