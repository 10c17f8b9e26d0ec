"""Dynamic-range profiling, per-layer bit allocation and sparsity/degradation studies."""
import logging
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from lpnet.exceptions import AllocationError, DataError, UsageError
from lpnet.models.model import Model
from lpnet.models.network import NetDescriptor
from lpnet.models.quant import FixedPointFormat
from lpnet.models.reports import (BitAllocation, LayerAllocation, LayerRangeStats, OneShotReport, RangeStats,
                                  SPARSITY_MODES, SparsityReport, ValueStats)
from lpnet.services.datasets import Dataset
from lpnet.services.fixedpoint import representable_fraction
from lpnet.services.inference import ForwardMode, accuracy, forward, requantize
from lpnet.services.netdesc import apply_allocation, with_quantization
from lpnet.services.tensorcore import sparsity

logger = logging.getLogger(__name__)

REPRESENTABLE_BITS = (4, 8)


def _require_samples(x):
    if len(x) == 0:
        raise DataError('profiling needs at least one sample')


def measure_ranges(net: NetDescriptor, model: Model, samples: np.ndarray, batch_size: int = 64) -> RangeStats:
    """Float-mode statistics of every weighted layer's weights and of its
    outputs, i.e. the values its LPAct quantizer will see."""
    _require_samples(samples)
    weighted = net.weighted_layers()
    stats = None
    for start in range(0, len(samples), batch_size):
        result = forward(net, model, samples[start:start + batch_size], ForwardMode.FLOAT, keep_cache=False)
        batch = RangeStats(layers={desc.name: LayerRangeStats(
            weights=ValueStats(), activations=ValueStats.from_values(result.activations[desc.name]))
            for desc in weighted}, sample_count=len(samples[start:start + batch_size]))
        stats = batch if stats is None else stats.merge(batch)
    for desc in weighted:
        stats.layers[desc.name].weights = ValueStats.from_values(model[desc.name].weights)
    logger.info('measured ranges of %d layers over %d samples', len(weighted), stats.sample_count)
    return stats


def _integer_bits(values: ValueStats, total_bits: int, loss_threshold: float) -> Optional[int]:
    for m in range(1, total_bits + 1):
        if values.overflow_fraction(m - 1) <= loss_threshold:
            return m
    return None


def _choose_format(layer: str, what: str, values: ValueStats, total_bits: int, loss_threshold: float):
    m = _integer_bits(values, total_bits, loss_threshold)
    if m is None:
        raise AllocationError(f"layer '{layer}': no split of {total_bits} bits keeps {what} overflow "
                              f"within {loss_threshold:g} (max_abs {values.max_abs:g})")
    return FixedPointFormat(m, total_bits - m), values.overflow_fraction(m - 1)


def allocate_bits(stats: RangeStats, total_bits: int = 16, loss_threshold: float = 0.01) -> BitAllocation:
    """Smallest integer part m (sign included) per layer such that at most
    `loss_threshold` of the observed values satisfy |v| >= 2^(m-1); weights
    and activations are allocated independently under the same budget."""
    if total_bits < 2 or total_bits > 32:
        raise UsageError(f"bit budget must lie in 2..32, got {total_bits}")
    if not 0 <= loss_threshold < 1:
        raise UsageError(f"loss threshold must lie in [0, 1), got {loss_threshold}")
    layers = {}
    for name, layer_stats in stats.layers.items():
        wfmt, wloss = _choose_format(name, 'weight', layer_stats.weights, total_bits, loss_threshold)
        afmt, aloss = _choose_format(name, 'activation', layer_stats.activations, total_bits, loss_threshold)
        layers[name] = LayerAllocation(weight_fmt=wfmt, act_fmt=afmt, weight_overflow=wloss, act_overflow=aloss)
        logger.debug('%s: weights %s (overflow %.4f), activations %s (overflow %.4f)', name, wfmt, wloss, afmt, aloss)
    logger.info('allocated %d-bit formats for %d layers (threshold %g)', total_bits, len(layers), loss_threshold)
    return BitAllocation(layers=layers, total_bits=total_bits, loss_threshold=loss_threshold)


def sparsity_report(net: NetDescriptor, model: Model, samples: np.ndarray, mode: str = 'fine-tuned',
                    seed: Optional[int] = None, element_weighted: bool = False,
                    batch_size: int = 64) -> SparsityReport:
    """Fraction of exact zeros after every LPAct. The 'float' mode runs without
    quantizers, the other modes run the quantized forward pass."""
    if mode not in SPARSITY_MODES:
        raise UsageError(f"unknown sparsity mode {mode!r}; expected one of {SPARSITY_MODES}")
    _require_samples(samples)
    forward_mode = ForwardMode.FLOAT if mode == 'float' else ForwardMode.QUANTIZED
    names = [layer.name for layer in net.act_layers()]
    zeros = dict.fromkeys(names, 0)
    totals = dict.fromkeys(names, 0)
    sizes = {}
    for batch, start in enumerate(range(0, len(samples), batch_size)):
        result = forward(net, model, samples[start:start + batch_size], forward_mode, seed=seed, step=batch,
                         keep_cache=False)
        for name in names:
            act = result.activations[name]
            stat = sparsity(act)
            zeros[name] += stat.zero_count
            totals[name] += stat.total_count
            sizes[name] = int(act[0].size)
    return SparsityReport(layers={name: zeros[name] / totals[name] for name in names}, mode=mode,
                          element_weighted=element_weighted, layer_sizes=sizes)


def _weight_only_allocation(stats: RangeStats, total_bits: int, loss_threshold: float) -> BitAllocation:
    layers = {}
    for name, layer_stats in stats.layers.items():
        fmt, loss = _choose_format(name, 'weight', layer_stats.weights, total_bits, loss_threshold)
        layers[name] = LayerAllocation(weight_fmt=fmt, act_fmt=fmt, weight_overflow=loss)
    return BitAllocation(layers=layers, total_bits=total_bits, loss_threshold=loss_threshold)


def weight_budget_sweep(net: NetDescriptor, model: Model, data: Dataset, budgets: Iterable[int] = (16, 8, 4),
                        loss_threshold: float = 0.01, seed: Optional[int] = None,
                        stats: Optional[RangeStats] = None) -> Dict[int, float]:
    """One-shot accuracy with only the weights quantized, per weight bit budget."""
    stats = stats or measure_ranges(net, model, data.x)
    results = {}
    for bits in budgets:
        allocation = _weight_only_allocation(stats, bits, loss_threshold)
        weight_net = with_quantization(apply_allocation(net, allocation), weights=True, activations=False)
        results[bits] = accuracy(weight_net, requantize(model, weight_net, seed), data.x, data.y,
                                 ForwardMode.QUANTIZED, seed)
        logger.info('weights at %d bits: accuracy %.4f', bits, results[bits])
    return results


def weight_representability(net: NetDescriptor, model: Model, budgets: Sequence[int] = REPRESENTABLE_BITS,
                             loss_threshold: float = 0.01) -> Dict[int, float]:
    """Share of the forward weights that lie inside the n-bit format the
    allocator picks for their layer, pooled over all weighted layers. A layer
    whose range no n-bit split covers gets all n bits as integer part."""
    weights = [model[desc.name].forward_params(quantized=True)[0] for desc in net.weighted_layers()]
    total = sum(w.size for w in weights)
    if total == 0:
        return {bits: 1.0 for bits in budgets}
    result = {}
    for bits in budgets:
        inside = 0.0
        for w in weights:
            m = _integer_bits(ValueStats.from_values(w), bits, loss_threshold) or bits
            inside += representable_fraction(w, FixedPointFormat(m, bits - m)) * w.size
        result[bits] = inside / total
        logger.debug('%.4f of weights representable with %d bits', result[bits], bits)
    return result


def one_shot_study(net: NetDescriptor, model: Model, data: Dataset, allocation: Optional[BitAllocation] = None,
                   total_bits: int = 16, loss_threshold: float = 0.01, seed: Optional[int] = None,
                   weight_budgets: Iterable[int] = ()) -> OneShotReport:
    """Accuracy of a trained float model quantized without any fine-tuning:
    float, weights only, then weights and activations."""
    _require_samples(data.x)
    stats = None
    if allocation is None:
        stats = measure_ranges(net, model, data.x)
        allocation = allocate_bits(stats, total_bits, loss_threshold)
    float_net = with_quantization(net, weights=False, activations=False)
    quant_net = apply_allocation(net, allocation)
    weight_net = with_quantization(quant_net, weights=True, activations=False)
    full_net = with_quantization(quant_net, weights=True, activations=True)

    float_acc = accuracy(float_net, model, data.x, data.y, ForwardMode.FLOAT)
    weight_model = requantize(model, weight_net, seed)
    weight_acc = accuracy(weight_net, weight_model, data.x, data.y, ForwardMode.QUANTIZED, seed)
    full_model = requantize(model, full_net, seed)
    full_acc = accuracy(full_net, full_model, data.x, data.y, ForwardMode.QUANTIZED, seed)

    budgets = list(weight_budgets)
    sweep = weight_budget_sweep(net, model, data, budgets, loss_threshold, seed, stats) if budgets else {}
    report = OneShotReport(
        float_accuracy=float_acc, weight_only_accuracy=weight_acc, weight_act_accuracy=full_acc,
        weight_representable=weight_representability(weight_net, weight_model, loss_threshold=loss_threshold),
        float_sparsity=sparsity_report(float_net, model, data.x, 'float').mean,
        one_shot_sparsity=sparsity_report(full_net, full_model, data.x, 'one-shot-quantized', seed=seed).mean,
        weight_budget_accuracy=sweep)
    logger.info('one-shot study: float %.4f, weights %.4f, weights+activations %.4f',
                float_acc, weight_acc, full_acc)
    return report
