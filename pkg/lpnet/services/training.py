"""Backpropagation and dual-copy fine-tuning.

The forward pass runs on quantized parameters and activations; gradients are
computed in float64 treating every quantizer as identity (straight-through)
and are applied to the full-precision shadows only. Quantized copies are
refreshed from the shadows after every optimizer step.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lpnet.exceptions import CacheMissError, DataError, DivergenceError, GradientError, ShapeMismatchError
from lpnet.models.model import DualCopyParam, LayerState, Model
from lpnet.models.network import LayerDescriptor, LayerKind, NetDescriptor
from lpnet.models.quant import FixedPointFormat, RoundingScheme
from lpnet.models.reports import EpochRecord, History
from lpnet.models.run_config import TrainConfig
from lpnet.services.datasets import Dataset
from lpnet.services.fixedpoint import quantize_tensor
from lpnet.services.inference import ForwardMode, ForwardResult, accuracy, forward, requantize
from lpnet.services.netdesc import any_quantized, with_quantization, with_scheme
from lpnet.services.profiler import sparsity_report
from lpnet.services.tensorcore import DTYPE, add, col2im, im2col, scale
from lpnet.utils.helpers import STREAM_BIAS, STREAM_INIT, STREAM_SHUFFLE, STREAM_WEIGHT, derive_rng

logger = logging.getLogger(__name__)


@dataclass
class Gradients:
    params: Dict[str, np.ndarray]
    input_grad: np.ndarray
    loss: float


# --- initialization --------------------------------------------------------

def _fans(desc: LayerDescriptor) -> Tuple[int, int]:
    if desc.kind is LayerKind.CONV:
        area = desc.kernel * desc.kernel
        return desc.in_channels * area, desc.out_channels * area
    return desc.in_channels, desc.out_channels


def init_weights(desc: LayerDescriptor, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    """Glorot uniform in +-sqrt(6 / (fan_in + fan_out))."""
    if not desc.kind.weighted:
        raise DataError(f"layer '{desc.name}' has no weights")
    fan_in, fan_out = _fans(desc)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, desc.weight_shape).astype(dtype)


def build_model(net: NetDescriptor, seed: int = 0, dtype=DTYPE) -> Model:
    layers = {}
    for index, desc in enumerate(net.layers):
        if not desc.kind.weighted:
            continue
        weight = DualCopyParam(init_weights(desc, derive_rng(seed, STREAM_INIT, index), dtype))
        bias = DualCopyParam(np.zeros(desc.out_channels, dtype=dtype)) if desc.bias else None
        state = LayerState(desc=desc, weight=weight, bias=bias)
        state.refresh(derive_rng(seed, STREAM_WEIGHT, index, 0), derive_rng(seed, STREAM_BIAS, index, 0))
        layers[desc.name] = state
    logger.debug('initialized %d weighted layers (seed %d)', len(layers), seed)
    return Model(net=net, layers=layers, provenance={'init': 'glorot-uniform', 'seed': seed})


# --- backward --------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = z.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(labels.shape, (n,), 'labels and logits')
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes})")
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(np.mean(log_probs[np.arange(n), labels]))
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _max_pool_backward(x: np.ndarray, grad: np.ndarray, window: int, stride: int) -> np.ndarray:
    n, c = x.shape[:2]
    out_h, out_w = grad.shape[2:]
    windows = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    arg = windows.reshape(n, c, out_h, out_w, -1).argmax(axis=-1)
    rows = np.arange(out_h)[:, None] * stride + arg // window
    cols = np.arange(out_w)[None, :] * stride + arg % window
    batch, channel = np.indices((n, c, out_h, out_w))[:2]
    dx = np.zeros(x.shape, dtype=np.float64)
    np.add.at(dx, (batch, channel, rows, cols), grad)
    return dx


def backward(net: NetDescriptor, model: Model, result: ForwardResult, labels) -> Gradients:
    """Gradients of the softmax cross-entropy with respect to every shadow parameter."""
    if not result.has_cache:
        raise CacheMissError('backward needs a forward result computed with keep_cache=True')
    quantized = result.mode is ForwardMode.QUANTIZED
    loss, grad = softmax_cross_entropy(result.logits, labels)
    layers = net.layers
    last = len(layers) - 1
    if layers[last].kind is LayerKind.SOFTMAX:
        last -= 1
    params = {}
    for index in range(last, -1, -1):
        desc = layers[index]
        x = result.inputs.get(desc.name)
        if x is None:
            raise CacheMissError(f"no cached input for layer '{desc.name}'")
        kind = desc.kind
        if kind is LayerKind.FC:
            weights, _ = model[desc.name].forward_params(quantized)
            flat = x.reshape(x.shape[0], -1).astype(np.float64)
            params[f"{desc.name}.weight"] = grad.T @ flat
            if desc.bias:
                params[f"{desc.name}.bias"] = grad.sum(axis=0)
            grad = (grad @ weights.astype(np.float64)).reshape(x.shape)
        elif kind is LayerKind.CONV:
            weights, _ = model[desc.name].forward_params(quantized)
            out_channels = desc.out_channels
            cols, _ = im2col(x, desc.kernel, desc.stride, desc.pad)
            g2 = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
            params[f"{desc.name}.weight"] = (g2.T @ cols.astype(np.float64)).reshape(weights.shape)
            if desc.bias:
                params[f"{desc.name}.bias"] = g2.sum(axis=0)
            dcols = g2 @ weights.reshape(out_channels, -1).astype(np.float64)
            grad = col2im(dcols, x.shape, desc.kernel, desc.stride, desc.pad)
        elif kind is LayerKind.ACT:
            # straight-through: only the ReLU gate is differentiated
            if desc.relu:
                grad = grad * (result.activations[desc.name] > 0)
        elif kind is LayerKind.POOL:
            grad = _max_pool_backward(x, grad, desc.pool, desc.stride)
        elif kind is LayerKind.SOFTMAX:
            s = result.activations[desc.name].astype(np.float64)
            grad = s * (grad - np.sum(grad * s, axis=1, keepdims=True))
        elif kind is LayerKind.INPUT:
            grad = grad * desc.scale
    return Gradients(params=params, input_grad=grad, loss=loss)


# --- optimizer -------------------------------------------------------------

def refresh_model(model: Model, seed: Optional[int], step: int) -> None:
    for index, desc in enumerate(model.net.layers):
        if desc.kind.weighted:
            model[desc.name].refresh(derive_rng(seed, STREAM_WEIGHT, index, step),
                                     derive_rng(seed, STREAM_BIAS, index, step))


def sgd_step(model: Model, grads: Dict[str, np.ndarray], lr: float, momentum: float = 0.0,
             velocity: Optional[Dict[str, np.ndarray]] = None, seed: Optional[int] = None,
             step: int = 0) -> Dict[str, np.ndarray]:
    """shadow <- shadow - lr * v with v = momentum * v + grad, then refresh the
    quantized copies. Returns the updated velocity."""
    velocity = {} if velocity is None else velocity
    params = model.params()
    for key in grads:
        if key not in params:
            raise DataError(f"gradient for unknown parameter '{key}'")
    for key, grad in grads.items():
        layer = key.split('.', 1)[0]
        if not np.all(np.isfinite(grad)):
            raise GradientError(layer)
        param = params[key]
        if grad.shape != param.shadow.shape:
            raise ShapeMismatchError(param.shadow.shape, grad.shape, f"parameter and gradient of '{key}'")
        v = grad if momentum == 0 or key not in velocity else add(scale(velocity[key], momentum), grad)
        velocity[key] = v
        param.apply_update(lr * v)
    refresh_model(model, seed, step)
    return velocity


def effective_learning_rate(net: NetDescriptor, cfg: TrainConfig) -> float:
    return cfg.learning_rate / cfg.lr_divisor if any_quantized(net) else cfg.learning_rate


class FineTuner:
    """Quantized-forward / full-precision-backward training loop.

    Stops when the epoch budget is spent, when the monitored accuracy reaches
    `target_accuracy`, or when it has not improved by `min_delta` for
    `patience` consecutive epochs.
    """

    def __init__(self, net: NetDescriptor, cfg: TrainConfig):
        if cfg.scheme is not None:
            net = with_scheme(net, cfg.scheme)
        self.net = net
        self.cfg = cfg
        self.lr = effective_learning_rate(net, cfg)
        self.step = 0
        self.velocity: Dict[str, np.ndarray] = {}

    def _mode(self) -> ForwardMode:
        return ForwardMode.QUANTIZED if any_quantized(self.net) else ForwardMode.FLOAT

    def train_epoch(self, model: Model, data: Dataset, epoch: int) -> float:
        cfg = self.cfg
        order = derive_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(data)) if cfg.shuffle else None
        losses = []
        for xb, yb in data.batches(cfg.batch_size, order):
            result = forward(self.net, model, xb, self._mode(), seed=cfg.seed, step=self.step)
            grads = backward(self.net, model, result, yb)
            if not np.isfinite(grads.loss):
                raise DivergenceError(f"loss diverged at epoch {epoch}, step {self.step}",
                                      diagnostics={'epoch': epoch, 'step': self.step, 'lr': self.lr,
                                                   'recent_losses': losses[-5:]})
            self.step += 1
            self.velocity = sgd_step(model, grads.params, self.lr, cfg.momentum, self.velocity,
                                     seed=cfg.seed, step=self.step)
            losses.append(grads.loss)
        return float(np.mean(losses)) if losses else 0.0

    def evaluate(self, model: Model, data: Dataset) -> Tuple[float, Dict[str, float]]:
        mode = self._mode()
        acc = accuracy(self.net, model, data.x, data.y, mode, seed=self.cfg.seed)
        report = sparsity_report(self.net, model, data.x, 'fine-tuned' if mode is ForwardMode.QUANTIZED else 'float',
                                 seed=self.cfg.seed)
        return acc, report.layers

    def run(self, model: Model, train: Dataset, validation: Optional[Dataset] = None) -> Tuple[Model, History]:
        if train.sample_shape != self.net.input_shape:
            raise ShapeMismatchError(train.sample_shape, self.net.input_shape, 'training data and network input')
        model = requantize(model, self.net, self.cfg.seed)
        history = History()
        monitor = validation or train
        best = None
        since_best = 0
        for epoch in range(1, self.cfg.epochs + 1):
            loss = self.train_epoch(model, train, epoch)
            acc, layer_sparsity = self.evaluate(model, monitor)
            mean_sparsity = float(np.mean(list(layer_sparsity.values()))) if layer_sparsity else 0.0
            history.records.append(EpochRecord(epoch=epoch, loss=loss, accuracy=acc, mean_sparsity=mean_sparsity,
                                               layer_sparsity=layer_sparsity))
            logger.info('epoch %d: loss %.5f, accuracy %.4f, mean sparsity %.4f', epoch, loss, acc, mean_sparsity)
            if self.cfg.target_accuracy is not None and acc >= self.cfg.target_accuracy:
                history.stopped_early = epoch < self.cfg.epochs
                break
            if best is None or acc >= best + self.cfg.min_delta:
                best, since_best = acc, 0
            else:
                since_best += 1
                if since_best >= self.cfg.patience:
                    logger.warning('accuracy plateaued at %.4f; stopping after epoch %d', best, epoch)
                    history.stopped_early = epoch < self.cfg.epochs
                    break
        model.net = self.net
        model.provenance = dict(model.provenance, finetuned_epochs=len(history), seed=self.cfg.seed,
                                learning_rate=self.lr)
        return model, history


def finetune(net: NetDescriptor, model: Model, train: Dataset, cfg: TrainConfig,
             validation: Optional[Dataset] = None) -> Tuple[Model, History]:
    if cfg.epochs == 0:
        return model.copy(), History()
    return FineTuner(net, cfg).run(model, train, validation)


def train_float(net: NetDescriptor, model: Model, train: Dataset, cfg: TrainConfig,
                validation: Optional[Dataset] = None) -> Tuple[Model, History]:
    """Full-precision baseline: every quantizer off, no learning-rate divisor."""
    float_net = with_quantization(net, weights=False, activations=False)
    trained, history = finetune(float_net, model, train, replace(cfg, scheme=None), validation)
    trained.net = net
    for desc in net.weighted_layers():
        trained[desc.name].desc = desc
    refresh_model(trained, cfg.seed, 0)
    return trained, history


# --- gradient checking -----------------------------------------------------

def _float64_model(model: Model) -> Model:
    copy = model.copy()
    for param in copy.params().values():
        param.shadow = param.shadow.astype(np.float64)
        param.quantized, param.stale = None, True
    return copy


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / denom) if denom > 0 else 0.0


def check_gradients(net: NetDescriptor, model: Model, x: np.ndarray, y: np.ndarray,
                    eps: float = 1e-3) -> Dict[str, float]:
    """Norm-wise relative error between backprop and central differences for
    every parameter, in float64 with quantizers bypassed. The key 'input'
    checks the gradient with respect to the network input."""
    model = _float64_model(model)
    x = np.asarray(x, dtype=np.float64)

    def loss_at(inputs=x) -> float:
        result = forward(net, model, inputs, ForwardMode.FLOAT, keep_cache=False)
        return softmax_cross_entropy(result.logits, y)[0]

    grads = backward(net, model, forward(net, model, x, ForwardMode.FLOAT), y)
    errors = {}
    for key, param in model.params().items():
        numeric = np.zeros_like(param.shadow)
        flat = param.shadow.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_at()
            flat[i] = original - eps
            minus = loss_at()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
        errors[key] = _relative_error(grads.params[key], numeric)
    numeric = np.zeros_like(x)
    perturbed = x.copy()
    for i in range(perturbed.size):
        original = perturbed.reshape(-1)[i]
        perturbed.reshape(-1)[i] = original + eps
        plus = loss_at(perturbed)
        perturbed.reshape(-1)[i] = original - eps
        minus = loss_at(perturbed)
        perturbed.reshape(-1)[i] = original
        numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
    errors['input'] = _relative_error(grads.input_grad, numeric)
    logger.debug('gradient check: %s', errors)
    return errors


# --- fixed-point trap ------------------------------------------------------

def trap_move_frequency(update_fraction: float, fmt: FixedPointFormat,
                        scheme: RoundingScheme = RoundingScheme.STOCHASTIC, seeds: int = 1000,
                        start: float = 0.0) -> float:
    """Share of seeds for which one shadow update of `update_fraction` grid
    steps changes the quantized copy of a weight sitting on the grid."""
    scheme = RoundingScheme.parse(scheme)
    origin = quantize_tensor(np.array([start]), fmt)
    moved = 0
    for seed in range(seeds):
        param = DualCopyParam(shadow=origin.copy())
        param.refresh(fmt)
        param.apply_update(np.array([-update_fraction * fmt.step()]))
        param.refresh(fmt, scheme, derive_rng(seed, STREAM_WEIGHT, 0, 1))
        moved += bool(param.quantized[0] != origin[0])
    return moved / seeds


@dataclass
class ToyRun:
    weights: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def tail_loss(self, fraction: float = 0.5) -> float:
        tail = self.losses[int(len(self.losses) * (1 - fraction)):]
        return float(np.mean(tail))


def run_toy_problem(scheme: RoundingScheme, steps: int = 200, lr: float = 0.05, seed: int = 0,
                    target: float = 0.3, fmt: FixedPointFormat = FixedPointFormat(1, 3),
                    keep_shadow: bool = False, start: float = 0.0) -> ToyRun:
    """Minimize 0.5 * (w - target)^2 for one weight whose optimum lies between
    grid points. With keep_shadow=False the weight is stored quantized, so a
    deterministic update smaller than half a step is rounded away every time.
    keep_shadow=True keeps the full-precision shadow between steps, the
    dual-copy scheme used by fine-tuning."""
    scheme = RoundingScheme.parse(scheme)
    param = DualCopyParam(shadow=quantize_tensor(np.array([start], dtype=np.float64), fmt))
    param.refresh(fmt)
    run = ToyRun()
    for step in range(1, steps + 1):
        w = param.quantized[0]
        run.weights.append(float(w))
        run.losses.append(0.5 * float(w - target) ** 2)
        param.apply_update(np.array([lr * (w - target)]))
        param.refresh(fmt, scheme, derive_rng(seed, STREAM_WEIGHT, 0, step))
        if not keep_shadow:
            param.shadow = param.quantized.copy()
    return run
