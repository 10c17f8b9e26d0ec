from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from lpnet.exceptions import ShapeMismatchError, StaleCacheError
from lpnet.models.network import LayerDescriptor, NetDescriptor
from lpnet.models.quant import FixedPointFormat, RoundingScheme
from lpnet.services.fixedpoint import quantize_tensor


@dataclass
class DualCopyParam:
    """Full-precision shadow updated by gradients plus the quantized copy used in
    the forward pass. The quantized copy is only ever written by `refresh`."""
    shadow: np.ndarray
    quantized: Optional[np.ndarray] = None
    stale: bool = True

    def refresh(self, fmt: Optional[FixedPointFormat], scheme: RoundingScheme = RoundingScheme.DETERMINISTIC,
                rng: Optional[np.random.Generator] = None) -> 'DualCopyParam':
        if fmt is None:
            self.quantized = self.shadow.copy()
        else:
            self.quantized = quantize_tensor(self.shadow, fmt, scheme, rng)
        self.stale = False
        return self

    def apply_update(self, delta: np.ndarray) -> None:
        if delta.shape != self.shadow.shape:
            raise ShapeMismatchError(self.shadow.shape, delta.shape, 'parameter and update')
        self.shadow = (self.shadow - delta).astype(self.shadow.dtype, copy=False)
        self.stale = True

    def copy(self) -> 'DualCopyParam':
        return DualCopyParam(shadow=self.shadow.copy(),
                             quantized=None if self.quantized is None else self.quantized.copy(),
                             stale=self.stale)


@dataclass
class LayerState:
    desc: LayerDescriptor
    weight: DualCopyParam
    bias: Optional[DualCopyParam] = None

    @property
    def name(self) -> str:
        return self.desc.name

    @property
    def quant(self):
        return self.desc.quant

    @property
    def weights(self) -> np.ndarray:
        return self.weight.shadow

    @property
    def quantized_weights(self) -> np.ndarray:
        return self.weight.quantized

    def params(self) -> Dict[str, DualCopyParam]:
        params = {'weight': self.weight}
        if self.bias is not None:
            params['bias'] = self.bias
        return params

    def refresh(self, weight_rng=None, bias_rng=None) -> 'LayerState':
        quant = self.quant
        enabled = quant is not None and quant.enabled
        self.weight.refresh(quant.weight_fmt if enabled else None, quant.scheme if enabled else None, weight_rng)
        if self.bias is not None:
            self.bias.refresh(quant.effective_bias_fmt if enabled else None,
                              quant.scheme if enabled else None, bias_rng)
        return self

    def forward_params(self, quantized: bool):
        """(weights, bias) the forward pass uses: the quantized copies when the
        layer quantizes, the shadows otherwise."""
        if not quantized or not self.quant.enabled:
            return self.weight.shadow, None if self.bias is None else self.bias.shadow
        if self.weight.stale or (self.bias is not None and self.bias.stale):
            raise StaleCacheError(f"quantized copy of layer '{self.name}' is stale; refresh after updating")
        return self.weight.quantized, None if self.bias is None else self.bias.quantized

    def copy(self) -> 'LayerState':
        return LayerState(desc=self.desc, weight=self.weight.copy(),
                          bias=None if self.bias is None else self.bias.copy())


@dataclass
class Model:
    net: NetDescriptor
    layers: Dict[str, LayerState]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> LayerState:
        return self.layers[name]

    def copy(self) -> 'Model':
        return Model(net=self.net, layers={name: state.copy() for name, state in self.layers.items()},
                     provenance=dict(self.provenance))

    def params(self) -> Dict[str, DualCopyParam]:
        """Flat `<layer>.<weight|bias>` view of every dual-copy parameter."""
        flat = {}
        for name, state in self.layers.items():
            for kind, param in state.params().items():
                flat[f"{name}.{kind}"] = param
        return flat

    @property
    def dtype(self):
        first = next(iter(self.layers.values()), None)
        return first.weight.shadow.dtype if first is not None else np.float32
