from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple

from lpnet.exceptions import DescriptorError
from lpnet.models.quant import QuantSpec


class LayerKind(Enum):
    INPUT = 'Input'
    CONV = 'LPConvolution'
    FC = 'LPInnerProduct'
    ACT = 'LPAct'
    POOL = 'MaxPool'
    SOFTMAX = 'Softmax'

    @property
    def weighted(self) -> bool:
        return self in (LayerKind.CONV, LayerKind.FC)

    @property
    def low_precision(self) -> bool:
        return self in (LayerKind.CONV, LayerKind.FC, LayerKind.ACT)


@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    pool: int = 0
    relu: bool = True
    bias: bool = True
    quant: Optional[QuantSpec] = None
    shape: Optional[Tuple[int, ...]] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kernel < 1:
            raise DescriptorError(f"layer '{self.name}': kernel must be >= 1", field='k')
        if self.stride < 1:
            raise DescriptorError(f"layer '{self.name}': stride must be >= 1", field='stride')
        if self.pad < 0:
            raise DescriptorError(f"layer '{self.name}': pad must be >= 0", field='pad')
        if self.kind.weighted and (self.in_channels < 1 or self.out_channels < 1):
            raise DescriptorError(f"layer '{self.name}': channel counts must be >= 1", field='in/out')
        if self.kind is LayerKind.POOL and self.pool < 1:
            raise DescriptorError(f"layer '{self.name}': pooling window must be >= 1", field='pool')
        if self.kind is LayerKind.INPUT:
            if not self.shape or any(d < 1 for d in self.shape):
                raise DescriptorError(f"input layer '{self.name}' needs a positive shape", field='shape')
            if not self.scale > 0:
                raise DescriptorError(f"input scale must be positive, got {self.scale}", field='scale')
        if self.kind.low_precision and self.quant is None:
            object.__setattr__(self, 'quant', QuantSpec())

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind is LayerKind.CONV:
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind is LayerKind.FC:
            return (self.out_channels, self.in_channels)
        return ()

    def with_quant(self, **changes) -> 'LayerDescriptor':
        return replace(self, quant=replace(self.quant, **changes))


@dataclass(frozen=True)
class NetDescriptor:
    layers: Tuple[LayerDescriptor, ...]
    # per-layer bit budgets may differ only when this is set
    mixed_bits: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        if not self.layers or self.layers[0].kind is not LayerKind.INPUT:
            raise DescriptorError('the first layer must be the single Input layer')
        if sum(layer.kind is LayerKind.INPUT for layer in self.layers) != 1:
            raise DescriptorError('exactly one Input layer is allowed')
        names = [layer.name for layer in self.layers]
        duplicates = {name for name in names if names.count(name) > 1}
        if duplicates:
            raise DescriptorError(f"duplicate layer names: {sorted(duplicates)}")

    @property
    def input_layer(self) -> LayerDescriptor:
        return self.layers[0]

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.input_layer.shape)

    @property
    def input_scale(self) -> float:
        return self.input_layer.scale

    def weighted_layers(self) -> List[LayerDescriptor]:
        return [layer for layer in self.layers if layer.kind.weighted]

    def act_layers(self) -> List[LayerDescriptor]:
        return [layer for layer in self.layers if layer.kind is LayerKind.ACT]

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def layer(self, name: str) -> LayerDescriptor:
        return self.layers[self.index(name)]

    def following_act(self, name: str) -> Optional[LayerDescriptor]:
        """The LPAct that quantizes this weighted layer's output, if any."""
        i = self.index(name) + 1
        if i < len(self.layers) and self.layers[i].kind is LayerKind.ACT:
            return self.layers[i]
        return None

    def replace_layers(self, layers) -> 'NetDescriptor':
        return replace(self, layers=tuple(layers))
