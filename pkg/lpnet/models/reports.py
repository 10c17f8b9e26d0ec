import json
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd
from marshmallow import EXCLUDE, Schema, ValidationError, fields, post_load, validate

from lpnet.exceptions import DataError
from lpnet.models.quant import FixedPointFormat, QFormatField
from lpnet.utils.helpers import convert_to_native

SPARSITY_MODES = ('float', 'one-shot-quantized', 'fine-tuned')


@dataclass
class ValueStats:
    """Running statistics of one value population (a layer's weights or activations).

    `hist` maps floor(log2|v|) to the number of nonzero values with that
    exponent; zeros are counted separately. Merging is associative and
    commutative, so batching and ordering never change the result.
    """
    min: float = float('inf')
    max: float = float('-inf')
    count: int = 0
    zero_count: int = 0
    hist: Dict[int, int] = field(default_factory=dict)

    @property
    def max_abs(self) -> float:
        if self.count == 0:
            return 0.0
        return max(abs(self.min), abs(self.max))

    @classmethod
    def from_values(cls, values) -> 'ValueStats':
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return cls()
        nonzero = np.abs(values[values != 0])
        # frexp gives |v| = m * 2^e with m in [0.5, 1), so floor(log2|v|) = e - 1
        _, exponents = np.frexp(nonzero)
        keys, counts = np.unique(exponents - 1, return_counts=True)
        return cls(min=float(values.min()), max=float(values.max()), count=int(values.size),
                   zero_count=int(values.size - nonzero.size),
                   hist={int(k): int(c) for k, c in zip(keys, counts)})

    def merge(self, other: 'ValueStats') -> 'ValueStats':
        hist = dict(self.hist)
        for exponent, count in other.hist.items():
            hist[exponent] = hist.get(exponent, 0) + count
        return ValueStats(min=min(self.min, other.min), max=max(self.max, other.max),
                          count=self.count + other.count, zero_count=self.zero_count + other.zero_count,
                          hist=dict(sorted(hist.items())))

    def overflow_fraction(self, limit_exponent: int) -> float:
        """Fraction of values with |v| >= 2^limit_exponent."""
        if self.count == 0:
            return 0.0
        over = sum(c for e, c in self.hist.items() if e >= limit_exponent)
        return over / self.count


@dataclass
class LayerRangeStats:
    weights: ValueStats
    activations: ValueStats


@dataclass
class RangeStats:
    layers: Dict[str, LayerRangeStats]
    sample_count: int

    def merge(self, other: 'RangeStats') -> 'RangeStats':
        merged = {}
        for name, stats in self.layers.items():
            merged[name] = LayerRangeStats(weights=stats.weights,
                                           activations=stats.activations.merge(other.layers[name].activations))
        return RangeStats(layers=merged, sample_count=self.sample_count + other.sample_count)


@dataclass(frozen=True)
class LayerAllocation:
    weight_fmt: FixedPointFormat
    act_fmt: FixedPointFormat
    weight_overflow: float = 0.0
    act_overflow: float = 0.0


@dataclass
class BitAllocation:
    layers: Dict[str, LayerAllocation]
    total_bits: int
    loss_threshold: float

    @classmethod
    def uniform(cls, layer_names, weight_fmt: FixedPointFormat, act_fmt: FixedPointFormat) -> 'BitAllocation':
        """One global format pair for every layer (e.g. Q8.8 everywhere)."""
        return cls(layers={name: LayerAllocation(weight_fmt, act_fmt) for name in layer_names},
                   total_bits=weight_fmt.total_bits, loss_threshold=0.0)


@dataclass
class SparsityReport:
    layers: Dict[str, float]
    mode: str
    element_weighted: bool = False
    layer_sizes: Dict[str, int] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        if not self.layers:
            return 0.0
        if self.element_weighted and self.layer_sizes:
            total = sum(self.layer_sizes[name] for name in self.layers)
            return sum(s * self.layer_sizes[name] for name, s in self.layers.items()) / total
        return float(np.mean(list(self.layers.values())))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'layer': list(self.layers), 'sparsity': list(self.layers.values())})


@dataclass
class OneShotReport:
    float_accuracy: float
    weight_only_accuracy: float
    weight_act_accuracy: float
    weight_representable: Dict[int, float]
    float_sparsity: float
    one_shot_sparsity: float
    weight_budget_accuracy: Dict[int, float] = field(default_factory=dict)

    @property
    def weight_only_degradation(self) -> float:
        return self.float_accuracy - self.weight_only_accuracy

    @property
    def weight_act_degradation(self) -> float:
        return self.float_accuracy - self.weight_act_accuracy

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {'setting': 'float', 'accuracy': self.float_accuracy, 'mean_sparsity': self.float_sparsity},
            {'setting': 'weights quantized', 'accuracy': self.weight_only_accuracy, 'mean_sparsity': None},
            {'setting': 'weights+activations quantized', 'accuracy': self.weight_act_accuracy,
             'mean_sparsity': self.one_shot_sparsity},
        ])


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    mean_sparsity: float
    layer_sparsity: Dict[str, float] = field(default_factory=dict)


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def accuracies(self) -> List[float]:
        return [r.accuracy for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            row = {'epoch': record.epoch, 'loss': record.loss, 'accuracy': record.accuracy,
                   'mean_sparsity': record.mean_sparsity}
            row.update({f"sparsity.{name}": value for name, value in record.layer_sparsity.items()})
            rows.append(row)
        return pd.DataFrame(rows, columns=None if rows else ['epoch', 'loss', 'accuracy', 'mean_sparsity'])

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> 'History':
        layer_columns = [c for c in df.columns if c.startswith('sparsity.')]
        records = []
        for _, row in df.iterrows():
            records.append(EpochRecord(
                epoch=int(row['epoch']), loss=float(row['loss']), accuracy=float(row['accuracy']),
                mean_sparsity=float(row['mean_sparsity']),
                layer_sparsity={c[len('sparsity.'):]: float(row[c]) for c in layer_columns}))
        return cls(records=records)

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, float_format='%.17g')

    @classmethod
    def read_csv(cls, path) -> 'History':
        return cls.from_frame(pd.read_csv(path, float_precision='round_trip'))


# --- schemas ---------------------------------------------------------------

class ValueStatsSchema(Schema):
    class Meta:
        # derived fields such as max_abs are written but never read back
        unknown = EXCLUDE

    min = fields.Float(required=True, allow_nan=True)
    max = fields.Float(required=True, allow_nan=True)
    max_abs = fields.Float(dump_only=True)
    count = fields.Int(required=True, validate=validate.Range(min=0))
    zero_count = fields.Int(required=True)
    hist = fields.Dict(keys=fields.Int(), values=fields.Int(), required=True)

    @post_load
    def make(self, data, **kwargs):
        data['hist'] = dict(sorted(data['hist'].items()))
        return ValueStats(**data)


class LayerRangeStatsSchema(Schema):
    weights = fields.Nested(ValueStatsSchema, required=True)
    activations = fields.Nested(ValueStatsSchema, required=True)

    @post_load
    def make(self, data, **kwargs):
        return LayerRangeStats(**data)


class RangeStatsSchema(Schema):
    layers = fields.Dict(keys=fields.Str(), values=fields.Nested(LayerRangeStatsSchema), required=True)
    sample_count = fields.Int(required=True, validate=validate.Range(min=1))

    @post_load
    def make(self, data, **kwargs):
        return RangeStats(**data)


class LayerAllocationSchema(Schema):
    weight_fmt = QFormatField(required=True)
    act_fmt = QFormatField(required=True)
    weight_overflow = fields.Float(load_default=0.0)
    act_overflow = fields.Float(load_default=0.0)

    @post_load
    def make(self, data, **kwargs):
        return LayerAllocation(**data)


class BitAllocationSchema(Schema):
    layers = fields.Dict(keys=fields.Str(), values=fields.Nested(LayerAllocationSchema), required=True)
    total_bits = fields.Int(required=True, validate=validate.Range(min=2, max=32))
    loss_threshold = fields.Float(required=True, validate=validate.Range(min=0, max=1, max_inclusive=False))

    @post_load
    def make(self, data, **kwargs):
        return BitAllocation(**data)


class SparsityReportSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    layers = fields.Dict(keys=fields.Str(), values=fields.Float(validate=validate.Range(min=0, max=1)),
                         required=True)
    mode = fields.Str(required=True, validate=validate.OneOf(SPARSITY_MODES))
    element_weighted = fields.Bool(load_default=False)
    layer_sizes = fields.Dict(keys=fields.Str(), values=fields.Int(), load_default=dict)
    mean = fields.Float(dump_only=True)

    @post_load
    def make(self, data, **kwargs):
        return SparsityReport(**data)


class OneShotReportSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    float_accuracy = fields.Float(required=True)
    weight_only_accuracy = fields.Float(required=True)
    weight_act_accuracy = fields.Float(required=True)
    weight_representable = fields.Dict(keys=fields.Int(), values=fields.Float(), required=True)
    float_sparsity = fields.Float(required=True)
    one_shot_sparsity = fields.Float(required=True)
    weight_budget_accuracy = fields.Dict(keys=fields.Int(), values=fields.Float(), load_default=dict)
    weight_only_degradation = fields.Float(dump_only=True)
    weight_act_degradation = fields.Float(dump_only=True)

    @post_load
    def make(self, data, **kwargs):
        return OneShotReport(**data)


def dumps_report(obj, schema: Schema) -> str:
    return json.dumps(convert_to_native(schema.dump(obj)), indent=2) + '\n'


def loads_report(text: str, schema: Schema, source: str = 'report'):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise DataError(f"{source}: not valid JSON (line {err.lineno}, column {err.colno}): {err.msg}") from err
    try:
        return schema.load(data)
    except ValidationError as err:
        names = sorted(map(str, err.messages)) if isinstance(err.messages, dict) else []
        raise DataError(f"{source}: invalid field(s) {', '.join(names)}: {err.messages}") from err


def read_report(path, schema: Schema):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except UnicodeDecodeError as err:
        raise DataError(f"{path}: not a UTF-8 text file") from err
    return loads_report(text, schema, source=str(path))
