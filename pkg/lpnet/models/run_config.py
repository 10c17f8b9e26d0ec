from dataclasses import dataclass
from typing import Optional

from marshmallow import Schema, fields, validate, validates_schema, ValidationError

from lpnet.exceptions import UsageError
from lpnet.models.quant import RoundingScheme, SchemeField


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    # divides the learning rate whenever any quantizer is active
    lr_divisor: float = 10.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    scheme: Optional[RoundingScheme] = None
    momentum: float = 0.0
    shuffle: bool = True
    patience: int = 3
    min_delta: float = 0.001
    target_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise UsageError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.lr_divisor < 1:
            raise UsageError(f"learning-rate divisor must be >= 1, got {self.lr_divisor}")
        if self.batch_size < 1 or self.epochs < 0:
            raise UsageError('batch size must be >= 1 and epochs >= 0')
        if not 0 <= self.momentum < 1:
            raise UsageError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.scheme is not None:
            self.scheme = RoundingScheme.parse(self.scheme)


class RunConfigSchema(Schema):
    """Arguments shared by the pipeline commands, checked before any work starts."""
    bits = fields.Int(validate=validate.Range(min=2, max=32))
    threshold = fields.Float(validate=validate.Range(min=0, max=1, max_inclusive=False))
    scheme = SchemeField(allow_none=True)
    seed = fields.Int(allow_none=True)
    samples = fields.Int(validate=validate.Range(min=1))
    epochs = fields.Int(validate=validate.Range(min=0))
    lr = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    lr_divisor = fields.Float(validate=validate.Range(min=1))
    momentum = fields.Float(validate=validate.Range(min=0, max=1, max_inclusive=False))
    batch_size = fields.Int(validate=validate.Range(min=1))

    @validates_schema
    def seed_for_stochastic(self, data, **kwargs):
        if data.get('scheme') is RoundingScheme.STOCHASTIC and data.get('seed') is None:
            raise ValidationError('STOCHASTIC rounding needs --seed', 'seed')
