import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from marshmallow import Schema, fields, post_load, ValidationError

from lpnet.exceptions import UsageError

_FORMAT_RE = re.compile(r'^Q(\d+)\.(\d+)(u?)$')


@dataclass(frozen=True)
class FixedPointFormat:
    """Qm.f descriptor: `bd` bits before the decimal point (sign included when
    signed), `ad` bits after it. Every representable value is k * 2^-ad for an
    integer code k in [min_code, max_code]."""
    bd: int
    ad: int
    signed: bool = True

    def __post_init__(self):
        if self.bd < 0 or self.ad < 0:
            raise UsageError(f"BD and AD must be non-negative, got Q{self.bd}.{self.ad}")
        if not 1 <= self.bd + self.ad <= 32:
            raise UsageError(f"total bits must lie in 1..32, got {self.bd + self.ad}")
        if self.signed and self.bd < 1:
            raise UsageError('signed formats keep the sign bit in BD, so BD >= 1')

    @property
    def total_bits(self) -> int:
        return self.bd + self.ad

    def step(self) -> float:
        return 2.0 ** -self.ad

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        if self.signed:
            return (1 << (self.total_bits - 1)) - 1
        return (1 << self.total_bits) - 1

    def max_value(self) -> float:
        return self.max_code * self.step()

    def min_value(self) -> float:
        return self.min_code * self.step()

    def with_total(self, total_bits: int, bd: int) -> 'FixedPointFormat':
        return replace(self, bd=bd, ad=total_bits - bd)

    @classmethod
    def parse(cls, text: str) -> 'FixedPointFormat':
        match = _FORMAT_RE.match(text.strip()) if isinstance(text, str) else None
        if match is None:
            raise UsageError(f"malformed Q-format string: {text!r} (expected Q<bd>.<ad>[u])")
        return cls(int(match.group(1)), int(match.group(2)), signed=not match.group(3))

    def __str__(self) -> str:
        return f"Q{self.bd}.{self.ad}{'' if self.signed else 'u'}"


class RoundingScheme(Enum):
    DETERMINISTIC = 'DETERMINISTIC'
    STOCHASTIC = 'STOCHASTIC'

    @classmethod
    def parse(cls, token) -> 'RoundingScheme':
        if isinstance(token, cls):
            return token
        aliases = {
            'DETERMINISTIC': cls.DETERMINISTIC,
            'DET': cls.DETERMINISTIC,
            'STOCHASTIC': cls.STOCHASTIC,
            # spelling used by older network configuration files
            'STOACHASTIC': cls.STOCHASTIC,
            'STOCH': cls.STOCHASTIC,
        }
        try:
            return aliases[str(token).strip().upper()]
        except KeyError:
            raise UsageError(f"unknown rounding scheme: {token!r}") from None

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class QuantSpec:
    """Per-layer quantization configuration."""
    weight_fmt: FixedPointFormat = field(default_factory=lambda: FixedPointFormat(2, 14))
    act_fmt: FixedPointFormat = field(default_factory=lambda: FixedPointFormat(8, 8))
    scheme: RoundingScheme = RoundingScheme.DETERMINISTIC
    enabled: bool = True
    # Optional wider bias format; None means biases share the weight format.
    bias_fmt: Optional[FixedPointFormat] = None

    @property
    def effective_bias_fmt(self) -> FixedPointFormat:
        return self.bias_fmt or self.weight_fmt


class QFormatField(fields.Field):
    """Serializes FixedPointFormat as its bit-exact Q-string."""

    def _serialize(self, value, attr, obj, **kwargs):
        return None if value is None else str(value)

    def _deserialize(self, value, attr, data, **kwargs):
        try:
            return FixedPointFormat.parse(value)
        except UsageError as err:
            raise ValidationError(str(err)) from err


class SchemeField(fields.Field):
    def _serialize(self, value, attr, obj, **kwargs):
        return None if value is None else str(value)

    def _deserialize(self, value, attr, data, **kwargs):
        try:
            return RoundingScheme.parse(value)
        except UsageError as err:
            raise ValidationError(str(err)) from err


class QuantSpecSchema(Schema):
    weight_fmt = QFormatField(required=True)
    act_fmt = QFormatField(required=True)
    scheme = SchemeField(required=True)
    enabled = fields.Bool(load_default=True)
    bias_fmt = QFormatField(allow_none=True, load_default=None)

    @post_load
    def make_spec(self, data, **kwargs):
        return QuantSpec(**data)
