"""Arithmetic in F_p for p = 2^64 - 2^32 + 1 and the fixed-point encoding on top of it.

Reals are carried as field elements whose centered lift ``s`` in
(-p/2, p/2] is a signed integer with value ``s / 2^16``.  Encoding rounds
half-to-even; every later rescale floors toward -inf, so the same inputs
give the same bits on every platform.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Union

from .errors import DecodeError, OutOfRange, Overflow, ZeroInverse

P = 2**64 - 2**32 + 1
HALF_P = (P - 1) // 2
FIELD_BYTES = 8

SCALE_BITS = 16
SCALE = 1 << SCALE_BITS
# |s| bound for values entering the pipeline (reals with |x| < 2^24)
INPUT_GUARD = 1 << 40

Real = Union[int, float, Fraction]


class FieldElement:
    """An element of F_p.  Immutable, hashable, supports the usual operators."""

    __slots__ = ("value",)

    def __init__(self, value: int = 0):
        object.__setattr__(self, "value", int(value) % P)

    def __setattr__(self, name, value):
        raise AttributeError("FieldElement is immutable")

    @staticmethod
    def _coerce(other) -> int:
        if isinstance(other, FieldElement):
            return other.value
        if isinstance(other, int):
            return other % P
        return NotImplemented

    def __add__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return o
        return FieldElement(self.value + o)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return o
        return FieldElement(self.value - o)

    def __rsub__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return o
        return FieldElement(o - self.value)

    def __mul__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return o
        return FieldElement(self.value * o)

    __rmul__ = __mul__

    def __neg__(self):
        return FieldElement(-self.value)

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is NotImplemented:
            return o
        return self * field_inv(FieldElement(o))

    def __pow__(self, exponent: int):
        if exponent < 0:
            return field_inv(self) ** (-exponent)
        return FieldElement(pow(self.value, exponent, P))

    def __eq__(self, other):
        if isinstance(other, FieldElement):
            return self.value == other.value
        if isinstance(other, int):
            return self.value == other % P
        return NotImplemented

    def __hash__(self):
        return hash(self.value)

    def __int__(self):
        return self.value

    def __repr__(self):
        return f"FieldElement({self.value})"

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(FIELD_BYTES, "little")

    @classmethod
    def from_bytes(cls, data: bytes) -> "FieldElement":
        if len(data) != FIELD_BYTES:
            raise DecodeError(f"field element needs {FIELD_BYTES} bytes, got {len(data)}")
        v = int.from_bytes(data, "little")
        if v >= P:
            raise DecodeError("non-canonical field element")
        return cls(v)

    @classmethod
    def zero(cls) -> "FieldElement":
        return cls(0)

    @classmethod
    def one(cls) -> "FieldElement":
        return cls(1)


def _fe(x) -> FieldElement:
    return x if isinstance(x, FieldElement) else FieldElement(x)


def field_add(a, b) -> FieldElement:
    return FieldElement(_fe(a).value + _fe(b).value)


def field_sub(a, b) -> FieldElement:
    return FieldElement(_fe(a).value - _fe(b).value)


def field_mul(a, b) -> FieldElement:
    return FieldElement(_fe(a).value * _fe(b).value)


def field_neg(a) -> FieldElement:
    return FieldElement(-_fe(a).value)


def field_inv(a) -> FieldElement:
    v = _fe(a).value
    if v == 0:
        raise ZeroInverse("0 has no inverse in F_p")
    return FieldElement(pow(v, P - 2, P))


def lift(value: int) -> int:
    """Centered lift of a reduced field value into (-p/2, p/2]."""
    value %= P
    return value if value <= HALF_P else value - P


def check_fits(s: int) -> int:
    """Raise Overflow unless the signed integer has an unambiguous centered lift."""
    if s > HALF_P or s < -HALF_P:
        raise Overflow(f"integer {s} does not fit the centered field range")
    return s


def rescale(s: int) -> int:
    """Drop one factor of the scale, flooring toward -inf."""
    return s >> SCALE_BITS


def mul_rescale_int(a: int, b: int) -> int:
    """fp_mul_rescale on centered lifts."""
    return check_fits(a * b) >> SCALE_BITS


def encode_int(x: Real) -> int:
    """Signed fixed-point integer for a real, rounding half-to-even."""
    if isinstance(x, bool):
        raise TypeError("bool is not a real number")
    if isinstance(x, float) and x != x:
        raise OutOfRange("NaN cannot be encoded")
    if isinstance(x, float) and abs(x) == float("inf"):
        raise OutOfRange("infinity cannot be encoded")
    scaled = Fraction(x) * SCALE
    s = round(scaled)  # Fraction.__round__ is half-to-even
    if abs(s) >= INPUT_GUARD:
        raise OutOfRange(f"{x!r} outside the representable range |x| < 2^24")
    return s


class FixedPointValue:
    """A real number ``s / 2^16`` stored as the field element with centered lift ``s``."""

    __slots__ = ("raw",)

    def __init__(self, raw: FieldElement):
        object.__setattr__(self, "raw", _fe(raw))

    def __setattr__(self, name, value):
        raise AttributeError("FixedPointValue is immutable")

    @classmethod
    def from_int(cls, s: int) -> "FixedPointValue":
        return cls(FieldElement(check_fits(s)))

    @property
    def s(self) -> int:
        return lift(self.raw.value)

    def to_float(self) -> float:
        return self.s / SCALE

    def to_fraction(self) -> Fraction:
        return Fraction(self.s, SCALE)

    def to_bytes(self) -> bytes:
        return self.raw.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FixedPointValue":
        return cls(FieldElement.from_bytes(data))

    def __eq__(self, other):
        if isinstance(other, FixedPointValue):
            return self.raw == other.raw
        return NotImplemented

    def __hash__(self):
        return hash(("fp", self.raw.value))

    def __repr__(self):
        return f"FixedPointValue({self.to_float()!r}, s={self.s})"


def fp_encode(x: Real) -> FixedPointValue:
    return FixedPointValue.from_int(encode_int(x))


def fp_decode(v: FixedPointValue) -> float:
    return v.to_float()


def fp_mul_rescale(a: FixedPointValue, b: FixedPointValue) -> FixedPointValue:
    return FixedPointValue.from_int(mul_rescale_int(a.s, b.s))


def saturate_int(s: int, bound_s: int) -> int:
    return max(-bound_s, min(bound_s, s))


def fp_saturate(a: FixedPointValue, bound: Real) -> FixedPointValue:
    if bound <= 0:
        raise OutOfRange("saturation bound must be positive")
    return FixedPointValue.from_int(saturate_int(a.s, encode_int(bound)))
