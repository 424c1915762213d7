"""Outward-rounded interval arithmetic on numpy arrays.

Every operation takes and returns ``(lo, hi)`` array pairs, so many boxes
are processed at once. Each rounded result ``x`` is widened to
``x -/+ (|x| * RELATIVE + ABSOLUTE)``. ``RELATIVE = 2**-50`` is eight times
the worst relative rounding error of one IEEE operation. ``ABSOLUTE`` covers
rounding in the subnormal range. The widening is a monotone function of
``x``, so enclosures of sub-boxes never poke out of the parent enclosure.
Library transcendental functions are not correctly rounded and get an extra
absolute widening of :data:`TRANSCENDENTAL_SLACK`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RELATIVE = 2.0 ** -50
ABSOLUTE = 2.0 ** -1000
TRANSCENDENTAL_SLACK = 1e-15
TWO_PI = 2.0 * math.pi


def down(x):
    return x - (np.abs(x) * RELATIVE + ABSOLUTE)


def up(x):
    return x + (np.abs(x) * RELATIVE + ABSOLUTE)


def widen(lo, hi):
    return down(lo), up(hi)


def add(a, b):
    return widen(a[0] + b[0], a[1] + b[1])


def sub(a, b):
    return widen(a[0] - b[1], a[1] - b[0])


def neg(a):
    return -a[1], -a[0]


def mul(a, b):
    p1, p2, p3, p4 = a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return widen(lo, hi)


def scale(c: float, a):
    if c >= 0:
        return widen(c * a[0], c * a[1])
    return widen(c * a[1], c * a[0])


def square(a):
    lo, hi = a
    l2, h2 = lo * lo, hi * hi
    out_lo = np.where(lo >= 0, l2, np.where(hi <= 0, h2, 0.0))
    out_hi = np.maximum(l2, h2)
    out_lo = np.where(out_lo > 0, down(out_lo), 0.0)
    return out_lo, up(out_hi)


def absolute(a):
    lo, hi = a
    out_lo = np.where(lo >= 0, lo, np.where(hi <= 0, -hi, 0.0))
    out_hi = np.maximum(np.abs(lo), np.abs(hi))
    return out_lo, out_hi


def sqrt(a):
    lo = np.sqrt(np.maximum(a[0], 0.0))
    hi = np.sqrt(np.maximum(a[1], 0.0))
    return np.maximum(down(lo), 0.0), up(hi)


def tanh(a):
    lo = down(np.tanh(a[0]) - TRANSCENDENTAL_SLACK)
    hi = up(np.tanh(a[1]) + TRANSCENDENTAL_SLACK)
    return np.maximum(lo, -1.0), np.minimum(hi, 1.0)


def _contains_phase(lo, hi, phase):
    # True when lo <= phase + 2*pi*k <= hi for some integer k. Errs on the
    # side of True, which only loosens the bound.
    k = np.ceil((lo - phase) / TWO_PI - 1e-12)
    return phase + TWO_PI * k <= hi + 1e-12


def _periodic(lo, hi, fun, max_phase, min_phase):
    full = (hi - lo) >= TWO_PI
    flo, fhi = fun(lo), fun(hi)
    out_lo = np.minimum(flo, fhi)
    out_hi = np.maximum(flo, fhi)
    out_hi = np.where(full | _contains_phase(lo, hi, max_phase), 1.0,
                      up(out_hi + TRANSCENDENTAL_SLACK))
    out_lo = np.where(full | _contains_phase(lo, hi, min_phase), -1.0,
                      down(out_lo - TRANSCENDENTAL_SLACK))
    return np.maximum(out_lo, -1.0), np.minimum(out_hi, 1.0)


def sin(a):
    return _periodic(a[0], a[1], np.sin, 0.5 * math.pi, -0.5 * math.pi)


def cos(a):
    return _periodic(a[0], a[1], np.cos, 0.0, math.pi)


def reciprocal_positive(a):
    """``1 / a`` for intervals with ``lo > 0``."""
    return down(1.0 / a[1]), up(1.0 / a[0])


def intersect(a, b):
    return np.maximum(a[0], b[0]), np.minimum(a[1], b[1])


def hull(a, b):
    return np.minimum(a[0], b[0]), np.maximum(a[1], b[1])


@dataclass(frozen=True)
class Interval:
    """Scalar convenience wrapper around the array routines."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, x: float) -> "Interval":
        return cls(float(x), float(x))

    def _pair(self):
        return np.array([self.lo]), np.array([self.hi])

    @staticmethod
    def _wrap(pair) -> "Interval":
        return Interval(float(pair[0][0]), float(pair[1][0]))

    def _other(self, other):
        return other if isinstance(other, Interval) else Interval.point(other)

    def __add__(self, other):
        return self._wrap(add(self._pair(), self._other(other)._pair()))

    __radd__ = __add__

    def __sub__(self, other):
        return self._wrap(sub(self._pair(), self._other(other)._pair()))

    def __rsub__(self, other):
        return self._other(other) - self

    def __mul__(self, other):
        return self._wrap(mul(self._pair(), self._other(other)._pair()))

    __rmul__ = __mul__

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def square(self):
        return self._wrap(square(self._pair()))

    def tanh(self):
        return self._wrap(tanh(self._pair()))

    def sin(self):
        return self._wrap(sin(self._pair()))

    def cos(self):
        return self._wrap(cos(self._pair()))

    def __abs__(self):
        return self._wrap(absolute(self._pair()))

    def contains(self, x) -> bool:
        return self.lo <= x <= self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo
