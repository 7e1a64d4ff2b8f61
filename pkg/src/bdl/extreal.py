"""Extended-real scalars and the arithmetic conventions used throughout the package.

Conventions (the "inf-dominant" rules):

    (+inf) + (-inf) = (-inf) + (+inf) = +inf
    (+inf) - (+inf) = (-inf) - (-inf) = +inf
    0 * (+inf) = +inf,   0 * (-inf) = 0

Scaling by a negative number is rejected. NaN never enters an ``XReal``.

Besides the scalar type, this module provides vectorised counterparts
(``xadd_array`` and friends) operating on float arrays whose entries are
finite or +/-inf. All grid code in the package uses those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import total_ordering
from typing import Union

import numpy as np

POS_INF_TOKEN = "+inf"
NEG_INF_TOKEN = "-inf"

Number = Union[int, float, "XReal"]


@total_ordering
@dataclass(frozen=True)
class XReal:
    """A value in R united with {-inf, +inf}.

    Infinite values are stored as the IEEE infinities; finite values as a
    Python float. NaN is rejected at construction so the order stays total.
    """

    value: float

    def __post_init__(self):
        v = self.value
        if isinstance(v, XReal):
            v = v.value
        try:
            v = float(v)
        except (TypeError, ValueError) as exc:
            raise TypeError(f"cannot build XReal from {self.value!r}") from exc
        if math.isnan(v):
            raise ValueError("NaN is not an extended real")
        object.__setattr__(self, "value", v)

    # -- classification -------------------------------------------------
    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.value)

    @property
    def is_pos_inf(self) -> bool:
        return self.value == math.inf

    @property
    def is_neg_inf(self) -> bool:
        return self.value == -math.inf

    # -- ordering ---------------------------------------------------------
    def __eq__(self, other):
        if isinstance(other, XReal):
            return self.value == other.value
        if isinstance(other, (int, float)) and not isinstance(other, bool):
            return self.value == other
        return NotImplemented

    def __lt__(self, other):
        other = _coerce(other)
        return self.value < other.value

    def __hash__(self):
        return hash(self.value)

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return xadd(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return xsub(self, _coerce(other))

    def __rsub__(self, other):
        return xsub(_coerce(other), self)

    def __neg__(self):
        return XReal(-self.value)

    def __float__(self):
        return self.value

    def __str__(self):
        return render(self)

    def __repr__(self):
        return f"XReal({render(self)})"


POS_INF = XReal(math.inf)
NEG_INF = XReal(-math.inf)
ZERO = XReal(0.0)


def _coerce(a) -> XReal:
    if isinstance(a, XReal):
        return a
    return XReal(a)


def xadd(a, b) -> XReal:
    """Extended addition; opposite infinities resolve to +inf."""
    a, b = _coerce(a), _coerce(b)
    if a.is_pos_inf or b.is_pos_inf:
        return POS_INF
    if a.is_neg_inf or b.is_neg_inf:
        return NEG_INF
    return XReal(a.value + b.value)


def xsub(a, b) -> XReal:
    """Extended subtraction; ``inf - inf`` of either sign is +inf."""
    a, b = _coerce(a), _coerce(b)
    if a.is_pos_inf and b.is_pos_inf:
        return POS_INF
    if a.is_neg_inf and b.is_neg_inf:
        return POS_INF
    return xadd(a, XReal(-b.value))


def xscale(lam, a) -> XReal:
    """Nonnegative scaling with ``0*(+inf) = +inf`` and ``0*(-inf) = 0``."""
    lam = float(lam)
    if math.isnan(lam) or lam < 0:
        raise ValueError(f"xscale needs a nonnegative factor, got {lam}")
    a = _coerce(a)
    if lam == 0.0:
        if a.is_pos_inf:
            return POS_INF
        return ZERO
    if math.isinf(lam):
        if a.value > 0:
            return POS_INF
        if a.value < 0:
            return NEG_INF
        return ZERO
    return XReal(lam * a.value)


def render(a) -> str:
    """Text form: shortest round-trip decimal, or the +inf / -inf tokens."""
    a = _coerce(a)
    if a.is_pos_inf:
        return POS_INF_TOKEN
    if a.is_neg_inf:
        return NEG_INF_TOKEN
    return format_number(a.value)


def format_number(v: float) -> str:
    """Shortest decimal that parses back to the same float.

    Integral values below 2**53 are printed without a fractional part.
    """
    v = float(v)
    if math.isinf(v):
        return POS_INF_TOKEN if v > 0 else NEG_INF_TOKEN
    if v == 0.0:
        return "0"
    if v.is_integer() and abs(v) < 2.0**53:
        return str(int(v))
    return repr(v)


def parse_xreal(text: str) -> XReal:
    """Inverse of :func:`render`; accepts ``+inf``, ``-inf`` and decimals."""
    t = text.strip()
    if t == POS_INF_TOKEN or t == "inf":
        return POS_INF
    if t == NEG_INF_TOKEN:
        return NEG_INF
    low = t.lower()
    if "nan" in low or "inf" in low:
        raise ValueError(f"not an extended real: {text!r}")
    return XReal(float(t))


# ---------------------------------------------------------------------------
# Vectorised rules on float arrays holding finite values and +/-inf.
# ---------------------------------------------------------------------------

def _check_no_nan(*arrays):
    for arr in arrays:
        if np.isnan(arr).any():
            raise ValueError("NaN entries are not extended reals")


def xadd_array(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_no_nan(a, b)
    with np.errstate(invalid="ignore"):
        out = a + b
    out[np.isnan(out)] = np.inf
    return out


def xsub_array(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_no_nan(a, b)
    with np.errstate(invalid="ignore"):
        out = a - b
    out[np.isnan(out)] = np.inf
    return out


def xscale_array(lam, a):
    lam = float(lam)
    if math.isnan(lam) or lam < 0:
        raise ValueError(f"xscale needs a nonnegative factor, got {lam}")
    a = np.asarray(a, dtype=float)
    _check_no_nan(a)
    if lam == 0.0:
        return np.where(a == np.inf, np.inf, 0.0)
    with np.errstate(invalid="ignore"):
        out = lam * a
    out[np.isnan(out)] = 0.0
    return out


def to_xreal(v) -> XReal:
    return _coerce(v)
