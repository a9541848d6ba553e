"""Small argument checks shared by the public entry points."""
from __future__ import annotations

import math
import numbers


def check_positive(value, name, exc=ValueError):
    if not isinstance(value, numbers.Real) or isinstance(value, bool) or not math.isfinite(value) or value <= 0:
        raise exc(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_positive_int(value, name, exc=ValueError):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
        raise exc(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value, name, exc=ValueError, *, closed_right=False):
    ok = isinstance(value, numbers.Real) and 0 < value and (value <= 1 if closed_right else value < 1)
    if not ok:
        bound = "(0, 1]" if closed_right else "(0, 1)"
        raise exc(f"{name} must lie in {bound}, got {value!r}")
    return float(value)
