"""Forward-mode dual scalars carrying a fixed-width gradient vector.

A Dual holds a value and the gradient of that value with respect to a fixed
set of seed variables (14 for a box pair: 7 + 7 parameters). Arithmetic
propagates derivatives by the chain rule; comparisons act on the primal
value only, so branchy code (filtering, sorting, min/max) takes the same
path it would take on plain floats and the surviving arithmetic is what
gets differentiated.
"""

from __future__ import annotations

import math

import numpy as np


class Dual:
    __slots__ = ("val", "grad")

    def __init__(self, val: float, grad: np.ndarray):
        self.val = float(val)
        self.grad = grad

    @staticmethod
    def seed(val: float, dim: int, index: int) -> "Dual":
        g = np.zeros(dim)
        g[index] = 1.0
        return Dual(val, g)

    @staticmethod
    def constant(val: float, dim: int) -> "Dual":
        return Dual(val, np.zeros(dim))

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.grad + other.grad)
        return Dual(self.val + other, self.grad)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.grad)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.grad - other.grad)
        return Dual(self.val - other, self.grad)

    def __rsub__(self, other):
        return Dual(other - self.val, -self.grad)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.val * other.grad + other.val * self.grad)
        return Dual(self.val * other, self.grad * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv, (self.grad - (self.val * inv) * other.grad) * inv)
        return Dual(self.val / other, self.grad / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        return Dual(other * inv, (-other * inv * inv) * self.grad)

    def __abs__(self):
        return self if self.val >= 0.0 else -self

    # -- comparisons (primal only) ------------------------------------------

    def __lt__(self, other):
        return self.val < _val(other)

    def __le__(self, other):
        return self.val <= _val(other)

    def __gt__(self, other):
        return self.val > _val(other)

    def __ge__(self, other):
        return self.val >= _val(other)

    def __repr__(self):
        return f"Dual({self.val!r}, grad={self.grad!r})"


def _val(x) -> float:
    return x.val if isinstance(x, Dual) else float(x)


def value_of(x) -> float:
    """Primal value of a float or Dual."""
    return _val(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(math.sin(x.val), math.cos(x.val) * x.grad)
    return math.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(math.cos(x.val), -math.sin(x.val) * x.grad)
    return math.cos(x)


def minimum(a, b):
    """min by primal value; at a tie the first argument wins."""
    return a if _val(a) <= _val(b) else b


def maximum(a, b):
    """max by primal value; at a tie the first argument wins."""
    return a if _val(a) >= _val(b) else b
