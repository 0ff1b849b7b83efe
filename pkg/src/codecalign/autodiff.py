"""Scalar reverse-mode autodiff for composing training objectives.

Tensor work (transformer forward/backward) is hand-written in `nn`; this
module differentiates the thin scalar layer on top: losses built from
sequence log-probabilities and reward scores.  Each `Value` records its
children and local derivatives; `backward` walks the graph once in
topological order.
"""

from __future__ import annotations

import math


class Value:
    __slots__ = ("data", "grad", "_children", "_local")

    def __init__(self, data: float, children: tuple = (), local: tuple = ()):
        self.data = float(data)
        self.grad = 0.0
        self._children = children
        self._local = local

    def __repr__(self):
        return f"Value({self.data:.6g})"

    # -- arithmetic ----------------------------------------------------------

    @staticmethod
    def _wrap(x) -> "Value":
        return x if isinstance(x, Value) else Value(x)

    def __add__(self, other):
        other = self._wrap(other)
        return Value(self.data + other.data, (self, other), (1.0, 1.0))

    __radd__ = __add__

    def __neg__(self):
        return Value(-self.data, (self,), (-1.0,))

    def __sub__(self, other):
        other = self._wrap(other)
        return Value(self.data - other.data, (self, other), (1.0, -1.0))

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        return Value(self.data * other.data, (self, other), (other.data, self.data))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        return Value(self.data / other.data, (self, other),
                     (1.0 / other.data, -self.data / (other.data * other.data)))

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, k: float):
        return Value(self.data ** k, (self,), (k * self.data ** (k - 1),))

    # -- nonlinearities --------------------------------------------------------

    def exp(self):
        e = math.exp(self.data)
        return Value(e, (self,), (e,))

    def log(self):
        return Value(math.log(self.data), (self,), (1.0 / self.data,))

    def tanh(self):
        t = math.tanh(self.data)
        return Value(t, (self,), (1.0 - t * t,))

    def logsigmoid(self):
        z = self.data
        if z >= 0:
            data = -math.log1p(math.exp(-z))
            sig = 1.0 / (1.0 + math.exp(-z))
        else:
            data = z - math.log1p(math.exp(z))
            sig = math.exp(z) / (1.0 + math.exp(z))
        return Value(data, (self,), (1.0 - sig,))

    def clip(self, lo: float, hi: float):
        # pass-through gradient strictly inside the interval
        inside = lo < self.data < hi
        return Value(min(max(self.data, lo), hi), (self,), (1.0 if inside else 0.0,))

    def minimum(self, other):
        other = self._wrap(other)
        if self.data <= other.data:
            return Value(self.data, (self, other), (1.0, 0.0))
        return Value(other.data, (self, other), (0.0, 1.0))

    # -- reduction ------------------------------------------------------------

    def backward(self):
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._children:
                if id(child) not in seen:
                    stack.append((child, False))
        self.grad = 1.0
        for node in reversed(order):
            for child, local in zip(node._children, node._local):
                child.grad += local * node.grad


def vsum(values) -> Value:
    values = list(values)
    if not values:
        return Value(0.0)
    return Value(sum(v.data for v in values), tuple(values), (1.0,) * len(values))


def vmean(values) -> Value:
    values = list(values)
    if not values:
        return Value(0.0)
    n = len(values)
    return Value(sum(v.data for v in values) / n, tuple(values), (1.0 / n,) * n)
