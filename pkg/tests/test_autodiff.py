"""Scalar reverse-mode differentiation: values, gradients, graph traversal."""

import math

import numpy as np
import pytest

from codecalign.autodiff import Value, vmean, vsum


def fd(f, xs, h=1e-6):
    """Central finite differences of f: R^n -> R at the point xs."""
    xs = list(xs)
    out = []
    for i in range(len(xs)):
        hi = xs.copy()
        lo = xs.copy()
        hi[i] += h
        lo[i] -= h
        out.append((f(hi) - f(lo)) / (2 * h))
    return out


def grads(expr_fn, xs):
    leaves = [Value(x) for x in xs]
    root = expr_fn(leaves)
    root.backward()
    return root.data, [leaf.grad for leaf in leaves]


def test_arithmetic_composition_matches_finite_differences():
    def expr(v):
        a, b, c = v
        return (a * b + b / c - a) * (c + 2.0) + a ** 3

    def ref(v):
        a, b, c = v
        return (a * b + b / c - a) * (c + 2.0) + a ** 3

    xs = [0.7, -1.3, 2.1]
    val, g = grads(expr, xs)
    assert val == pytest.approx(ref(xs), rel=1e-12)
    assert g == pytest.approx(fd(ref, xs), rel=1e-6)


def test_transcendentals_match_finite_differences():
    def expr(v):
        a, b = v
        return (a.exp() + (b * b + 1.2).log()).tanh() * b

    def ref(v):
        a, b = v
        return math.tanh(math.exp(a) + math.log(b * b + 1.2)) * b

    xs = [0.3, -0.8]
    val, g = grads(expr, xs)
    assert val == pytest.approx(ref(xs), rel=1e-12)
    assert g == pytest.approx(fd(ref, xs), rel=1e-6)


def test_reflected_operators_accept_plain_floats():
    a = Value(2.0)
    assert (1.0 + a).data == 3.0
    assert (a + 1.0).data == 3.0
    assert (3.0 - a).data == 1.0
    assert (2.0 * a).data == 4.0
    assert (1.0 / a).data == 0.5
    assert (-a).data == -2.0
    r = 3.0 - a
    r.backward()
    assert a.grad == -1.0


def test_logsigmoid_matches_reference_and_fd():
    for x in (-3.0, -0.2, 0.0, 0.7, 4.0):
        v = Value(x)
        out = v.logsigmoid()
        out.backward()
        assert out.data == pytest.approx(math.log(1.0 / (1.0 + math.exp(-x))), abs=1e-14)
        sig = 1.0 / (1.0 + math.exp(-x))
        assert v.grad == pytest.approx(1.0 - sig, abs=1e-12)


def test_logsigmoid_is_stable_at_extreme_inputs():
    lo = Value(-800.0).logsigmoid()
    assert math.isfinite(lo.data)
    assert lo.data == pytest.approx(-800.0, abs=1e-9)
    hi = Value(800.0).logsigmoid()
    assert math.isfinite(hi.data)
    assert hi.data == pytest.approx(0.0, abs=1e-12)
    v = Value(-800.0)
    out = v.logsigmoid()
    out.backward()
    assert v.grad == pytest.approx(1.0, abs=1e-12)


def test_clip_value_and_gradient_routing():
    inside = Value(0.5)
    out = inside.clip(0.0, 1.0)
    out.backward()
    assert out.data == 0.5
    assert inside.grad == 1.0

    above = Value(2.5)
    out = above.clip(0.0, 1.0)
    out.backward()
    assert out.data == 1.0
    assert above.grad == 0.0

    below = Value(-2.5)
    out = below.clip(0.0, 1.0)
    out.backward()
    assert out.data == 0.0
    assert below.grad == 0.0

    boundary = Value(1.0)
    out = boundary.clip(0.0, 1.0)
    out.backward()
    assert out.data == 1.0
    assert boundary.grad == 0.0


def test_minimum_routes_gradient_to_smaller_argument():
    a, b = Value(0.3), Value(0.9)
    out = a.minimum(b) * 2.0
    out.backward()
    assert out.data == pytest.approx(0.6)
    assert (a.grad, b.grad) == (2.0, 0.0)

    a, b = Value(1.5), Value(-0.5)
    out = a.minimum(b)
    out.backward()
    assert out.data == -0.5
    assert (a.grad, b.grad) == (0.0, 1.0)


def test_minimum_tie_routes_gradient_to_first_argument():
    a, b = Value(0.7), Value(0.7)
    out = a.minimum(b)
    out.backward()
    assert out.data == 0.7
    assert (a.grad, b.grad) == (1.0, 0.0)


def test_reused_node_accumulates_gradient():
    x = Value(1.7)
    y = x * x + x  # dy/dx = 2x + 1
    y.backward()
    assert y.data == pytest.approx(1.7 * 1.7 + 1.7)
    assert x.grad == pytest.approx(2 * 1.7 + 1.0, rel=1e-12)


def test_diamond_graph_gradient():
    x = Value(0.4)
    a = x.exp()
    b = x.log() if x.data > 0 else x
    y = a * b  # y = e^x * ln x, dy/dx = e^x ln x + e^x / x
    y.backward()
    expect = math.exp(0.4) * math.log(0.4) + math.exp(0.4) / 0.4
    assert x.grad == pytest.approx(expect, rel=1e-12)


def test_deep_chain_does_not_hit_recursion_limit():
    x = Value(0.0)
    node = x
    for _ in range(50_000):
        node = node + 1.0
    node.backward()
    assert node.data == 50_000.0
    assert x.grad == 1.0


def test_vsum_and_vmean_values_and_gradients():
    xs = [Value(v) for v in (0.5, -1.0, 2.5, 3.0)]
    s = vsum(xs)
    s.backward()
    assert s.data == pytest.approx(5.0)
    assert [x.grad for x in xs] == [1.0] * 4

    xs = [Value(v) for v in (0.5, -1.0, 2.5, 3.0)]
    m = vmean(xs)
    m.backward()
    assert m.data == pytest.approx(1.25)
    assert [x.grad for x in xs] == pytest.approx([0.25] * 4)


def test_empty_reductions_are_zero():
    assert vsum([]).data == 0.0
    assert vmean([]).data == 0.0


def test_composite_objective_with_kinked_ops_matches_fd_away_from_kinks():
    def expr(v):
        a, b = v
        ratio = (a / b).clip(0.5, 2.0)
        return ratio.minimum(a * b).logsigmoid() + (a - b) ** 2

    def ref(v):
        a, b = v
        ratio = min(max(a / b, 0.5), 2.0)
        x = min(ratio, a * b)
        return math.log(1.0 / (1.0 + math.exp(-x))) + (a - b) ** 2

    xs = [1.2, 0.9]  # ratio ~ 1.33 (inside clip), product ~ 1.08 (clear of ties)
    val, g = grads(expr, xs)
    assert val == pytest.approx(ref(xs), rel=1e-12)
    assert g == pytest.approx(fd(ref, xs), rel=1e-5)


def test_pow_gradient():
    x = Value(1.3)
    y = x ** 4
    y.backward()
    assert y.data == pytest.approx(1.3 ** 4, rel=1e-12)
    assert x.grad == pytest.approx(4 * 1.3 ** 3, rel=1e-12)


def test_backward_seeds_root_gradient_to_one():
    x = Value(2.0)
    y = x * 3.0
    y.backward()
    assert y.grad == 1.0
    assert x.grad == 3.0
