import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from goalfem.quadrature import collapsed_gauss_triangle, gauss_interval, quadrature_rule


def test_interval_order9_x9():
    r = quadrature_rule("interval", 9)
    assert len(r) == 5
    assert abs(r.weights @ r.points[:, 0] ** 9 - 0.1) < 1e-14


def test_interval_linear():
    r = gauss_interval(5)
    assert abs(r.weights @ r.points[:, 0] - 0.5) < 1e-15


def test_triangle_constant():
    assert abs(quadrature_rule("triangle", 6).weights.sum() - 0.5) < 1e-14


def _triangle_monomial(a, b):
    # int over the reference triangle of x^a y^b = a! b! / (a + b + 2)!
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@pytest.mark.parametrize("order", [1, 2, 4, 6, 8, 10, 13])
def test_triangle_exactness(order):
    r = quadrature_rule("triangle", order)
    assert np.all(r.weights > 0)
    x, y = r.points.T
    for a in range(order + 1):
        for b in range(order + 1 - a):
            assert abs(r.weights @ (x**a * y**b) - _triangle_monomial(a, b)) < 1e-13


@given(st.integers(1, 30))
def test_interval_exactness(order):
    r = quadrature_rule("interval", order)
    assert r.order >= order
    x = r.points[:, 0]
    for k in range(order + 1):
        assert abs(r.weights @ x**k - 1 / (k + 1)) < 1e-13


@given(st.integers(1, 20))
def test_collapsed_points_inside(order):
    r = collapsed_gauss_triangle(order)
    x, y = r.points.T
    assert np.all(x >= 0) and np.all(y >= 0) and np.all(x + y <= 1)
    assert abs(r.weights.sum() - 0.5) < 1e-14


@pytest.mark.parametrize("kind, order", [("interval", 0), ("triangle", -1), ("interval", 2.5),
                                         ("quad", 3)])
def test_rejects(kind, order):
    with pytest.raises(ValueError):
        quadrature_rule(kind, order)
