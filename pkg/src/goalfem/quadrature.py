"""Quadrature rules on the reference interval [0, 1] and the reference
triangle with vertices (0, 0), (1, 0), (0, 1)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray  # (Q, dim)
    weights: np.ndarray  # (Q,)
    order: int  # exact for polynomials of total degree <= order

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return len(self.weights)


def gauss_interval(npts):
    """``npts``-point Gauss-Legendre rule mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return QuadratureRule(0.5 * (x + 1.0)[:, None], 0.5 * w, 2 * npts - 1)


# Dunavant (1985) degree-6 rule, barycentric orbits and weights for unit area.
_DUNAVANT6 = (
    (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
    (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
    (0.082851075618374, (0.053145049844817, 0.310352451033784, 0.636502499121399)),
)


def _dunavant6():
    pts, wts = [], []
    for w, bary in _DUNAVANT6:
        orbit = []
        for perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1), (1, 0, 2), (0, 2, 1), (2, 1, 0)):
            p = tuple(bary[k] for k in perm)
            if p not in orbit:
                orbit.append(p)
        for p in orbit:
            pts.append((p[1], p[2]))
            wts.append(0.5 * w)
    return QuadratureRule(np.array(pts), np.array(wts), 6)


def collapsed_gauss_triangle(order):
    """Tensor Gauss rule pulled back through the Duffy collapse.

    The Jacobian factor ``1 - u`` raises the degree in ``u`` by one, hence
    ``ceil((order + 2) / 2)`` points per direction.
    """
    n = max(1, math.ceil((order + 2) / 2))
    g = gauss_interval(n)
    u, wu = g.points[:, 0], g.weights
    uu, vv = np.meshgrid(u, u, indexing="ij")
    ww = np.outer(wu, wu) * (1.0 - uu)
    pts = np.column_stack([uu.ravel(), (vv * (1.0 - uu)).ravel()])
    return QuadratureRule(pts, ww.ravel(), 2 * n - 2)


def quadrature_rule(element_kind, order):
    """Return a rule on the reference element exact to at least ``order``."""
    if int(order) != order or order < 1:
        raise ValueError(f"unsupported quadrature order {order!r}")
    order = int(order)
    if element_kind == "interval":
        return gauss_interval(math.ceil((order + 1) / 2))
    if element_kind == "triangle":
        if order <= 6:
            return _dunavant6()
        return collapsed_gauss_triangle(order)
    raise ValueError(f"unknown element kind {element_kind!r}")
