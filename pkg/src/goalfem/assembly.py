"""Discrete operators of the weighted mixed system.

For a trial space U_h = span{psi_j} and a test space V_h = span{phi_i}:

* ``A[i, j] = (phi_j, phi_i)_omega``  weighted Gram matrix on V_h,
* ``B[i, j] = b(psi_j, phi_i)``       bilinear form, independent of omega,
* ``L[i]    = l_lambda(phi_i)``       load vector,
* ``Q[k, j] = q_k(psi_j)``            one row per quantity of interest.

All matrices are dense. Element contributions are reduced in ascending
element order so results are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mesh import Mesh1D
from .quadrature import quadrature_rule

# (trial operator, test operator) of each bilinear form
FORM_OPERATORS = {
    "diffusion_1d": ("grad", "grad"),
    "advection_1d": ("grad", "value"),
    "diffusion_2d": ("grad", "grad"),
}
# operator applied to both arguments of the weighted inner product
INNER_PRODUCT_OPERATORS = {"h1_seminorm": "grad", "l2": "value"}
DEFAULT_INNER_PRODUCT = {
    "diffusion_1d": "h1_seminorm",
    "advection_1d": "l2",
    "diffusion_2d": "h1_seminorm",
}

GRAM_ORDER = {1: 9, 2: 6}
LOAD_ORDER = {1: 9, 2: 10}


class AssemblyError(ValueError):
    pass


# -- loads and quantities of interest -------------------------------------------


@dataclass(frozen=True)
class PointLoad:
    """Dirac functional at lambda: l(v) = v(lambda)."""

    kind = "point"


@dataclass(frozen=True)
class DensityLoad:
    """l(v) = integral of f(lambda, x) v(x).

    ``breakpoints(lambda)`` lists interior points where ``f`` is not smooth;
    in 1D the elements are split there so Gauss quadrature stays exact for
    piecewise polynomial densities.
    """

    density: Callable
    breakpoints: Callable | None = None
    kind = "density"


@dataclass(frozen=True)
class PointQoI:
    x0: float
    kind = "point"


@dataclass(frozen=True)
class AverageQoI:
    """Mean value over the axis-aligned box ``[lo, hi]``."""

    lo: tuple
    hi: tuple
    kind = "average"

    @property
    def measure(self):
        return float(np.prod(np.subtract(self.hi, self.lo)))


@dataclass
class ProblemDefinition:
    form_kind: str
    load: object
    qois: Sequence
    exact_solution: Callable | None = None
    lambda_domain: tuple = (0.0, 1.0)
    inner_product_kind: str | None = None
    name: str = ""

    def __post_init__(self):
        if self.form_kind not in FORM_OPERATORS:
            raise AssemblyError(f"unknown form kind {self.form_kind!r}")
        if self.inner_product_kind is None:
            self.inner_product_kind = DEFAULT_INNER_PRODUCT[self.form_kind]
        if self.inner_product_kind not in INNER_PRODUCT_OPERATORS:
            raise AssemblyError(f"unknown inner product {self.inner_product_kind!r}")
        self.qois = list(self.qois)

    @property
    def dim(self):
        return 2 if self.form_kind.endswith("2d") else 1

    def check_lambda(self, lam):
        a, b = self.lambda_domain
        if not (a <= lam <= b) or not np.isfinite(lam):
            raise AssemblyError(f"lambda={lam} outside [{a}, {b}]")


@dataclass
class AssembledSystem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray = field(default=None)

    def __post_init__(self):
        self.A = np.asarray(self.A, float)
        self.B = np.asarray(self.B, float).reshape(len(self.A), -1)
        if self.Q is not None:
            self.Q = np.atleast_2d(np.asarray(self.Q, float))

    @property
    def m(self):
        return self.B.shape[0]

    @property
    def n(self):
        return self.B.shape[1]


# -- local evaluation helpers ---------------------------------------------------


def _operator(space, elem_ids, points, op):
    """Basis operator values (P, nloc, C) at physical points in known elements."""
    xi = space.reference_coords(elem_ids, points)
    vals, rg = space.tabulate(xi)
    if op == "value":
        return vals[:, :, None]
    return space.physical_grads(elem_ids, rg)


def _element_operator(space, rule, op):
    vals, grads = space.element_tabulation(rule)
    if op == "value":
        return np.broadcast_to(vals[None, :, :, None], grads.shape[:3] + (1,))
    return grads


def _scatter(rows, cols, local, shape):
    """Sum local blocks (S, a, b) into a dense matrix, dropping -1 indices."""
    r = np.broadcast_to(rows[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], local.shape).ravel()
    v = local.ravel()
    keep = (r >= 0) & (c >= 0)
    flat = np.bincount(r[keep] * shape[1] + c[keep], weights=v[keep],
                       minlength=shape[0] * shape[1])
    return flat.reshape(shape)


def _scatter_vec(rows, local, size):
    r = rows.ravel()
    keep = r >= 0
    return np.bincount(r[keep], weights=local.ravel()[keep], minlength=size)


def _local_coeffs(space, coeffs):
    """Gather global coefficient columns (ndofs, N) to (E, nloc, N)."""
    coeffs = np.asarray(coeffs, float).reshape(space.ndofs, -1)
    padded = np.vstack([coeffs, np.zeros((1, coeffs.shape[1]))])
    return padded[space.dof_map]  # -1 picks the zero row


# -- geometry: common refinement -------------------------------------------------


def _merge_points(x, tol=1e-13):
    x = np.sort(np.asarray(x, float))
    keep = np.concatenate([[True], np.diff(x) > tol])
    return x[keep]


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clip of a polygon by a convex CCW polygon."""
    out = [tuple(p) for p in subject]
    k = len(clipper)
    for e in range(k):
        a, b = clipper[e], clipper[(e + 1) % k]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp, out = out, []
        if not inp:
            break

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out).reshape(-1, 2)


def _fan(poly, min_area):
    tris = []
    for k in range(1, len(poly) - 1):
        t = np.array([poly[0], poly[k], poly[k + 1]])
        d1, d2 = t[1] - t[0], t[2] - t[0]
        if 0.5 * (d1[0] * d2[1] - d1[1] * d2[0]) > min_area:
            tris.append(t)
    return tris


def overlay(space_a, space_b):
    """Common refinement of two meshes of the same domain.

    Returns ``(cells, ea, eb)``: simplices (S, dim+1, dim) and the parent
    element of each in ``space_a`` and ``space_b``.
    """
    if space_a.dim != space_b.dim:
        raise AssemblyError("spaces live on domains of different dimension")
    if space_a.dim == 1:
        xa, xb = space_a.mesh.nodes, space_b.mesh.nodes
        if not (np.isclose(xa[0], xb[0]) and np.isclose(xa[-1], xb[-1])):
            raise AssemblyError("interval meshes cover different domains")
        x = _merge_points(np.concatenate([xa, xb]))
        cells = np.stack([x[:-1], x[1:]], axis=1)[:, :, None]
        mid = 0.5 * (x[:-1] + x[1:])
        return cells, space_a.locate(mid), space_b.locate(mid)

    ma, mb = space_a.mesh, space_b.mesh
    pa, pb = ma.vertices[ma.triangles], mb.vertices[mb.triangles]
    lo_a, hi_a = pa.min(1), pa.max(1)
    lo_b, hi_b = pb.min(1), pb.max(1)
    min_area = 1e-13 * min(ma.signed_areas().min(), mb.signed_areas().min())
    cells, ea, eb = [], [], []
    for i in range(len(pa)):
        cand = np.flatnonzero(np.all(lo_b <= hi_a[i] + 1e-14, 1) & np.all(hi_b >= lo_a[i] - 1e-14, 1))
        for j in cand:
            poly = clip_polygon(pa[i], pb[j])
            if len(poly) < 3:
                continue
            for t in _fan(poly, min_area):
                cells.append(t)
                ea.append(i)
                eb.append(j)
    return np.array(cells), np.array(ea), np.array(eb)


def _simplex_quadrature(cells, order):
    """Physical points (S, Q, dim) and weights (S, Q) on a batch of simplices."""
    dim = cells.shape[2]
    rule = quadrature_rule("interval" if dim == 1 else "triangle", order)
    v0 = cells[:, 0]
    jac = np.stack([cells[:, k + 1] - v0 for k in range(dim)], axis=2)
    x = v0[:, None, :] + np.einsum("sij,qj->sqi", jac, rule.points)
    det = np.abs(np.linalg.det(jac))
    return x, det[:, None] * rule.weights[None, :]


# -- assembly -------------------------------------------------------------------


def assemble_gram(test_space, weightnet, problem, order=None):
    """Weighted Gram matrix ``A`` on the test space."""
    disc = GramAssembler(test_space, problem, order)
    return disc.assemble(weightnet.weight(disc.points.reshape(-1, test_space.dim))
                         .reshape(disc.weights.shape))


class GramAssembler:
    """Precomputed element data for repeated Gram assembly with a changing
    weight, and for contracting d A / d omega against coefficient pairs."""

    def __init__(self, test_space, problem, order=None):
        if test_space.dim != problem.dim:
            raise AssemblyError("test space does not match problem dimension")
        order = GRAM_ORDER[test_space.dim] if order is None else order
        rule = test_space.quadrature(order)
        self.space = test_space
        self.points, self.weights = test_space.element_quadrature(rule)
        self.D = np.ascontiguousarray(
            _element_operator(test_space, rule, INNER_PRODUCT_OPERATORS[problem.inner_product_kind])
        )  # (E, Q, nloc, C)
        dm = test_space.dof_map
        self._rows = dm

    @property
    def flat_points(self):
        return self.points.reshape(-1, self.space.dim)

    def assemble(self, omega):
        """Dense Gram matrix for weight values ``omega`` at quadrature points (E, Q)."""
        ow = np.asarray(omega).reshape(self.weights.shape) * self.weights
        local = np.einsum("eq,eqac,eqbc->eab", ow, self.D, self.D)
        m = self.space.ndofs
        return _scatter(self._rows, self._rows, local, (m, m))

    def contract(self, W, R):
        """Return c (E, Q) with  sum_i W[:, i]^T dA R[:, i] = sum c * d omega.

        That is, ``c`` is the quadrature-weighted pointwise product of the
        operator applied to the FE functions with coefficients ``W`` and ``R``.
        """
        DW = np.einsum("eqac,ean->eqcn", self.D, _local_coeffs(self.space, W))
        DR = np.einsum("eqac,ean->eqcn", self.D, _local_coeffs(self.space, R))
        return self.weights * np.einsum("eqcn,eqcn->eq", DW, DR)


def assemble_bilinear(trial_space, test_space, problem, order=None):
    """``B[i, j] = b(psi_j, phi_i)`` integrated on the common refinement."""
    if trial_space.dim != test_space.dim or trial_space.dim != problem.dim:
        raise AssemblyError("trial/test space dimension mismatch")
    op_u, op_v = FORM_OPERATORS[problem.form_kind]
    if order is None:
        order = trial_space.degree + test_space.degree
    order = max(order, 2)
    cells, e_test, e_trial = overlay(test_space, trial_space)
    x, w = _simplex_quadrature(cells, order)
    S, Qn, dim = x.shape
    flat = x.reshape(-1, dim)
    dv = _operator(test_space, np.repeat(e_test, Qn), flat, op_v).reshape(S, Qn, test_space.nloc, -1)
    du = _operator(trial_space, np.repeat(e_trial, Qn), flat, op_u).reshape(S, Qn, trial_space.nloc, -1)
    local = np.einsum("sq,sqac,sqbc->sab", w, dv, du)
    return _scatter(test_space.dof_map[e_test], trial_space.dof_map[e_trial], local,
                    (test_space.ndofs, trial_space.ndofs))


def _split_interval_cells(mesh: Mesh1D, cuts):
    x = _merge_points(np.concatenate([mesh.nodes, np.asarray(cuts, float)]))
    return np.stack([x[:-1], x[1:]], axis=1)[:, :, None]


def assemble_load(test_space, problem, lam, order=None):
    """Load vector ``L[i] = l_lambda(phi_i)``."""
    problem.check_lambda(lam)
    load = problem.load
    if isinstance(load, PointLoad):
        if test_space.dim != 1:
            raise AssemblyError("point loads are only bounded on 1D H1 spaces")
        return test_space.basis_matrix([lam])[0]
    if not isinstance(load, DensityLoad):
        raise AssemblyError(f"unsupported load {load!r}")
    order = LOAD_ORDER[test_space.dim] if order is None else order
    if test_space.dim == 1:
        a, b = test_space.mesh.bounds
        cuts = [c for c in (load.breakpoints(lam) if load.breakpoints else ()) if a < c < b]
        cells = _split_interval_cells(test_space.mesh, cuts)
        x, w = _simplex_quadrature(cells, order)
        elems = test_space.locate(0.5 * (cells[:, 0, 0] + cells[:, 1, 0]))
    else:
        x, w = test_space.element_quadrature(order)
        elems = np.arange(test_space.num_elements)
    S, Qn, dim = x.shape
    flat = x.reshape(-1, dim)
    f = np.asarray(load.density(lam, flat if dim > 1 else flat[:, 0]), float).reshape(S, Qn)
    vals = _operator(test_space, np.repeat(elems, Qn), flat, "value").reshape(S, Qn, -1)
    local = np.einsum("sq,sqa->sa", w * f, vals)
    return _scatter_vec(test_space.dof_map[elems], local, test_space.ndofs)


def _box_polygon(lo, hi):
    return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]], float)


def assemble_qoi(trial_space, qoi):
    """Row vector ``Q[j] = q(psi_j)``."""
    if isinstance(qoi, PointQoI):
        return trial_space.basis_matrix([qoi.x0])[0]
    if not isinstance(qoi, AverageQoI):
        raise AssemblyError(f"unsupported quantity of interest {qoi!r}")
    lo, hi = np.atleast_1d(qoi.lo).astype(float), np.atleast_1d(qoi.hi).astype(float)
    if len(lo) != trial_space.dim or np.any(lo >= hi):
        raise AssemblyError("averaging box has wrong dimension or is empty")
    if trial_space.dim == 1:
        a, b = trial_space.mesh.bounds
        if lo[0] < a or hi[0] > b:
            raise AssemblyError("averaging interval not inside the domain")
        x = _merge_points(np.concatenate([[lo[0], hi[0]], trial_space.mesh.nodes]))
        x = x[(x >= lo[0]) & (x <= hi[0])]
        cells = np.stack([x[:-1], x[1:]], axis=1)[:, :, None]
        elems = trial_space.locate(0.5 * (x[:-1] + x[1:]))
    else:
        if np.any(lo < 0) or np.any(hi > 1):
            raise AssemblyError("averaging box not inside the unit square")
        box = _box_polygon(lo, hi)
        mesh = trial_space.mesh
        pts = mesh.vertices[mesh.triangles]
        cells, el = [], []
        for e, tri in enumerate(pts):
            if np.any(tri.max(0) < lo) or np.any(tri.min(0) > hi):
                continue
            poly = clip_polygon(box, tri)
            if len(poly) < 3:
                continue
            for t in _fan(poly, 1e-16 * qoi.measure):
                cells.append(t)
                el.append(e)
        cells, elems = np.array(cells), np.array(el)
    x, w = _simplex_quadrature(cells, max(2, trial_space.degree))
    S, Qn, dim = x.shape
    vals = _operator(trial_space, np.repeat(elems, Qn), x.reshape(-1, dim), "value").reshape(S, Qn, -1)
    local = np.einsum("sq,sqa->sa", w, vals) / qoi.measure
    return _scatter_vec(trial_space.dof_map[elems], local, trial_space.ndofs)


def assemble_system(trial_space, test_space, weightnet, problem):
    """All offline matrices for one weight."""
    A = assemble_gram(test_space, weightnet, problem)
    B = assemble_bilinear(trial_space, test_space, problem)
    Q = np.array([assemble_qoi(trial_space, q) for q in problem.qois]).reshape(len(problem.qois), -1)
    return AssembledSystem(A, B, Q)


def write_matrix_csv(M, path):
    """Dense matrix dump, one row per line, 17 significant digits."""
    np.savetxt(path, np.atleast_2d(M), fmt="%.17g", delimiter=",")
