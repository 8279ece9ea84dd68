"""Conforming Lagrange spaces (P1, P2) on interval and triangle meshes."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh1D, Mesh2D
from .quadrature import QuadratureRule, quadrature_rule

BOUNDARY_CONDITIONS = ("none", "left_dirichlet", "full_dirichlet")


class SpaceError(ValueError):
    pass


# Reference basis functions. Local node order:
#   interval P1: (x0, x1)            P2: (x0, x1, mid)
#   triangle P1: (v0, v1, v2)        P2: (v0, v1, v2, m01, m12, m20)


def _tabulate_interval(degree, xi):
    t = xi[:, 0]
    if degree == 1:
        vals = np.column_stack([1.0 - t, t])
        grads = np.column_stack([-np.ones_like(t), np.ones_like(t)])
    else:
        vals = np.column_stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)])
        grads = np.column_stack([4 * t - 3, 4 * t - 1, 4 - 8 * t])
    return vals, grads[:, :, None]


_BARY_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def _tabulate_triangle(degree, xi):
    lam = np.column_stack([1.0 - xi[:, 0] - xi[:, 1], xi[:, 0], xi[:, 1]])
    g = _BARY_GRADS
    if degree == 1:
        grads = np.broadcast_to(g, (len(xi), 3, 2)).copy()
        return lam, grads
    vals = np.empty((len(xi), 6))
    grads = np.empty((len(xi), 6, 2))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2 * lam[:, i] - 1)
        grads[:, i] = (4 * lam[:, i] - 1)[:, None] * g[i]
    for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        vals[:, 3 + k] = 4 * lam[:, i] * lam[:, j]
        grads[:, 3 + k] = 4 * (lam[:, j, None] * g[i] + lam[:, i, None] * g[j])
    return vals, grads


class FunctionSpace:
    """Continuous piecewise polynomial space with strongly imposed
    homogeneous Dirichlet conditions.

    Free nodes are numbered lexicographically by coordinate (x first, then
    y); constrained nodes map to -1 in ``dof_map``.
    """

    def __init__(self, mesh, degree, bc="none"):
        if degree not in (1, 2):
            raise SpaceError(f"degree must be 1 or 2, got {degree!r}")
        if bc not in BOUNDARY_CONDITIONS:
            raise SpaceError(f"unknown boundary condition {bc!r}")
        if bc == "left_dirichlet" and not isinstance(mesh, Mesh1D):
            raise SpaceError("left_dirichlet only applies to interval meshes")
        self.mesh = mesh
        self.degree = degree
        self.bc = bc
        self.dim = mesh.dim
        self.element_kind = "interval" if self.dim == 1 else "triangle"

        if isinstance(mesh, Mesh1D):
            coords, elem_nodes = self._interval_nodes(mesh, degree)
            a, b = mesh.bounds
            x = coords[:, 0]
            if bc == "left_dirichlet":
                fixed = np.isclose(x, a)
            elif bc == "full_dirichlet":
                fixed = np.isclose(x, a) | np.isclose(x, b)
            else:
                fixed = np.zeros(len(x), bool)
        else:
            coords, elem_nodes = self._triangle_nodes(mesh, degree)
            if bc == "full_dirichlet":
                fixed = np.any(np.isclose(coords, 0.0) | np.isclose(coords, 1.0), axis=1)
            else:
                fixed = np.zeros(len(coords), bool)

        free = np.flatnonzero(~fixed)
        key = np.round(coords[free], 12)
        order = np.lexsort(key.T[::-1])  # primary key: x
        node_to_dof = -np.ones(len(coords), np.int64)
        node_to_dof[free[order]] = np.arange(len(free))

        self.node_coords = coords
        self.element_nodes = elem_nodes
        self.node_to_dof = node_to_dof
        self.dof_map = node_to_dof[elem_nodes]
        self.dof_count = len(free)
        self.dof_coords = coords[free[order]]
        self._setup_geometry()

    @property
    def ndofs(self):
        return self.dof_count

    @property
    def nloc(self):
        return self.element_nodes.shape[1]

    @property
    def num_elements(self):
        return self.mesh.num_elements

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _interval_nodes(mesh, degree):
        x = mesh.nodes
        elems = mesh.elements
        if degree == 1:
            return x[:, None].copy(), elems.copy()
        nv = len(x)
        mids = 0.5 * (x[elems[:, 0]] + x[elems[:, 1]])
        coords = np.concatenate([x, mids])[:, None]
        elem_nodes = np.column_stack([elems, nv + np.arange(len(elems))])
        return coords, elem_nodes

    @staticmethod
    def _triangle_nodes(mesh, degree):
        v = mesh.vertices
        tris = mesh.triangles
        if degree == 1:
            return v.copy(), tris.copy()
        edges, tri_edges = mesh.edges()
        mids = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])
        coords = np.vstack([v, mids])
        elem_nodes = np.column_stack([tris, len(v) + tri_edges])
        return coords, elem_nodes

    def _setup_geometry(self):
        cells = self.mesh.cells
        if self.dim == 1:
            x = self.mesh.nodes
            self.origin = x[cells[:, 0]][:, None]
            h = x[cells[:, 1]] - x[cells[:, 0]]
            self.jac = h[:, None, None]
        else:
            p = self.mesh.vertices[cells]
            self.origin = p[:, 0]
            self.jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.detj = np.linalg.det(self.jac) if self.dim == 2 else self.jac[:, 0, 0]
        self.jac_inv = np.linalg.inv(self.jac)

    # -- reference element ----------------------------------------------------

    def tabulate(self, xi):
        """Reference values (P, nloc) and reference gradients (P, nloc, dim)."""
        xi = np.atleast_2d(np.asarray(xi, float))
        if self.dim == 1:
            return _tabulate_interval(self.degree, xi.reshape(-1, 1))
        return _tabulate_triangle(self.degree, xi)

    def quadrature(self, order):
        return quadrature_rule(self.element_kind, order)

    # -- physical evaluation --------------------------------------------------

    def to_physical(self, elem_ids, xi):
        elem_ids = np.asarray(elem_ids)
        return self.origin[elem_ids] + np.einsum("pij,pj->pi", self.jac[elem_ids], xi)

    def reference_coords(self, elem_ids, points):
        elem_ids = np.asarray(elem_ids)
        points = np.asarray(points, float).reshape(len(elem_ids), self.dim)
        return np.einsum("pij,pj->pi", self.jac_inv[elem_ids], points - self.origin[elem_ids])

    def physical_grads(self, elem_ids, ref_grads):
        # grad_x = J^{-T} grad_xi, stored as row vectors
        return np.einsum("pad,pdk->pak", ref_grads, self.jac_inv[np.asarray(elem_ids)])

    def eval_basis(self, element_id, local_points):
        """Local basis values (nloc, P) and physical gradients (nloc, P, dim)
        on element ``element_id`` at reference points ``local_points``."""
        if not 0 <= element_id < self.num_elements:
            raise IndexError(f"element {element_id} out of range")
        xi = np.asarray(local_points, float).reshape(-1, self.dim)
        vals, rg = self.tabulate(xi)
        ids = np.full(len(xi), element_id)
        grads = self.physical_grads(ids, rg)
        return vals.T, grads.transpose(1, 0, 2)

    def locate(self, points, tol=1e-10):
        """Index of an element containing each point."""
        pts = np.asarray(points, float).reshape(-1, self.dim)
        if self.dim == 1:
            x = self.mesh.nodes
            a, b = self.mesh.bounds
            if np.any(pts[:, 0] < a - tol) or np.any(pts[:, 0] > b + tol):
                raise ValueError("point outside the mesh")
            idx = np.searchsorted(x, pts[:, 0], side="right") - 1
            return np.clip(idx, 0, self.num_elements - 1)
        out = np.empty(len(pts), np.int64)
        for start in range(0, len(pts), 256):
            chunk = pts[start:start + 256]
            d = chunk[:, None, :] - self.origin[None]
            xi = np.einsum("eij,pej->pei", self.jac_inv, d)
            lam_min = np.minimum(np.minimum(xi[..., 0], xi[..., 1]), 1 - xi.sum(-1))
            best = np.argmax(lam_min, axis=1)
            if np.any(lam_min[np.arange(len(chunk)), best] < -tol):
                raise ValueError("point outside the mesh")
            out[start:start + 256] = best
        return out

    def basis_matrix(self, points):
        """Dense (P, ndofs) matrix of global basis values at physical points."""
        pts = np.asarray(points, float).reshape(-1, self.dim)
        elems = self.locate(pts)
        vals, _ = self.tabulate(self.reference_coords(elems, pts))
        out = np.zeros((len(pts), self.ndofs))
        dofs = self.dof_map[elems]
        rows = np.repeat(np.arange(len(pts)), self.nloc)
        mask = dofs.ravel() >= 0
        np.add.at(out, (rows[mask], dofs.ravel()[mask]), vals.ravel()[mask])
        return out

    def evaluate(self, coeffs, points):
        return self.basis_matrix(points) @ np.asarray(coeffs, float)

    def element_quadrature(self, rule):
        """Physical points (E, Q, dim) and weights (E, Q) of ``rule``."""
        if isinstance(rule, int):
            rule = self.quadrature(rule)
        xq = self.origin[:, None, :] + np.einsum("eij,qj->eqi", self.jac, rule.points)
        wq = np.abs(self.detj)[:, None] * rule.weights[None, :]
        return xq, wq

    def element_tabulation(self, rule: QuadratureRule):
        """Values (Q, nloc) and physical gradients (E, Q, nloc, dim)."""
        vals, rg = self.tabulate(rule.points)
        grads = np.einsum("qad,edk->eqak", rg, self.jac_inv)
        return vals, grads

    def interpolate(self, func):
        """Nodal interpolant coefficients of ``func(points) -> values``."""
        return np.asarray(func(self.dof_coords), float)


def build_space(mesh, degree, bc="none"):
    if not isinstance(mesh, (Mesh1D, Mesh2D)):
        raise SpaceError("unsupported mesh type")
    return FunctionSpace(mesh, degree, bc)
