"""Structured meshes on an interval and on the unit square.

Meshes are immutable value objects: coordinates are stored in read-only
numpy arrays and every derived quantity (edges, sizes) is computed on demand.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh parameters."""


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh1D:
    nodes: np.ndarray  # (N,)
    elements: np.ndarray  # (N-1, 2)

    dim = 1

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, float))
        object.__setattr__(self, "elements", _frozen(self.elements, np.int64))

    @property
    def vertices(self):
        return self.nodes[:, None]

    @property
    def cells(self):
        return self.elements

    @property
    def bounds(self):
        return float(self.nodes[0]), float(self.nodes[-1])

    @property
    def num_elements(self):
        return len(self.elements)

    def element_sizes(self):
        return np.diff(self.nodes)

    def boundary_vertices(self):
        return np.array([0, len(self.nodes) - 1])


@dataclass(frozen=True, eq=False)
class Mesh2D:
    vertices: np.ndarray  # (N, 2)
    triangles: np.ndarray  # (E, 3), counterclockwise
    boundary_vertices: np.ndarray

    dim = 2

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        object.__setattr__(
            self, "boundary_vertices", _frozen(self.boundary_vertices, np.int64)
        )

    @property
    def cells(self):
        return self.triangles

    @property
    def num_elements(self):
        return len(self.triangles)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def element_sizes(self):
        return self.signed_areas()

    def edges(self):
        """Unique undirected edges as sorted vertex pairs, plus the
        (E, 3) map from triangle-local edge (v0v1, v1v2, v2v0) to edge id."""
        t = self.triangles
        local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)


def build_interval_mesh(n, a=0.0, b=1.0):
    """Uniform partition of [a, b] into ``n`` elements."""
    if int(n) != n or n < 1:
        raise MeshError(f"element count must be a positive integer, got {n!r}")
    if not a < b:
        raise MeshError(f"need a < b, got a={a}, b={b}")
    n = int(n)
    nodes = a + (b - a) * np.arange(n + 1) / n
    nodes[-1] = b
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return Mesh1D(nodes, elements)


def build_square_mesh(n, split="crisscross", ny=None):
    """Structured triangulation of the unit square.

    Parameters
    ----------
    n : int
        Number of cells in the x-direction (and in y unless ``ny`` is given).
    split : {"diagonal", "crisscross"}
        ``diagonal`` cuts each cell along its lower-left to upper-right
        diagonal (2 triangles per cell); ``crisscross`` adds the cell centre
        and produces 4 triangles per cell.
    ny : int, optional
        Number of cells in the y-direction.
    """
    ny = n if ny is None else ny
    for k in (n, ny):
        if int(k) != k or k < 1:
            raise MeshError(f"cell count must be a positive integer, got {k!r}")
    if split not in ("diagonal", "crisscross"):
        raise MeshError(f"unknown split {split!r}")
    nx, ny = int(n), int(ny)

    xs = np.arange(nx + 1) / nx
    ys = np.arange(ny + 1) / ny
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    verts = [np.column_stack([gx.ravel(), gy.ravel()])]

    def vid(i, j):
        return j * (nx + 1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    i, j = i.ravel(), j.ravel()
    v00, v10, v11, v01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)

    if split == "diagonal":
        tris = np.stack(
            [np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])],
            axis=1,
        ).reshape(-1, 3)
    else:
        nv = (nx + 1) * (ny + 1)
        centres = np.column_stack([(i + 0.5) / nx, (j + 0.5) / ny])
        verts.append(centres)
        c = nv + np.arange(nx * ny)
        tris = np.stack(
            [
                np.column_stack([v00, v10, c]),
                np.column_stack([v10, v11, c]),
                np.column_stack([v11, v01, c]),
                np.column_stack([v01, v00, c]),
            ],
            axis=1,
        ).reshape(-1, 3)

    vertices = np.vstack(verts)
    on_bnd = (
        np.isclose(vertices[:, 0], 0.0)
        | np.isclose(vertices[:, 0], 1.0)
        | np.isclose(vertices[:, 1], 0.0)
        | np.isclose(vertices[:, 1], 1.0)
    )
    return Mesh2D(vertices, tris, np.flatnonzero(on_bnd))


def write_mesh_csv(mesh, vertex_path, element_path):
    """Dump vertices and element connectivity as two CSV files."""
    with open(Path(vertex_path), "w", newline="") as f:
        w = csv.writer(f)
        for p in mesh.vertices:
            w.writerow([repr(float(c)) for c in p])
    with open(Path(element_path), "w", newline="") as f:
        w = csv.writer(f)
        for cell in mesh.cells:
            w.writerow([int(k) for k in cell])
