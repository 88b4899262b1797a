"""Simplicial meshes of intervals and rectangles.

Only structured meshes are built here: uniform partitions of an interval and
rectangles cut into right triangles. Refinement is uniform (bisection in 1D,
red refinement in 2D), so every mesh family produced is quasi-uniform with a
ratio that does not change under refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simplicial mesh.

    Attributes
    ----------
    vertices : (n_vertices, dim) float array
    cells : (n_cells, dim + 1) int array of vertex indices
    boundary : (n_vertices,) bool array, True on the boundary of the domain
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    _diam: np.ndarray = field(init=False, repr=False)
    _measure: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] not in (1, 2):
            raise ValueError("vertices must have shape (n, 1) or (n, 2)")
        cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        dim = vertices.shape[1]
        if cells.ndim != 2 or cells.shape[1] != dim + 1:
            raise ValueError(f"cells must have {dim + 1} vertices each")
        if cells.min() < 0 or cells.max() >= len(vertices):
            raise ValueError("cell vertex index out of range")
        if any(len(set(c)) != dim + 1 for c in cells.tolist()):
            raise ValueError("cell with repeated vertex")
        boundary = np.ascontiguousarray(self.boundary, dtype=bool)
        if boundary.shape != (len(vertices),):
            raise ValueError("one boundary flag per vertex required")

        measure = _signed_measures(vertices, cells)
        if np.any(measure <= 0.0):
            raise ValueError("cells must have positive measure and counterclockwise orientation")
        for arr in (vertices, cells, boundary, measure):
            arr.setflags(write=False)
        diam = _diameters(vertices, cells)
        diam.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "_measure", measure)
        object.__setattr__(self, "_diam", diam)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def cell_measures(self) -> np.ndarray:
        return self._measure

    @property
    def cell_diameters(self) -> np.ndarray:
        return self._diam

    @property
    def h_max(self) -> float:
        return float(self._diam.max())

    @property
    def h_min(self) -> float:
        return float(self._diam.min())

    @property
    def quasi_uniformity(self) -> float:
        """Ratio ``h_max / h_min``."""
        return self.h_max / self.h_min

    @property
    def volume(self) -> float:
        return float(self._measure.sum())

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique edges of a 2D mesh and the number of cells sharing each."""
        if self.dim != 2:
            raise ValueError("edges() is defined for triangle meshes")
        local = np.array([[0, 1], [1, 2], [2, 0]])
        all_edges = np.sort(self.cells[:, local].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
        return uniq, counts

    def write_text(self, path: str | Path) -> None:
        """Dump vertices then cells, one per line, for debugging."""
        lines = [" ".join(f"{c:.17g}" for c in v) for v in self.vertices]
        lines += [" ".join(str(i) for i in c) for c in self.cells]
        Path(path).write_text("\n".join(lines) + "\n")


def _signed_measures(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    p = vertices[cells]
    if vertices.shape[1] == 1:
        return p[:, 1, 0] - p[:, 0, 0]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _diameters(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    p = vertices[cells]
    k = cells.shape[1]
    diam = np.zeros(len(cells))
    for a in range(k):
        for b in range(a + 1, k):
            diam = np.maximum(diam, np.linalg.norm(p[:, a] - p[:, b], axis=1))
    return diam


def build_interval_mesh(a: float, b: float, n_cells: int) -> Mesh:
    """Uniform partition of ``[a, b]`` into ``n_cells`` cells."""
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    if int(n_cells) != n_cells or n_cells < 1:
        raise ValueError(f"n_cells must be a positive integer, got {n_cells}")
    n_cells = int(n_cells)
    x = np.linspace(a, b, n_cells + 1)
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    boundary = np.zeros(n_cells + 1, dtype=bool)
    boundary[[0, -1]] = True
    return Mesh(x[:, None], cells, boundary)


def build_rectangle_mesh(lx: float, ly: float, nx: int, ny: int) -> Mesh:
    """Structured triangulation of ``[0, lx] x [0, ly]``.

    Each of the ``nx * ny`` grid rectangles is split along its
    lower-left to upper-right diagonal.
    """
    if not (lx > 0 and ly > 0):
        raise ValueError("rectangle side lengths must be positive")
    for n in (nx, ny):
        if int(n) != n or n < 1:
            raise ValueError("grid counts must be positive integers")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)

    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
    boundary = ((ii == 0) | (ii == nx) | (jj == 0) | (jj == ny)).ravel()
    return Mesh(vertices, cells, boundary)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every cell: bisection in 1D, red refinement in 2D."""
    if mesh.dim == 1:
        return _refine_1d(mesh)
    return _refine_2d(mesh)


def _refine_1d(mesh: Mesh) -> Mesh:
    nv = mesh.n_vertices
    mids = mesh.vertices[mesh.cells].mean(axis=1)
    new_ids = nv + np.arange(mesh.n_cells)
    a, b = mesh.cells[:, 0], mesh.cells[:, 1]
    cells = np.stack([np.column_stack([a, new_ids]), np.column_stack([new_ids, b])], axis=1)
    vertices = np.vstack([mesh.vertices, mids])
    boundary = np.concatenate([mesh.boundary, np.zeros(mesh.n_cells, dtype=bool)])
    return Mesh(vertices, cells.reshape(-1, 2), boundary)


def _refine_2d(mesh: Mesh) -> Mesh:
    nv = mesh.n_vertices
    local = np.array([[0, 1], [1, 2], [2, 0]])
    cell_edges = np.sort(mesh.cells[:, local], axis=2)  # (nc, 3, 2)
    uniq, inverse, counts = np.unique(
        cell_edges.reshape(-1, 2), axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1, 3) + nv
    mids = mesh.vertices[uniq].mean(axis=1)
    vertices = np.vstack([mesh.vertices, mids])
    boundary = np.concatenate([mesh.boundary, counts == 1])

    a, b, c = mesh.cells.T
    ab, bc, ca = inverse.T
    children = np.stack(
        [
            np.column_stack([a, ab, ca]),
            np.column_stack([ab, b, bc]),
            np.column_stack([ca, bc, c]),
            np.column_stack([ab, bc, ca]),
        ],
        axis=1,
    )
    return Mesh(vertices, children.reshape(-1, 3), boundary)
