"""P1 Lagrange finite elements with homogeneous Dirichlet conditions.

Functions in the discrete space are stored as coefficient vectors over the
interior vertices only; boundary values are identically zero. Scalar fields
passed in by callers are callables ``g(x)`` taking points of shape
``(..., dim)`` and returning values of shape ``(...)``, or arrays already
sampled at the quadrature points of a rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh
from .quadrature import QuadratureRule, simplex_rule

ScalarField = Callable[[np.ndarray], np.ndarray]
FieldLike = Union[ScalarField, np.ndarray, "DiscreteFunction"]

BOUNDARY_TOL = 1e-8


class PreconditionError(ValueError):
    """Input data violates a documented precondition."""


@dataclass(frozen=True)
class QuadratureData:
    rule: QuadratureRule
    points: np.ndarray  # (n_cells, n_points, dim)
    weights: np.ndarray  # (n_cells, n_points), cell measure included
    basis: np.ndarray  # (n_points, dim + 1) local basis values


class P1Space:
    """Continuous piecewise linears on ``mesh`` vanishing on the boundary."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.interior_dofs = np.flatnonzero(~mesh.boundary)
        self.interior_dofs.setflags(write=False)
        dof = np.full(mesh.n_vertices, -1, dtype=np.int64)
        dof[self.interior_dofs] = np.arange(len(self.interior_dofs))
        dof.setflags(write=False)
        self.dof_of_vertex = dof
        self._quad_cache: dict[int, QuadratureData] = {}

    def __repr__(self) -> str:
        return f"P1Space(dim={self.dim}, n_dofs={self.n_dofs}, h={self.mesh.h_max:.4g})"

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_dofs(self) -> int:
        return len(self.interior_dofs)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the local hat functions, shape (n_cells, dim+1, dim)."""
        p = self.mesh.vertices[self.mesh.cells]  # (nc, d+1, d)
        jac = np.swapaxes(p[:, 1:] - p[:, :1], 1, 2)  # columns are edge vectors
        inv_t = np.linalg.inv(jac).swapaxes(1, 2)  # (nc, d, d)
        d = self.dim
        ref = np.vstack([-np.ones((1, d)), np.eye(d)])  # reference gradients
        return np.einsum("kj,cij->cki", ref, inv_t)

    @property
    def assembly_degree(self) -> int:
        """Rule used for nonlinear integrands: 3-point Gauss (1D), edge midpoints (2D)."""
        return 5 if self.dim == 1 else 2

    def quadrature(self, degree: int | None = None) -> QuadratureData:
        degree = self.assembly_degree if degree is None else degree
        if degree not in self._quad_cache:
            rule = simplex_rule(self.dim, degree)
            p = self.mesh.vertices[self.mesh.cells]
            points = np.einsum("qk,ckd->cqd", rule.bary, p)
            weights = self.mesh.cell_measures[:, None] * rule.weights[None, :]
            self._quad_cache[degree] = QuadratureData(rule, points, weights, rule.bary)
        return self._quad_cache[degree]

    # -- coefficient plumbing -------------------------------------------------

    def to_full(self, coeffs: np.ndarray) -> np.ndarray:
        """Vertex values (boundary zeros) from interior coefficients; batched on leading axes."""
        coeffs = np.asarray(coeffs, dtype=float)
        out = np.zeros(coeffs.shape[:-1] + (self.n_vertices,))
        out[..., self.interior_dofs] = coeffs
        return out

    def values_at(self, coeffs: np.ndarray, degree: int | None = None) -> np.ndarray:
        """Values at quadrature points, shape (..., n_cells, n_points)."""
        q = self.quadrature(degree)
        local = self.to_full(coeffs)[..., self.mesh.cells]  # (..., nc, d+1)
        return np.einsum("...ck,qk->...cq", local, q.basis)

    def gradients(self, coeffs: np.ndarray) -> np.ndarray:
        """Piecewise-constant gradients, shape (..., n_cells, dim)."""
        local = self.to_full(coeffs)[..., self.mesh.cells]
        return np.einsum("...ck,ckd->...cd", local, self.basis_gradients)

    def sample(self, g: FieldLike, degree: int | None = None) -> np.ndarray:
        """Evaluate a field at quadrature points, rejecting non-finite samples."""
        if isinstance(g, DiscreteFunction):
            vals = self.values_at(g.coeffs, degree)
        elif callable(g):
            vals = np.asarray(g(self.quadrature(degree).points), dtype=float)
        else:
            vals = np.asarray(g, dtype=float)
        q = self.quadrature(degree)
        vals = np.broadcast_to(vals, q.weights.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite field samples at quadrature points")
        return vals

    # -- sparse assembly ------------------------------------------------------

    def scatter(self, local: np.ndarray, full: bool = False) -> sp.csr_matrix:
        """Sum local (n_cells, dim+1, dim+1) element matrices into a global matrix."""
        cells = self.mesh.cells
        k = cells.shape[1]
        rows = np.broadcast_to(cells[:, :, None], (len(cells), k, k)).ravel()
        cols = np.broadcast_to(cells[:, None, :], (len(cells), k, k)).ravel()
        vals = np.asarray(local, dtype=float).ravel()
        if full:
            n = self.n_vertices
        else:
            rows = self.dof_of_vertex[rows]
            cols = self.dof_of_vertex[cols]
            keep = (rows >= 0) & (cols >= 0)
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
            n = self.n_dofs
        return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    def scatter_vector(self, local: np.ndarray, full: bool = False) -> np.ndarray:
        """Sum local (..., n_cells, dim+1) element vectors; batched on leading axes."""
        local = np.asarray(local, dtype=float)
        lead = local.shape[:-2]
        out = np.zeros(lead + (self.n_vertices,))
        flat = out.reshape(-1, self.n_vertices)
        loc = local.reshape(-1, *local.shape[-2:])
        for b in range(flat.shape[0]):
            flat[b] = np.bincount(
                self.mesh.cells.ravel(), weights=loc[b].ravel(), minlength=self.n_vertices
            )
        return out if full else out[..., self.interior_dofs]

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return assemble_mass(self)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return assemble_stiffness(self)

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        return np.asarray(self.mass.sum(axis=1)).ravel()

    @cached_property
    def mass_solver(self) -> Callable[[np.ndarray], np.ndarray]:
        return spla.factorized(self.mass.tocsc())

    @cached_property
    def stiffness_solver(self) -> Callable[[np.ndarray], np.ndarray]:
        return spla.factorized(self.stiffness.tocsc())


@dataclass(frozen=True, eq=False)
class DiscreteFunction:
    """A member of the P1 space at one instant: interior coefficients."""

    space: P1Space
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.space.n_dofs,):
            raise ValueError(f"expected {self.space.n_dofs} coefficients, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficients")
        object.__setattr__(self, "coeffs", c)

    def full(self) -> np.ndarray:
        return self.space.to_full(self.coeffs)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Point evaluation (1D only; used for plotting and debugging)."""
        if self.space.dim != 1:
            raise NotImplementedError("point evaluation is implemented for 1D meshes")
        xs = self.space.mesh.vertices[:, 0]
        order = np.argsort(xs)
        return np.interp(np.asarray(x)[..., 0], xs[order], self.full()[order])


# -- bilinear forms -----------------------------------------------------------


def _local_mass(space: P1Space) -> np.ndarray:
    k = space.dim + 1
    ref = (np.ones((k, k)) + np.eye(k)) / ((k) * (k + 1))
    return space.mesh.cell_measures[:, None, None] * ref[None]


def assemble_mass(space: P1Space, full: bool = False) -> sp.csr_matrix:
    """Consistent mass matrix, exact element integrals."""
    return space.scatter(_local_mass(space), full=full)


def assemble_stiffness(space: P1Space, full: bool = False) -> sp.csr_matrix:
    """Stiffness matrix of the Dirichlet Laplacian, exact element integrals."""
    g = space.basis_gradients
    local = space.mesh.cell_measures[:, None, None] * np.einsum("cid,cjd->cij", g, g)
    return space.scatter(local, full=full)


def _vector_samples(space: P1Space, b: np.ndarray, degree: int | None) -> np.ndarray:
    q = space.quadrature(degree)
    b = np.asarray(b, dtype=float)
    if b.ndim == 2 and b.shape == (space.mesh.n_cells, space.dim):
        b = np.broadcast_to(b[:, None, :], q.points.shape)
    b = np.broadcast_to(b, q.points.shape)
    if not np.all(np.isfinite(b)):
        raise ValueError("non-finite vector field samples")
    return b


def assemble_advection(
    space: P1Space, b: np.ndarray, full: bool = False, degree: int | None = None
) -> sp.csr_matrix:
    """``C[i, j] = ∫ φ_j b·Dφ_i``: the drift term of the Fokker-Planck weak form.

    ``b`` is sampled at the quadrature points, shape (n_cells, n_points, dim),
    or given per cell, shape (n_cells, dim).
    """
    q = space.quadrature(degree)
    b = _vector_samples(space, b, degree)
    bg = np.einsum("cqd,cid->cqi", b, space.basis_gradients)  # b·Dφ_i at points
    local = np.einsum("cq,cqi,qj->cij", q.weights, bg, q.basis)
    return space.scatter(local, full=full)


def assemble_transport(
    space: P1Space, b: np.ndarray, full: bool = False, degree: int | None = None
) -> sp.csr_matrix:
    """``T[i, j] = ∫ (b·Dφ_j) φ_i``; equals the transpose of the advection matrix."""
    q = space.quadrature(degree)
    b = _vector_samples(space, b, degree)
    bg = np.einsum("cqd,cjd->cqj", b, space.basis_gradients)
    local = np.einsum("cq,qi,cqj->cij", q.weights, q.basis, bg)
    return space.scatter(local, full=full)


def assemble_weighted_mass(
    space: P1Space, c: FieldLike, full: bool = False, degree: int | None = None
) -> sp.csr_matrix:
    """``∫ c φ_j φ_i`` with ``c`` sampled at quadrature points."""
    q = space.quadrature(degree)
    c = space.sample(c, degree)
    local = np.einsum("cq,cq,qi,qj->cij", q.weights, c, q.basis, q.basis)
    return space.scatter(local, full=full)


def assemble_weighted_stiffness(
    space: P1Space, K: np.ndarray, full: bool = False, degree: int | None = None
) -> sp.csr_matrix:
    """``∫ (K Dφ_j)·Dφ_i`` with matrix field ``K`` of shape (n_cells, n_points, dim, dim)."""
    q = space.quadrature(degree)
    K = np.broadcast_to(np.asarray(K, dtype=float), q.points.shape + (space.dim,))
    if not np.all(np.isfinite(K)):
        raise ValueError("non-finite matrix field samples")
    Kbar = np.einsum("cq,cqde->cde", q.weights, K)
    g = space.basis_gradients
    local = np.einsum("cid,cde,cje->cij", g, Kbar, g)
    return space.scatter(local, full=full)


# -- linear forms -------------------------------------------------------------


def assemble_load(
    space: P1Space, f: FieldLike, full: bool = False, degree: int | None = None
) -> np.ndarray:
    """``ℓ_i = ∫ f φ_i`` by per-cell quadrature.

    ``f`` may also be a stack of samples with shape (..., n_cells, n_points);
    the result then carries the same leading axes.
    """
    q = space.quadrature(degree)
    if callable(f) or isinstance(f, DiscreteFunction):
        vals = space.sample(f, degree)
    else:
        vals = np.asarray(f, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite load samples")
    local = np.einsum("...cq,cq,qi->...ci", vals, q.weights, q.basis)
    return space.scatter_vector(local, full=full)


def assemble_flux_load(
    space: P1Space, G: np.ndarray, full: bool = False, degree: int | None = None
) -> np.ndarray:
    """``ℓ_i = -∫ G·Dφ_i``: the functional of divergence-form data ``div G``.

    ``G`` has shape (..., n_cells, n_points, dim) or (..., n_cells, dim).
    """
    q = space.quadrature(degree)
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)):
        raise ValueError("non-finite flux samples")
    if G.shape[-2:] == (space.mesh.n_cells, space.dim):
        Gbar = G * space.mesh.cell_measures[:, None]
    else:
        Gbar = np.einsum("...cqd,cq->...cd", G, q.weights)
    local = -np.einsum("...cd,cid->...ci", Gbar, space.basis_gradients)
    return space.scatter_vector(local, full=full)


# -- projections and interpolation --------------------------------------------


def interpolate(space: P1Space, g: ScalarField) -> DiscreteFunction:
    """Nodal interpolant, restricted to interior vertices."""
    vals = np.asarray(g(space.mesh.vertices), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite vertex values")
    return DiscreteFunction(space, vals[space.interior_dofs])


def l2_project(space: P1Space, g: FieldLike) -> DiscreteFunction:
    """L2 projection onto the discrete space (mass-matrix solve)."""
    if isinstance(g, DiscreteFunction):
        rhs = space.mass @ g.coeffs
    else:
        rhs = assemble_load(space, g, degree=max(space.assembly_degree, 4))
    return DiscreteFunction(space, space.mass_solver(rhs))


def ritz_project(
    space: P1Space,
    g: ScalarField | DiscreteFunction,
    grad: Callable[[np.ndarray], np.ndarray] | None = None,
) -> DiscreteFunction:
    """Elliptic projection: ``∫ D(R g)·Dv = ∫ Dg·Dv`` for all discrete ``v``.

    ``grad`` returns the analytic gradient with shape (..., dim). ``g`` must
    vanish on the boundary; this is checked at boundary vertices.
    """
    if isinstance(g, DiscreteFunction):
        rhs = space.stiffness @ g.coeffs
    else:
        if grad is None:
            raise TypeError("ritz_project needs the analytic gradient of g")
        bvals = np.asarray(g(space.mesh.vertices[space.mesh.boundary]), dtype=float)
        if bvals.size and np.max(np.abs(bvals)) > BOUNDARY_TOL:
            raise PreconditionError(
                f"g does not vanish on the boundary (max |g| = {np.max(np.abs(bvals)):.3e})"
            )
        degree = max(space.assembly_degree, 4)
        dg = np.asarray(grad(space.quadrature(degree).points), dtype=float)
        rhs = assemble_flux_load(space, -dg, degree=degree)
    return DiscreteFunction(space, space.stiffness_solver(rhs))
