"""Time grids, space-time fields and discrete Bochner norms.

A :class:`SpaceTimeField` holds one coefficient vector per time node. Norms
integrate in space with a per-cell quadrature rule and in time with the
trapezoidal rule on the field's own grid.

Smooth reference fields (:class:`SmoothField`) are callables ``f(t, x)``
that broadcast ``t`` against ``x[..., 0]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ._io import atomic_write
from .fem import DiscreteFunction, P1Space

NORM_DEGREE = 4

TimeFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_step(cls, T: float, tau: float) -> "TimeGrid":
        """Grid whose step is the largest ``T/n`` not exceeding ``tau`` (up to rounding)."""
        return cls(T, max(1, math.ceil(T / tau - 1e-9)))

    @property
    def tau(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_steps + 1, self.tau)
        w[[0, -1]] *= 0.5
        return w


@dataclass(frozen=True)
class SmoothField:
    """Analytic space-time field with optional derivatives.

    ``grad`` returns shape (..., dim) and ``hess`` shape (..., dim, dim).
    """

    value: TimeFn
    grad: Optional[TimeFn] = None
    dt: Optional[TimeFn] = None
    hess: Optional[TimeFn] = None

    def laplacian(self, t, x) -> np.ndarray:
        if self.hess is None:
            raise ValueError("field has no Hessian")
        return np.trace(self.hess(t, x), axis1=-2, axis2=-1)

    def at(self, t: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: self.value(t, x)


def _time_broadcast(fn: TimeFn, times: np.ndarray, points: np.ndarray) -> np.ndarray:
    t = times.reshape((-1,) + (1,) * (points.ndim - 1))
    x = points[None]
    out = np.asarray(fn(t, x), dtype=float)
    return out


class SpaceTimeField:
    """Coefficient frames ``frames[k]`` at ``grid.times[k]``."""

    def __init__(self, grid: TimeGrid, space: P1Space, frames: np.ndarray):
        frames = np.array(frames, dtype=float)
        if frames.shape != (grid.n_steps + 1, space.n_dofs):
            raise ValueError(
                f"frames must have shape {(grid.n_steps + 1, space.n_dofs)}, got {frames.shape}"
            )
        frames.setflags(write=False)
        self.grid = grid
        self.space = space
        self.frames = frames

    def __repr__(self) -> str:
        return f"SpaceTimeField(n_steps={self.grid.n_steps}, n_dofs={self.space.n_dofs})"

    @classmethod
    def zeros(cls, grid: TimeGrid, space: P1Space) -> "SpaceTimeField":
        return cls(grid, space, np.zeros((grid.n_steps + 1, space.n_dofs)))

    def frame(self, k: int) -> DiscreteFunction:
        return DiscreteFunction(self.space, self.frames[k])

    def reversed(self) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.space, self.frames[::-1])

    def _check(self, other: "SpaceTimeField") -> None:
        if other.grid != self.grid or other.space is not self.space:
            raise ValueError("fields live on different grids or spaces")

    def __add__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        self._check(other)
        return SpaceTimeField(self.grid, self.space, self.frames + other.frames)

    def __sub__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        self._check(other)
        return SpaceTimeField(self.grid, self.space, self.frames - other.frames)

    def __mul__(self, alpha: float) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.space, alpha * self.frames)

    __rmul__ = __mul__

    def sup_norm(self) -> float:
        """Max over frames of the max nodal value (exact sup for P1)."""
        return float(np.max(np.abs(self.frames))) if self.frames.size else 0.0

    def write_csv(self, path) -> None:
        """Columns ``t, vertex_id, x[, y], value``; boundary vertices included."""
        mesh = self.space.mesh
        full = self.space.to_full(self.frames)
        coords = ["x", "y"][: mesh.dim]

        def write(fh):
            w = csv.writer(fh)
            w.writerow(["t", "vertex_id", *coords, "value"])
            for t, row in zip(self.grid.times, full):
                for vid in range(mesh.n_vertices):
                    w.writerow([repr(float(t)), vid, *map(repr, mesh.vertices[vid].tolist()),
                                repr(float(row[vid]))])

        atomic_write(path, write)


def _check_q(q: float) -> None:
    if not (q >= 1 and math.isfinite(q)):
        raise ValueError(f"norm exponent must be finite and >= 1, got {q}")


def _lq_from_samples(vals: np.ndarray, space: P1Space, grid: TimeGrid, q: float,
                     degree: int) -> float:
    weights = space.quadrature(degree).weights
    per_frame = np.einsum("kcq,cq->k", np.abs(vals) ** q, weights)
    return float(np.dot(grid.trapezoid_weights(), per_frame) ** (1.0 / q))


def _grad_lq_from_samples(grads: np.ndarray, space: P1Space, grid: TimeGrid, q: float,
                          degree: int) -> float:
    weights = space.quadrature(degree).weights
    mag = np.linalg.norm(grads, axis=-1)
    per_frame = np.einsum("kcq,cq->k", mag**q, weights)
    return float(np.dot(grid.trapezoid_weights(), per_frame) ** (1.0 / q))


def norm_lq(field: SpaceTimeField, q: float, degree: int = NORM_DEGREE) -> float:
    """Discrete ``L^q(0,T; L^q(Ω))`` norm."""
    _check_q(q)
    vals = field.space.values_at(field.frames, degree)
    return _lq_from_samples(vals, field.space, field.grid, q, degree)


def norm_grad_lq(field: SpaceTimeField, q: float) -> float:
    _check_q(q)
    g = field.space.gradients(field.frames)  # (K, nc, d)
    cell = field.space.mesh.cell_measures
    per_frame = np.einsum("kc,c->k", np.linalg.norm(g, axis=-1) ** q, cell)
    return float(np.dot(field.grid.trapezoid_weights(), per_frame) ** (1.0 / q))


def norm_w01q(field: SpaceTimeField, q: float, degree: int = NORM_DEGREE) -> float:
    """``‖u‖_{L^q} + ‖Du‖_{L^q}`` over the space-time cylinder."""
    return norm_lq(field, q, degree) + norm_grad_lq(field, q)


def error_norms(
    approx: SpaceTimeField, exact: SmoothField, q: float, degree: int = NORM_DEGREE
) -> tuple[float, float]:
    """``(‖u - u_h‖_{L^q}, ‖u - u_h‖_{W^{0,1}_q})`` with ``u`` sampled at quadrature points."""
    _check_q(q)
    if exact.grad is None:
        raise ValueError("exact field needs a gradient")
    space, grid = approx.space, approx.grid
    pts = space.quadrature(degree).points
    u = _time_broadcast(exact.value, grid.times, pts)
    du = _time_broadcast(exact.grad, grid.times, pts)
    u = np.broadcast_to(u, (grid.n_steps + 1,) + pts.shape[:-1])
    du = np.broadcast_to(du, (grid.n_steps + 1,) + pts.shape)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(du))):
        raise ValueError("non-finite samples of the exact field")
    e = u - space.values_at(approx.frames, degree)
    de = du - space.gradients(approx.frames)[:, :, None, :]
    e_lq = _lq_from_samples(e, space, grid, q, degree)
    e_grad = _grad_lq_from_samples(de, space, grid, q, degree)
    return e_lq, e_lq + e_grad


def project_field(space: P1Space, grid: TimeGrid, f: SmoothField, kind: str = "l2") -> SpaceTimeField:
    """Frame-wise ``P_h`` (``kind='l2'``), ``R_h`` (``'ritz'``) or nodal interpolant."""
    from .fem import interpolate, l2_project, ritz_project

    frames = []
    for t in grid.times:
        if kind == "l2":
            frames.append(l2_project(space, f.at(t)).coeffs)
        elif kind == "ritz":
            frames.append(ritz_project(space, f.at(t), lambda x, t=t: f.grad(t, x)).coeffs)
        elif kind == "interp":
            frames.append(interpolate(space, f.at(t)).coeffs)
        else:
            raise ValueError(f"unknown projection {kind!r}")
    return SpaceTimeField(grid, space, np.array(frames))
