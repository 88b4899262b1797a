"""Fully discrete heat solution operators (θ-scheme in time, P1 in space).

The forward operators solve

    M (v^{k+1} - v^k)/τ + A (θ v^{k+1} + (1-θ) v^k) = θ ℓ^{k+1} + (1-θ) ℓ^k

from an initial frame; the backward operators are exact time reversals of
the forward ones. Right-hand sides are load vectors ``ℓ^k`` (one per time
node) already integrated against the test functions, so divergence-form
data ``div G`` enters through :func:`loads_from_flux`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .fem import P1Space, assemble_flux_load, assemble_load, l2_project
from .mesh import build_interval_mesh
from .reports import ErrorReport
from .spacetime import SmoothField, SpaceTimeField, TimeFn, TimeGrid, error_norms


@dataclass(frozen=True)
class ThetaSchemeConfig:
    theta: float
    grid: TimeGrid

    def __post_init__(self) -> None:
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [1/2, 1], got {self.theta}")


def _time_samples(space: P1Space, grid: TimeGrid, fn: TimeFn, degree: int | None, vector: bool):
    pts = space.quadrature(degree).points
    t = grid.times.reshape((-1,) + (1,) * (pts.ndim - 1))
    vals = np.asarray(fn(t, pts[None]), dtype=float)
    shape = (grid.n_steps + 1,) + (pts.shape if vector else pts.shape[:-1])
    return np.broadcast_to(vals, shape)


def loads_from_source(space: P1Space, grid: TimeGrid, f: TimeFn, degree: int | None = None) -> np.ndarray:
    """``ℓ^k_i = ∫ f(t_k) φ_i`` for every time node, shape (n_steps+1, n_dofs)."""
    return assemble_load(space, _time_samples(space, grid, f, degree, False), degree=degree)


def loads_from_flux(space: P1Space, grid: TimeGrid, G: TimeFn, degree: int | None = None) -> np.ndarray:
    """``ℓ^k_i = -∫ G(t_k)·Dφ_i``: the functional of ``div G``."""
    return assemble_flux_load(space, _time_samples(space, grid, G, degree, True), degree=degree)


def _check_loads(space: P1Space, grid: TimeGrid, loads) -> np.ndarray:
    loads = np.asarray(loads, dtype=float)
    if loads.shape != (grid.n_steps + 1, space.n_dofs):
        raise ValueError(f"loads must have shape {(grid.n_steps + 1, space.n_dofs)}")
    if not np.all(np.isfinite(loads)):
        raise ValueError("non-finite loads")
    return loads


def theta_forward(space: P1Space, cfg: ThetaSchemeConfig, v0: np.ndarray,
                  loads: np.ndarray | None = None) -> SpaceTimeField:
    """Forward θ-scheme from ``v0`` with optional loads."""
    grid, th = cfg.grid, cfg.theta
    tau = grid.tau
    M, A = space.mass, space.stiffness
    lhs = spla.splu((M / tau + th * A).tocsc())
    rhs_op = (M / tau - (1.0 - th) * A).tocsr()
    frames = np.empty((grid.n_steps + 1, space.n_dofs))
    frames[0] = v0
    for k in range(grid.n_steps):
        rhs = rhs_op @ frames[k]
        if loads is not None:
            rhs += th * loads[k + 1] + (1.0 - th) * loads[k]
        frames[k + 1] = lhs.solve(rhs)
    return SpaceTimeField(grid, space, frames)


def s_i_h(space: P1Space, cfg: ThetaSchemeConfig, v0h) -> SpaceTimeField:
    """Homogeneous heat flow from the discrete initial state ``v0h``."""
    v0 = getattr(v0h, "coeffs", v0h)
    return theta_forward(space, cfg, np.asarray(v0, dtype=float))


def s_is_h(space: P1Space, cfg: ThetaSchemeConfig, loads) -> SpaceTimeField:
    """Heat flow driven by ``loads`` from a zero initial state."""
    loads = _check_loads(space, cfg.grid, loads)
    return theta_forward(space, cfg, np.zeros(space.n_dofs), loads)


def s_t_h(space: P1Space, cfg: ThetaSchemeConfig, vTh) -> SpaceTimeField:
    """Backward heat flow from terminal state ``vTh``: ``s_i_h`` with frames reversed."""
    return s_i_h(space, cfg, vTh).reversed()


def s_ts_h(space: P1Space, cfg: ThetaSchemeConfig, loads) -> SpaceTimeField:
    """Backward heat flow with zero terminal state; loads indexed by forward time."""
    loads = _check_loads(space, cfg.grid, loads)
    return s_is_h(space, cfg, loads[::-1]).reversed()


# -- closed-form benchmarks -------------------------------------------------------


@dataclass(frozen=True)
class HeatSolution:
    """Exact solution of ``∂t v - Δv = source`` on (0, 1) with zero boundary values."""

    name: str
    exact: SmoothField
    source: TimeFn | None = None

    def initial(self) -> Callable[[np.ndarray], np.ndarray]:
        return self.exact.at(0.0)


def _sine_mode(k: int, amp: float = 1.0) -> tuple[Callable, Callable]:
    lam = (k * np.pi) ** 2

    def value(t, x):
        return amp * np.exp(-lam * t) * np.sin(k * np.pi * x[..., 0])

    def grad(t, x):
        return (amp * k * np.pi * np.exp(-lam * t) * np.cos(k * np.pi * x[..., 0]))[..., None]

    return value, grad


def separable_sine() -> HeatSolution:
    v, g = _sine_mode(1)
    return HeatSolution("separable_sine", SmoothField(v, g))


def two_mode_sine() -> HeatSolution:
    v1, g1 = _sine_mode(1)
    v2, g2 = _sine_mode(2, 0.5)
    return HeatSolution(
        "two_mode_sine",
        SmoothField(lambda t, x: v1(t, x) + v2(t, x), lambda t, x: g1(t, x) + g2(t, x)),
    )


def polynomial_time_sine() -> HeatSolution:
    pi = np.pi

    def value(t, x):
        return (1.0 + t**2) * np.sin(pi * x[..., 0])

    def grad(t, x):
        return ((1.0 + t**2) * pi * np.cos(pi * x[..., 0]))[..., None]

    def source(t, x):
        return (2.0 * t + pi**2 * (1.0 + t**2)) * np.sin(pi * x[..., 0])

    return HeatSolution("polynomial_time_sine", SmoothField(value, grad), source)


def zero_solution() -> HeatSolution:
    return HeatSolution("zero", SmoothField(lambda t, x: np.zeros(np.shape(x)[:-1]),
                                            lambda t, x: np.zeros(np.shape(x))))


def solve_heat(space: P1Space, cfg: ThetaSchemeConfig, problem: HeatSolution) -> SpaceTimeField:
    """Discrete solution with ``v_h(0) = P_h v(0)``."""
    v0 = l2_project(space, problem.initial()).coeffs
    loads = None
    if problem.source is not None:
        loads = loads_from_source(space, cfg.grid, problem.source)
    return theta_forward(space, cfg, v0, loads)


def heat_error_study(
    problem: HeatSolution,
    h_list: Sequence[float],
    tau_rule: Callable[[float], float],
    theta: float = 0.5,
    T: float = 0.5,
    q: float = 7.0,
    name: str | None = None,
) -> ErrorReport:
    """Errors in L², L^q and W^{0,1}_q on (0, 1) for decreasing mesh sizes."""
    if len(h_list) < 2:
        raise ValueError("a refinement study needs at least 2 mesh levels")
    if any(h2 >= h1 for h1, h2 in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be strictly decreasing")
    hs, taus = [], []
    errs: dict[str, list[float]] = {"e_L2": [], "e_Lq": [], "e_W01q": []}
    for h in h_list:
        n = int(round(1.0 / h))
        space = P1Space(build_interval_mesh(0.0, 1.0, n))
        grid = TimeGrid.from_step(T, tau_rule(space.mesh.h_max))
        vh = solve_heat(space, ThetaSchemeConfig(theta, grid), problem)
        e2, _ = error_norms(vh, problem.exact, 2.0)
        eq, ew = error_norms(vh, problem.exact, q)
        hs.append(space.mesh.h_max)
        taus.append(grid.tau)
        errs["e_L2"].append(e2)
        errs["e_Lq"].append(eq)
        errs["e_W01q"].append(ew)
    return ErrorReport(name or problem.name, hs, taus, errs,
                       meta={"theta": theta, "q": q, "T": T, "solution": problem.name})
