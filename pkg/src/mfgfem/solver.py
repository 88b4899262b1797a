"""Fully discrete MFG system: residual, exact Jacobian, Picard and Newton solvers.

Unknowns are the frames ``u^0..u^N`` and ``m^0..m^N`` (interior coefficients),
stacked as ``z = [u^0, ..., u^N, m^0, ..., m^N]``. The discrete system is the
θ-scheme

    M(u^k - u^{k+1})/τ + θ P_k + (1-θ) P_{k+1} = 0,   k < N,    u^N = P_h u_T
    P_k = A u^k + N(u^k) - ℓ(F[m^k] + f_u(t_k))

    M_fp(m^k - m^{k-1})/τ + θ Q_k + (1-θ) Q_{k-1} = 0,  k > 0,  m^0 = P_h m_0
    Q_k = (A + C(Du^k)) m^k - ℓ(f_m(t_k))

with ``N(u)_i = ∫ H(x, Du) φ_i`` and ``C(b)_ij = ∫ φ_j b·Dφ_i`` evaluated at
``b = H_p(x, Du)``. Its residual ``G(z)`` is a load vector; applying the
inverse of the linear heat part ``L`` gives the fixed-point residual
``Υ_h(z) = L⁻¹ G(z)``, which is what convergence is measured on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    P1Space,
    assemble_advection,
    assemble_transport,
    assemble_weighted_mass,
    assemble_weighted_stiffness,
    l2_project,
)
from .heat import ThetaSchemeConfig
from .problem import MfgProblem
from .spacetime import SpaceTimeField, norm_lq, norm_w01q

logger = logging.getLogger(__name__)


def default_q(dim: int) -> float:
    """Norm exponent with ``q > 2(d + 2)``: 7 in 1D, 9 in 2D."""
    return 7.0 if dim == 1 else 9.0


@dataclass(frozen=True)
class SolverConfig:
    method: str = "picard_then_newton"
    damping: float = 0.5
    tol_residual: float = 1e-9
    max_outer: int = 200
    inner_newton_tol: float = 1e-13
    inner_max_iter: int = 50
    fp_lumping: bool = False
    switch_residual: float = 1e-3
    q: Optional[float] = None

    def __post_init__(self) -> None:
        if self.method not in ("picard", "newton", "picard_then_newton"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if not self.tol_residual > 0:
            raise ValueError("tol_residual must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass
class SolveReport:
    converged: bool = False
    outer_iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    final_residual: float = math.inf
    sup_bound_check: float = math.nan
    method: str = ""
    newton_iterations: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d


class SolverError(RuntimeError):
    """Outer iteration did not converge; partial iterates are retained."""

    def __init__(self, message: str, report: SolveReport, u=None, m=None):
        super().__init__(message)
        self.report = report
        self.u = u
        self.m = m


class HJBStepError(RuntimeError):
    def __init__(self, step: int, iterations: int, increment: float):
        super().__init__(
            f"HJB Newton failed at time step {step} after {iterations} iterations "
            f"(last increment {increment:.3e})"
        )
        self.step = step


class SingularLinearizationError(RuntimeError):
    """The linearized system is singular: the discrete solution is not stable."""


def _block_matrix(blocks: list[tuple[int, int, sp.spmatrix]], n_blocks: int, n: int) -> sp.csc_matrix:
    rows, cols, vals = [], [], []
    for bi, bj, mat in blocks:
        c = sp.coo_matrix(mat)
        rows.append(c.row + bi * n)
        cols.append(c.col + bj * n)
        vals.append(c.data)
    size = n_blocks * n
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsc()


class DiscreteMfg:
    """Assembled data and operators of the discrete system on one space and grid."""

    def __init__(self, problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                 fp_lumping: bool = False):
        if space.dim != problem.domain.dim:
            raise ValueError("space and problem dimensions differ")
        self.problem = problem
        self.space = space
        self.scheme = scheme
        self.grid = scheme.grid
        self.theta = scheme.theta
        self.tau = scheme.grid.tau
        self.K = self.grid.n_steps + 1
        self.n = space.n_dofs
        self.fp_lumping = fp_lumping

        q = space.quadrature()
        self.X = q.points
        self.W = q.weights
        nc, nq = self.W.shape
        cells = space.mesh.cells
        dof = space.dof_of_vertex[cells]  # (nc, d+1)
        k = cells.shape[1]

        # coefficients -> values at quadrature points
        r = np.repeat(np.arange(nc * nq).reshape(nc, nq), k, axis=1).reshape(nc, nq, k)
        c = np.broadcast_to(dof[:, None, :], (nc, nq, k))
        v = np.broadcast_to(q.basis[None], (nc, nq, k))
        keep = c >= 0
        self.Phi = sp.csr_matrix((v[keep], (r[keep], c[keep])), shape=(nc * nq, self.n))
        # cell-local vectors (nc, d+1) -> global interior loads
        rr = dof.ravel()
        cc = np.arange(nc * k)
        keep = rr >= 0
        self.E = sp.csr_matrix((np.ones(keep.sum()), (rr[keep], cc[keep])), shape=(self.n, nc * k))

        self.M = space.mass
        self.A = space.stiffness
        self.M_fp = sp.diags(space.lumped_mass).tocsr() if fp_lumping else self.M
        self.I = sp.identity(self.n, format="csr")

        times = self.grid.times.reshape(-1, 1, 1)
        self.times_b = times
        self.uT = l2_project(space, problem.u_T).coeffs
        self.m0 = l2_project(space, problem.m0).coeffs
        if problem.source_u is not None:
            su = np.broadcast_to(np.asarray(problem.source_u(times, self.X[None]), dtype=float),
                                 (self.K, nc, nq))
        else:
            su = np.zeros((self.K, nc, nq))
        self.su = su
        if problem.source_m is not None:
            sm = np.broadcast_to(np.asarray(problem.source_m(times, self.X[None]), dtype=float),
                                 (self.K, nc, nq))
            self.sm_loads = self.loads(sm)
        else:
            self.sm_loads = np.zeros((self.K, self.n))

        coupling = problem.coupling
        self.conv = None
        if coupling.kind == "convolution":
            xf = self.X.reshape(-1, space.dim)
            self.conv = coupling.smoothing(xf, xf, self.W.ravel())
        self._L_lu = None

    # -- elementary evaluations ------------------------------------------------

    def loads(self, vals: np.ndarray) -> np.ndarray:
        """``∫ v φ_i`` for samples of shape (..., n_cells, n_points)."""
        lead = vals.shape[:-2]
        flat = (vals * self.W).reshape(-1, self.W.size)
        return (self.Phi.T @ flat.T).T.reshape(lead + (self.n,))

    def values(self, coeffs: np.ndarray) -> np.ndarray:
        lead = coeffs.shape[:-1]
        flat = coeffs.reshape(-1, self.n)
        return (self.Phi @ flat.T).T.reshape(lead + self.W.shape)

    def grads(self, coeffs: np.ndarray) -> np.ndarray:
        """Per-cell gradients broadcast to quadrature points (..., nc, nq, d)."""
        g = self.space.gradients(coeffs)
        return np.broadcast_to(g[..., :, None, :], g.shape[:-1] + (self.W.shape[1], g.shape[-1]))

    def _smooth(self, mq: np.ndarray) -> np.ndarray:
        if self.conv is None:
            return mq
        lead = mq.shape[:-2]
        flat = mq.reshape(-1, self.W.size)
        return (self.conv @ flat.T).T.reshape(lead + self.W.shape)

    def coupling_values(self, m: np.ndarray, ks=None) -> np.ndarray:
        """``F[m^k]`` at quadrature points for frames ``m`` (K, n) or one frame at index ``ks``."""
        t = self.times_b if ks is None else self.grid.times[ks]
        s = self._smooth(self.values(m))
        return np.asarray(self.problem.coupling.f(t, self.X, s), dtype=float) * np.ones_like(s)

    def hjb_rhs(self, m: np.ndarray) -> np.ndarray:
        """``ℓ(F[m^k] + f_u(t_k))`` for all frames."""
        return self.loads(self.coupling_values(m) + self.su)

    def nonlinear_H(self, u: np.ndarray) -> np.ndarray:
        """``N(u)_i = ∫ H(x, Du) φ_i``; batched over leading axes."""
        return self.loads(self.problem.hamiltonian.eval_H(self.X, self.grads(u)))

    def drift_action(self, u: np.ndarray, m: np.ndarray) -> np.ndarray:
        """``C(Du) m`` frame by frame: ``∫ m H_p(x, Du)·Dφ_i``."""
        hp = self.problem.hamiltonian.eval_Hp(self.X, self.grads(u))
        mq = self.values(m)
        g = self.space.basis_gradients
        local = np.einsum("...cq,cq,...cqd,cad->...ca", mq, self.W, hp, g)
        lead = local.shape[:-2]
        return (self.E @ local.reshape(-1, self.E.shape[1]).T).T.reshape(lead + (self.n,))

    def transport(self, u_frame: np.ndarray) -> sp.csr_matrix:
        return assemble_transport(self.space, self.problem.hamiltonian.eval_Hp(self.X, self.grads(u_frame)))

    def advection(self, u_frame: np.ndarray) -> sp.csr_matrix:
        return assemble_advection(self.space, self.problem.hamiltonian.eval_Hp(self.X, self.grads(u_frame)))

    def coupling_derivative(self, m_frame: np.ndarray, k: int) -> sp.csr_matrix:
        """Matrix of ``ρ ↦ ℓ(dF[m^k](ρ))``."""
        t = self.grid.times[k]
        cpl = self.problem.coupling
        s = self._smooth(self.values(m_frame))
        df = np.asarray(cpl.df(t, self.X, s), dtype=float) * np.ones_like(s)
        if self.conv is None:
            return assemble_weighted_mass(self.space, df)
        left = self.Phi.T @ sp.diags((self.W * df).ravel())
        return sp.csr_matrix(left @ (self.conv @ self.Phi.toarray()))

    def drift_derivative(self, u_frame: np.ndarray, m_frame: np.ndarray) -> sp.csr_matrix:
        """``∂/∂u [C(Du) m]``: ``∫ m (H_pp(x, Du) Dφ_j)·Dφ_i``."""
        hpp = self.problem.hamiltonian.eval_Hpp(self.X, self.grads(u_frame))
        mq = self.values(m_frame)
        return assemble_weighted_stiffness(self.space, mq[..., None, None] * hpp)

    # -- stacked residual and Jacobian ----------------------------------------------

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        return z[: self.K * self.n].reshape(self.K, self.n), z[self.K * self.n:].reshape(self.K, self.n)

    def join(self, u: np.ndarray, m: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(u), np.ravel(m)])

    def residual(self, z: np.ndarray) -> np.ndarray:
        """Load-space residual ``G(z)`` of the discrete system."""
        U, Mf = self.split(z)
        th, tau = self.theta, self.tau
        P = (self.A @ U.T).T + self.nonlinear_H(U) - self.hjb_rhs(Mf)
        Ru = np.empty_like(U)
        Ru[:-1] = (self.M @ (U[:-1] - U[1:]).T).T / tau + th * P[:-1] + (1 - th) * P[1:]
        Ru[-1] = U[-1] - self.uT
        Q = (self.A @ Mf.T).T + self.drift_action(U, Mf) - self.sm_loads
        Rm = np.empty_like(Mf)
        Rm[0] = Mf[0] - self.m0
        Rm[1:] = (self.M_fp @ (Mf[1:] - Mf[:-1]).T).T / tau + th * Q[1:] + (1 - th) * Q[:-1]
        return self.join(Ru, Rm)

    def linear_part(self) -> sp.csc_matrix:
        """The heat operator ``L``: the Jacobian with ``H`` and ``F`` removed."""
        th, tau, K = self.theta, self.tau, self.K
        blocks = []
        for k in range(K - 1):
            blocks.append((k, k, self.M / tau + th * self.A))
            blocks.append((k, k + 1, -self.M / tau + (1 - th) * self.A))
        blocks.append((K - 1, K - 1, self.I))
        blocks.append((K, K, self.I))
        for k in range(1, K):
            blocks.append((K + k, K + k, self.M_fp / tau + th * self.A))
            blocks.append((K + k, K + k - 1, -self.M_fp / tau + (1 - th) * self.A))
        return _block_matrix(blocks, 2 * K, self.n)

    def jacobian(self, z: np.ndarray) -> sp.csc_matrix:
        """Exact derivative of :meth:`residual`: the discrete linearized MFG operator."""
        U, Mf = self.split(z)
        th, tau, K = self.theta, self.tau, self.K
        Tk = [self.transport(U[k]) for k in range(K)]
        Ck = [self.advection(U[k]) for k in range(K)]
        dF = [self.coupling_derivative(Mf[k], k) for k in range(K)]
        Dk = [self.drift_derivative(U[k], Mf[k]) for k in range(K)]
        blocks = []
        for k in range(K - 1):
            blocks.append((k, k, self.M / tau + th * (self.A + Tk[k])))
            blocks.append((k, k + 1, -self.M / tau + (1 - th) * (self.A + Tk[k + 1])))
            blocks.append((k, K + k, -th * dF[k]))
            blocks.append((k, K + k + 1, -(1 - th) * dF[k + 1]))
        blocks.append((K - 1, K - 1, self.I))
        blocks.append((K, K, self.I))
        for k in range(1, K):
            blocks.append((K + k, K + k, self.M_fp / tau + th * (self.A + Ck[k])))
            blocks.append((K + k, K + k - 1, -self.M_fp / tau + (1 - th) * (self.A + Ck[k - 1])))
            blocks.append((K + k, k, th * Dk[k]))
            blocks.append((K + k, k - 1, (1 - th) * Dk[k - 1]))
        return _block_matrix(blocks, 2 * K, self.n)

    @property
    def L_lu(self):
        if self._L_lu is None:
            self._L_lu = spla.splu(self.linear_part())
        return self._L_lu

    def upsilon(self, z: np.ndarray) -> np.ndarray:
        """``Υ_h(z) = L⁻¹ G(z)``, a pair of space-time fields stacked like ``z``."""
        return self.L_lu.solve(self.residual(z))

    def field(self, frames: np.ndarray) -> SpaceTimeField:
        return SpaceTimeField(self.grid, self.space, frames)

    def x_norm(self, z: np.ndarray, q: float) -> float:
        """``‖v‖_{W^{0,1}_q} + ‖ρ‖_{L^q}`` for ``z = (v, ρ)``."""
        v, rho = self.split(z)
        return norm_w01q(self.field(v), q) + norm_lq(self.field(rho), q)

    def residual_norm(self, z: np.ndarray, q: float) -> float:
        return self.x_norm(self.upsilon(z), q)

    # -- sweeps -------------------------------------------------------------------------

    def hjb_backward(self, m: np.ndarray, tol: float = 1e-13, max_iter: int = 50) -> np.ndarray:
        """Backward sweep for ``u`` given ``m``; per-step Newton on the nonlinear system."""
        th, tau, K = self.theta, self.tau, self.K
        g = self.hjb_rhs(m)
        U = np.empty((K, self.n))
        U[-1] = self.uT
        base = (self.M / tau + th * self.A).tocsr()
        for k in range(K - 2, -1, -1):
            nxt = U[k + 1]
            p_next = self.A @ nxt + self.nonlinear_H(nxt) - g[k + 1]
            const = -(self.M @ nxt) / tau + (1 - th) * p_next - th * g[k]
            def step_residual(w):
                return base @ w + th * self.nonlinear_H(w) + const

            w = nxt.copy()
            F = step_residual(w)
            for it in range(1, max_iter + 1):
                J = base + th * self.transport(w)
                dw = spla.spsolve(J.tocsc(), -F)
                # backtrack on the residual; full steps near the solution
                lam, f_norm = 1.0, float(np.linalg.norm(F))
                while True:
                    trial = w + lam * dw
                    F_trial = step_residual(trial)
                    if np.linalg.norm(F_trial) < f_norm or lam < 1e-3:
                        break
                    lam *= 0.5
                w, F = trial, F_trial
                inc = float(np.max(np.abs(lam * dw))) if dw.size else 0.0
                if inc <= tol * (1.0 + float(np.max(np.abs(w), initial=0.0))):
                    break
            else:
                raise HJBStepError(k, max_iter, inc)
            U[k] = w
        return U

    def fp_forward(self, U: np.ndarray) -> np.ndarray:
        """Forward sweep for ``m`` given ``u`` (linear in ``m``)."""
        th, tau, K = self.theta, self.tau, self.K
        Mf = np.empty((K, self.n))
        Mf[0] = self.m0
        C_prev = self.advection(U[0])
        for k in range(1, K):
            C_k = self.advection(U[k])
            lhs = (self.M_fp / tau + th * (self.A + C_k)).tocsc()
            rhs = ((self.M_fp / tau - (1 - th) * (self.A + C_prev)) @ Mf[k - 1]
                   + th * self.sm_loads[k] + (1 - th) * self.sm_loads[k - 1])
            Mf[k] = spla.spsolve(lhs, rhs)
            C_prev = C_k
        return Mf

    def heat_flow_density(self) -> np.ndarray:
        """Drift-free evolution of ``m0`` with the density source: the initial guess."""
        z = self.join(np.zeros((self.K, self.n)), np.zeros((self.K, self.n)))
        rhs = np.zeros_like(z)
        _, Rm = self.split(rhs)
        Rm[0] = self.m0
        Rm[1:] = self.theta * self.sm_loads[1:] + (1 - self.theta) * self.sm_loads[:-1]
        _, Mf = self.split(self.L_lu.solve(rhs))
        return Mf

    def sup_bound_excess(self, U: np.ndarray, Mf: np.ndarray) -> float:
        """``max_t ‖u_h‖_∞`` minus ``‖u_T‖_∞ + (C_H + ‖F[m_h] + f_u‖_∞) T``."""
        verts = self.space.mesh.vertices
        uT_sup = max(float(np.max(np.abs(self.problem.u_T(verts)))),
                     float(np.max(np.abs(self.problem.u_T(self.X)))))
        f_sup = float(np.max(np.abs(self.coupling_values(Mf) + self.su)))
        bound = uT_sup + (self.problem.hamiltonian.C_H + f_sup) * self.grid.T
        return float(np.max(np.abs(U))) - bound


# -- public API --------------------------------------------------------------------------


def _disc(problem, space, scheme, cfg) -> DiscreteMfg:
    return DiscreteMfg(problem, space, scheme, fp_lumping=cfg.fp_lumping)


def solve_hjb_backward(problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                       cfg: SolverConfig, m_field: SpaceTimeField) -> SpaceTimeField:
    """Value function for a given density path (terminal frame ``P_h u_T``)."""
    d = _disc(problem, space, scheme, cfg)
    if m_field.grid != scheme.grid or m_field.space is not space:
        raise ValueError("m_field must live on the solver's grid and space")
    return d.field(d.hjb_backward(m_field.frames, cfg.inner_newton_tol, cfg.inner_max_iter))


def solve_fp_forward(problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                     cfg: SolverConfig, u_field: SpaceTimeField) -> SpaceTimeField:
    """Density transported by the drift ``-H_p(x, Du)`` (initial frame ``P_h m_0``)."""
    d = _disc(problem, space, scheme, cfg)
    if u_field.grid != scheme.grid or u_field.space is not space:
        raise ValueError("u_field must live on the solver's grid and space")
    return d.field(d.fp_forward(u_field.frames))


def _newton(d: DiscreteMfg, z: np.ndarray, cfg: SolverConfig, q: float, report: SolveReport,
            budget: int) -> tuple[np.ndarray, float]:
    r = d.residual_norm(z, q)
    for _ in range(budget):
        if r <= cfg.tol_residual:
            break
        J = d.jacobian(z)
        try:
            step = spla.splu(J).solve(-d.residual(z))
        except RuntimeError as exc:
            raise SingularLinearizationError(f"Jacobian factorization failed: {exc}") from exc
        lam = 1.0
        while True:
            trial = z + lam * step
            r_trial = d.residual_norm(trial, q)
            if r_trial < r or lam < 1.0 / 64:
                break
            lam *= 0.5
        z, r = trial, r_trial
        report.outer_iterations += 1
        report.newton_iterations += 1
        report.residual_history.append(r)
        logger.debug("newton it=%d residual=%.3e step=%.3g", report.newton_iterations, r, lam)
    return z, r


def solve_coupled(problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                  cfg: SolverConfig = SolverConfig(), initial=None):
    """Solve the discrete MFG system; returns ``(u, m, report)``.

    Picard alternates a backward HJB sweep and a forward FP sweep and damps
    the density; Newton solves the monolithic linearized system each step.
    Raises :class:`SolverError` (with the report and the last iterates) when
    ``max_outer`` iterations do not reach ``tol_residual``.
    """
    d = _disc(problem, space, scheme, cfg)
    q = cfg.q or default_q(space.dim)
    report = SolveReport(method=cfg.method)

    if initial is not None:
        u0, m0 = (getattr(f, "frames", f) for f in initial)
        z = d.join(u0, m0)
        m = np.array(m0, dtype=float)
    else:
        m = d.heat_flow_density()
        z = None
    r = math.inf

    if cfg.method in ("picard", "picard_then_newton"):
        switch = cfg.tol_residual if cfg.method == "picard" else max(cfg.switch_residual, cfg.tol_residual)
        while report.outer_iterations < cfg.max_outer:
            U = d.hjb_backward(m, cfg.inner_newton_tol, cfg.inner_max_iter)
            m_new = d.fp_forward(U)
            z = d.join(U, m_new)
            r = d.residual_norm(z, q)
            report.outer_iterations += 1
            report.residual_history.append(r)
            logger.debug("picard it=%d residual=%.3e", report.outer_iterations, r)
            if r <= switch:
                break
            m = (1.0 - cfg.damping) * m + cfg.damping * m_new
    elif z is None:
        U = d.hjb_backward(m, cfg.inner_newton_tol, cfg.inner_max_iter)
        z = d.join(U, m)

    if cfg.method != "picard" and report.outer_iterations < cfg.max_outer:
        z, r = _newton(d, z, cfg, q, report, cfg.max_outer - report.outer_iterations)

    U, Mf = d.split(z)
    report.final_residual = float(r) if math.isfinite(r) else d.residual_norm(z, q)
    report.converged = report.final_residual <= cfg.tol_residual
    report.sup_bound_check = d.sup_bound_excess(U, Mf)
    u_field, m_field = d.field(U), d.field(Mf)
    if not report.converged:
        raise SolverError(
            f"{cfg.method} did not converge in {cfg.max_outer} outer iterations "
            f"(residual {report.final_residual:.3e})", report, u_field, m_field,
        )
    return u_field, m_field, report


def _frames(f, K, n):
    if f is None:
        return np.zeros((K, n))
    return np.asarray(getattr(f, "frames", f), dtype=float)


def linearized_operator(problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                        cfg: SolverConfig, u, m) -> tuple[DiscreteMfg, sp.csc_matrix]:
    d = _disc(problem, space, scheme, cfg)
    z = d.join(_frames(u, d.K, d.n), _frames(m, d.K, d.n))
    return d, d.jacobian(z)


def solve_linearized(problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                     cfg: SolverConfig, u, m, rhs_u=None, rhs_m=None):
    """Solve the discrete linearized system around ``(u, m)``.

    ``-∂t v - Δv + H_p(x, Du)·Dv = dF[m](ρ) + rhs_u`` backward from ``v(T) = 0``
    and ``∂t ρ - Δρ - div(ρ H_p(x, Du)) - div(m H_pp(x, Du) Dv) = rhs_m``
    forward from ``ρ(0) = 0``, as one sparse system. ``rhs_u`` and ``rhs_m``
    are P1 fields (frames of coefficients), entering through the mass matrix.
    """
    d, J = linearized_operator(problem, space, scheme, cfg, u, m)
    th = d.theta
    fu = _frames(rhs_u, d.K, d.n)
    fm = _frames(rhs_m, d.K, d.n)
    lu_ = (d.M @ fu.T).T
    lm = (d.M @ fm.T).T
    bu = np.zeros((d.K, d.n))
    bm = np.zeros((d.K, d.n))
    bu[:-1] = th * lu_[:-1] + (1 - th) * lu_[1:]
    bm[1:] = th * lm[1:] + (1 - th) * lm[:-1]
    try:
        sol = spla.splu(J).solve(d.join(bu, bm))
    except RuntimeError as exc:
        raise SingularLinearizationError(f"linearized system is singular: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularLinearizationError("linearized solve produced non-finite values")
    v, rho = d.split(sol)
    return d.field(v), d.field(rho)


def jacobian_check(problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                   cfg: SolverConfig, u, m, n_directions: int = 20, delta: float = 1e-5,
                   seed: int = 0) -> np.ndarray:
    """Relative errors between ``J d`` and central differences of the residual."""
    d, J = linearized_operator(problem, space, scheme, cfg, u, m)
    z = d.join(_frames(u, d.K, d.n), _frames(m, d.K, d.n))
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_directions):
        direction = rng.standard_normal(z.size)
        direction /= np.linalg.norm(direction)
        fd = (d.residual(z + delta * direction) - d.residual(z - delta * direction)) / (2 * delta)
        jd = J @ direction
        errs.append(float(np.linalg.norm(fd - jd) / np.linalg.norm(jd)))
    return np.array(errs)


@dataclass(frozen=True)
class MarginEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


def stability_margin(problem: MfgProblem, space: P1Space, scheme: ThetaSchemeConfig,
                     cfg: SolverConfig, u, m, scale: float = 1.0, max_iter: int = 500,
                     tol: float = 1e-10, seed: int = 0) -> MarginEstimate:
    """Smallest singular value of the linearized fixed-point map ``dΥ_h = L⁻¹ J``.

    The operator is measured in the discrete L² norm of the space-time
    cylinder (trapezoidal weights times the lumped mass), i.e. the smallest
    singular value of ``S L⁻¹ J S⁻¹`` with ``S = diag(√w)``, multiplied by
    ``scale``. Computed by inverse power iteration on the normal equations;
    if that has not settled after ``max_iter`` steps the current estimate is
    returned with ``converged=False``.
    """
    d, J = linearized_operator(problem, space, scheme, cfg, u, m)
    L = d.linear_part()
    w = np.kron(np.tile(d.grid.trapezoid_weights(), 2), d.space.lumped_mass)
    s = np.sqrt(w)
    try:
        J_lu = spla.splu(J)
    except RuntimeError as exc:
        raise SingularLinearizationError(f"linearized operator is singular: {exc}") from exc
    Lt = L.T.tocsr()

    def inv_op(x):  # (S L⁻¹ J S⁻¹)⁻¹ = S J⁻¹ L S⁻¹
        return s * J_lu.solve(L @ (x / s))

    def inv_op_t(x):
        return (Lt @ J_lu.solve(s * x, trans="T")) / s

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(w.size)
    x /= np.linalg.norm(x)
    sigma_old = math.inf
    sigma = math.nan
    for it in range(1, max_iter + 1):
        y = inv_op(inv_op_t(x))
        lam = float(np.dot(x, y))
        ny = float(np.linalg.norm(y))
        if not (np.isfinite(ny) and ny > 0):
            raise SingularLinearizationError("inverse iteration broke down")
        sigma = 1.0 / math.sqrt(max(lam, 1e-300))
        x = y / ny
        if abs(sigma - sigma_old) <= tol * sigma:
            return MarginEstimate(abs(scale) * sigma, True, it)
        sigma_old = sigma
    logger.warning("inverse power iteration did not settle in %d steps", max_iter)
    return MarginEstimate(abs(scale) * sigma, False, max_iter)
