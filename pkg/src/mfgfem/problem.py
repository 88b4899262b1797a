"""Hamiltonians, coupling operators, problem data and manufactured solutions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .mesh import Mesh, build_interval_mesh, build_rectangle_mesh
from .spacetime import SmoothField, TimeFn

PointFn = Callable[[np.ndarray], np.ndarray]


# -- domains ------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """An interval ``(a, b)`` or a rectangle ``(0, lx) x (0, ly)``."""

    kind: str
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if self.kind not in ("interval", "rectangle"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if len(self.bounds) != self.dim or any(not lo < hi for lo, hi in self.bounds):
            raise ValueError(f"invalid bounds {self.bounds} for a {self.kind}")

    @classmethod
    def interval(cls, a: float = 0.0, b: float = 1.0) -> "Domain":
        return cls("interval", ((float(a), float(b)),))

    @classmethod
    def rectangle(cls, lx: float = 1.0, ly: float = 1.0) -> "Domain":
        return cls("rectangle", ((0.0, float(lx)), (0.0, float(ly))))

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))

    def is_unit(self) -> bool:
        return all(b == (0.0, 1.0) for b in self.bounds)

    def mesh(self, n: int) -> Mesh:
        """Uniform mesh with ``n`` cells along the first axis."""
        if self.kind == "interval":
            (a, b), = self.bounds
            return build_interval_mesh(a, b, n)
        lx, ly = self.bounds[0][1], self.bounds[1][1]
        return build_rectangle_mesh(lx, ly, n, max(1, round(n * ly / lx)))

    def gauss(self, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Tensor Gauss-Legendre rule with ``n`` points per axis."""
        xi, w = np.polynomial.legendre.leggauss(n)
        axes = []
        for lo, hi in self.bounds:
            axes.append((lo + 0.5 * (hi - lo) * (xi + 1.0), 0.5 * (hi - lo) * w))
        if self.dim == 1:
            return axes[0][0][:, None], axes[0][1]
        X, Y = np.meshgrid(axes[0][0], axes[1][0], indexing="ij")
        W = np.outer(axes[0][1], axes[1][1])
        return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()

    def boundary_points(self, n: int = 33) -> np.ndarray:
        if self.dim == 1:
            return np.array([[self.bounds[0][0]], [self.bounds[0][1]]])
        (x0, x1), (y0, y1) = self.bounds
        s = np.linspace(0.0, 1.0, n)
        xs, ys = x0 + (x1 - x0) * s, y0 + (y1 - y0) * s
        return np.vstack([
            np.column_stack([xs, np.full(n, y0)]),
            np.column_stack([xs, np.full(n, y1)]),
            np.column_stack([np.full(n, x0), ys]),
            np.column_stack([np.full(n, x1), ys]),
        ])

    def to_dict(self) -> dict:
        if self.kind == "interval":
            return {"kind": "interval", "a": self.bounds[0][0], "b": self.bounds[0][1]}
        return {"kind": "rectangle", "lx": self.bounds[0][1], "ly": self.bounds[1][1]}


# -- Hamiltonians ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    """``H(x, p)`` with gradient and Hessian in ``p`` and growth constant ``C_H``.

    ``p`` has shape (..., dim); ``eval_Hp`` returns (..., dim) and
    ``eval_Hpp`` returns (..., dim, dim).
    """

    name: str
    eval_H: Callable[[np.ndarray, np.ndarray], np.ndarray]
    eval_Hp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    eval_Hpp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    C_H: float
    params: dict = field(default_factory=dict)

    def growth_violation(self, x: np.ndarray, p: np.ndarray) -> float:
        """Largest excess over the three growth bounds at the sample points (<= 0 is fine)."""
        pn = np.linalg.norm(p, axis=-1)
        h = np.abs(self.eval_H(x, p)) - self.C_H * (1 + pn**2)
        hp = np.linalg.norm(self.eval_Hp(x, p), axis=-1) - self.C_H * (1 + pn)
        hpp = np.linalg.norm(self.eval_Hpp(x, p), ord=2, axis=(-2, -1)) - self.C_H
        return float(max(h.max(), hp.max(), hpp.max()))


def _quadratic(scale: float = 1.0) -> HamiltonianSpec:
    def H(x, p):
        return 0.5 * scale * np.sum(p * p, axis=-1)

    def Hp(x, p):
        return scale * np.asarray(p, dtype=float)

    def Hpp(x, p):
        d = p.shape[-1]
        return np.broadcast_to(scale * np.eye(d), p.shape + (d,)).copy()

    return HamiltonianSpec("quadratic", H, Hp, Hpp, max(1.0, abs(scale)), {"scale": scale})


def _soft_transport(scale: float = 1.0) -> HamiltonianSpec:
    def H(x, p):
        return scale * (np.sqrt(1.0 + np.sum(p * p, axis=-1)) - 1.0)

    def Hp(x, p):
        return scale * p / np.sqrt(1.0 + np.sum(p * p, axis=-1))[..., None]

    def Hpp(x, p):
        d = p.shape[-1]
        r = np.sqrt(1.0 + np.sum(p * p, axis=-1))[..., None, None]
        outer = p[..., :, None] * p[..., None, :]
        return scale * (np.eye(d) - outer / r**2) / r

    return HamiltonianSpec("soft_transport", H, Hp, Hpp, max(1.0, abs(scale)), {"scale": scale})


def _zero_hamiltonian() -> HamiltonianSpec:
    def H(x, p):
        return np.zeros(p.shape[:-1])

    def Hp(x, p):
        return np.zeros(p.shape)

    def Hpp(x, p):
        return np.zeros(p.shape + (p.shape[-1],))

    return HamiltonianSpec("zero", H, Hp, Hpp, 1.0, {})


_HAMILTONIANS = {"quadratic": _quadratic, "soft_transport": _soft_transport, "zero": _zero_hamiltonian}


def builtin_hamiltonian(name: str, **params: Any) -> HamiltonianSpec:
    """``quadratic``: ½|p|²; ``soft_transport``: √(1+|p|²) − 1; ``zero``.

    Both nonzero Hamiltonians take an optional ``scale`` multiplier.
    """
    try:
        factory = _HAMILTONIANS[name]
    except KeyError:
        raise ValueError(f"unknown Hamiltonian {name!r}; choose from {sorted(_HAMILTONIANS)}") from None
    return factory(**params)


# -- couplings ------------------------------------------------------------------


def _bump_kernel(width: float, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """C² compactly supported kernel ``c (1 - |z|²/δ²)³₊`` with unit integral."""
    norm = width * 32.0 / 35.0 if dim == 1 else width**2 * math.pi / 4.0

    def k(z):
        s = np.sum(np.asarray(z) ** 2, axis=-1) / width**2
        return np.where(s < 1.0, (1.0 - np.minimum(s, 1.0)) ** 3, 0.0) / norm

    return k


@dataclass(frozen=True, eq=False)
class CouplingSpec:
    """Coupling ``F[m](t, x) = f(t, x, (k * m)(x))`` (``k`` = Dirac for local couplings).

    ``f`` and its derivative ``df`` in the last argument act pointwise.
    """

    name: str
    kind: str
    f: Callable[[Any, np.ndarray, np.ndarray], np.ndarray]
    df: Callable[[Any, np.ndarray, np.ndarray], np.ndarray]
    L_F: float
    monotone: bool
    kernel: Optional[Callable[[np.ndarray], np.ndarray]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("local", "convolution"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.kind == "convolution" and self.kernel is None:
            raise ValueError("convolution coupling needs a kernel")

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def smoothing(self, x: np.ndarray, y: np.ndarray, wy: np.ndarray) -> np.ndarray:
        """Dense matrix mapping samples at ``y`` to ``(k * m)`` sampled at ``x``."""
        return self.kernel(x[:, None, :] - y[None, :, :]) * wy[None, :]

    def apply(self, t, x: np.ndarray, m: Callable, domain: Optional[Domain] = None,
              n_gauss: int = 200) -> np.ndarray:
        """Evaluate ``F[m](t, x)`` for an analytic density ``m(t, x)``."""
        if self.kind == "local":
            return self.f(t, x, m(t, x))
        if domain is None:
            raise ValueError("convolution coupling needs the domain")
        y, wy = domain.gauss(n_gauss if domain.dim == 1 else max(32, n_gauss // 4))
        flat = np.asarray(x).reshape(-1, x.shape[-1])
        tt = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1]).reshape(-1)
        out = np.empty(len(flat))
        for i, (ti, xi) in enumerate(zip(tt, flat)):
            s = np.sum(self.kernel(xi[None, :] - y) * wy * m(ti, y))
            out[i] = self.f(ti, xi, np.asarray(s))
        return out.reshape(x.shape[:-1])


def builtin_coupling(name: str, **params: Any) -> CouplingSpec:
    """Named couplings.

    ``identity_local``: ``F[m] = scale·m``; ``saturating_local``: ``F[m] =
    scale·arctan(m)``; ``smoothed_convolution``: ``F[m] = scale·(k * m)``
    with a C² bump kernel of half-width ``width`` (``dim`` selects its
    normalisation); ``zero``.
    """
    scale = float(params.pop("scale", 1.0))
    if name == "identity_local":
        _no_extra(name, params)
        return CouplingSpec(name, "local", lambda t, x, m: scale * np.asarray(m, dtype=float),
                            lambda t, x, m: np.full(np.shape(m), scale), abs(scale), scale >= 0,
                            params={"scale": scale})
    if name == "saturating_local":
        _no_extra(name, params)
        return CouplingSpec(name, "local", lambda t, x, m: scale * np.arctan(m),
                            lambda t, x, m: scale / (1.0 + np.asarray(m) ** 2), abs(scale),
                            scale >= 0, params={"scale": scale})
    if name == "smoothed_convolution":
        width = float(params.pop("width", 0.25))
        dim = int(params.pop("dim", 1))
        _no_extra(name, params)
        kernel = _bump_kernel(width, dim)
        # k is even with a nonnegative Fourier transform only for some widths;
        # monotonicity is not claimed.
        return CouplingSpec(name, "convolution", lambda t, x, s: scale * np.asarray(s, dtype=float),
                            lambda t, x, s: np.full(np.shape(s), scale), abs(scale), False,
                            kernel=kernel, params={"scale": scale, "width": width, "dim": dim})
    if name == "zero":
        _no_extra(name, params)
        return CouplingSpec(name, "local", lambda t, x, m: np.zeros(np.shape(m)),
                            lambda t, x, m: np.zeros(np.shape(m)), 0.0, True)
    raise ValueError(f"unknown coupling {name!r}")


def _no_extra(name: str, params: dict) -> None:
    if params:
        raise ValueError(f"unexpected parameters for {name}: {sorted(params)}")


# -- problems -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MfgProblem:
    """Data of the Dirichlet MFG system on ``domain x (0, T)``.

    ``u_T`` and ``m0`` are callables of ``x``; the optional forcing terms
    ``source_u`` and ``source_m`` are callables of ``(t, x)``. ``exact_u``
    and ``exact_m`` are set for manufactured problems.
    """

    domain: Domain
    T: float
    hamiltonian: HamiltonianSpec
    coupling: CouplingSpec
    u_T: PointFn
    m0: PointFn
    source_u: Optional[TimeFn] = None
    source_m: Optional[TimeFn] = None
    monotone_hint: bool = False
    exact_u: Optional[SmoothField] = None
    exact_m: Optional[SmoothField] = None
    name: str = "problem"
    config: Optional[dict] = None

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        bp = self.domain.boundary_points()
        for label, fn in (("u_T", self.u_T), ("m0", self.m0)):
            vals = np.asarray(fn(bp), dtype=float)
            if np.max(np.abs(vals)) > 1e-10:
                raise ValueError(f"{label} must vanish on the boundary")
        if self.source_u is None and self.source_m is None:
            x, w = self.domain.gauss(64)
            m0 = np.asarray(self.m0(x), dtype=float)
            if m0.min() < -1e-12:
                raise ValueError("m0 must be nonnegative")
            mass = float(np.dot(w, m0))
            if abs(mass - 1.0) > 1e-8:
                raise ValueError(f"m0 must be a probability density (mass = {mass:.6g})")

    @property
    def is_manufactured(self) -> bool:
        return self.exact_u is not None and self.exact_m is not None

    @property
    def has_sources(self) -> bool:
        return self.source_u is not None or self.source_m is not None


def manufacture(
    u_star: SmoothField,
    m_star: SmoothField,
    hamiltonian: HamiltonianSpec,
    coupling: CouplingSpec,
    domain: Domain,
    T: float,
    name: str = "manufactured",
    check_times: int = 5,
) -> MfgProblem:
    """Forcing terms for which ``(u_star, m_star)`` solves the system exactly.

    ``source_u = -∂t u - Δu + H(x, Du) - F[m]`` and
    ``source_m = ∂t m - Δm - Dm·H_p(x, Du) - m tr(H_pp(x, Du) D²u)``,
    the last two terms being the expanded ``div(m H_p(x, Du))``.
    """
    for fld in (u_star, m_star):
        if fld.grad is None or fld.dt is None or fld.hess is None:
            raise ValueError("manufactured fields need dt, grad and hess")
    bp = domain.boundary_points()
    for t in np.linspace(0.0, T, check_times):
        for label, fld in (("u_star", u_star), ("m_star", m_star)):
            if np.max(np.abs(fld.value(t, bp))) > 1e-10:
                raise ValueError(f"{label} does not vanish on the boundary at t={t}")

    H, Hp, Hpp = hamiltonian.eval_H, hamiltonian.eval_Hp, hamiltonian.eval_Hpp

    def source_u(t, x):
        du = u_star.grad(t, x)
        return (-u_star.dt(t, x) - u_star.laplacian(t, x) + H(x, du)
                - coupling.apply(t, x, m_star.value, domain))

    def source_m(t, x):
        du = u_star.grad(t, x)
        m = m_star.value(t, x)
        drift = np.sum(m_star.grad(t, x) * Hp(x, du), axis=-1)
        stretch = m * np.einsum("...ij,...ji->...", Hpp(x, du), u_star.hess(t, x))
        return m_star.dt(t, x) - m_star.laplacian(t, x) - drift - stretch

    return MfgProblem(
        domain, T, hamiltonian, coupling,
        u_T=lambda x: u_star.value(T, x),
        m0=lambda x: m_star.value(0.0, x),
        source_u=source_u, source_m=source_m,
        monotone_hint=coupling.monotone,
        exact_u=u_star, exact_m=m_star, name=name,
    )


# -- analytic building blocks -----------------------------------------------------

Factor = tuple[Callable, Callable, Callable]  # value, first and second derivative


def separable_field(time: tuple[Callable, Callable], factors: list[Factor]) -> SmoothField:
    """``a(t) Π_i g_i(x_i)`` with analytic time derivative, gradient and Hessian."""
    a, da = time
    d = len(factors)

    def parts(x):
        return [[f[k](x[..., i]) for k in range(3)] for i, f in enumerate(factors)]

    def prod(vals):
        out = vals[0]
        for v in vals[1:]:
            out = out * v
        return out

    def value(t, x):
        p = parts(x)
        return a(t) * prod([p[i][0] for i in range(d)])

    def dt(t, x):
        p = parts(x)
        return da(t) * prod([p[i][0] for i in range(d)])

    def grad(t, x):
        p, at = parts(x), a(t)
        comps = [at * prod([p[j][1 if j == i else 0] for j in range(d)]) for i in range(d)]
        return np.stack(np.broadcast_arrays(*comps), axis=-1)

    def hess(t, x):
        p, at = parts(x), a(t)
        entries = [[at * prod([p[k][2 if k == i else 0] for k in range(d)]) if i == j
                    else at * prod([p[k][1 if k in (i, j) else 0] for k in range(d)])
                    for j in range(d)] for i in range(d)]
        flat = np.broadcast_arrays(*[e for row in entries for e in row])
        return np.stack(flat, axis=-1).reshape(flat[0].shape + (d, d))

    return SmoothField(value, grad, dt, hess)


SINE: Factor = (lambda s: np.sin(np.pi * s),
                lambda s: np.pi * np.cos(np.pi * s),
                lambda s: -np.pi**2 * np.sin(np.pi * s))
QUARTIC: Factor = (lambda s: s**2 * (1 - s) ** 2,
                   lambda s: 2 * s * (1 - s) * (1 - 2 * s),
                   lambda s: 2 * (1 - 6 * s + 6 * s**2))


def smooth_pair(T: float, dim: int = 1) -> tuple[SmoothField, SmoothField]:
    """``u* = (T−t)e^{−t} Π sin(πx_i)``, ``m* = (1+t) Π x_i²(1−x_i)²`` on the unit cube."""
    u = separable_field((lambda t: (T - t) * np.exp(-t), lambda t: -(1 + T - t) * np.exp(-t)),
                        [SINE] * dim)
    m = separable_field((lambda t: 1 + np.asarray(t, dtype=float), lambda t: np.ones_like(np.asarray(t, dtype=float))),
                        [QUARTIC] * dim)
    return u, m


def named_data(name: str, domain: Domain, role: str) -> PointFn:
    """Terminal costs and initial densities by name.

    ``zero``; ``sine``: product of sines scaled to the domain; ``bump``:
    product of ``s²(1−s)²`` in scaled coordinates. Initial densities are
    normalised to unit mass.
    """
    lo = np.array([b[0] for b in domain.bounds])
    width = np.array([b[1] - b[0] for b in domain.bounds])

    if name == "zero":
        fn = lambda x: np.zeros(np.shape(x)[:-1])  # noqa: E731
    elif name == "sine":
        fn = lambda x: np.prod(np.sin(np.pi * (x - lo) / width), axis=-1)  # noqa: E731
    elif name == "bump":
        def fn(x):
            s = (x - lo) / width
            return np.prod(s**2 * (1 - s) ** 2, axis=-1)
    else:
        raise ValueError(f"unknown {role} data {name!r}")
    if role == "m0" and name != "zero":
        x, w = domain.gauss(64)
        mass = float(np.dot(w, fn(x)))
        base = fn
        fn = lambda x: base(x) / mass  # noqa: E731
    return fn
