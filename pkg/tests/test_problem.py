import numpy as np
import pytest
import sympy as sy

from mfgfem.problem import (QUARTIC, SINE, Domain, MfgProblem, builtin_coupling,
                            builtin_hamiltonian, manufacture, named_data, separable_field,
                            smooth_pair)

HAMILTONIANS = [("quadratic", {}), ("soft_transport", {}), ("quadratic", {"scale": 2.5}),
                ("soft_transport", {"scale": 0.5}), ("zero", {})]
COUPLINGS = [("identity_local", {}), ("saturating_local", {}), ("identity_local", {"scale": -1.0}),
             ("saturating_local", {"scale": 3.0}), ("zero", {})]


def random_p(rng, n, dim):
    p = rng.standard_normal((n, dim))
    return p * (10.0 ** rng.uniform(-3, 3, (n, 1)))  # |p| up to about 10³


def test_quadratic_values():
    H = builtin_hamiltonian("quadratic")
    x = np.zeros((1, 1))
    assert H.eval_H(x, np.array([[0.0]]))[0] == 0.0
    np.testing.assert_allclose(H.eval_Hpp(x, np.array([[0.0]]))[0], [[1.0]])
    assert H.eval_H(x, np.array([[3.0]]))[0] == pytest.approx(4.5)
    np.testing.assert_allclose(H.eval_Hp(x, np.array([[3.0]]))[0], [3.0])
    assert H.C_H == 1.0


def test_soft_transport_at_zero():
    H = builtin_hamiltonian("soft_transport")
    x = np.zeros((1, 2))
    p = np.zeros((1, 2))
    assert H.eval_H(x, p)[0] == 0.0
    np.testing.assert_allclose(H.eval_Hp(x, p)[0], 0.0)
    np.testing.assert_allclose(H.eval_Hpp(x, p)[0], np.eye(2))


def test_unknown_names_rejected():
    with pytest.raises(ValueError):
        builtin_hamiltonian("cubic")
    with pytest.raises(ValueError):
        builtin_coupling("nonlocal_magic")
    with pytest.raises(ValueError):
        builtin_coupling("identity_local", width=2.0)


@pytest.mark.parametrize("name,params", HAMILTONIANS)
@pytest.mark.parametrize("dim", [1, 2])
def test_hamiltonian_contracts(name, params, dim, rng):
    H = builtin_hamiltonian(name, **params)
    n = 1000
    x = rng.uniform(0, 1, (n, dim))
    p = random_p(rng, n, dim)
    assert H.growth_violation(x, p) <= 1e-9
    # H_p is the gradient of H and H_pp the Jacobian of H_p (central differences)
    p = rng.uniform(-3, 3, (n, dim))
    d = 1e-5
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = d
        fd = (H.eval_H(x, p + e) - H.eval_H(x, p - e)) / (2 * d)
        np.testing.assert_allclose(fd, H.eval_Hp(x, p)[:, i], atol=1e-8)
        fd2 = (H.eval_Hp(x, p + e) - H.eval_Hp(x, p - e)) / (2 * d)
        np.testing.assert_allclose(fd2, H.eval_Hpp(x, p)[:, :, i], atol=1e-8)
    hpp = H.eval_Hpp(x, p)
    np.testing.assert_allclose(hpp, np.swapaxes(hpp, -1, -2))


@pytest.mark.parametrize("name,params", COUPLINGS)
def test_local_coupling_contracts(name, params, rng):
    F = builtin_coupling(name, **params)
    n = 1000
    x = rng.uniform(0, 1, (n, 1))
    m1, m2 = rng.normal(0, 5, n), rng.normal(0, 5, n)
    # pointwise Lipschitz bound implies the L^p one for every p
    assert np.all(np.abs(F.f(0.0, x, m1) - F.f(0.0, x, m2)) <= F.L_F * np.abs(m1 - m2) + 1e-12)
    assert not np.any(F.f(0.0, x, m1) - F.f(0.0, x, m1))
    d = 1e-6
    fd = (F.f(0.0, x, m1 + d) - F.f(0.0, x, m1 - d)) / (2 * d)
    np.testing.assert_allclose(fd, F.df(0.0, x, m1), atol=1e-7)


def test_coupling_examples():
    x = np.zeros((3, 1))
    assert not builtin_coupling("identity_local").f(0.0, x, np.zeros(3)).any()
    F = builtin_coupling("saturating_local")
    m = np.array([0.0, 1.0, -2.0])
    rho = np.array([2.0, 3.0, 5.0])
    np.testing.assert_allclose(F.df(0.0, x, m) * rho, rho / (1 + m**2))
    assert F.monotone and builtin_coupling("identity_local").monotone
    assert not builtin_coupling("identity_local", scale=-1).monotone


def test_convolution_kernel_normalised_and_lipschitz(rng):
    delta = 0.3
    xi, wi = np.polynomial.legendre.leggauss(8)  # exact on the polynomial support
    F1 = builtin_coupling("smoothed_convolution", width=delta, dim=1)
    assert np.sum(F1.kernel((delta * xi)[:, None]) * delta * wi) == pytest.approx(1.0, rel=1e-13)
    F2 = builtin_coupling("smoothed_convolution", width=delta, dim=2)
    r = 0.5 * delta * (xi + 1)
    theta = np.linspace(0, 2 * np.pi, 9)[:-1]
    pts = np.stack([np.outer(r, np.cos(theta)), np.outer(r, np.sin(theta))], axis=-1)
    vals = F2.kernel(pts) * (r * 0.5 * delta * wi)[:, None] * (2 * np.pi / 8)
    assert vals.sum() == pytest.approx(1.0, rel=1e-13)
    F = builtin_coupling("smoothed_convolution", width=0.25)
    dom = Domain.interval()
    y, w = dom.gauss(200)
    K = F.smoothing(y, y, w)
    for _ in range(50):
        m1, m2 = rng.standard_normal(len(y)), rng.standard_normal(len(y))
        for p in (1.0, 2.0, 7.0):
            lhs = np.sum(w * np.abs(K @ (m1 - m2)) ** p) ** (1 / p)
            rhs = np.sum(w * np.abs(m1 - m2) ** p) ** (1 / p)
            assert lhs <= F.L_F * rhs * (1 + 1e-9)


def test_problem_validation():
    dom = Domain.interval()
    H, F = builtin_hamiltonian("quadratic"), builtin_coupling("zero")
    sine, bump = named_data("sine", dom, "u_T"), named_data("bump", dom, "m0")
    MfgProblem(dom, 1.0, H, F, sine, bump)
    with pytest.raises(ValueError):
        MfgProblem(dom, 1.0, H, F, lambda x: 1.0 + 0 * x[..., 0], bump)
    with pytest.raises(ValueError):
        MfgProblem(dom, 1.0, H, F, sine, lambda x: 2 * bump(x))  # mass 2
    with pytest.raises(ValueError):
        MfgProblem(dom, 1.0, H, F, sine, lambda x: -bump(x))
    with pytest.raises(ValueError):
        MfgProblem(dom, 0.0, H, F, sine, bump)


def test_named_density_has_unit_mass():
    for dom in (Domain.interval(-1, 2), Domain.rectangle(2, 1)):
        x, w = dom.gauss(64)
        assert np.dot(w, named_data("bump", dom, "m0")(x)) == pytest.approx(1.0, rel=1e-12)
        assert np.dot(w, named_data("sine", dom, "m0")(x)) == pytest.approx(1.0, rel=1e-12)


ZERO_FIELD = separable_field((lambda t: 0 * np.asarray(t, float), lambda t: 0 * np.asarray(t, float)), [QUARTIC])


def test_manufacture_zero_pair_has_zero_sources(rng):
    pb = manufacture(ZERO_FIELD, ZERO_FIELD, builtin_hamiltonian("quadratic"),
                     builtin_coupling("saturating_local"), Domain.interval(), 1.0)
    t, x = rng.uniform(0, 1, (50, 1)), rng.uniform(0, 1, (50, 1))
    assert not pb.source_u(t[:, 0], x).any()
    assert not pb.source_m(t[:, 0], x).any()


def test_manufacture_heat_only_value():
    T = 0.7
    u = separable_field((lambda t: T - t, lambda t: -np.ones_like(np.asarray(t, float))), [SINE])
    pb = manufacture(u, ZERO_FIELD, builtin_hamiltonian("zero"), builtin_coupling("zero"),
                     Domain.interval(), T)
    assert pb.source_u(T, np.array([[0.5]]))[0] == pytest.approx(1.0, abs=1e-14)
    x = np.array([[0.3]])
    assert pb.source_u(0.2, x)[0] == pytest.approx((1 + (T - 0.2) * np.pi**2) * np.sin(0.3 * np.pi))


def test_manufacture_rejects_nonvanishing_pair():
    u = separable_field((lambda t: 1 + 0 * np.asarray(t, float), lambda t: 0 * np.asarray(t, float)),
                        [(lambda s: 1 + 0 * s, lambda s: 0 * s, lambda s: 0 * s)])
    with pytest.raises(ValueError):
        manufacture(u, u, builtin_hamiltonian("quadratic"), builtin_coupling("zero"), Domain.interval(), 1.0)


def _symbolic_sources(T, dim, hamiltonian, coupling):
    t = sy.Symbol("t")
    xs = sy.symbols(f"x0:{dim}")
    u = (T - t) * sy.exp(-t) * sy.Mul(*[sy.sin(sy.pi * x) for x in xs])
    m = (1 + t) * sy.Mul(*[x**2 * (1 - x) ** 2 for x in xs])
    grad_u = [sy.diff(u, x) for x in xs]
    ps = sy.symbols(f"p0:{dim}")
    Hsym = {"quadratic": sum(p**2 for p in ps) / 2,
            "soft_transport": sy.sqrt(1 + sum(p**2 for p in ps)) - 1}[hamiltonian]
    at_du = dict(zip(ps, grad_u))
    H = Hsym.subs(at_du)
    Hp_at = [sy.diff(Hsym, p).subs(at_du) for p in ps]
    Fm = {"identity_local": m, "saturating_local": sy.atan(m)}[coupling]
    lap = lambda f: sum(sy.diff(f, x, 2) for x in xs)  # noqa: E731
    src_u = -sy.diff(u, t) - lap(u) + H - Fm
    src_m = sy.diff(m, t) - lap(m) - sum(sy.diff(m * Hp_at[i], xs[i]) for i in range(dim))
    return (sy.lambdify((t, *xs), src_u, "numpy"), sy.lambdify((t, *xs), src_m, "numpy"))


@pytest.mark.parametrize("dim", [1, 2])
@pytest.mark.parametrize("hamiltonian", ["quadratic", "soft_transport"])
@pytest.mark.parametrize("coupling", ["identity_local", "saturating_local"])
def test_manufactured_residual_matches_symbolic_oracle(dim, hamiltonian, coupling, rng):
    T = 0.5
    dom = Domain.interval() if dim == 1 else Domain.rectangle()
    u, m = smooth_pair(T, dim)
    pb = manufacture(u, m, builtin_hamiltonian(hamiltonian), builtin_coupling(coupling), dom, T)
    su, sm = _symbolic_sources(T, dim, hamiltonian, coupling)
    t = rng.uniform(0, T, 100)
    x = rng.uniform(0, 1, (100, dim))
    np.testing.assert_allclose(pb.source_u(t, x), su(t, *x.T), atol=1e-10, rtol=0)
    np.testing.assert_allclose(pb.source_m(t, x), sm(t, *x.T), atol=1e-10, rtol=0)


def test_manufactured_convolution_source(rng):
    T = 0.5
    u, m = smooth_pair(T, 1)
    F = builtin_coupling("smoothed_convolution", width=0.25)
    pb = manufacture(u, m, builtin_hamiltonian("quadratic"), F, Domain.interval(), T)
    local = manufacture(u, m, builtin_hamiltonian("quadratic"), builtin_coupling("zero"), Domain.interval(), T)
    x = np.array([[0.5]])
    # k * m at the centre by an independent fine trapezoid rule
    y = np.linspace(0, 1, 20001)
    conv = np.trapezoid(F.kernel((0.5 - y)[:, None]) * m.value(0.1, y[:, None]), y)
    assert local.source_u(0.1, x)[0] - pb.source_u(0.1, x)[0] == pytest.approx(conv, abs=1e-8)


def test_domain_helpers():
    d = Domain.rectangle(2, 1)
    assert d.dim == 2 and d.volume == 2.0 and not d.is_unit()
    assert d.mesh(4).n_cells == 4 * 2 * 2
    assert Domain.interval().to_dict() == {"kind": "interval", "a": 0.0, "b": 1.0}
    with pytest.raises(ValueError):
        Domain.interval(1, 0)
