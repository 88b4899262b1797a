import json

import numpy as np
import pytest

from mfgfem.fem import P1Space, l2_project
from mfgfem.heat import ThetaSchemeConfig, loads_from_source, s_i_h, s_t_h, s_ts_h
from mfgfem.problem import (Domain, MfgProblem, builtin_coupling, builtin_hamiltonian, manufacture,
                            named_data, smooth_pair)
from mfgfem.solver import (DiscreteMfg, HJBStepError, SolverConfig, SolverError, jacobian_check,
                           solve_coupled, solve_fp_forward, solve_hjb_backward, solve_linearized,
                           stability_margin)
from mfgfem.spacetime import SpaceTimeField, TimeGrid, norm_lq, norm_w01q

DOM = Domain.interval()


def data_problem(H="quadratic", F="zero", T=0.5, u_T="sine", m0="bump", **fparams):
    return MfgProblem(DOM, T, builtin_hamiltonian(H), builtin_coupling(F, **fparams),
                      named_data(u_T, DOM, "u_T"), named_data(m0, DOM, "m0"))


def manufactured(T=0.5, H="soft_transport", F="saturating_local"):
    u, m = smooth_pair(T)
    return manufacture(u, m, builtin_hamiltonian(H), builtin_coupling(F), DOM, T)


def setup(n=16, T=0.5, theta=0.5, steps=None):
    space = P1Space(DOM.mesh(n))
    return space, ThetaSchemeConfig(theta, TimeGrid(T, steps or n))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(method="gauss")
    with pytest.raises(ValueError):
        SolverConfig(damping=1.5)
    with pytest.raises(ValueError):
        SolverConfig(tol_residual=0)


def test_hjb_zero_data_gives_zero():
    space, sch = setup()
    pb = MfgProblem(DOM, 0.5, builtin_hamiltonian("zero"), builtin_coupling("zero"),
                    named_data("zero", DOM, "u_T"), named_data("bump", DOM, "m0"))
    u = solve_hjb_backward(pb, space, sch, SolverConfig(), SpaceTimeField.zeros(sch.grid, space))
    assert not u.frames.any()


def test_hjb_without_hamiltonian_is_linear_backward_heat():
    space, sch = setup(n=20, steps=15)
    u_s, m_s = smooth_pair(0.5)
    pb = manufacture(u_s, m_s, builtin_hamiltonian("zero"), builtin_coupling("zero"), DOM, 0.5)
    u = solve_hjb_backward(pb, space, sch, SolverConfig(), SpaceTimeField.zeros(sch.grid, space))
    ref = s_t_h(space, sch, l2_project(space, pb.u_T)) + s_ts_h(space, sch, loads_from_source(space, sch.grid, pb.source_u))
    np.testing.assert_allclose(u.frames, ref.frames, atol=1e-12, rtol=0)


def test_hjb_step_failure_reports_index():
    space, sch = setup(n=8, steps=4)
    pb = data_problem()
    cfg = SolverConfig(inner_max_iter=1)
    with pytest.raises(HJBStepError) as exc:
        solve_hjb_backward(pb, space, sch, cfg, SpaceTimeField.zeros(sch.grid, space))
    assert exc.value.step == sch.grid.n_steps - 1


def test_fp_without_drift_is_heat_flow():
    space, sch = setup(n=20, steps=12)
    pb = data_problem(H="soft_transport")
    m = solve_fp_forward(pb, space, sch, SolverConfig(), SpaceTimeField.zeros(sch.grid, space))
    ref = s_i_h(space, sch, l2_project(space, pb.m0))
    np.testing.assert_allclose(m.frames, ref.frames, atol=1e-12, rtol=0)


def test_fp_zero_density_stays_zero():
    space, sch = setup()
    u_s, _ = smooth_pair(0.5)
    zero = lambda t, x: 0 * x[..., 0] + 0 * np.asarray(t)  # noqa: E731
    pb = MfgProblem(DOM, 0.5, builtin_hamiltonian("quadratic"), builtin_coupling("zero"),
                    named_data("sine", DOM, "u_T"), named_data("zero", DOM, "m0"), source_m=zero)
    u = SpaceTimeField(sch.grid, space, np.random.default_rng(0).standard_normal((17, space.n_dofs)))
    assert not solve_fp_forward(pb, space, sch, SolverConfig(), u).frames.any()


def test_fp_lumped_mass_nonincreasing_and_positive():
    n = 16
    space = P1Space(DOM.mesh(n))
    sch = ThetaSchemeConfig(1.0, TimeGrid.from_step(0.2, 1 / (4 * n * n)))
    pb = data_problem(H="zero")
    m = solve_fp_forward(pb, space, sch, SolverConfig(fp_lumping=True), SpaceTimeField.zeros(sch.grid, space))
    mass = m.frames @ space.lumped_mass
    assert np.all(np.diff(mass) <= 1e-15)
    assert m.frames.min() >= 0


def test_fp_positivity_with_drift():
    n = 16
    space = P1Space(DOM.mesh(n))
    sch = ThetaSchemeConfig(1.0, TimeGrid.from_step(0.2, 1 / (4 * n * n)))
    pb = data_problem(H="soft_transport")
    u = solve_hjb_backward(pb, space, sch, SolverConfig(), SpaceTimeField.zeros(sch.grid, space))
    m = solve_fp_forward(pb, space, sch, SolverConfig(fp_lumping=True), u)
    assert m.frames.min() >= 0


def test_fields_must_match_grid():
    space, sch = setup()
    other = SpaceTimeField.zeros(TimeGrid(0.5, 3), space)
    with pytest.raises(ValueError):
        solve_fp_forward(data_problem(), space, sch, SolverConfig(), other)


def test_decoupled_converges_in_one_iteration():
    space, sch = setup()
    u, m, rep = solve_coupled(data_problem(F="zero"), space, sch, SolverConfig(method="picard"))
    assert rep.converged and rep.outer_iterations == 1
    assert rep.final_residual <= 1e-9


@pytest.mark.parametrize("method", ["picard", "newton", "picard_then_newton"])
def test_converged_residual_below_tolerance(method):
    space, sch = setup()
    _, _, rep = solve_coupled(manufactured(), space, sch, SolverConfig(method=method))
    assert rep.converged and rep.final_residual <= 1e-9
    assert len(rep.residual_history) == rep.outer_iterations
    assert rep.sup_bound_check <= 0


def test_picard_and_newton_agree_short_horizon():
    space, sch = setup(n=16, T=0.25)
    pb = data_problem(H="quadratic", F="saturating_local", T=0.25)
    uP, mP, _ = solve_coupled(pb, space, sch, SolverConfig(method="picard"))
    uN, mN, _ = solve_coupled(pb, space, sch, SolverConfig(method="newton"))
    assert norm_w01q(uP - uN, 7) <= 1e-8
    assert norm_lq(mP - mN, 7) <= 1e-8


def test_non_convergence_carries_report():
    space, sch = setup()
    with pytest.raises(SolverError) as exc:
        solve_coupled(manufactured(), space, sch, SolverConfig(method="picard", max_outer=2))
    err = exc.value
    assert not err.report.converged and err.report.outer_iterations == 2
    assert err.u is not None and err.m is not None
    json.dumps(err.report.to_dict())


def test_report_json_roundtrip():
    space, sch = setup()
    _, _, rep = solve_coupled(manufactured(), space, sch)
    d = json.loads(json.dumps(rep.to_dict()))
    assert set(d) >= {"converged", "outer_iterations", "residual_history", "final_residual", "sup_bound_check"}


def test_discrete_solution_satisfies_hjb_bound(rng):
    space, sch = setup(n=32, T=1.0, steps=32)
    pb = data_problem(H="quadratic", F="saturating_local", T=1.0, scale=2.0)
    u, m, rep = solve_coupled(pb, space, sch)
    d = DiscreteMfg(pb, space, sch)
    bound = np.max(np.abs(u.frames)) - rep.sup_bound_check
    assert np.max(np.abs(u.frames)) <= 1.05 * bound
    assert rep.sup_bound_check == pytest.approx(d.sup_bound_excess(u.frames, m.frames))


def test_linearized_zero_rhs_gives_zero():
    space, sch = setup()
    pb = manufactured()
    u, m, _ = solve_coupled(pb, space, sch)
    v, rho = solve_linearized(pb, space, sch, SolverConfig(), u, m)
    assert np.max(np.abs(v.frames)) < 1e-14 and np.max(np.abs(rho.frames)) < 1e-14


def test_linearized_decouples_without_density(rng):
    space, sch = setup()
    pb = manufactured()
    u, _, _ = solve_coupled(pb, space, sch)
    m0 = np.zeros_like(u.frames)
    rhs_m = rng.standard_normal(u.frames.shape)
    _, rho1 = solve_linearized(pb, space, sch, SolverConfig(), u, m0, rhs_u=rng.standard_normal(u.frames.shape), rhs_m=rhs_m)
    _, rho2 = solve_linearized(pb, space, sch, SolverConfig(), u, m0, rhs_u=np.zeros_like(m0), rhs_m=rhs_m)
    np.testing.assert_allclose(rho1.frames, rho2.frames, atol=1e-13)


def test_linearized_matches_newton_step(rng):
    # J(z)[v, rho] for rhs fields should equal the assembled residual derivative
    space, sch = setup(n=8)
    pb = manufactured()
    d = DiscreteMfg(pb, space, sch)
    u = rng.standard_normal((9, space.n_dofs))
    m = rng.standard_normal((9, space.n_dofs))
    fu, fm = rng.standard_normal(u.shape), rng.standard_normal(u.shape)
    v, rho = solve_linearized(pb, space, sch, SolverConfig(), u, m, fu, fm)
    J = d.jacobian(d.join(u, m))
    out_u, out_m = d.split(J @ d.join(v.frames, rho.frames))
    th = sch.theta
    Mfu, Mfm = (space.mass @ fu.T).T, (space.mass @ fm.T).T
    np.testing.assert_allclose(out_u[:-1], th * Mfu[:-1] + (1 - th) * Mfu[1:], atol=1e-10)
    np.testing.assert_allclose(out_m[1:], th * Mfm[1:] + (1 - th) * Mfm[:-1], atol=1e-10)
    assert np.max(np.abs(out_u[-1])) < 1e-12 and np.max(np.abs(out_m[0])) < 1e-12


@pytest.mark.parametrize("coupling,params", [("identity_local", {"scale": -1.0}), ("saturating_local", {}),
                                             ("smoothed_convolution", {"width": 0.3})])
@pytest.mark.parametrize("H", ["quadratic", "soft_transport"])
def test_jacobian_exact_at_picard_iterates(coupling, params, H):
    space, sch = setup(n=12)
    pb = data_problem(H=H, F=coupling, **params)
    d = DiscreteMfg(pb, space, sch)
    m = d.heat_flow_density()
    for _ in range(3):
        u = d.hjb_backward(m)
        errs = jacobian_check(pb, space, sch, SolverConfig(), u, m, n_directions=5)
        assert errs.max() <= 1e-6
        m = 0.5 * m + 0.5 * d.fp_forward(u)


def test_jacobian_exact_with_lumping_and_2d():
    dom = Domain.rectangle()
    u_s, m_s = smooth_pair(0.25, 2)
    pb = manufacture(u_s, m_s, builtin_hamiltonian("quadratic"), builtin_coupling("saturating_local"), dom, 0.25)
    space = P1Space(dom.mesh(4))
    sch = ThetaSchemeConfig(0.7, TimeGrid(0.25, 3))
    rng = np.random.default_rng(3)
    u = rng.standard_normal((4, space.n_dofs))
    m = rng.standard_normal((4, space.n_dofs))
    errs = jacobian_check(pb, space, sch, SolverConfig(fp_lumping=True), u, m, n_directions=5)
    assert errs.max() <= 1e-6


def test_stability_margin_decoupled_positive():
    space, sch = setup()
    pb = data_problem(H="zero", F="zero")
    u, m, _ = solve_coupled(pb, space, sch)
    est = stability_margin(pb, space, sch, SolverConfig(), u, m)
    assert est.converged and est.value > 0
    # with no coupling the linearization is the heat operator itself: L⁻¹J = I
    assert est.value == pytest.approx(1.0, abs=1e-8)


def test_stability_margin_scales_linearly():
    space, sch = setup()
    pb = manufactured()
    u, m, _ = solve_coupled(pb, space, sch)
    a = stability_margin(pb, space, sch, SolverConfig(), u, m)
    b = stability_margin(pb, space, sch, SolverConfig(), u, m, scale=3.0)
    assert b.value == pytest.approx(3 * a.value, rel=1e-12)
    assert 0 < a.value <= 1.0 + 1e-9


def test_stability_margin_against_dense_svd():
    space, sch = setup(n=8)
    pb = manufactured()
    u, m, _ = solve_coupled(pb, space, sch)
    d = DiscreteMfg(pb, space, sch)
    J = d.jacobian(d.join(u.frames, m.frames)).toarray()
    L = d.linear_part().toarray()
    w = np.kron(np.tile(sch.grid.trapezoid_weights(), 2), space.lumped_mass)
    S = np.diag(np.sqrt(w))
    op = S @ np.linalg.solve(L, J) @ np.linalg.inv(S)
    sigma = np.linalg.svd(op, compute_uv=False).min()
    est = stability_margin(pb, space, sch, SolverConfig(), u, m)
    assert est.value == pytest.approx(sigma, rel=1e-6)


def test_stability_margin_flags_unsettled_iteration():
    space, sch = setup()
    pb = manufactured()
    u, m, _ = solve_coupled(pb, space, sch)
    est = stability_margin(pb, space, sch, SolverConfig(), u, m, max_iter=2)
    assert not est.converged and est.iterations == 2 and est.value > 0


def test_convolution_coupling_solves():
    space, sch = setup()
    pb = data_problem(H="quadratic", F="smoothed_convolution", width=0.25)
    _, m, rep = solve_coupled(pb, space, sch)
    assert rep.converged and rep.final_residual <= 1e-9
