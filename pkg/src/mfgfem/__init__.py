"""P1 finite elements and θ-schemes for second-order mean field games with Dirichlet data."""

from .convergence import run_heat_suite, run_mfg_convergence
from .fem import P1Space, PreconditionError, l2_project, ritz_project
from .heat import ThetaSchemeConfig, s_i_h, s_is_h, s_t_h, s_ts_h
from .mesh import Mesh, build_interval_mesh, build_rectangle_mesh, refine_uniform
from .problem import (Domain, MfgProblem, builtin_coupling, builtin_hamiltonian, manufacture,
                      smooth_pair)
from .reports import ErrorReport, eoc
from .solver import (SolveReport, SolverConfig, SolverError, solve_coupled, solve_fp_forward,
                     solve_hjb_backward, solve_linearized, stability_margin)
from .spacetime import SpaceTimeField, TimeGrid, error_norms, norm_lq, norm_w01q

__all__ = [
    "Domain", "ErrorReport", "Mesh", "MfgProblem", "P1Space", "PreconditionError", "SolveReport",
    "SolverConfig", "SolverError", "SpaceTimeField", "ThetaSchemeConfig", "TimeGrid",
    "build_interval_mesh", "build_rectangle_mesh", "builtin_coupling", "builtin_hamiltonian",
    "eoc", "error_norms", "l2_project", "manufacture", "norm_lq", "norm_w01q", "refine_uniform",
    "ritz_project", "run_heat_suite", "run_mfg_convergence", "s_i_h", "s_is_h", "s_t_h", "s_ts_h",
    "smooth_pair", "solve_coupled", "solve_fp_forward", "solve_hjb_backward", "solve_linearized",
    "stability_margin",
]
__version__ = "0.1.0"
