"""rieszlab: numerics for the sharp Lane-Emden interaction inequality.

The package computes radial optimizers of the interaction functional
D(rho,rho) = integral of rho(x) rho(y) |x-y|^(-lambda), the sharp constant of
the associated two-norm inequality, the spectral data of the Hessian at the
optimizer, stability-deficit quotients, the aggregation-diffusion gradient
flow dissipating the related free energy, and zero-energy scattering
diagnostics for the operator (-Delta)^s + V.
"""

from .radial_core import (
    Params,
    RadialGrid,
    RadialProfile,
    make_grid,
    integrate,
    lp_norm,
    rescale,
)
from .riesz_kernel import (
    ChannelKernel,
    RieszConstants,
    channel_kernel,
    potential,
    pair_energy,
    riesz_constants,
)
from .optimizer import (
    SolveOptions,
    OptimizerSolution,
    solve_optimizer,
    el_residual,
    exterior_potential,
    derived_constants,
)
from .hessian_spec import (
    HessianContext,
    SpectrumReport,
    build_hessian_context,
    build_channel_A,
    verify_identities,
    channel_spectrum,
    hessian_form,
    gap_estimate,
    bs_triviality_check,
)
from .stability_lab import (
    DeficitReport,
    PerturbationSpec,
    deficit,
    manifold_distance,
    delta_X,
    fp_function,
    quotient_curve,
)
from .free_energy_flow import (
    TheoryValues,
    FlowState,
    FlowTrace,
    StopRule,
    free_energy,
    theory_values,
    scale_to_Lchi,
    g_alpha,
    corollary_gap,
    flow_step,
    run_flow,
    mass_normalize,
)
from .scattering_diag import (
    ScatteringProblem,
    ExtensionField,
    HamiltonianProfile,
    scattering_problem_from,
    solve_scattering,
    local_hamiltonian,
    poisson_extension,
    fractional_hamiltonian,
    monotonicity_report,
)
from .errors import ParameterWindowError, ConvergenceError, KernelQuadratureError

__all__ = [
    "Params",
    "RadialGrid",
    "RadialProfile",
    "make_grid",
    "integrate",
    "lp_norm",
    "rescale",
    "ChannelKernel",
    "RieszConstants",
    "channel_kernel",
    "potential",
    "pair_energy",
    "riesz_constants",
    "SolveOptions",
    "OptimizerSolution",
    "solve_optimizer",
    "el_residual",
    "exterior_potential",
    "derived_constants",
    "HessianContext",
    "SpectrumReport",
    "build_hessian_context",
    "build_channel_A",
    "verify_identities",
    "channel_spectrum",
    "hessian_form",
    "gap_estimate",
    "bs_triviality_check",
    "DeficitReport",
    "PerturbationSpec",
    "deficit",
    "manifold_distance",
    "delta_X",
    "fp_function",
    "quotient_curve",
    "TheoryValues",
    "FlowState",
    "FlowTrace",
    "StopRule",
    "free_energy",
    "theory_values",
    "scale_to_Lchi",
    "g_alpha",
    "corollary_gap",
    "flow_step",
    "run_flow",
    "mass_normalize",
    "ScatteringProblem",
    "ExtensionField",
    "HamiltonianProfile",
    "scattering_problem_from",
    "solve_scattering",
    "local_hamiltonian",
    "poisson_extension",
    "fractional_hamiltonian",
    "monotonicity_report",
    "ParameterWindowError",
    "ConvergenceError",
    "KernelQuadratureError",
]

__version__ = "0.1.0"
