"""Concrete problems: convex oracle baselines and diffusion tensor imaging."""

from .baselines import (
    Baseline,
    composite_single_dual,
    composite_sum,
    make_convex_baselines,
    quadratic_saddle,
    solve_tv1d_dual,
    tv1d_denoising,
)
from .dti import (
    BLOCK_SETUPS,
    DtiGrid,
    DtiInstance,
    dti_forward,
    dti_jacobian_adjoint,
    dti_jacobian_apply,
    export_flat_binary,
    make_dti_grid,
    make_dti_problem,
    read_flat_binary,
    symmetrized_gradient,
    symmetrized_gradient_adjoint,
)

__all__ = [
    "Baseline",
    "composite_single_dual",
    "composite_sum",
    "make_convex_baselines",
    "quadratic_saddle",
    "solve_tv1d_dual",
    "tv1d_denoising",
    "BLOCK_SETUPS",
    "DtiGrid",
    "DtiInstance",
    "dti_forward",
    "dti_jacobian_adjoint",
    "dti_jacobian_apply",
    "export_flat_binary",
    "make_dti_grid",
    "make_dti_problem",
    "read_flat_binary",
    "symmetrized_gradient",
    "symmetrized_gradient_adjoint",
]
