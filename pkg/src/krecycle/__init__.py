"""Recycling Krylov solvers for the Hessian systems of bilevel learning."""

from .krylov import SolveOptions, SolveResult, cg, flops_minres, flops_rminres, minres, rminres
from .operators import (
    FoEParams,
    ImageVector,
    InpaintingProblem,
    Kernel,
    MixedJacobianOperator,
    SymmetricOperator,
    conv2d,
    conv2d_adjoint,
    foe_cost,
    foe_gradient,
    foe_hessian,
    mixed_jacobian,
)
from .recycling import RecycleSpace, StrategyDescriptor, gsvd_pair, next_recycle, prepare_recycle
from .stopping import NscRule, ResidualNormRule, TrueHgErrorRule, nsc_value, true_hg_error

__all__ = [
    "FoEParams",
    "ImageVector",
    "InpaintingProblem",
    "Kernel",
    "MixedJacobianOperator",
    "NscRule",
    "RecycleSpace",
    "ResidualNormRule",
    "SolveOptions",
    "SolveResult",
    "StrategyDescriptor",
    "SymmetricOperator",
    "TrueHgErrorRule",
    "cg",
    "conv2d",
    "conv2d_adjoint",
    "flops_minres",
    "flops_rminres",
    "foe_cost",
    "foe_gradient",
    "foe_hessian",
    "gsvd_pair",
    "minres",
    "mixed_jacobian",
    "next_recycle",
    "nsc_value",
    "prepare_recycle",
    "rminres",
    "true_hg_error",
]

__version__ = "0.1.0"
