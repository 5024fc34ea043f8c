"""Stop rules for the Hessian solves.

Three kinds: the usual residual norm ||r_k|| < delta; the projected
hypergradient-error criterion

    || Dtilde_J Dtilde_H^{-1} Vtilde_H^T W^T r_k || < delta,

built from the partial GSVD data produced alongside a Ritz-generalized
recycle space; and the true hypergradient error ||J H^{-1} r_k||, an
oracle that needs an inner high-accuracy solve.  The projected
criterion collapses to the true error when W is square orthogonal and
the full GSVD is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .operators import MixedJacobianOperator, SymmetricOperator

__all__ = [
    "ConfigurationError",
    "NscData",
    "NscRule",
    "ResidualNormRule",
    "StopRule",
    "TrueHgErrorRule",
    "nsc_value",
    "true_hg_error",
]


class ConfigurationError(ValueError):
    """A stop rule was attached without the data it needs."""


@dataclass(frozen=True)
class NscData:
    """Projected-GSVD pieces retained for the stopping criterion.

    ``values`` holds the selected diagonal of Dtilde_J Dtilde_H^{-1},
    ``v_h`` the matching columns of the H-side singular vectors, and
    ``w`` the projection basis (None means the identity).
    """

    values: np.ndarray
    v_h: np.ndarray
    w: np.ndarray | None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).ravel())
        object.__setattr__(self, "v_h", np.asarray(self.v_h, dtype=float))
        if self.v_h.shape[1] != self.values.size:
            raise ValueError(
                f"{self.values.size} values but v_h has {self.v_h.shape[1]} columns"
            )
        if self.w is not None:
            w = np.asarray(self.w, dtype=float)
            if w.shape[1] != self.v_h.shape[0]:
                raise ValueError(
                    f"w has {w.shape[1]} columns, v_h has {self.v_h.shape[0]} rows"
                )
            object.__setattr__(self, "w", w)


def nsc_value(data: NscData, r: np.ndarray) -> float:
    """|| diag(values) V_H^T W^T r ||_2 in O(nt + ts + s)."""
    proj = r if data.w is None else data.w.T @ r
    return float(np.linalg.norm(data.values * (data.v_h.T @ proj)))


class StopRule:
    """Base: a criterion value per iteration, stop when value < delta."""

    kind = "abstract"
    needs_residual_vector = False

    def __init__(self, delta: float):
        if not delta > 0:
            raise ValueError(f"tolerance must be positive, got {delta}")
        self.delta = float(delta)

    def criterion_value(self, res_norm: float, r: np.ndarray | None) -> float:
        raise NotImplementedError

    def satisfied(self, value: float) -> bool:
        return value < self.delta


class ResidualNormRule(StopRule):
    """Stop when ||r_k||_2 < delta (strict)."""

    kind = "res"

    def criterion_value(self, res_norm, r=None) -> float:
        return float(res_norm)


class NscRule(StopRule):
    """Stop on the projected hypergradient-error surrogate."""

    kind = "nsc"
    needs_residual_vector = True

    def __init__(self, delta: float, data: NscData):
        super().__init__(delta)
        if data is None:
            raise ConfigurationError(
                "the projected stopping criterion needs the GSVD data "
                "produced by a Ritz-generalized recycle-space selection"
            )
        self.data = data

    def criterion_value(self, res_norm, r) -> float:
        return nsc_value(self.data, r)


def true_hg_error(
    jac: MixedJacobianOperator,
    hessian: SymmetricOperator,
    r: np.ndarray,
    inner_tol: float = 1e-13,
    dense_limit: int = 2000,
    _factor=None,
) -> float:
    """||J H^{-1} r||_2 via a dense solve (n <= dense_limit) or nested MINRES."""
    r = np.asarray(r, dtype=float)
    if not np.any(r):
        return 0.0
    if _factor is not None:
        x = cho_solve(_factor, r)
    elif hessian.dim <= dense_limit:
        x = cho_solve(cho_factor(hessian.to_dense()), r)
    else:
        from .krylov import SolveOptions, minres

        result = minres(
            hessian,
            r,
            SolveOptions(max_iter=4 * hessian.dim, stop_rule=ResidualNormRule(inner_tol)),
        )
        if result.stop_reason == "max_iter":
            raise RuntimeError(
                "inner solve for the true hypergradient error did not reach "
                f"{inner_tol:g} (final residual {result.residual_norms[-1]:.3e})"
            )
        x = result.solution
    return float(np.linalg.norm(jac.apply_adjoint(x)))


class TrueHgErrorRule(StopRule):
    """Stop on the exact hypergradient error (an experiment oracle)."""

    kind = "true-hg"
    needs_residual_vector = True

    def __init__(
        self,
        delta: float,
        jac: MixedJacobianOperator,
        hessian: SymmetricOperator,
        inner_tol: float = 1e-13,
        dense_limit: int = 2000,
    ):
        super().__init__(delta)
        self.jac = jac
        self.hessian = hessian
        self.inner_tol = float(inner_tol)
        self.dense_limit = int(dense_limit)
        self._factor = (
            cho_factor(hessian.to_dense()) if hessian.dim <= dense_limit else None
        )

    def criterion_value(self, res_norm, r) -> float:
        return true_hg_error(
            self.jac,
            self.hessian,
            r,
            inner_tol=self.inner_tol,
            dense_limit=self.dense_limit,
            _factor=self._factor,
        )
