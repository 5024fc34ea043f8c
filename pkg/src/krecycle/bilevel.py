"""Gradient descent for the bilevel learning problem.

Upper level: F(theta) = 0.5 * ||x_hat(theta) - x_true||^2 where
x_hat(theta) minimizes the lower-level cost.  Each outer iteration
needs the lower-level minimizer (L-BFGS, warm started), one Hessian
solve H w = x_hat - x_true, and the hypergradient J w.  Stepsizes come
from backtracking with the Armijo rule; the accepted trial's cost is
reused as the reference value of the next linesearch, so the upper cost
is evaluated exactly once per trial.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .krylov import SolveOptions, SolveResult, rminres
from .operators import (
    FoEParams,
    ImageVector,
    InpaintingProblem,
    foe_cost,
    foe_gradient,
    foe_hessian,
    mixed_jacobian,
)
from .recycling import RecycleSpace, StrategyDescriptor, next_recycle
from .stopping import ConfigurationError, NscRule, ResidualNormRule, TrueHgErrorRule

__all__ = [
    "GradientDescentResult",
    "HessianSolveConfig",
    "LinesearchParams",
    "LowerConfig",
    "LowerStats",
    "SequenceSolver",
    "UpperRecord",
    "UpperState",
    "backtracking_linesearch",
    "gradient_descent",
    "hypergradient",
    "lower_solve",
    "lower_solve_with_stats",
    "upper_cost",
]


@dataclass(frozen=True)
class LinesearchParams:
    beta: float = 1.0
    rho: float = 0.5
    eta: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("initial stepsize must be positive")
        if not 0 < self.rho < 1 or not 0 < self.eta < 1:
            raise ValueError("rho and eta must lie in (0, 1)")


@dataclass(frozen=True)
class LowerConfig:
    gtol: float = 1e-3
    memory: int = 10
    max_iter: int = 5000
    linesearch: LinesearchParams = field(default_factory=LinesearchParams)


@dataclass(frozen=True)
class LowerStats:
    iterations: int
    gradient_norm: float
    converged: bool
    cost_evaluations: int


def lower_solve_with_stats(
    params: FoEParams,
    prob: InpaintingProblem,
    x_init: ImageVector | None = None,
    gtol: float = 1e-3,
    memory: int = 10,
    max_iter: int = 5000,
    linesearch: LinesearchParams | None = None,
) -> tuple[ImageVector, LowerStats]:
    """L-BFGS with Armijo backtracking until ||grad||_2 < gtol."""
    if not gtol > 0:
        raise ValueError("gtol must be positive")
    ls = linesearch or LinesearchParams()
    x = np.zeros(prob.n) if x_init is None else x_init.data.copy()

    def cost(v):
        return foe_cost(ImageVector(v, prob.shape), params, prob)

    def grad(v):
        return foe_gradient(ImageVector(v, prob.shape), params, prob)

    g = grad(x)
    g_norm = float(np.linalg.norm(g))
    history: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=memory)
    evals = 0
    f = None
    iterations = 0

    while g_norm >= gtol and iterations < max_iter:
        # two-loop recursion for the quasi-Newton direction
        q = g.copy()
        alphas = []
        for s_vec, y_vec, rho in reversed(history):
            a = rho * (s_vec @ q)
            alphas.append(a)
            q -= a * y_vec
        if history:
            s_vec, y_vec, _ = history[-1]
            q *= (s_vec @ y_vec) / (y_vec @ y_vec)
        for (s_vec, y_vec, rho), a in zip(history, reversed(alphas)):
            b = rho * (y_vec @ q)
            q += (a - b) * s_vec
        d = -q
        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = -g_norm**2

        if f is None:
            f = cost(x)
            evals += 1
        step = ls.beta
        accepted = False
        # epsilon slack keeps the accept test meaningful once the true
        # decrease drops below the cost's floating-point resolution
        slack = np.finfo(float).eps * abs(f)
        for _ in range(ls.max_backtracks):
            x_new = x + step * d
            f_new = cost(x_new)
            evals += 1
            if f_new <= f + ls.eta * step * slope + slack:
                accepted = True
                break
            step *= ls.rho
        if not accepted:
            x_new = x + step * d
            f_new = cost(x_new)
            evals += 1

        g_new = grad(x_new)
        s_vec = x_new - x
        y_vec = g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            history.append((s_vec, y_vec, 1.0 / sy))
        x, g, f = x_new, g_new, f_new
        g_norm = float(np.linalg.norm(g))
        iterations += 1

    converged = g_norm < gtol
    if not converged:
        warnings.warn(
            f"lower-level solver hit the {max_iter}-iteration cap with "
            f"gradient norm {g_norm:.3e} (target {gtol:g})",
            stacklevel=2,
        )
    return ImageVector(x, prob.shape), LowerStats(iterations, g_norm, converged, evals)


def lower_solve(params, prob, x_init=None, gtol=1e-3, memory=10, max_iter=5000) -> ImageVector:
    x_hat, _ = lower_solve_with_stats(params, prob, x_init, gtol, memory, max_iter)
    return x_hat


def upper_cost(
    params: FoEParams,
    prob: InpaintingProblem,
    x_init: ImageVector | None = None,
    lower: LowerConfig | None = None,
) -> float:
    """0.5 * ||x_hat(theta) - x_true||^2; needs one lower solve."""
    lower = lower or LowerConfig()
    x_hat = lower_solve(params, prob, x_init, lower.gtol, lower.memory, lower.max_iter)
    return _tracking_cost(x_hat, prob)


def _tracking_cost(x_hat: ImageVector, prob: InpaintingProblem) -> float:
    if prob.x_true is None:
        raise ValueError("problem has no ground-truth image")
    diff = x_hat.data - prob.x_true.data
    return 0.5 * float(diff @ diff)


@dataclass(frozen=True)
class HessianSolveConfig:
    """How the Hessian systems of the outer loop are solved."""

    strategy: StrategyDescriptor = field(
        default_factory=lambda: StrategyDescriptor(vec_type="None")
    )
    recycle_dim: int = 30
    delta: float = 1e-2
    stop: str = "res"  # res | nsc | true-hg
    max_iter: int = 500
    warm_start: bool = False
    inner_tol: float = 1e-13
    dense_limit: int = 2000

    def __post_init__(self):
        if self.stop not in ("res", "nsc", "true-hg"):
            raise ValueError(f"unknown stop rule {self.stop!r}")
        if self.stop == "nsc" and self.strategy.vec_type not in ("GSVD", "RGen"):
            raise ConfigurationError(
                "the projected stopping criterion needs a GSVD-based strategy; "
                f"got {self.strategy}"
            )

    @classmethod
    def from_strategy(cls, strategy: StrategyDescriptor, **kwargs) -> "HessianSolveConfig":
        if strategy.nsc:
            kwargs.setdefault("stop", "nsc")
        return cls(strategy=strategy, **kwargs)


class SequenceSolver:
    """Solves consecutive Hessian systems, carrying recycling state.

    Keeps the previous system's Krylov basis, recycle space, operator,
    and Jacobian so that the next call can assemble W = [V, U] and
    project per the configured placement.
    """

    def __init__(self, cfg: HessianSolveConfig):
        self.cfg = cfg
        self._first = True
        self._prev_basis = None
        self._prev_recycle: RecycleSpace | None = None
        self._prev_h = None
        self._prev_jac = None
        self._prev_solution = None

    def _needs_basis(self) -> bool:
        return not self.cfg.strategy.is_none

    def solve(self, hessian, g, jac) -> tuple[SolveResult, RecycleSpace]:
        cfg = self.cfg
        if cfg.strategy.is_none or self._first:
            # every strategy starts the first system cold: the recycle
            # space is extracted from the previous system's solve
            recycle = RecycleSpace.empty(hessian.dim)
        else:
            recycle = next_recycle(
                cfg.strategy,
                h_current=hessian,
                h_previous=self._prev_h,
                jac_current=jac,
                jac_previous=self._prev_jac,
                prev_basis=self._prev_basis,
                prev_recycle=self._prev_recycle,
                s=cfg.recycle_dim,
                dense_limit=cfg.dense_limit,
            )
        self._first = False

        if cfg.stop == "res":
            rule = ResidualNormRule(cfg.delta)
        elif cfg.stop == "true-hg":
            rule = TrueHgErrorRule(cfg.delta, jac, hessian, cfg.inner_tol, cfg.dense_limit)
        else:  # nsc; the first system has no GSVD data yet, fall back
            if recycle.nsc_data is not None:
                rule = NscRule(cfg.delta, recycle.nsc_data)
            else:
                rule = ResidualNormRule(cfg.delta)

        opts = SolveOptions(
            max_iter=cfg.max_iter,
            stop_rule=rule,
            track_basis=self._needs_basis(),
            initial_guess=self._prev_solution if cfg.warm_start else None,
        )
        result = rminres(hessian, g, recycle, opts)

        self._prev_basis = result.basis
        self._prev_recycle = recycle
        self._prev_h = hessian
        self._prev_jac = jac
        self._prev_solution = result.solution
        return result, recycle


def hypergradient(
    params: FoEParams,
    x_hat: ImageVector,
    prob: InpaintingProblem,
    recycle: RecycleSpace | None = None,
    opts: SolveOptions | None = None,
) -> tuple[np.ndarray, SolveResult]:
    """Solve H w = x_hat - x_true and return (J w, solve result)."""
    if prob.x_true is None:
        raise ValueError("problem has no ground-truth image")
    hessian = foe_hessian(params, prob)
    jac = mixed_jacobian(params, x_hat, prob)
    g = x_hat.data - prob.x_true.data
    result = rminres(hessian, g, recycle, opts)
    return jac.apply_adjoint(result.solution), result


@dataclass(frozen=True)
class UpperState:
    """One accepted point of the outer loop."""

    theta: np.ndarray
    x_hat: ImageVector
    cost: float
    next_beta: float


@dataclass(frozen=True)
class LinesearchInfo:
    trials: int
    step: float
    armijo_satisfied: bool
    lower_solves: int


def backtracking_linesearch(
    state: UpperState,
    d: np.ndarray,
    params: LinesearchParams,
    evaluate,
) -> tuple[UpperState, LinesearchInfo]:
    """Find the smallest j with
        F(theta - beta rho^{j-1} d) <= F(theta) - eta rho^{j-1} d^T d,
    warm starting every trial's lower solve from the previous trial.

    ``evaluate(theta, x_init) -> (cost, x_hat)`` is the upper-cost
    oracle; it is called exactly once per trial.  Returns the accepted
    state with next initial stepsize 2 beta rho^{j-1}.
    """
    c1 = state.cost
    c2 = float(d @ d)
    x_warm = state.x_hat
    trial_state = state
    step = params.beta
    for j in range(1, params.max_backtracks + 1):
        factor = params.rho ** (j - 1)
        step = params.beta * factor
        theta_trial = state.theta - step * d
        cost_trial, x_warm = evaluate(theta_trial, x_warm)
        trial_state = UpperState(theta_trial, x_warm, cost_trial, 2.0 * step)
        if cost_trial <= c1 - params.eta * factor * c2:
            return trial_state, LinesearchInfo(j, step, True, j)
    warnings.warn(
        f"Armijo condition not met within {params.max_backtracks} backtracks; "
        "returning the smallest-step trial",
        stacklevel=2,
    )
    return trial_state, LinesearchInfo(params.max_backtracks, step, False, params.max_backtracks)


@dataclass(frozen=True)
class UpperRecord:
    """Everything one outer iteration contributes to a frozen sequence."""

    index: int
    theta: np.ndarray
    x_hat: np.ndarray
    cost: float
    grad_norm: float
    theta_next: np.ndarray | None
    solve_iterations: int
    solve_flops: int
    solve_stop_reason: str
    solve_final_residual: float
    solve_final_stop_value: float
    recycle_dim: int
    linesearch_trials: int
    lower_iterations: int
    w_hat: np.ndarray | None = None
    beta_init: float = 1.0


@dataclass
class GradientDescentResult:
    theta: FoEParams
    trace: list[UpperRecord]
    stop_reason: str
    total_lower_solves: int
    total_inner_iterations: int


def gradient_descent(
    theta0: FoEParams,
    prob: InpaintingProblem,
    eps_stop: float = 1e-4,
    *,
    solver_cfg: HessianSolveConfig | None = None,
    lower_cfg: LowerConfig | None = None,
    linesearch: LinesearchParams | None = None,
    max_upper: int = 30,
) -> GradientDescentResult:
    """Algorithm: solve lower level, solve Hessian system, take the
    hypergradient as search direction, stop when its norm drops below
    eps_stop, otherwise backtrack and repeat."""
    if not eps_stop > 0:
        raise ValueError("eps_stop must be positive")
    solver_cfg = solver_cfg or HessianSolveConfig()
    lower_cfg = lower_cfg or LowerConfig()
    linesearch = linesearch or LinesearchParams()
    seq_solver = SequenceSolver(solver_cfg)

    lower_calls = 0
    lower_iters_last = 0

    def evaluate(theta_flat, x_init):
        nonlocal lower_calls, lower_iters_last
        params = FoEParams.unflatten(theta_flat, theta0.num_filters, theta0.kernel_size)
        x_hat, stats = lower_solve_with_stats(
            params,
            prob,
            x_init,
            lower_cfg.gtol,
            lower_cfg.memory,
            lower_cfg.max_iter,
            lower_cfg.linesearch,
        )
        lower_calls += 1
        lower_iters_last = stats.iterations
        return _tracking_cost(x_hat, prob), x_hat

    cost0, x_hat = evaluate(theta0.flatten(), None)
    state = UpperState(theta0.flatten(), x_hat, cost0, linesearch.beta)
    trace: list[UpperRecord] = []
    total_inner = 0
    stop_reason = "max_upper"

    for i in range(max_upper):
        params = FoEParams.unflatten(state.theta, theta0.num_filters, theta0.kernel_size)
        hessian = foe_hessian(params, prob)
        jac = mixed_jacobian(params, state.x_hat, prob)
        g = state.x_hat.data - prob.x_true.data
        result, recycle = seq_solver.solve(hessian, g, jac)
        d = jac.apply_adjoint(result.solution)
        grad_norm = float(np.linalg.norm(d))
        total_inner += result.iterations

        if grad_norm < eps_stop:
            trace.append(
                UpperRecord(
                    index=i,
                    theta=state.theta.copy(),
                    x_hat=state.x_hat.data.copy(),
                    cost=state.cost,
                    grad_norm=grad_norm,
                    theta_next=None,
                    solve_iterations=result.iterations,
                    solve_flops=result.flops,
                    solve_stop_reason=result.stop_reason,
                    solve_final_residual=float(result.residual_norms[-1]),
                    solve_final_stop_value=float(result.stop_values[-1]),
                    recycle_dim=recycle.dim,
                    linesearch_trials=0,
                    lower_iterations=0,
                    w_hat=result.solution.copy(),
                    beta_init=state.next_beta,
                )
            )
            stop_reason = "gradient_norm"
            break

        ls_params = replace(linesearch, beta=state.next_beta)
        new_state, info = backtracking_linesearch(state, d, ls_params, evaluate)
        trace.append(
            UpperRecord(
                index=i,
                theta=state.theta.copy(),
                x_hat=state.x_hat.data.copy(),
                cost=state.cost,
                grad_norm=grad_norm,
                theta_next=new_state.theta.copy(),
                solve_iterations=result.iterations,
                solve_flops=result.flops,
                solve_stop_reason=result.stop_reason,
                solve_final_residual=float(result.residual_norms[-1]),
                solve_final_stop_value=float(result.stop_values[-1]),
                recycle_dim=recycle.dim,
                linesearch_trials=info.trials,
                lower_iterations=lower_iters_last,
                w_hat=result.solution.copy(),
                beta_init=ls_params.beta,
            )
        )
        state = new_state

    theta_final = FoEParams.unflatten(state.theta, theta0.num_filters, theta0.kernel_size)
    return GradientDescentResult(
        theta=theta_final,
        trace=trace,
        stop_reason=stop_reason,
        total_lower_solves=lower_calls,
        total_inner_iterations=total_inner,
    )
