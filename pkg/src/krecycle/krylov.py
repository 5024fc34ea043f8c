"""MINRES, CG, and recycling MINRES with FLOP accounting.

RMINRES solves H w = g over span(V_k) + span(U) for a recycle space U
with C = H U, C^T C = I.  Orthogonalizing each Lanczos vector against C
decouples the coupled least-squares problem: the Krylov coefficients
come from the usual tridiagonal problem

    y_k = argmin || beta_1 e_1 - Tbar_k y ||_2,

solved incrementally with Givens rotations, and the recycle-space
coefficients are z_k = C^T r_0 - C^T H V_k y_k.  The published listing
of the algorithm updates the solution with tilde_v + tilde_b; the
decoupling above forces tilde_v - tilde_b (the initial projection
already accounts for C^T r_0), which is what the least-squares
optimality tests verify.

FLOP counts mirror the closed-form cost model: a MINRES run of k
iterations costs H_cost + 4n + k*(H_cost + 16n) and an RMINRES run
costs H_cost + 4n + 6ns + k*(H_cost + 21n + 6ns - s).  The meter
charges exactly the operations of that model (operator applications at
their declared cost, vector axpy/dot/scale/matvec); diagnostic extras
such as reorthogonalization or residual-vector tracking are never
charged, so the meter reproduces the closed forms identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import SymmetricOperator
from .stopping import ResidualNormRule, StopRule

__all__ = [
    "BREAKDOWN_RTOL",
    "NonSPDError",
    "SolveOptions",
    "SolveResult",
    "TridiagState",
    "cg",
    "flops_cg",
    "flops_minres",
    "flops_rminres",
    "minres",
    "rminres",
]

# Lanczos beta below this times ||g|| means the Krylov space is invariant
BREAKDOWN_RTOL = 1e-13


class NonSPDError(RuntimeError):
    """CG encountered non-positive curvature: the operator is not SPD."""


@dataclass
class SolveOptions:
    """Knobs shared by all solvers.

    ``track_basis`` retains the Krylov basis (needed to build the next
    recycle space); ``track_residual_vector`` maintains the residual
    vector by the 5-vector recurrence.  The ``collect_*`` flags store
    per-iteration diagnostics and are meant for tests.
    """

    max_iter: int = 500
    initial_guess: np.ndarray | None = None
    stop_rule: StopRule | None = None
    track_basis: bool = False
    track_residual_vector: bool = False
    reorthogonalize: bool = False
    collect_states: bool = False
    collect_iterates: bool = False
    collect_residual_history: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")

    def rule(self) -> StopRule:
        return self.stop_rule if self.stop_rule is not None else ResidualNormRule(1e-2)


@dataclass(frozen=True)
class TridiagState:
    """Scalars of one RMINRES iteration (Lanczos, rotated column, Givens)."""

    alpha: float
    beta: float
    beta_next: float
    gamma: float
    delta: float
    epsilon: float
    epsilon_rot: float
    givens: tuple[float, float]
    givens_prev: tuple[float, float]
    givens_prev2: tuple[float, float]
    zeta: float


@dataclass
class SolveResult:
    """Outcome of one linear-system solve."""

    solution: np.ndarray
    iterations: int
    residual_norms: np.ndarray
    flops: int
    stop_reason: str  # tolerance | max_iter | breakdown
    stop_values: np.ndarray
    basis: np.ndarray | None = None
    residual_vector: np.ndarray | None = None
    states: list[TridiagState] | None = None
    iterates: list[np.ndarray] | None = None
    residual_history: list[np.ndarray] | None = None


def flops_minres(k_total: int, n: int, h_cost: int) -> int:
    """Closed-form cost of k_total MINRES iterations."""
    _check_counts(k_total=k_total, n=n, h_cost=h_cost)
    return h_cost + 4 * n + k_total * (h_cost + 16 * n)


def flops_rminres(k_total: int, n: int, s: int, h_cost: int) -> int:
    """Closed-form cost of k_total RMINRES iterations with recycle dim s."""
    _check_counts(k_total=k_total, n=n, s=s, h_cost=h_cost)
    return h_cost + 4 * n + 6 * n * s + k_total * (h_cost + 21 * n + 6 * n * s - s)


def flops_cg(k_total: int, n: int, h_cost: int) -> int:
    """Cost of k_total CG iterations under the same conventions (ours,
    not a published formula): H + 3n upfront, H + 10n per iteration."""
    _check_counts(k_total=k_total, n=n, h_cost=h_cost)
    return h_cost + 3 * n + k_total * (h_cost + 10 * n)


def _check_counts(**kwargs):
    for name, value in kwargs.items():
        if value < 0:
            raise ValueError(f"{name} must be nonnegative, got {value}")


class _FlopMeter:
    """Accumulates model FLOPs at the charge sites of the solver."""

    def __init__(self):
        self.total = 0

    def charge(self, amount: int):
        self.total += int(amount)


class _ResidualTracker:
    """Residual-vector recurrence using 5 persistent n-vectors.

    r_k = r_{k-1} - c_k zeta_{k-1} (H tilde_v_k - H tilde_b_k), with
    H tilde_v_k and H tilde_b_k obtained from the same three-term
    recurrences as tilde_v_k, tilde_b_k; H v_k and C C^T H v_k are free
    byproducts of the Lanczos step.
    """

    def __init__(self, r0: np.ndarray):
        n = r0.size
        self.vector = r0.copy()
        self._hv_tilde = (np.zeros(n), np.zeros(n))  # (k-1, k-2)
        self._hb_tilde = (np.zeros(n), np.zeros(n))

    def update(self, hv, cchv, gamma, delta, eps_rot, step):
        hv1, hv2 = self._hv_tilde
        hv_tilde = (hv - delta * hv1 - gamma * hv2) / eps_rot
        if cchv is None:
            diff = hv_tilde
            self._hb_tilde = self._hb_tilde[1], self._hb_tilde[0]  # stays zero
        else:
            hb1, hb2 = self._hb_tilde
            hb_tilde = (cchv - delta * hb1 - gamma * hb2) / eps_rot
            diff = hv_tilde - hb_tilde
            self._hb_tilde = (hb_tilde, hb1)
        self._hv_tilde = (hv_tilde, hv1)
        self.vector -= step * diff


def _finish(w, k, res_norms, stop_vals, meter, reason, basis_cols, tracker, states, iterates, res_hist):
    basis = None
    if basis_cols is not None:
        basis = (
            np.column_stack(basis_cols) if basis_cols else np.zeros((w.size, 0))
        )
    return SolveResult(
        solution=w,
        iterations=k,
        residual_norms=np.asarray(res_norms),
        flops=meter.total,
        stop_reason=reason,
        stop_values=np.asarray(stop_vals),
        basis=basis,
        residual_vector=None if tracker is None else tracker.vector.copy(),
        states=states,
        iterates=iterates,
        residual_history=res_hist,
    )


def _rminres_core(H: SymmetricOperator, g: np.ndarray, U, C, opts: SolveOptions) -> SolveResult:
    n = H.dim
    g = np.asarray(g, dtype=float)
    if g.shape != (n,):
        raise ValueError(f"right-hand side of shape {g.shape}, operator dim {n}")
    if not np.all(np.isfinite(g)):
        raise ValueError("right-hand side contains non-finite entries")
    s = 0 if U is None else U.shape[1]
    rule = opts.rule()
    if rule.needs_residual_vector:
        opts = _with_tracking(opts)

    meter = _FlopMeter()
    w = (
        np.zeros(n)
        if opts.initial_guess is None
        else np.array(opts.initial_guess, dtype=float)
    )

    r = g - H(w)
    meter.charge(H.apply_cost + n)
    if s:
        # initial projection onto the recycle space; the published cost
        # model books this block at 6ns flat
        t = C.T @ r
        w = w + U @ t
        r = r - C @ t
        meter.charge(6 * n * s)

    beta = float(np.linalg.norm(r))
    meter.charge(2 * n)
    g_scale = float(np.linalg.norm(g))
    bd_tol = BREAKDOWN_RTOL * max(g_scale, 1e-300)

    tracker = _ResidualTracker(r) if opts.track_residual_vector else None
    res_norms = [beta]
    stop_vals = [rule.criterion_value(beta, r if tracker is None else tracker.vector)]
    basis_cols = [] if opts.track_basis else None
    states = [] if opts.collect_states else None
    iterates = [w.copy()] if opts.collect_iterates else None
    res_hist = [r.copy()] if opts.collect_residual_history else None

    if rule.satisfied(stop_vals[0]):
        return _finish(w, 0, res_norms, stop_vals, meter, "tolerance", basis_cols, tracker, states, iterates, res_hist)
    if beta <= bd_tol:
        return _finish(w, 0, res_norms, stop_vals, meter, "breakdown", basis_cols, tracker, states, iterates, res_hist)

    v = r / beta
    meter.charge(n)
    v_prev = np.zeros(n)
    zeta = beta
    givens = (1.0, 0.0)  # (c_{k-1}, s_{k-1})
    givens_prev = (0.0, 0.0)  # (c_{k-2}, s_{k-2})
    vt_prev = np.zeros(n)  # tilde_v_{k-1}
    vt_prev2 = np.zeros(n)
    bt_prev = np.zeros(n) if s else None
    bt_prev2 = np.zeros(n) if s else None
    reason = "max_iter"
    k = 0

    for k in range(1, opts.max_iter + 1):
        hv = H(v)
        meter.charge(H.apply_cost)
        if s:
            chv = C.T @ hv
            meter.charge(2 * n * s - s)
            b = U @ chv
            meter.charge(2 * n * s - n)
            cchv = C @ chv
            meter.charge(2 * n * s - n)
            vnext = hv - cchv
            meter.charge(n)
        else:
            b = None
            cchv = None
            vnext = hv.copy()

        alpha = float(v @ vnext)
        meter.charge(2 * n)
        vnext = vnext - alpha * v
        meter.charge(2 * n)
        vnext = vnext - beta * v_prev
        meter.charge(2 * n)

        if opts.reorthogonalize and basis_cols is not None:
            for u in basis_cols:  # diagnostic mode, not charged
                vnext -= (u @ vnext) * u
            if s:
                vnext -= C @ (C.T @ vnext)

        if basis_cols is not None:
            basis_cols.append(v)

        beta_next = float(np.linalg.norm(vnext))
        meter.charge(2 * n)
        breakdown = beta_next <= bd_tol
        # the cost model books the normalization uniformly per iteration,
        # so charge it even on the (rare) breakdown step that skips it
        meter.charge(n)
        if not breakdown:
            vnext = vnext / beta_next

        # rotate the new tridiagonal column and form the next Givens pair
        c_prev2, s_prev2 = givens_prev
        c_prev, s_prev = givens
        gamma = s_prev2 * beta
        delta = c_prev * c_prev2 * beta + s_prev * alpha
        eps = -s_prev * c_prev2 * beta + c_prev * alpha
        eps_rot = float(np.hypot(eps, beta_next))
        if eps_rot == 0.0:
            # diagonal and subdiagonal both vanished: nothing to update
            if basis_cols is not None:
                basis_cols.pop()
            k -= 1
            reason = "breakdown"
            break
        s_cur = beta_next / eps_rot
        c_cur = eps / eps_rot
        zeta_prev = zeta
        zeta = -s_cur * zeta_prev

        vt = (v - gamma * vt_prev2 - delta * vt_prev) / eps_rot
        meter.charge(5 * n)
        if s:
            bt = (b - gamma * bt_prev2 - delta * bt_prev) / eps_rot
            meter.charge(5 * n)
            update = vt - bt
            meter.charge(n)
        else:
            bt = None
            update = vt
        step = c_cur * zeta_prev
        w = w + step * update
        meter.charge(2 * n)

        if tracker is not None:
            tracker.update(hv, cchv, gamma, delta, eps_rot, step)
        if states is not None:
            states.append(
                TridiagState(
                    alpha=alpha,
                    beta=beta,
                    beta_next=beta_next,
                    gamma=gamma,
                    delta=delta,
                    epsilon=eps,
                    epsilon_rot=eps_rot,
                    givens=(c_cur, s_cur),
                    givens_prev=(c_prev, s_prev),
                    givens_prev2=(c_prev2, s_prev2),
                    zeta=zeta,
                )
            )
        if iterates is not None:
            iterates.append(w.copy())
        if res_hist is not None:
            res_hist.append(
                (tracker.vector if tracker is not None else g - H(w)).copy()
            )

        res_norms.append(abs(zeta))
        stop_vals.append(
            rule.criterion_value(abs(zeta), None if tracker is None else tracker.vector)
        )
        if rule.satisfied(stop_vals[-1]):
            reason = "tolerance"
            break
        if breakdown:
            reason = "breakdown"
            break

        v_prev, v = v, vnext
        beta = beta_next
        givens_prev, givens = givens, (c_cur, s_cur)
        vt_prev2, vt_prev = vt_prev, vt
        if s:
            bt_prev2, bt_prev = bt_prev, bt

    return _finish(w, k, res_norms, stop_vals, meter, reason, basis_cols, tracker, states, iterates, res_hist)


def minres(H: SymmetricOperator, g: np.ndarray, opts: SolveOptions | None = None) -> SolveResult:
    """Minimum-residual solve of H w = g for symmetric H."""
    return _rminres_core(H, g, None, None, opts or SolveOptions())


def rminres(H: SymmetricOperator, g: np.ndarray, recycle, opts: SolveOptions | None = None) -> SolveResult:
    """Recycling MINRES.  An empty recycle space reproduces minres exactly
    (same code path, same flop model)."""
    opts = opts or SolveOptions()
    if recycle is None or recycle.dim == 0:
        return _rminres_core(H, g, None, None, opts)
    U, C = recycle.U, recycle.C
    if U.shape != C.shape or U.shape[0] != H.dim:
        raise ValueError(
            f"recycle space shapes U{U.shape} / C{C.shape} do not match operator dim {H.dim}"
        )
    ctc = C.T @ C
    if np.max(np.abs(ctc - np.eye(C.shape[1]))) > 1e-8:
        raise ValueError("recycle space violates C^T C = I beyond 1e-8")
    return _rminres_core(H, g, U, C, opts)


def cg(H: SymmetricOperator, g: np.ndarray, opts: SolveOptions | None = None) -> SolveResult:
    """Conjugate gradients for SPD H; raises NonSPDError on <= 0 curvature."""
    opts = opts or SolveOptions()
    n = H.dim
    g = np.asarray(g, dtype=float)
    rule = opts.rule()

    meter = _FlopMeter()
    w = (
        np.zeros(n)
        if opts.initial_guess is None
        else np.array(opts.initial_guess, dtype=float)
    )
    r = g - H(w)
    meter.charge(H.apply_cost + n)
    rr = float(r @ r)
    meter.charge(2 * n)
    res_norm = float(np.sqrt(rr))

    res_norms = [res_norm]
    stop_vals = [rule.criterion_value(res_norm, r)]
    basis_cols = [] if opts.track_basis else None
    iterates = [w.copy()] if opts.collect_iterates else None
    reason = "max_iter"
    k = 0

    if rule.satisfied(stop_vals[0]):
        reason = "tolerance"
    else:
        p = r.copy()
        for k in range(1, opts.max_iter + 1):
            if basis_cols is not None and res_norm > 0:
                basis_cols.append(r / res_norm)
            hp = H(p)
            meter.charge(H.apply_cost)
            php = float(p @ hp)
            meter.charge(2 * n)
            if php <= 0:
                raise NonSPDError(
                    f"curvature p^T H p = {php:g} <= 0 at iteration {k}; operator is not SPD"
                )
            alpha = rr / php
            w = w + alpha * p
            meter.charge(2 * n)
            r = r - alpha * hp
            meter.charge(2 * n)
            rr_new = float(r @ r)
            meter.charge(2 * n)
            res_norm = float(np.sqrt(rr_new))
            res_norms.append(res_norm)
            stop_vals.append(rule.criterion_value(res_norm, r))
            if iterates is not None:
                iterates.append(w.copy())
            # uniform per-iteration model cost: the direction update is
            # charged even when the stop rule fires before it happens
            meter.charge(2 * n)
            if rule.satisfied(stop_vals[-1]):
                reason = "tolerance"
                break
            p = r + (rr_new / rr) * p
            rr = rr_new

    basis = None
    if basis_cols is not None:
        basis = np.column_stack(basis_cols) if basis_cols else np.zeros((n, 0))
    return SolveResult(
        solution=w,
        iterations=k,
        residual_norms=np.asarray(res_norms),
        flops=meter.total,
        stop_reason=reason,
        stop_values=np.asarray(stop_vals),
        basis=basis,
        residual_vector=r.copy(),
        iterates=iterates,
    )


def _with_tracking(opts: SolveOptions) -> SolveOptions:
    if opts.track_residual_vector:
        return opts
    from dataclasses import replace

    return replace(opts, track_residual_vector=True)
