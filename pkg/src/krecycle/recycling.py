"""Recycle-space selection for a sequence of Hessian solves.

Candidates come from the previous system's Krylov basis and recycle
space, W = [V_prev, U_prev].  A strategy picks s directions from W by
one of several projected decompositions:

  * Ritz vectors: eigenvectors of W^T H W mapped back through W.
  * Harmonic Ritz vectors: the pencil (HW)^T HW rho = theta (HW)^T W rho.
  * Ritz generalized singular vectors: the GSVD of the pair
    (J W, W^T H W), which also yields the data for the projected
    hypergradient-error stopping criterion.

Full-space variants (Eig, GSVD) skip the projection and decompose the
operators densely; they exist for comparison and are guarded to modest
problem sizes.  Whatever the selection, the chosen columns are
renormalized through the reduced QR of H*U so that C = H U has
orthonormal columns, which is what the recycling solver requires.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular

from .operators import MixedJacobianOperator, SymmetricOperator
from .stopping import NscData

__all__ = [
    "CandidateBasis",
    "GsvdFactors",
    "RecycleSpace",
    "StrategyDescriptor",
    "build_candidate_basis",
    "gsvd_pair",
    "harmonic_ritz_select",
    "next_recycle",
    "prepare_recycle",
    "ritz_select",
    "rgen_select",
]

RANK_TOL = 1e-10

VEC_TYPES = ("Eig", "Ritz", "HRitz", "GSVD", "RGen", "None")
SIZES = ("S", "L", "M")
SIDES = ("R", "L", "M")

_STRATEGY_RE = re.compile(
    r"^(?P<inner>inner:)?"
    r"(?P<vec>Eig|Ritz|HRitz|GSVD|RGen|None)"
    r"(?:-(?P<size>[SLM])(?:\((?P<side>[RLM])\))?)?"
    r"(?P<nsc>-NSC)?$"
)


@dataclass(frozen=True)
class StrategyDescriptor:
    """A parsed recycling-strategy acronym, e.g. RGen-L(R) or inner:Ritz-S."""

    vec_type: str
    size: str | None = None
    side: str | None = None
    placement: str = "outer"
    nsc: bool = False

    def __post_init__(self):
        if self.vec_type not in VEC_TYPES:
            raise ValueError(f"unknown vector type {self.vec_type!r}")
        if self.placement not in ("outer", "inner"):
            raise ValueError(f"placement must be outer or inner, got {self.placement!r}")
        if self.vec_type == "None":
            if self.size or self.side or self.nsc or self.placement != "outer":
                raise ValueError("strategy None takes no size, side, placement, or NSC")
            return
        if self.size not in SIZES:
            raise ValueError(f"size must be one of {SIZES}, got {self.size!r}")
        needs_side = self.vec_type in ("GSVD", "RGen")
        if needs_side and self.side not in SIDES:
            raise ValueError(f"{self.vec_type} needs a side in {SIDES}")
        if not needs_side and self.side is not None:
            raise ValueError(f"{self.vec_type} does not take a side")
        if self.nsc and not needs_side:
            raise ValueError("the NSC stop rule needs a GSVD-based strategy")

    @classmethod
    def parse(cls, text: str) -> "StrategyDescriptor":
        match = _STRATEGY_RE.match(text.strip())
        if match is None:
            raise ValueError(f"cannot parse strategy acronym {text!r}")
        return cls(
            vec_type=match.group("vec"),
            size=match.group("size"),
            side=match.group("side"),
            placement="inner" if match.group("inner") else "outer",
            nsc=bool(match.group("nsc")),
        )

    def __str__(self) -> str:
        if self.vec_type == "None":
            return "None"
        text = f"{self.vec_type}-{self.size}"
        if self.side is not None:
            text += f"({self.side})"
        if self.nsc:
            text += "-NSC"
        if self.placement == "inner":
            text = "inner:" + text
        return text

    @property
    def is_none(self) -> bool:
        return self.vec_type == "None"


@dataclass(frozen=True)
class CandidateBasis:
    """Orthonormalized candidate directions, with their source system."""

    W: np.ndarray
    provenance: int | None = None

    @property
    def num_columns(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class GsvdFactors:
    """GSVD of a pair (Jt, Ht):  V_J^T Jt X = D_J,  V_H^T Ht X = D_H.

    alpha ascending in [0, 1), beta descending in (0, 1], both on the
    joint unit circle; mu = alpha/beta are the generalized singular
    values, ascending.
    """

    v_j: np.ndarray
    v_h: np.ndarray
    x: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    hessian_condition: float

    @property
    def mu(self) -> np.ndarray:
        return self.alpha / self.beta

    def d_j(self) -> np.ndarray:
        p, t = self.v_j.shape[0], self.alpha.size
        d = np.zeros((p, t))
        d[:t, :t] = np.diag(self.alpha)
        return d

    def d_h(self) -> np.ndarray:
        return np.diag(self.beta)


@dataclass(frozen=True)
class RecycleSpace:
    """A pair (U, C = H U) with orthonormal C, plus optional NSC data."""

    U: np.ndarray
    C: np.ndarray
    nsc_data: NscData | None = None

    @property
    def dim(self) -> int:
        return self.U.shape[1]

    @classmethod
    def empty(cls, n: int) -> "RecycleSpace":
        return cls(np.zeros((n, 0)), np.zeros((n, 0)))


def _as_columns(M, n: int) -> np.ndarray:
    if M is None:
        return np.zeros((n, 0))
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != n:
        raise ValueError(f"expected an {n} x t column block, got shape {M.shape}")
    return M


def build_candidate_basis(V_prev, U_prev, provenance: int | None = None) -> CandidateBasis:
    """Orthonormalize [V_prev, U_prev], dropping columns below RANK_TOL."""
    blocks = [M for M in (V_prev, U_prev) if M is not None and M.shape[1] > 0]
    if not blocks:
        n = V_prev.shape[0] if V_prev is not None else U_prev.shape[0]
        return CandidateBasis(np.zeros((n, 0)), provenance)
    W = np.column_stack(blocks)
    Q, R, _ = qr(W, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return CandidateBasis(np.zeros((W.shape[0], 0)), provenance)
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    return CandidateBasis(Q[:, :rank], provenance)


def _select_indices(t: int, s: int, size: str) -> np.ndarray:
    """Indices into an ascending-ordered spectrum: s smallest (S), s
    largest (L), or floor(s/2) smallest plus ceil(s/2) largest (M)."""
    if size == "S":
        return np.arange(s)
    if size == "L":
        return np.arange(t - s, t)
    if size == "M":
        lo = s // 2
        hi = s - lo
        return np.concatenate([np.arange(lo), np.arange(t - hi, t)])
    raise ValueError(f"unknown size {size!r}")


def _clamp_dim(s: int, t: int, what: str) -> int:
    if s > t:
        warnings.warn(
            f"requested {s} {what} vectors but only {t} candidates; clamping",
            stacklevel=3,
        )
        return t
    return int(s)


def ritz_select(W: np.ndarray, H: SymmetricOperator, s: int, size: str) -> np.ndarray:
    """Columns of W Q for the s selected eigenpairs of W^T H W."""
    t = W.shape[1]
    s = _clamp_dim(s, t, "Ritz")
    HW = H.apply_matrix(W)
    M = W.T @ HW
    M = 0.5 * (M + M.T)
    values, Q = np.linalg.eigh(M)
    order = np.argsort(values, kind="stable")
    idx = order[_select_indices(t, s, size)]
    return W @ Q[:, idx]


def harmonic_ritz_select(W: np.ndarray, H: SymmetricOperator, s: int, size: str) -> np.ndarray:
    """Columns of W rho for the pencil (HW)^T HW rho = theta (HW)^T W rho."""
    from scipy.linalg import eigh

    t = W.shape[1]
    s = _clamp_dim(s, t, "harmonic Ritz")
    HW = H.apply_matrix(W)
    A = HW.T @ HW
    A = 0.5 * (A + A.T)
    B = HW.T @ W
    B = 0.5 * (B + B.T)

    b_vals, b_vecs = np.linalg.eigh(B)
    b_scale = np.max(np.abs(b_vals)) if b_vals.size else 0.0
    keep = np.abs(b_vals) > RANK_TOL * b_scale
    if not np.all(keep):
        # singular pencil: restrict to the non-null directions of B
        warnings.warn(
            f"projected pencil is singular; dropping {int(np.sum(~keep))} null directions",
            stacklevel=2,
        )
        P = b_vecs[:, keep]
        values, rho_red = eigh(P.T @ A @ P, P.T @ B @ P)
        rho = P @ rho_red
    else:
        values, rho = eigh(A, B)
    t_eff = values.size
    s = min(s, t_eff)
    order = np.argsort(np.abs(values), kind="stable")
    idx = order[_select_indices(t_eff, s, size)]
    vecs = W @ rho[:, idx]
    norms = np.linalg.norm(vecs, axis=0)
    norms[norms == 0] = 1.0
    return vecs / norms


def gsvd_pair(Jt: np.ndarray, Ht: np.ndarray) -> GsvdFactors:
    """GSVD of (Jt, Ht) via one QR and one SVD (the two-SVD route: the
    H-side singular vectors come from normalizing Q2 Z).

    Requires p >= t and invertible Ht; the condition number of Ht is
    recorded on the factors.
    """
    Jt = np.asarray(Jt, dtype=float)
    Ht = np.asarray(Ht, dtype=float)
    p, t = Jt.shape
    if Ht.shape != (t, t):
        raise ValueError(f"Ht must be {t} x {t}, got {Ht.shape}")
    if p < t:
        raise ValueError(f"needs p >= t, got p={p} < t={t}; pad Jt with zero rows")

    sig = np.linalg.svd(Ht, compute_uv=False)
    if sig[-1] < 1e-12 * sig[0]:
        raise ValueError(
            "projected Hessian W^T H W is numerically singular "
            f"(condition number {sig[0] / max(sig[-1], 1e-300):.3e})"
        )
    cond = float(sig[0] / sig[-1])

    Q, R = qr(np.vstack([Jt, Ht]), mode="economic")
    Q1, Q2 = Q[:p], Q[p:]
    u, sv, zt = np.linalg.svd(Q1, full_matrices=True)
    # numpy sorts singular values descending; the convention here is
    # alpha ascending, so reverse the leading t columns
    alpha = sv[::-1].copy()
    v_j = u.copy()
    v_j[:, :t] = u[:, t - 1 :: -1]
    Z = zt.T[:, ::-1]

    W2 = Q2 @ Z
    beta = np.linalg.norm(W2, axis=0)
    v_h = W2 / beta
    X = solve_triangular(R, Z)
    np.clip(alpha, 0.0, 1.0, out=alpha)
    return GsvdFactors(v_j=v_j, v_h=v_h, x=X, alpha=alpha, beta=beta, hessian_condition=cond)


def rgen_select(
    W: np.ndarray,
    H: SymmetricOperator,
    jac: MixedJacobianOperator,
    s: int,
    size: str,
    side: str,
) -> tuple[np.ndarray, NscData]:
    """Ritz generalized singular vectors of the pair (J W, W^T H W).

    Returns the selected candidate columns together with the projected
    stopping-criterion data (selected D_J D_H^{-1} diagonal, matching
    V_H columns, and W itself).
    """
    t = W.shape[1]
    s = _clamp_dim(s, t, "Ritz generalized singular")
    Jt = jac.apply_adjoint_matrix(W)
    if Jt.shape[0] < t:
        # the decomposition needs p >= t; zero rows change neither X,
        # V_H, D_H nor the nonzero generalized singular values
        Jt = np.vstack([Jt, np.zeros((t - Jt.shape[0], t))])
    HW = H.apply_matrix(W)
    Ht = W.T @ HW
    Ht = 0.5 * (Ht + Ht.T)
    factors = gsvd_pair(Jt, Ht)

    order = np.argsort(factors.mu, kind="stable")
    idx = order[_select_indices(t, s, size)]
    left = W @ factors.v_h[:, idx]
    if side == "L":
        cand = left
    else:
        right = W @ factors.x[:, idx]
        if side == "R":
            cand = right
        elif side == "M":
            cand = 0.5 * (left + right)
            norms = np.linalg.norm(cand, axis=0)
            norms[norms == 0] = 1.0
            cand = cand / norms
        else:
            raise ValueError(f"unknown side {side!r}")
    nsc = NscData(values=factors.mu[idx], v_h=factors.v_h[:, idx], w=W)
    return cand, nsc


def prepare_recycle(H: SymmetricOperator, U_tilde: np.ndarray, nsc_data: NscData | None = None) -> RecycleSpace:
    """Normalize candidates through the reduced QR of H U:  H*Utilde = C R,
    U = Utilde R^{-1}, so that C^T C = I and range(U) = range(Utilde)."""
    U_tilde = _as_columns(U_tilde, H.dim)
    if U_tilde.shape[1] == 0:
        return RecycleSpace.empty(H.dim)
    HU = H.apply_matrix(U_tilde)
    Q, R, piv = qr(HU, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return RecycleSpace.empty(H.dim)
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < U_tilde.shape[1]:
        warnings.warn(
            f"H*U is rank deficient; recycle dimension reduced {U_tilde.shape[1]} -> {rank}",
            stacklevel=2,
        )
    C = Q[:, :rank]
    R_r = R[:rank, :rank]
    U_piv = U_tilde[:, piv[:rank]]
    U = solve_triangular(R_r.T, U_piv.T, lower=True).T
    return RecycleSpace(U=U, C=C, nsc_data=nsc_data)


def next_recycle(
    strategy: StrategyDescriptor,
    *,
    h_current: SymmetricOperator,
    h_previous: SymmetricOperator | None = None,
    jac_current: MixedJacobianOperator | None = None,
    jac_previous: MixedJacobianOperator | None = None,
    prev_basis: np.ndarray | None = None,
    prev_recycle: RecycleSpace | None = None,
    s: int,
    dense_limit: int = 2000,
) -> RecycleSpace:
    """Build the recycle space for the upcoming system.

    Outer placement projects onto the upcoming Hessian; inner placement
    reuses the previous one (and its Jacobian).  The returned pair is
    always normalized against the upcoming Hessian, since the solver
    needs C = H_current U.
    """
    n = h_current.dim
    if strategy.is_none or s == 0:
        return RecycleSpace.empty(n)

    if strategy.placement == "outer":
        h_proj, jac_proj = h_current, jac_current
    else:
        if h_previous is None:
            raise ValueError("inner placement needs the previous Hessian")
        h_proj, jac_proj = h_previous, jac_previous

    if strategy.vec_type in ("Eig", "GSVD"):
        if n > dense_limit:
            raise ValueError(
                f"dense {strategy.vec_type} variant is limited to n <= {dense_limit}, got n = {n}"
            )
        Hd = h_proj.to_dense()
        s = _clamp_dim(s, n, strategy.vec_type)
        if strategy.vec_type == "Eig":
            values, Q = np.linalg.eigh(0.5 * (Hd + Hd.T))
            idx = np.argsort(values, kind="stable")[_select_indices(n, s, strategy.size)]
            return prepare_recycle(h_current, Q[:, idx])
        if jac_proj is None:
            raise ValueError("the GSVD strategy needs the mixed Jacobian")
        Jd = jac_proj.to_dense()
        if Jd.shape[0] < n:
            Jd = np.vstack([Jd, np.zeros((n - Jd.shape[0], n))])
        factors = gsvd_pair(Jd, 0.5 * (Hd + Hd.T))
        idx = np.argsort(factors.mu, kind="stable")[_select_indices(n, s, strategy.size)]
        left = factors.v_h[:, idx]
        if strategy.side == "L":
            cand = left
        elif strategy.side == "R":
            cand = factors.x[:, idx]
        else:
            cand = 0.5 * (left + factors.x[:, idx])
            norms = np.linalg.norm(cand, axis=0)
            norms[norms == 0] = 1.0
            cand = cand / norms
        nsc = NscData(values=factors.mu[idx], v_h=factors.v_h[:, idx], w=None)
        return prepare_recycle(h_current, cand, nsc)

    U_prev = prev_recycle.U if prev_recycle is not None else None
    basis = build_candidate_basis(_as_columns(prev_basis, n), _as_columns(U_prev, n))
    W = basis.W
    if W.shape[1] == 0:
        return RecycleSpace.empty(n)

    if strategy.vec_type == "Ritz":
        cand = ritz_select(W, h_proj, s, strategy.size)
        nsc = None
    elif strategy.vec_type == "HRitz":
        cand = harmonic_ritz_select(W, h_proj, s, strategy.size)
        nsc = None
    elif strategy.vec_type == "RGen":
        if jac_proj is None:
            raise ValueError("the RGen strategy needs the mixed Jacobian")
        cand, nsc = rgen_select(W, h_proj, jac_proj, s, strategy.size, strategy.side)
    else:
        raise ValueError(f"unhandled vector type {strategy.vec_type!r}")
    return prepare_recycle(h_current, cand, nsc)
