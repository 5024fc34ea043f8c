"""Problem generation, sequence recording, fair strategy replay, metrics.

The comparison protocol freezes one sequence of Hessian systems by
running the bilevel solve once without recycling and storing, per outer
iteration i: theta_i, the lower-level solution, the right-hand side
g_i, the solver's solution, and the accepted theta_{i+1}.  Every
strategy is then replayed over the same frozen systems, so differences
in iterations, FLOPs, hypergradient error, and proposed one-step upper
cost are attributable to the strategy alone.

Persistence is a JSON manifest plus one flat little-endian float64
binary file per stored array; metric tables are CSV with fixed headers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .bilevel import (
    HessianSolveConfig,
    LinesearchParams,
    LowerConfig,
    SequenceSolver,
    UpperState,
    backtracking_linesearch,
    gradient_descent,
    lower_solve_with_stats,
)
from .images import load_image
from .krylov import SolveOptions, cg, flops_cg, flops_minres, flops_rminres, minres
from .operators import (
    FoEParams,
    ImageVector,
    InpaintingProblem,
    Kernel,
    foe_hessian,
    mixed_jacobian,
)
from .recycling import StrategyDescriptor
from .stopping import ResidualNormRule

__all__ = [
    "ReplayMetrics",
    "ReplayRow",
    "RunConfig",
    "SequenceRecord",
    "SystemRecord",
    "cg_vs_minres",
    "compute_references",
    "dimension_sweep",
    "load_sequence",
    "make_inpainting",
    "record_sequence",
    "replay",
    "save_sequence",
    "similarity_report",
    "write_csv",
]

FORMAT_NAME = "krecycle-sequence-v1"

REPLAY_HEADER = [
    "strategy",
    "stop",
    "delta",
    "recycle_dim",
    "system",
    "iterations",
    "cum_iterations",
    "flops",
    "cum_flops",
    "effective_recycle_dim",
    "stop_reason",
    "final_stop_value",
    "final_residual",
    "hg_rel_error",
    "one_step_cost",
]
SIMILARITY_HEADER = ["system", "h_rel_diff", "g_rel_diff", "w_rel_diff"]
SWEEP_HEADER = [
    "strategy",
    "recycle_dim",
    "total_iterations",
    "total_flops",
    "max_hg_rel_error",
    "mean_hg_rel_error",
]
CG_MINRES_HEADER = [
    "solver",
    "start",
    "system",
    "iterations",
    "cum_iterations",
    "flops",
    "final_residual",
    "hg_rel_error",
]


@dataclass(frozen=True)
class RunConfig:
    """Knobs of one recorded experiment."""

    image: str = "builtin:16"
    intensity: float = 0.25
    rate: float = 0.3
    noise: float = 0.3
    num_filters: int = 3
    kernel_size: int = 5
    seed: int = 0
    strategy: str = "None"
    recycle_dim: int = 30
    delta: float = 1e-2
    stop: str = "res"
    max_inner: int = 500
    ridge: float = 1e-6
    kernel_init_std: float = 0.1
    lower_gtol: float = 1e-3
    eps_stop: float = 1e-4
    max_upper: int = 25

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ValueError(f"subsample rate must lie in (0, 1], got {self.rate}")
        if self.noise < 0:
            raise ValueError(f"noise level must be nonnegative, got {self.noise}")
        if self.recycle_dim < 0:
            raise ValueError(f"recycle dimension must be nonnegative, got {self.recycle_dim}")
        if not self.intensity > 0:
            raise ValueError(f"image intensity must be positive, got {self.intensity}")


def make_inpainting(cfg: RunConfig) -> tuple[InpaintingProblem, FoEParams]:
    """Seeded inpainting instance: uniform pixel subsampling and white
    noise scaled so the relative level is met exactly.  Initial filters
    are zero log-weights and small i.i.d. normal kernels; the image is
    rescaled to peak ``intensity``.  The intensity sets the hypergradient
    scale (the adjoint Jacobian is linear in the image while the Hessian
    is independent of it); the default 0.25 keeps hypergradient norms
    O(1), the regime in which the hypergradient-error stopping criterion
    and the residual rule are comparable at equal tolerance.  Both knobs
    are recorded in the manifest."""
    raw = load_image(cfg.image)
    peak = float(np.max(np.abs(raw.data)))
    x_true = ImageVector(
        raw.data if peak == 0 else (cfg.intensity / peak) * raw.data, raw.shape
    )
    n = x_true.size
    m = int(np.ceil(cfg.rate * n))
    if m < 1:
        raise ValueError(f"rate {cfg.rate} keeps no pixels of an image with {n}")
    rng = np.random.default_rng(cfg.seed)
    mask = np.sort(rng.permutation(n)[:m])
    clean = x_true.data[mask]
    if cfg.noise > 0:
        e = rng.standard_normal(m)
        clean_norm = np.linalg.norm(clean)
        if clean_norm == 0:
            raise ValueError("measured pixels are identically zero; cannot scale noise")
        e *= cfg.noise * clean_norm / np.linalg.norm(e)
        y = clean + e
    else:
        y = clean.copy()
    prob = InpaintingProblem(mask, y, cfg.ridge, x_true.shape, x_true)

    log_weights = np.zeros(cfg.num_filters)
    kernels = tuple(
        Kernel(cfg.kernel_init_std * rng.standard_normal((cfg.kernel_size, cfg.kernel_size)))
        for _ in range(cfg.num_filters)
    )
    return prob, FoEParams(log_weights, kernels)


@dataclass
class SystemRecord:
    """One frozen Hessian system and its recorded-solve context."""

    index: int
    theta: np.ndarray
    x_hat: np.ndarray
    g: np.ndarray
    w_hat: np.ndarray
    iterations: int
    cost: float
    grad_norm: float
    beta_init: float
    theta_next: np.ndarray | None = None
    w_star: np.ndarray | None = None
    ref_hg: np.ndarray | None = None


@dataclass
class SequenceRecord:
    config: RunConfig
    problem: InpaintingProblem
    systems: list[SystemRecord]
    reference_delta: float | None = None

    def __len__(self) -> int:
        return len(self.systems)

    @property
    def has_references(self) -> bool:
        return all(rec.w_star is not None for rec in self.systems)

    def params(self, i: int) -> FoEParams:
        return FoEParams.unflatten(
            self.systems[i].theta, self.config.num_filters, self.config.kernel_size
        )

    def hessian(self, i: int):
        return foe_hessian(self.params(i), self.problem)

    def jacobian(self, i: int):
        x_hat = ImageVector(self.systems[i].x_hat, self.problem.shape)
        return mixed_jacobian(self.params(i), x_hat, self.problem)

    def validate(self):
        for rec in self.systems:
            recomputed = rec.x_hat - self.problem.x_true.data
            if np.max(np.abs(recomputed - rec.g)) > 1e-12:
                raise ValueError(
                    f"system {rec.index}: stored right-hand side disagrees with "
                    "x_hat - x_true beyond 1e-12"
                )


def record_sequence(cfg: RunConfig) -> SequenceRecord:
    """Solve the bilevel problem without recycling and freeze every
    per-iteration Hessian system for later replay."""
    prob, theta0 = make_inpainting(cfg)
    result = gradient_descent(
        theta0,
        prob,
        eps_stop=cfg.eps_stop,
        solver_cfg=HessianSolveConfig(
            strategy=StrategyDescriptor(vec_type="None"),
            delta=cfg.delta,
            stop="res",
            max_iter=cfg.max_inner,
        ),
        lower_cfg=LowerConfig(gtol=cfg.lower_gtol),
        max_upper=cfg.max_upper,
    )
    systems = [
        SystemRecord(
            index=rec.index,
            theta=rec.theta,
            x_hat=rec.x_hat,
            g=rec.x_hat - prob.x_true.data,
            w_hat=rec.w_hat,
            iterations=rec.solve_iterations,
            cost=rec.cost,
            grad_norm=rec.grad_norm,
            beta_init=rec.beta_init,
            theta_next=rec.theta_next,
        )
        for rec in result.trace
    ]
    seq = SequenceRecord(config=cfg, problem=prob, systems=systems)
    seq.validate()
    return seq


def compute_references(seq: SequenceRecord, delta_ref: float = 1e-13, dense_limit: int = 2000) -> SequenceRecord:
    """High-accuracy reference solutions w_star and hypergradients J w_star.

    Residuals are driven below delta_ref * (1 + ||g||) by a dense
    Cholesky solve with iterative refinement (or reorthogonalized
    MINRES past the dense size limit)."""
    for i, rec in enumerate(seq.systems):
        hessian = seq.hessian(i)
        g = rec.g
        tol = delta_ref * (1 + np.linalg.norm(g))
        if hessian.dim <= dense_limit:
            factor = cho_factor(hessian.to_dense())
            w = cho_solve(factor, g)
            for _ in range(40):
                r = g - hessian(w)
                if np.linalg.norm(r) <= tol:
                    break
                w = w + cho_solve(factor, r)
        else:
            result = minres(
                hessian,
                g,
                SolveOptions(
                    max_iter=4 * hessian.dim,
                    stop_rule=ResidualNormRule(tol),
                    reorthogonalize=True,
                    track_basis=True,
                ),
            )
            w = result.solution
        final = np.linalg.norm(g - hessian(w))
        if final > tol:
            warnings.warn(
                f"reference solve for system {i} stalled at residual {final:.3e} "
                f"(target {tol:.3e})",
                stacklevel=2,
            )
        rec.w_star = w
        rec.ref_hg = seq.jacobian(i).apply_adjoint(w)
    seq.reference_delta = delta_ref
    return seq


@dataclass(frozen=True)
class ReplayRow:
    strategy: str
    stop: str
    delta: float
    recycle_dim: int
    system: int
    iterations: int
    cum_iterations: int
    flops: int
    cum_flops: int
    effective_recycle_dim: int
    stop_reason: str
    final_stop_value: float
    final_residual: float
    hg_rel_error: float | None
    one_step_cost: float | None


@dataclass
class ReplayMetrics:
    rows: list[ReplayRow]
    total_iterations: int
    total_flops: int
    max_hg_rel_error: float | None
    mean_hg_rel_error: float | None

    def as_table(self) -> list[list]:
        return [
            [
                row.strategy,
                row.stop,
                row.delta,
                row.recycle_dim,
                row.system,
                row.iterations,
                row.cum_iterations,
                row.flops,
                row.cum_flops,
                row.effective_recycle_dim,
                row.stop_reason,
                row.final_stop_value,
                row.final_residual,
                row.hg_rel_error,
                row.one_step_cost,
            ]
            for row in self.rows
        ]


def _one_step_cost(seq: SequenceRecord, i: int, direction: np.ndarray) -> float:
    """Proposed upper cost after one backtracking step from theta_i."""
    cfg = seq.config
    rec = seq.systems[i]
    prob = seq.problem
    lower = LowerConfig(gtol=cfg.lower_gtol)

    def evaluate(theta_flat, x_init):
        params = FoEParams.unflatten(theta_flat, cfg.num_filters, cfg.kernel_size)
        x_hat, _ = lower_solve_with_stats(
            params, prob, x_init, lower.gtol, lower.memory, lower.max_iter
        )
        diff = x_hat.data - prob.x_true.data
        return 0.5 * float(diff @ diff), x_hat

    state = UpperState(
        theta=rec.theta,
        x_hat=ImageVector(rec.x_hat, prob.shape),
        cost=rec.cost,
        next_beta=rec.beta_init,
    )
    ls = LinesearchParams(beta=rec.beta_init)
    new_state, _ = backtracking_linesearch(state, direction, ls, evaluate)
    return new_state.cost


def replay(
    seq: SequenceRecord,
    strategy: str | StrategyDescriptor,
    stop: str | None = None,
    recycle_dim: int | None = None,
    delta: float | None = None,
    compute_one_step: bool = True,
    max_inner: int | None = None,
) -> ReplayMetrics:
    """Re-solve the frozen sequence under one strategy and collect
    per-system and total metrics."""
    if isinstance(strategy, str):
        strategy = StrategyDescriptor.parse(strategy)
    if stop is None:
        stop = "nsc" if strategy.nsc else "res"
    delta = seq.config.delta if delta is None else delta
    recycle_dim = seq.config.recycle_dim if recycle_dim is None else recycle_dim
    max_inner = seq.config.max_inner if max_inner is None else max_inner

    solver = SequenceSolver(
        HessianSolveConfig.from_strategy(
            strategy,
            recycle_dim=recycle_dim,
            delta=delta,
            stop=stop,
            max_iter=max_inner,
        )
    )
    rows: list[ReplayRow] = []
    cum_iters = 0
    cum_flops = 0
    errors = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # dimension clamps are routine
        for i, rec in enumerate(seq.systems):
            hessian = seq.hessian(i)
            jac = seq.jacobian(i)
            result, recycle = solver.solve(hessian, rec.g, jac)
            hg = jac.apply_adjoint(result.solution)
            cum_iters += result.iterations
            cum_flops += result.flops

            hg_err = None
            if rec.ref_hg is not None:
                ref_norm = np.linalg.norm(rec.ref_hg)
                hg_err = float(np.linalg.norm(rec.ref_hg - hg) / ref_norm)
                errors.append(hg_err)
            one_step = _one_step_cost(seq, i, hg) if compute_one_step else None
            rows.append(
                ReplayRow(
                    strategy=str(strategy),
                    stop=stop,
                    delta=delta,
                    recycle_dim=recycle_dim,
                    system=i,
                    iterations=result.iterations,
                    cum_iterations=cum_iters,
                    flops=result.flops,
                    cum_flops=cum_flops,
                    effective_recycle_dim=recycle.dim,
                    stop_reason=result.stop_reason,
                    final_stop_value=float(result.stop_values[-1]),
                    final_residual=float(result.residual_norms[-1]),
                    hg_rel_error=hg_err,
                    one_step_cost=one_step,
                )
            )
    return ReplayMetrics(
        rows=rows,
        total_iterations=cum_iters,
        total_flops=cum_flops,
        max_hg_rel_error=max(errors) if errors else None,
        mean_hg_rel_error=float(np.mean(errors)) if errors else None,
    )


def similarity_report(seq: SequenceRecord, dense_limit: int = 2000) -> list[list]:
    """Relative Frobenius differences of consecutive Hessians, right-hand
    sides, and recorded solutions."""
    rows = []
    n = seq.problem.n
    prev_dense = None
    for i in range(len(seq) - 1):
        a, b = seq.systems[i], seq.systems[i + 1]
        if n <= dense_limit:
            h_prev = seq.hessian(i).to_dense() if prev_dense is None else prev_dense
            h_next = seq.hessian(i + 1).to_dense()
            prev_dense = h_next
            h_diff = float(
                np.linalg.norm(h_next - h_prev, "fro") / np.linalg.norm(h_prev, "fro")
            )
        else:
            h_diff = _frobenius_diff_probed(seq.hessian(i), seq.hessian(i + 1))
        g_diff = float(np.linalg.norm(b.g - a.g) / np.linalg.norm(a.g))
        w_diff = float(np.linalg.norm(b.w_hat - a.w_hat) / np.linalg.norm(a.w_hat))
        rows.append([i, h_diff, g_diff, w_diff])
    return rows


def _frobenius_diff_probed(h_a, h_b) -> float:
    """||H_b - H_a||_F / ||H_a||_F by probing with canonical basis vectors."""
    n = h_a.dim
    diff_sq = 0.0
    base_sq = 0.0
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        col_a = h_a(e)
        col_b = h_b(e)
        diff_sq += float(np.sum((col_b - col_a) ** 2))
        base_sq += float(np.sum(col_a**2))
        e[j] = 0.0
    return float(np.sqrt(diff_sq / base_sq))


def dimension_sweep(
    seq: SequenceRecord,
    strategy: str | StrategyDescriptor,
    dims: list[int],
    stop: str | None = None,
    delta: float | None = None,
) -> list[list]:
    """Totals per recycle dimension: iterations, FLOPs, hypergradient
    error statistics.  Skips the one-step cost for speed."""
    if isinstance(strategy, str):
        strategy = StrategyDescriptor.parse(strategy)
    rows = []
    for s in dims:
        use = strategy if s > 0 else StrategyDescriptor(vec_type="None")
        use_stop = stop
        if s == 0 and (stop == "nsc" or (stop is None and strategy.nsc)):
            use_stop = "res"  # no GSVD data without a recycle space
        metrics = replay(
            seq, use, stop=use_stop, recycle_dim=s, delta=delta, compute_one_step=False
        )
        rows.append(
            [
                str(strategy),
                s,
                metrics.total_iterations,
                metrics.total_flops,
                metrics.max_hg_rel_error,
                metrics.mean_hg_rel_error,
            ]
        )
    return rows


def cg_vs_minres(seq: SequenceRecord, delta: float | None = None) -> list[list]:
    """Cold- and warm-started CG and MINRES over the frozen sequence,
    without recycling."""
    delta = seq.config.delta if delta is None else delta
    rows = []
    for solver_name, solve in (("minres", minres), ("cg", cg)):
        for start in ("cold", "warm"):
            cum = 0
            prev_solution = None
            for i, rec in enumerate(seq.systems):
                hessian = seq.hessian(i)
                guess = prev_solution if start == "warm" else None
                result = solve(
                    hessian,
                    rec.g,
                    SolveOptions(
                        max_iter=seq.config.max_inner,
                        stop_rule=ResidualNormRule(delta),
                        initial_guess=guess,
                    ),
                )
                prev_solution = result.solution
                cum += result.iterations
                hg_err = None
                if rec.ref_hg is not None:
                    hg = seq.jacobian(i).apply_adjoint(result.solution)
                    hg_err = float(
                        np.linalg.norm(rec.ref_hg - hg) / np.linalg.norm(rec.ref_hg)
                    )
                rows.append(
                    [
                        solver_name,
                        start,
                        i,
                        result.iterations,
                        cum,
                        result.flops,
                        float(result.residual_norms[-1]),
                        hg_err,
                    ]
                )
    return rows


NSC_PROJECTION_HEADER = [
    "system",
    "true_hg_error",
    "nsc_previous_basis",
    "nsc_current_basis",
]


def nsc_projection_report(
    seq: SequenceRecord,
    strategy: str | StrategyDescriptor = "RGen-L(R)-NSC",
    recycle_dim: int | None = None,
    delta: float | None = None,
) -> list[list]:
    """Quality of the projected hypergradient-error surrogate.

    Solves the sequence under the given strategy and evaluates, at each
    final residual: the true error ||J H^{-1} r||, the surrogate built
    from the previous system's basis (the one available in practice),
    and the surrogate rebuilt post-hoc from the current system's basis
    [V_i, U_i].  The current-basis variant needs the whole solve first,
    so it is a diagnostic, not a stopping rule.
    """
    from .recycling import build_candidate_basis, rgen_select
    from .stopping import nsc_value, true_hg_error

    if isinstance(strategy, str):
        strategy = StrategyDescriptor.parse(strategy)
    recycle_dim = seq.config.recycle_dim if recycle_dim is None else recycle_dim
    delta = seq.config.delta if delta is None else delta
    solver = SequenceSolver(
        HessianSolveConfig.from_strategy(
            strategy, recycle_dim=recycle_dim, delta=delta, max_iter=seq.config.max_inner
        )
    )
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for i, rec in enumerate(seq.systems):
            hessian = seq.hessian(i)
            jac = seq.jacobian(i)
            result, recycle = solver.solve(hessian, rec.g, jac)
            r = rec.g - hessian(result.solution)
            true_err = true_hg_error(jac, hessian, r)
            prev_val = nsc_value(recycle.nsc_data, r) if recycle.nsc_data is not None else None
            basis_now = build_candidate_basis(result.basis, recycle.U).W
            cur_val = None
            if basis_now.shape[1] > 0:
                _, nsc_now = rgen_select(
                    basis_now,
                    hessian,
                    jac,
                    min(recycle_dim, basis_now.shape[1]),
                    strategy.size or "L",
                    strategy.side or "R",
                )
                cur_val = nsc_value(nsc_now, r)
            rows.append([i, true_err, prev_val, cur_val])
    return rows


# ---------------------------------------------------------------------------
# persistence


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(path, header: list[str], rows: list[list]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _write_array(path: Path, array: np.ndarray):
    path.write_bytes(np.asarray(array, dtype="<f8").ravel().tobytes())


def _read_array(path: Path) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f8").copy()


def save_sequence(seq: SequenceRecord, out_dir) -> Path:
    out = Path(out_dir)
    arrays = out / "arrays"
    arrays.mkdir(parents=True, exist_ok=True)
    prob = seq.problem

    _write_array(arrays / "xtrue.f64", prob.x_true.data)
    _write_array(arrays / "y.f64", prob.y)
    systems_meta = []
    for rec in seq.systems:
        tag = f"{rec.index:03d}"
        _write_array(arrays / f"theta_{tag}.f64", rec.theta)
        _write_array(arrays / f"xhat_{tag}.f64", rec.x_hat)
        _write_array(arrays / f"g_{tag}.f64", rec.g)
        _write_array(arrays / f"what_{tag}.f64", rec.w_hat)
        if rec.theta_next is not None:
            _write_array(arrays / f"theta_next_{tag}.f64", rec.theta_next)
        if rec.w_star is not None:
            _write_array(arrays / f"wstar_{tag}.f64", rec.w_star)
            _write_array(arrays / f"refhg_{tag}.f64", rec.ref_hg)
        systems_meta.append(
            {
                "index": rec.index,
                "iterations": rec.iterations,
                "cost": rec.cost,
                "grad_norm": rec.grad_norm,
                "beta_init": rec.beta_init,
                "has_theta_next": rec.theta_next is not None,
                "has_reference": rec.w_star is not None,
            }
        )
    manifest = {
        "format": FORMAT_NAME,
        "config": asdict(seq.config),
        "shape": list(prob.shape),
        "n": prob.n,
        "p": seq.config.num_filters * (1 + seq.config.kernel_size**2),
        "mask_rows": prob.mask_rows.tolist(),
        "ridge": prob.ridge,
        "num_systems": len(seq),
        "systems": systems_meta,
        "reference_delta": seq.reference_delta,
        "notes": {
            "kernel_init": f"iid normal, std {seq.config.kernel_init_std}",
            "lower_init": "zeros",
            "array_format": "flat little-endian float64",
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_sequence(in_dir) -> SequenceRecord:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"{root}: not a {FORMAT_NAME} directory")
    cfg = RunConfig(**manifest["config"])
    arrays = root / "arrays"
    shape = tuple(manifest["shape"])
    x_true = ImageVector(_read_array(arrays / "xtrue.f64"), shape)
    prob = InpaintingProblem(
        np.asarray(manifest["mask_rows"], dtype=np.int64),
        _read_array(arrays / "y.f64"),
        manifest["ridge"],
        shape,
        x_true,
    )
    systems = []
    for meta in manifest["systems"]:
        tag = f"{meta['index']:03d}"
        systems.append(
            SystemRecord(
                index=meta["index"],
                theta=_read_array(arrays / f"theta_{tag}.f64"),
                x_hat=_read_array(arrays / f"xhat_{tag}.f64"),
                g=_read_array(arrays / f"g_{tag}.f64"),
                w_hat=_read_array(arrays / f"what_{tag}.f64"),
                iterations=meta["iterations"],
                cost=meta["cost"],
                grad_norm=meta["grad_norm"],
                beta_init=meta["beta_init"],
                theta_next=(
                    _read_array(arrays / f"theta_next_{tag}.f64")
                    if meta["has_theta_next"]
                    else None
                ),
                w_star=(
                    _read_array(arrays / f"wstar_{tag}.f64") if meta["has_reference"] else None
                ),
                ref_hg=(
                    _read_array(arrays / f"refhg_{tag}.f64") if meta["has_reference"] else None
                ),
            )
        )
    seq = SequenceRecord(
        config=cfg,
        problem=prob,
        systems=systems,
        reference_delta=manifest.get("reference_delta"),
    )
    seq.validate()
    return seq
