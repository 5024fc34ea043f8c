import numpy as np
import pytest

from krecycle.krylov import (
    NonSPDError,
    SolveOptions,
    cg,
    flops_cg,
    flops_minres,
    flops_rminres,
    minres,
    rminres,
)
from krecycle.operators import dense_operator
from krecycle.recycling import RecycleSpace
from krecycle.stopping import ResidualNormRule


def random_spd(rng, n, cond=100.0, spacing="geometric"):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    space = np.geomspace if spacing == "geometric" else np.linspace
    eigs = space(1.0, cond, n)
    return Q @ np.diag(eigs) @ Q.T


def make_recycle(M, U_tilde):
    """Numpy-only construction of (U, C): H*Utilde = C R, U = Utilde R^{-1}."""
    HU = M @ U_tilde
    C, R = np.linalg.qr(HU)
    U = U_tilde @ np.linalg.inv(R)
    return RecycleSpace(U=U, C=C)


def tol_opts(delta, **kwargs):
    return SolveOptions(stop_rule=ResidualNormRule(delta), **kwargs)


class TestMinres:
    def test_identity_converges_in_one_iteration(self, rng):
        n = 12
        H = dense_operator(np.eye(n))
        g = rng.standard_normal(n)
        result = minres(H, g, tol_opts(1e-10))
        assert result.iterations == 1
        assert result.stop_reason == "tolerance"
        assert np.allclose(result.solution, g, atol=1e-12)

    def test_exact_initial_guess(self, rng):
        n = 10
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        w_star = np.linalg.solve(M, g)
        result = minres(dense_operator(M), g, tol_opts(1e-8, initial_guess=w_star))
        assert result.iterations == 0
        assert result.residual_norms[0] < 1e-8

    def test_matches_dense_solve(self, rng):
        for trial in range(5):
            n = int(rng.integers(10, 41))
            M = random_spd(rng, n)
            g = rng.standard_normal(n)
            result = minres(dense_operator(M), g, tol_opts(1e-10, max_iter=10 * n))
            expected = np.linalg.solve(M, g)
            err = np.linalg.norm(result.solution - expected) / np.linalg.norm(expected)
            assert err <= 1e-8
            assert result.stop_reason == "tolerance"

    def test_residual_history_monotone_and_tracks_zeta(self, rng):
        n = 25
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        result = minres(
            dense_operator(M), g, tol_opts(1e-10, max_iter=200, collect_iterates=True)
        )
        norms = result.residual_norms
        assert np.all(np.diff(norms) <= 1e-14 * norms[0])
        assert len(norms) == result.iterations + 1
        for k, w in enumerate(result.iterates):
            true_norm = np.linalg.norm(g - M @ w)
            assert abs(norms[k] - true_norm) <= 1e-8 * norms[0]

    def test_breakdown_reported(self, rng):
        # right-hand side a whisker away from an eigenvector: the Krylov
        # space degenerates after one step while the tolerance stays out
        # of reach, which must surface as a lucky breakdown
        n = 8
        M = np.diag(np.arange(1.0, n + 1.0))
        g = np.zeros(n)
        g[0] = 1.0
        g[1] = 1e-14
        result = minres(dense_operator(M), g, tol_opts(1e-300))
        assert result.stop_reason == "breakdown"
        assert np.allclose(result.solution, np.linalg.solve(M, g), atol=1e-10)

    def test_basis_orthonormal_midsolve(self, rng):
        # 50 iterations on a slowly converging system: orthogonality of
        # the three-term-recurrence basis must survive without explicit
        # reorthogonalization while the residual is still shrinking
        n = 300
        M = random_spd(rng, n, cond=100, spacing="uniform")
        g = rng.standard_normal(n)
        result = minres(H=dense_operator(M), g=g, opts=tol_opts(1e-14, max_iter=50, track_basis=True))
        assert result.stop_reason == "max_iter"
        V = result.basis
        assert V.shape[1] == result.iterations
        gram = V.T @ V
        assert np.max(np.abs(gram - np.eye(V.shape[1]))) <= 1e-6


class TestCg:
    def test_identity_one_iteration(self, rng):
        n = 9
        g = rng.standard_normal(n)
        result = cg(dense_operator(np.eye(n)), g, tol_opts(1e-12))
        assert result.iterations == 1
        assert np.allclose(result.solution, g, atol=1e-12)

    def test_matches_dense_solve(self, rng):
        for _ in range(5):
            n = int(rng.integers(10, 41))
            M = random_spd(rng, n)
            g = rng.standard_normal(n)
            result = cg(dense_operator(M), g, tol_opts(1e-10, max_iter=10 * n))
            expected = np.linalg.solve(M, g)
            assert np.linalg.norm(result.solution - expected) <= 1e-8 * np.linalg.norm(expected)

    def test_same_tolerance_as_minres(self, rng):
        n = 20
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        delta = 1e-8
        for solver in (cg, minres):
            result = solver(dense_operator(M), g, tol_opts(delta, max_iter=500))
            assert np.linalg.norm(g - M @ result.solution) <= delta * (1 + 1e-10)

    def test_non_spd_raises(self, rng):
        M = np.diag([1.0, -1.0, 2.0])
        g = np.array([1.0, 1.0, 1.0])
        with pytest.raises(NonSPDError):
            cg(dense_operator(M), g, tol_opts(1e-14))


class TestRminres:
    def test_empty_recycle_reproduces_minres(self, rng):
        n = 18
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        opts = tol_opts(1e-9, collect_iterates=True)
        plain = minres(dense_operator(M), g, opts)
        recycled = rminres(dense_operator(M), g, RecycleSpace.empty(n), opts)
        assert plain.iterations == recycled.iterations
        assert np.array_equal(plain.residual_norms, recycled.residual_norms)
        for a, b in zip(plain.iterates, recycled.iterates):
            assert np.array_equal(a, b)

    def test_recycle_of_solution_direction(self, rng):
        n = 16
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        w_star = np.linalg.solve(M, g)
        recycle = make_recycle(M, w_star[:, None])
        result = rminres(dense_operator(M), g, recycle, tol_opts(1e-10, max_iter=200))
        # the initial projection alone captures the solution component
        assert result.residual_norms[0] < 1e-8 * np.linalg.norm(g)
        assert np.linalg.norm(result.solution - w_star) <= 1e-8 * np.linalg.norm(w_star)

    def test_matches_coupled_least_squares_oracle(self, rng):
        # meaningful while k + s << n, i.e. before exact-arithmetic
        # Lanczos would have terminated; stop early to stay there
        for _ in range(8):
            n = int(rng.integers(30, 51))
            M = random_spd(rng, n, cond=30)
            g = rng.standard_normal(n)
            recycle = make_recycle(M, rng.standard_normal((n, 3)))
            result = rminres(
                dense_operator(M),
                g,
                recycle,
                tol_opts(1e-2 * np.linalg.norm(g), max_iter=n, track_basis=True),
            )
            B = M @ np.column_stack([result.basis, recycle.U])
            coeffs, *_ = np.linalg.lstsq(B, g, rcond=None)
            best = np.linalg.norm(g - B @ coeffs)
            achieved = np.linalg.norm(g - M @ result.solution)
            assert abs(achieved - best) <= 1e-6 * best

    def test_final_matches_dense_solve(self, rng):
        n = 24
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        recycle = make_recycle(M, rng.standard_normal((n, 4)))
        result = rminres(dense_operator(M), g, recycle, tol_opts(1e-11, max_iter=400))
        expected = np.linalg.solve(M, g)
        assert np.linalg.norm(result.solution - expected) <= 1e-8 * np.linalg.norm(expected)

    def test_residual_orthogonal_to_recycle_range(self, rng):
        n = 22
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        recycle = make_recycle(M, rng.standard_normal((n, 4)))
        result = rminres(
            dense_operator(M),
            g,
            recycle,
            tol_opts(1e-10, max_iter=300, collect_iterates=True),
        )
        r0_norm = result.residual_norms[0]
        for w in result.iterates:
            r = g - M @ w
            assert np.linalg.norm(recycle.C.T @ r) <= 1e-8 * max(r0_norm, np.linalg.norm(g))

    def test_augmented_basis_orthogonality(self, rng):
        n = 300
        M = random_spd(rng, n, cond=100, spacing="uniform")
        g = rng.standard_normal(n)
        recycle = make_recycle(M, rng.standard_normal((n, 5)))
        result = rminres(
            dense_operator(M), g, recycle, tol_opts(1e-14, max_iter=50, track_basis=True)
        )
        assert result.stop_reason == "max_iter"
        V = result.basis
        assert np.max(np.abs(V.T @ V - np.eye(V.shape[1]))) <= 1e-6
        assert np.max(np.abs(recycle.C.T @ V)) <= 1e-6

    def test_zeta_tracks_projected_residual(self, rng):
        n = 20
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        recycle = make_recycle(M, rng.standard_normal((n, 3)))
        result = rminres(
            dense_operator(M),
            g,
            recycle,
            tol_opts(1e-10, max_iter=200, collect_iterates=True),
        )
        for k, w in enumerate(result.iterates):
            true_norm = np.linalg.norm(g - M @ w)
            assert abs(result.residual_norms[k] - true_norm) <= 1e-8 * result.residual_norms[0]

    def test_rejects_bad_recycle_space(self, rng):
        n = 10
        M = random_spd(rng, n)
        U = rng.standard_normal((n, 2))
        with pytest.raises(ValueError, match="C\\^T C"):
            rminres(dense_operator(M), rng.standard_normal(n), RecycleSpace(U=U, C=U), None)


class TestResidualRecurrence:
    def test_recurrence_matches_explicit(self, rng):
        for _ in range(5):
            n = int(rng.integers(15, 35))
            M = random_spd(rng, n)
            g = rng.standard_normal(n)
            recycle = make_recycle(M, rng.standard_normal((n, 3)))
            result = rminres(
                dense_operator(M),
                g,
                recycle,
                tol_opts(
                    1e-9,
                    max_iter=200,
                    track_residual_vector=True,
                    collect_iterates=True,
                    collect_residual_history=True,
                ),
            )
            g_norm = np.linalg.norm(g)
            for w, r_tracked in zip(result.iterates, result.residual_history):
                explicit = g - M @ w
                assert np.linalg.norm(r_tracked - explicit) <= 1e-8 * g_norm

    def test_initialization_is_projected_residual(self, rng):
        n = 14
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        w0 = rng.standard_normal(n)
        recycle = make_recycle(M, rng.standard_normal((n, 2)))
        result = rminres(
            dense_operator(M),
            g,
            recycle,
            tol_opts(
                1e-9,
                initial_guess=w0,
                max_iter=1,
                track_residual_vector=True,
                collect_residual_history=True,
            ),
        )
        r0 = g - M @ w0
        expected = r0 - recycle.C @ (recycle.C.T @ r0)
        assert np.allclose(result.residual_history[0], expected, atol=1e-12)

    def test_final_norm_matches_zeta(self, rng):
        n = 20
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        recycle = make_recycle(M, rng.standard_normal((n, 3)))
        result = rminres(
            dense_operator(M),
            g,
            recycle,
            tol_opts(1e-9, max_iter=200, track_residual_vector=True),
        )
        assert result.stop_reason == "tolerance"
        r_norm = np.linalg.norm(result.residual_vector)
        zeta = result.residual_norms[-1]
        assert abs(r_norm - zeta) <= 1e-8 * max(zeta, 1e-6)


class TestTridiagState:
    def test_givens_pairs_on_unit_circle_and_zeta_tracks_residual(self, rng):
        n = 24
        M = random_spd(rng, n)
        g = rng.standard_normal(n)
        recycle = make_recycle(M, rng.standard_normal((n, 3)))
        result = rminres(
            dense_operator(M),
            g,
            recycle,
            tol_opts(1e-9, max_iter=200, collect_states=True, collect_iterates=True),
        )
        assert len(result.states) == result.iterations
        for state in result.states:
            for c, s in (state.givens, state.givens_prev, state.givens_prev2):
                radius = c * c + s * s
                assert radius == 0.0 or abs(radius - 1.0) <= 1e-14
            assert state.epsilon_rot > 0
        for state, w in zip(result.states, result.iterates[1:]):
            true_norm = np.linalg.norm(g - M @ w)
            assert abs(abs(state.zeta) - true_norm) <= 1e-8 * result.residual_norms[0]


class TestFlops:
    def test_minres_formula_values(self):
        assert flops_minres(0, 10, 190) == 230
        assert flops_minres(5, 10, 190) == 1980
        assert flops_minres(1, 1, 1) == 22

    def test_rminres_formula_values(self):
        assert flops_rminres(0, 10, 0, 190) == flops_minres(0, 10, 190)
        assert flops_rminres(5, 10, 2, 190) == 2940

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            flops_minres(-1, 10, 5)
        with pytest.raises(ValueError):
            flops_rminres(1, -10, 0, 5)
        with pytest.raises(ValueError):
            flops_cg(1, 10, -5)

    def test_minres_meter_matches_closed_form(self, rng):
        for _ in range(5):
            n = int(rng.integers(8, 30))
            M = random_spd(rng, n)
            H = dense_operator(M, apply_cost=int(rng.integers(1, 500)))
            g = rng.standard_normal(n)
            result = minres(H, g, tol_opts(1e-8, max_iter=100))
            assert result.flops == flops_minres(result.iterations, n, H.apply_cost)

    def test_rminres_meter_matches_closed_form(self, rng):
        for _ in range(5):
            n = int(rng.integers(10, 30))
            s = int(rng.integers(1, 5))
            M = random_spd(rng, n)
            H = dense_operator(M, apply_cost=int(rng.integers(1, 500)))
            g = rng.standard_normal(n)
            recycle = make_recycle(M, rng.standard_normal((n, s)))
            result = rminres(H, g, recycle, tol_opts(1e-8, max_iter=100))
            assert result.flops == flops_rminres(result.iterations, n, s, H.apply_cost)

    def test_cg_meter_matches_model(self, rng):
        n = 15
        M = random_spd(rng, n)
        H = dense_operator(M, apply_cost=77)
        result = cg(H, rng.standard_normal(n), tol_opts(1e-8, max_iter=100))
        assert result.flops == flops_cg(result.iterations, n, 77)
