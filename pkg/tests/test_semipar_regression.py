import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splinedeconv.error_models import ErrorLaw, normal_noise
from splinedeconv.quadrature import plane_grid
from splinedeconv.semipar_regression import (
    CorrectionSolve,
    DegenerateDataError,
    RegressionEquation,
    RegressionFitOptions,
    RegressionModel,
    WorkingDensity,
    build_AH,
    default_working_density,
    estimating_equation,
    eval_m,
    fit_regression,
    naive_spline_fit,
    posterior_correction,
    score_sstar,
    solve_correction,
    working_loglik,
)
from splinedeconv.spline_core import basis_matrix, make_knots

NOISE = normal_noise(0.25)
LAWS = [ErrorLaw("normal", 0.0025), ErrorLaw("laplace", 0.05 / math.sqrt(2)), ErrorLaw("uniform", 0.1)]


def simulate(law, n, seed, kv=None):
    rng = np.random.default_rng(seed)
    x = rng.beta(4, 4, n)
    return x + law.sample(rng, n), np.sin(2 * np.pi * x) + NOISE.sample(rng, n)


def grid_for(law, w, y, work, points=61):
    return plane_grid(w, y, law, NOISE, points, 4.0, centers=work.points)


class TestWorkingDensity:
    def test_uniform_midpoints(self):
        wd = WorkingDensity.uniform(4)
        assert wd.points.tolist() == [0.125, 0.375, 0.625, 0.875] and np.allclose(wd.weights, 0.25)

    def test_closed_includes_ends(self):
        wd = WorkingDensity.closed(3)
        assert wd.points.tolist() == [0.0, 0.5, 1.0]
        with pytest.raises(ValueError):
            WorkingDensity.closed(1)

    def test_triangular_weights(self):
        wd = WorkingDensity.triangular(5)
        assert wd.weights.sum() == pytest.approx(1.0, abs=1e-12) and np.argmax(wd.weights) == 2

    @pytest.mark.parametrize(
        "pts,wts",
        [([0.2, 0.1], [0.5, 0.5]), ([0.1, 1.2], [0.5, 0.5]), ([0.1, 0.2], [0.6, 0.6]), ([0.1], [-1.0])],
    )
    def test_invariants(self, pts, wts):
        with pytest.raises(ValueError):
            WorkingDensity(pts, wts)

    def test_default_size(self):
        assert default_working_density(make_knots(2)).size == 25


class TestModel:
    def test_eval_m_zero_and_constant(self):
        kv = make_knots(3)
        assert eval_m(RegressionModel(kv, np.zeros(7)), 0.4) == 0.0
        assert np.allclose(RegressionModel(kv, np.full(7, 2.5)).predict(np.linspace(0, 1, 17)), 2.5, atol=1e-13)

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            RegressionModel(make_knots(1), np.zeros(4))

    def test_spline_approximation_order(self):
        x = np.linspace(0, 1, 4001)
        errs = []
        for n_int in (4, 8, 16):
            kv = make_knots(n_int)
            beta = naive_spline_fit(kv, x, np.sin(2 * np.pi * x))
            errs.append(np.max(np.abs(RegressionModel(kv, beta).predict(x) - np.sin(2 * np.pi * x))))
            assert errs[-1] < (2 * np.pi) ** 4 * kv.h_b**4 / 24
        assert errs[0] / errs[2] > 100  # fourth-order decay


class TestScore:
    def test_flat_truth_gives_zero(self):
        kv = make_knots(2)
        model = RegressionModel(kv, np.full(kv.basis_dim, 0.7))
        assert np.allclose(score_sstar(model, NOISE, LAWS[0], WorkingDensity.uniform(5), 0.4, 0.7), 0, atol=1e-15)

    @pytest.mark.parametrize("law", LAWS, ids=lambda l: l.kind)
    def test_single_atom_closed_form(self, law):
        kv = make_knots(2)
        model = RegressionModel(kv, np.linspace(-1, 1, kv.basis_dim))
        wd = WorkingDensity([0.3], [1.0])
        m1 = float(model.predict(0.3))
        y = 0.9
        expected = -basis_matrix(kv, [0.3])[0] * float(NOISE.density_deriv(y - m1)) / float(NOISE.density(y - m1))
        assert np.allclose(score_sstar(model, NOISE, law, wd, 0.32, y), expected, atol=1e-13)

    @pytest.mark.parametrize("law", LAWS, ids=lambda l: l.kind)
    def test_matches_finite_differences(self, law, rng):
        kv = make_knots(2)
        wd = WorkingDensity.uniform(9)
        worst = 0.0
        for _ in range(20):
            beta = rng.normal(size=kv.basis_dim)
            w, y = rng.uniform(0.05, 0.95), rng.normal()
            s = score_sstar(RegressionModel(kv, beta), NOISE, law, wd, w, y)
            fd = np.empty_like(s)
            for k in range(s.size):
                e = np.zeros_like(beta)
                e[k] = 1e-6
                up = working_loglik(RegressionModel(kv, beta + e), NOISE, law, wd, w, y)[0]
                dn = working_loglik(RegressionModel(kv, beta - e), NOISE, law, wd, w, y)[0]
                fd[k] = (up - dn) / 2e-6
            worst = max(worst, np.max(np.abs(s - fd)) / max(np.max(np.abs(fd)), 1e-3))
        assert worst < 1e-5

    def test_degenerate_observation(self):
        kv = make_knots(1)
        with pytest.raises(DegenerateDataError):
            score_sstar(RegressionModel(kv, np.zeros(5)), NOISE, LAWS[2], WorkingDensity.uniform(2), 0.5, 0.0)

    def test_non_normal_noise_rejected(self):
        kv = make_knots(1)
        with pytest.raises(ValueError):
            score_sstar(RegressionModel(kv, np.zeros(5)), ErrorLaw("laplace", 1.0), LAWS[0], WorkingDensity.uniform(2), 0.5, 0)


class TestCorrectionMatrices:
    @pytest.mark.parametrize("law", LAWS + [ErrorLaw("normal", 0.25)], ids=lambda l: l.spec())
    def test_single_atom_mass(self, law):
        kv = make_knots(2)
        wd = WorkingDensity([0.5], [1.0])
        w, y = simulate(law, 200, 1)
        A, H = build_AH(RegressionModel(kv, np.zeros(kv.basis_dim)), NOISE, law, wd, grid_for(law, w, y, wd))
        assert A.shape == (1, 1) and H.shape == (1, 1)
        assert A[0, 0] == pytest.approx(1.0, abs=2e-3)

    @pytest.mark.parametrize("law", LAWS, ids=lambda l: l.kind)
    def test_rows_are_conditional_distributions(self, law, rng):
        kv = make_knots(2)
        wd = WorkingDensity.uniform(6)
        w, y = simulate(law, 200, 2)
        A, _ = build_AH(RegressionModel(kv, rng.normal(size=kv.basis_dim)), NOISE, law, wd, grid_for(law, w, y, wd))
        assert np.all(A >= 0) and np.allclose(A.sum(axis=1), 1.0, atol=2e-3)

    def test_uniform_error_against_separable_integral(self):
        # with L = 2 and both atoms at the same height, A_ij reduces to a ratio
        # of overlapping uniform windows times a unit y-integral
        law = ErrorLaw("uniform", 0.3)
        kv = make_knots(1)
        wd = WorkingDensity([0.4, 0.6], [0.5, 0.5])
        w, y = simulate(law, 300, 3)
        A, _ = build_AH(RegressionModel(kv, np.zeros(5)), NOISE, law, wd, grid_for(law, w, y, wd, 201))
        f = 1 / 0.6
        overlap = 0.6 - 0.2
        expected = np.array([[1 - overlap * f / 2, overlap * f / 2], [overlap * f / 2, 1 - overlap * f / 2]])
        assert np.allclose(A, expected, atol=2e-3)

    def test_equal_heights_give_zero_h(self):
        law = LAWS[0]
        kv = make_knots(2)
        wd = WorkingDensity.uniform(5)
        w, y = simulate(law, 200, 4)
        model = RegressionModel(kv, np.full(kv.basis_dim, 0.2))
        grid = plane_grid(w, y - np.mean(y) + 0.2, law, NOISE, 61, 4.0, centers=wd.points)
        _, H = build_AH(model, NOISE, law, wd, grid)
        assert np.max(np.abs(H)) < 1e-6

    def test_needs_y_axis(self):
        wd = WorkingDensity.uniform(2)
        g = plane_grid([0.2, 0.8], None, LAWS[0], None, 40)
        with pytest.raises(ValueError):
            build_AH(RegressionModel(make_knots(1), np.zeros(5)), NOISE, LAWS[0], wd, g)


class TestSolve:
    def test_single_atom(self):
        kv = make_knots(1)
        wd = WorkingDensity([0.3], [1.0])
        sol = solve_correction([[2.0]], [[3.0]], kv, wd)
        b = basis_matrix(kv, [0.3])[0] * 3.0
        assert np.allclose(sol.a[:, 0], b / 2.0, atol=1e-15)

    def test_identity(self, rng):
        kv = make_knots(2)
        wd = WorkingDensity.uniform(4)
        H = rng.normal(size=(4, 4))
        sol = solve_correction(np.eye(4), H, kv, wd)
        B = basis_matrix(kv, wd.points)
        for j in range(4):
            assert np.allclose(sol.a[:, j], sum(B[k] * H[j, k] for k in range(4)), atol=1e-14)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_residual(self, seed, L):
        r = np.random.default_rng(seed)
        kv = make_knots(3)
        A = r.normal(size=(L, L)) + L * np.eye(L)
        sol = solve_correction(A, r.normal(size=(L, L)), kv, WorkingDensity.uniform(L))
        assert sol.residual < 1e-10 and sol.ridge == 0.0

    def test_ridge_on_singular(self):
        kv = make_knots(1)
        A = np.ones((3, 3))
        sol = solve_correction(A, np.eye(3), kv, WorkingDensity.uniform(3))
        assert sol.ridge == pytest.approx(1e-10)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            solve_correction(np.eye(2), np.eye(3), make_knots(1), WorkingDensity.uniform(2))


class TestPosterior:
    def _solve(self, a):
        L = a.shape[1]
        return CorrectionSolve(np.eye(L), np.eye(L), a, a, 0.0)

    def test_common_value(self, rng):
        kv = make_knots(1)
        v = rng.normal(size=5)
        sol = self._solve(np.repeat(v[:, None], 4, axis=1))
        model = RegressionModel(kv, rng.normal(size=5))
        assert np.allclose(posterior_correction(sol, model, NOISE, LAWS[1], WorkingDensity.uniform(4), 0.3, 0.1), v, atol=1e-14)

    def test_single_atom(self, rng):
        kv = make_knots(1)
        a = rng.normal(size=(5, 1))
        model = RegressionModel(kv, rng.normal(size=5))
        for w, y in [(0.1, 2.0), (0.9, -1.0)]:
            out = posterior_correction(self._solve(a), model, NOISE, LAWS[0], WorkingDensity([0.5], [1.0]), w, y)
            assert np.allclose(out, a[:, 0], atol=1e-14)

    def test_brute_force_weights(self, rng):
        kv = make_knots(2)
        wd = WorkingDensity.triangular(7)
        a = rng.normal(size=(kv.basis_dim, 7))
        beta = rng.normal(size=kv.basis_dim)
        model = RegressionModel(kv, beta)
        law = LAWS[1]
        w, y = 0.45, 0.3
        num = np.zeros(kv.basis_dim)
        den = 0.0
        for j in range(7):
            m_j = float(basis_matrix(kv, [wd.points[j]])[0] @ beta)
            p = float(NOISE.density(y - m_j)) * float(law.density(w - wd.points[j])) * wd.weights[j]
            num += a[:, j] * p
            den += p
        assert np.allclose(posterior_correction(self._solve(a), model, NOISE, law, wd, w, y), num / den, atol=1e-12)


class TestEquation:
    def test_no_correction_is_raw_score_mean(self, rng):
        kv = make_knots(1)
        wd = WorkingDensity.uniform(5)
        w, y = simulate(LAWS[0], 50, 5)
        model = RegressionModel(kv, rng.normal(size=5))
        raw = np.mean([score_sstar(model, NOISE, LAWS[0], wd, a, b) for a, b in zip(w, y)], axis=0)
        zero = CorrectionSolve(np.eye(5), np.eye(5), np.zeros((5, 5)), np.zeros((5, 5)), 0.0)
        assert np.allclose(estimating_equation(model, NOISE, LAWS[0], wd, None, w, y), raw, atol=1e-14)
        assert np.allclose(estimating_equation(model, NOISE, LAWS[0], wd, zero, w, y), raw, atol=1e-14)

    def test_single_atom_scalar_case(self):
        # L = 1: U = mean(-B(x1) f'(y - m1)/f(y - m1)) - a(x1), and a(x1) = B(x1) H/A
        kv = make_knots(1)
        wd = WorkingDensity([0.5], [1.0])
        law = LAWS[0]
        w, y = simulate(law, 100, 6)
        model = RegressionModel(kv, np.zeros(5))
        grid = grid_for(law, w, y, wd)
        A, H = build_AH(model, NOISE, law, wd, grid)
        sol = solve_correction(A, H, kv, wd)
        b1 = basis_matrix(kv, [0.5])[0]
        # normal noise: -f'(e)/f(e) = e / var
        expected = b1 * np.mean(y) / NOISE.variance - b1 * H[0, 0] / A[0, 0]
        assert np.allclose(estimating_equation(model, NOISE, law, wd, sol, w, y), expected, atol=1e-12)

    def test_residual_identity_along_iterates(self):
        law = LAWS[1]
        w, y = simulate(law, 300, 7)
        kv = make_knots(1)
        fit = fit_regression(kv, NOISE, law, WorkingDensity.uniform(6), w, y)
        assert fit.max_residual < 1e-8


class TestFit:
    def test_converges(self):
        law = LAWS[0]
        w, y = simulate(law, 500, 8)
        kv = make_knots(2)
        fit = fit_regression(kv, NOISE, law, default_working_density(kv), w, y)
        assert fit.converged and fit.eq_norm < 1e-7
        x = np.linspace(0.1, 0.9, 81)
        assert np.max(np.abs(fit.model.predict(x) - np.sin(2 * np.pi * x))) < 0.5

    def test_zero_error_limit(self):
        # working support at the observed W: the posterior collapses onto each
        # observation and the equation reduces to the least-squares normal equations
        law = ErrorLaw("uniform", 1e-6)
        rng = np.random.default_rng(9)
        x = np.sort(rng.uniform(0, 1, 80))
        y = np.sin(2 * np.pi * x) + NOISE.sample(rng, 80)
        kv = make_knots(1)
        wd = WorkingDensity(x, np.full(80, 1 / 80))
        fit = fit_regression(kv, NOISE, law, wd, x, y, beta0=np.zeros(kv.basis_dim))
        assert fit.converged and fit.iterations >= 1
        grid = np.linspace(0, 1, 201)
        naive = RegressionModel(kv, naive_spline_fit(kv, x, y)).predict(grid)
        assert np.max(np.abs(fit.model.predict(grid) - naive)) < 1e-2

    def test_all_observations_degenerate(self):
        x = np.linspace(0.2, 0.8, 20)
        eq = RegressionEquation(make_knots(1), NOISE, ErrorLaw("uniform", 1e-3), WorkingDensity.uniform(2), x, x,
                                RegressionFitOptions(max_excluded_frac=1.0))
        with pytest.raises(DegenerateDataError):
            eq.evaluate(np.zeros(5))

    def test_too_few_observations(self):
        kv = make_knots(2)
        with pytest.raises(ValueError):
            fit_regression(kv, NOISE, LAWS[0], WorkingDensity.uniform(3), [0.2, 0.5], [0.1, 0.2])

    def test_nonconvergence_flagged(self):
        w, y = simulate(LAWS[0], 200, 10)
        kv = make_knots(1)
        fit = fit_regression(kv, NOISE, LAWS[0], WorkingDensity.uniform(6), w, y, RegressionFitOptions(max_iter=0))
        assert not fit.converged and fit.iterations == 0
        assert set(fit.to_dict()) >= {"beta", "converged", "eq_norm"}

    def test_equation_caches_by_beta(self):
        w, y = simulate(LAWS[0], 100, 11)
        kv = make_knots(1)
        eq = RegressionEquation(kv, NOISE, LAWS[0], WorkingDensity.uniform(4), w, y)
        beta = np.zeros(5)
        assert eq.evaluate(beta) is eq.evaluate(beta.copy())

    def test_working_robustness(self):
        from splinedeconv.sim_harness import SimDesign, generate, metric_grid, true_regression

        design = SimDesign("regression", "II.a", 2000, replicates=8, seed=3)
        kv, law = design.knots, design.law
        x = metric_grid()
        mae = {"uniform": [], "triangular": []}
        for r in range(design.replicates):
            data = generate(design, r)
            for shape in mae:
                wd = getattr(WorkingDensity, shape)(25)
                fit = fit_regression(kv, NOISE, law, wd, data.w, data.y)
                assert fit.converged
                mae[shape].append(np.max(np.abs(fit.model.predict(x) - true_regression(x))))
        a, b = np.array(mae["uniform"]), np.array(mae["triangular"])
        se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(a.size)
        assert abs(a.mean() - b.mean()) < 2 * se
