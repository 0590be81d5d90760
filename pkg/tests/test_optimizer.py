import numpy as np
import pytest

from histreg import (Affine, InvalidInputError, LeastSquares, NgfConfig,
                     NgfDistance, StopRules, gauss_newton, lbfgs)
from histreg.pipeline import _ParamObjective
from synthdata import resample, textured_image


class TestGaussNewton:
    def test_linear_residuals_converge_in_one_iteration(self):
        a = np.array([2.0, -3.0, 0.5])
        obj = LeastSquares(lambda x: x - a, lambda x: np.eye(3))
        x, trace = gauss_newton(obj, np.zeros(3))
        assert np.allclose(x, a, atol=1e-10)
        assert trace.n_iterations == 1

    def test_rosenbrock_reaches_tight_gradient(self):
        # minimum (1, 1) with value 0 is the analytic oracle
        def residuals(x):
            return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

        def jacobian(x):
            return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])

        obj = LeastSquares(residuals, jacobian)
        rules = StopRules(max_iterations=200, grad_tol=1e-12, step_tol=1e-14,
                          obj_tol=1e-16)
        x, trace = gauss_newton(obj, np.array([-1.2, 1.0]), rules)
        assert min(trace.grad_norms) < 1e-6
        assert trace.n_iterations <= 200
        assert np.allclose(x, [1.0, 1.0], atol=1e-6)

    def test_stationary_start_returns_immediately(self):
        a = np.array([1.0, 2.0])
        obj = LeastSquares(lambda x: x - a, lambda x: np.eye(2))
        x, trace = gauss_newton(obj, a.copy())
        assert trace.n_iterations == 0
        assert trace.reason == "grad_tol"
        assert np.array_equal(x, a)

    def test_objective_trace_non_increasing(self):
        def residuals(x):
            return np.array([x[0] ** 2 - x[1], x[0] - 1.0, 0.5 * x[1]])

        def jacobian(x):
            return np.array([[2 * x[0], -1.0], [1.0, 0.0], [0.0, 0.5]])

        _, trace = gauss_newton(LeastSquares(residuals, jacobian),
                                np.array([3.0, -2.0]))
        assert all(a >= b - 1e-15 for a, b in zip(trace.objectives, trace.objectives[1:]))

    def test_deterministic(self):
        def residuals(x):
            return np.array([np.sin(x[0]) + 0.5 * x[1], x[1] - 0.3])

        def jacobian(x):
            return np.array([[np.cos(x[0]), 0.5], [0.0, 1.0]])

        runs = [gauss_newton(LeastSquares(residuals, jacobian), np.array([2.0, 2.0]))
                for _ in range(2)]
        assert np.array_equal(runs[0][0], runs[1][0])
        assert runs[0][1].objectives == runs[1][1].objectives


class TestLbfgs:
    def quadratic(self, d):
        d = np.asarray(d, dtype=np.float64)

        def fn(x):
            return float(x @ (d * x)), 2.0 * d * x

        return fn

    def test_convex_quadratic(self):
        fn = self.quadratic([1.0, 4.0, 0.5, 9.0])
        rules = StopRules(max_iterations=100, grad_tol=1e-12, step_tol=1e-14,
                          obj_tol=1e-16)
        x, trace = lbfgs(fn, np.array([3.0, -1.0, 2.5, 0.7]), memory=10, rules=rules)
        assert np.linalg.norm(fn(x)[1]) < 1e-8

    def test_memory_one_still_converges(self):
        fn = self.quadratic([1.0, 4.0])
        rules = StopRules(max_iterations=200, grad_tol=1e-13, step_tol=1e-15,
                          obj_tol=1e-18)
        x, _ = lbfgs(fn, np.array([2.0, 2.0]), memory=1, rules=rules)
        assert np.linalg.norm(fn(x)[1]) < 1e-8

    def test_memory_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            lbfgs(self.quadratic([1.0]), np.array([1.0]), memory=0)

    def test_stationary_start(self):
        x, trace = lbfgs(self.quadratic([1.0, 1.0]), np.zeros(2))
        assert trace.n_iterations == 0
        assert trace.reason == "grad_tol"

    def test_line_search_failure_returns_best_so_far(self):
        # inconsistent "gradient" makes every Armijo trial fail
        def fn(x):
            return float(abs(x[0])), np.array([1.0])

        x, trace = lbfgs(fn, np.array([0.0]))
        assert trace.reason == "line_search_failed"
        assert x[0] == 0.0

    def test_trace_non_increasing(self):
        def rosen(x):
            f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
            g = np.array([-400.0 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]),
                          200.0 * (x[1] - x[0] ** 2)])
            return f, g

        rules = StopRules(max_iterations=150, grad_tol=1e-10, step_tol=1e-12,
                          obj_tol=1e-14)
        x, trace = lbfgs(rosen, np.array([-1.2, 1.0]), rules=rules)
        assert all(a >= b - 1e-12 for a, b in zip(trace.objectives, trace.objectives[1:]))
        assert np.allclose(x, [1.0, 1.0], atol=1e-5)


class TestCrossOptimizer:
    def test_lbfgs_matches_gauss_newton_on_affine_registration(self):
        # physical origin at the content center: affine parameters then
        # decouple from the translation and the minimizer is well determined
        base = textured_image(size=64, seed=3, smooth=2.5, margin=0.12)
        c = (64 - 1) / 2.0
        ref = type(base)(base.data, spacing=1.0, origin=(-c, -c))
        true = Affine(1.0, 0.0, 0.0, 1.0, 2.0, -1.5)
        inv = np.linalg.inv(true.matrix)
        tmpl = resample(ref, lambda pts: (np.atleast_2d(pts) - true.offset) @ inv.T)
        dist = NgfDistance(ref, tmpl, NgfConfig(0.01))
        obj = _ParamObjective(dist, Affine)
        rules = StopRules(max_iterations=300, grad_tol=1e-10, step_tol=1e-13,
                          obj_tol=1e-14)
        x_gn, _ = gauss_newton(obj, Affine.identity().params(), rules)
        x_lb, _ = lbfgs(obj, Affine.identity().params(), memory=10, rules=rules)
        pts = np.array([[0.0, 0.0], [15.0, 0.0], [0.0, 15.0], [-15.0, -15.0], [15.0, 15.0]])
        delta = Affine.from_params(x_gn).apply(pts) - Affine.from_params(x_lb).apply(pts)
        assert np.abs(delta).max() < 0.1 * ref.spacing
