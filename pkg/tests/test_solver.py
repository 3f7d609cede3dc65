import numpy as np
import pytest

from rfeps import ConstrainedProblem, SolveStatus, SphericalNormal, \
    check_gradient, minimize
from rfeps.errors import Infeasible, NumericalFailure
from rfeps.solver import equator_frame, framed_normal, project_feasible, \
    sph_embed


def quadratic(Q, c):
    def func(x):
        return 0.5 * float(x @ Q @ x) + float(c @ x), Q @ x + c
    return func


def kkt_solution(Q, c, a, b):
    """Oracle: equality-constrained quadratic optimum via the KKT system."""
    n = len(c)
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = Q
    K[:n, n] = a
    K[n, :n] = a
    rhs = np.concatenate([-c, [b]])
    sol = np.linalg.solve(K, rhs)
    return sol[:n]


class TestMinimize:
    def test_simplex_symmetric(self):
        problem = ConstrainedProblem(
            dim=2, func=quadratic(2 * np.eye(2), np.zeros(2)),
            lower=[0, 0], upper=[1, 1], equalities=[(np.ones(2), 1.0)],
            grad_tol=1e-10)
        x, f, status = minimize(problem, np.array([0.9, 0.1]))
        np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-8)
        assert f == pytest.approx(0.5, abs=1e-8)
        assert status == SolveStatus.CONVERGED

    def test_active_bound(self):
        def func(x):
            return float((x[0] - 3.0) ** 2), np.array([2.0 * (x[0] - 3.0)])
        problem = ConstrainedProblem(dim=1, func=func, lower=[0.0], upper=[1.0])
        x, f, status = minimize(problem, np.array([0.2]))
        assert x[0] == pytest.approx(1.0, abs=1e-12)
        assert f == pytest.approx(4.0, abs=1e-10)

    def test_matches_kkt_oracle(self, rng):
        for _ in range(10):
            n = 10
            A = rng.normal(size=(n, n))
            Q = A @ A.T + 0.5 * np.eye(n)
            # Keep the spectrum benign so first-order convergence is quick.
            w, V = np.linalg.eigh(Q)
            Q = (V * np.clip(w, 0.5, 5.0)) @ V.T
            c = rng.normal(size=n)
            a = np.ones(n)
            b = 1.0
            x_star = kkt_solution(Q, c, a, b)
            problem = ConstrainedProblem(
                dim=n, func=quadratic(Q, c),
                lower=np.full(n, -50.0), upper=np.full(n, 50.0),
                equalities=[(a, b)], grad_tol=1e-9, max_iter=3000)
            x, f, status = minimize(problem, np.zeros(n))
            assert np.abs(x - x_star).max() < 1e-6
            assert abs(float(a @ x) - b) <= 1e-8 * (1.0 + abs(b))

    def test_objective_never_increases(self, rng):
        values = []

        def func(x):
            f = float(np.cos(x[0]) + (x[1] - 2.0) ** 2 + 0.1 * x[0] ** 2)
            g = np.array([-np.sin(x[0]) + 0.2 * x[0], 2.0 * (x[1] - 2.0)])
            return f, g

        problem = ConstrainedProblem(dim=2, func=func,
                                     lower=[-4, -4], upper=[4, 4])
        x0 = np.array([3.0, -3.0])
        f_prev = func(x0)[0]
        x, f, _ = minimize(problem, x0)
        assert f <= f_prev

    def test_infeasible_detected(self):
        with pytest.raises(Infeasible):
            problem = ConstrainedProblem(
                dim=2, func=quadratic(np.eye(2), np.zeros(2)),
                lower=[0, 0], upper=[1, 1], equalities=[(np.ones(2), 5.0)])
            minimize(problem, np.zeros(2))

    def test_numerical_failure_raised(self):
        def func(x):
            return float("nan"), np.zeros(1)
        problem = ConstrainedProblem(dim=1, func=func)
        with pytest.raises(NumericalFailure):
            minimize(problem, np.zeros(1))

    def test_feasibility_of_projection(self, rng):
        # Dykstra fallback path: overlapping non-unit equality rows.
        problem = ConstrainedProblem(
            dim=3, func=quadratic(np.eye(3), np.zeros(3)),
            lower=[0, 0, 0], upper=[1, 1, 1],
            equalities=[(np.array([1.0, 2.0, 0.0]), 1.0),
                        (np.array([0.0, 1.0, 1.0]), 1.0)])
        y = rng.normal(size=3) * 4
        x = project_feasible(problem, y)
        assert (x >= -1e-12).all() and (x <= 1 + 1e-12).all()
        assert abs(x[0] + 2 * x[1] - 1.0) < 1e-8
        assert abs(x[1] + x[2] - 1.0) < 1e-8


class TestCheckGradient:
    def test_quadratic_is_exact(self, rng):
        Q = np.eye(4) * 2.0
        c = rng.normal(size=4)
        problem = ConstrainedProblem(dim=4, func=quadratic(Q, c))
        err = check_gradient(problem, rng.normal(size=4), h=1e-5)
        assert err <= 1e-8

    def test_flags_wrong_gradient(self, rng):
        def func(x):
            return float(x @ x), 2.0 * 2.0 * x  # gradient scaled by 2
        problem = ConstrainedProblem(dim=3, func=func)
        x = rng.normal(size=3) + 1.0
        err = check_gradient(problem, x, h=1e-6)
        assert err > 0.2


class TestSpherical:
    def test_embed_is_unit(self, rng):
        for _ in range(50):
            sn = SphericalNormal(rng.uniform(0, np.pi),
                                 rng.uniform(-np.pi, np.pi))
            assert np.linalg.norm(sn.embed()) == pytest.approx(1.0, abs=1e-15)

    def test_equator_frame_maps_to_equator(self, rng):
        for _ in range(20):
            n0 = rng.normal(size=3)
            n0 /= np.linalg.norm(n0)
            R = equator_frame(n0)
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            n, du, dv = framed_normal(R, np.pi / 2.0, 0.0)
            np.testing.assert_allclose(n, n0, atol=1e-12)
            # Both chart derivatives have full length at the start point.
            assert np.linalg.norm(du) == pytest.approx(1.0, abs=1e-12)
            assert np.linalg.norm(dv) == pytest.approx(1.0, abs=1e-12)

    def test_jacobian_matches_fd(self, rng):
        R = equator_frame(np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8]))
        u, v = 1.1, 0.4
        n, du, dv = framed_normal(R, u, v)
        h = 1e-7
        fd_u = (R.T @ sph_embed(u + h, v) - R.T @ sph_embed(u - h, v)) / (2 * h)
        fd_v = (R.T @ sph_embed(u, v + h) - R.T @ sph_embed(u, v - h)) / (2 * h)
        np.testing.assert_allclose(du, fd_u, atol=1e-8)
        np.testing.assert_allclose(dv, fd_v, atol=1e-8)
