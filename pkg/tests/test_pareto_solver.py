import numpy as np
import pytest

from cau_utils import SolverError
from pareto_solver import combine, gram, normalize_gradients, objective, solve_min_norm

TOL = 1e-6


def simplex_grid(step=0.01):
    n = int(round(1 / step))
    points = [(i, j, n - i - j) for i in range(n + 1) for j in range(n + 1 - i)]
    return np.asarray(points, dtype=np.float64) / n


def random_instances(count=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        dim = int(rng.integers(1, 33))
        yield [rng.normal(size=dim) / np.sqrt(dim) for _ in range(3)]


def assert_simplex(alpha):
    assert np.all(alpha >= 0)
    assert abs(alpha.sum() - 1.0) <= 1e-12


class TestGram:
    def test_identical_gradients(self):
        g = np.array([2.0, 0.0])
        np.testing.assert_array_equal(gram([g, g]), [[4.0, 4.0], [4.0, 4.0]])

    def test_orthonormal(self):
        np.testing.assert_allclose(gram([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), np.eye(2))

    def test_psd(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            M = gram([rng.normal(size=16) for _ in range(4)])
            np.testing.assert_array_equal(M, M.T)
            assert np.linalg.eigvalsh(M).min() >= -1e-8

    def test_length_mismatch(self):
        with pytest.raises(SolverError):
            gram([np.zeros(3), np.zeros(4)])

    @pytest.mark.parametrize("count", [1, 9])
    def test_task_count_bounds(self, count):
        with pytest.raises(SolverError):
            gram([np.ones(2)] * count)


class TestSolveMinNorm:
    def test_opposite_gradients(self):
        g = np.array([1.0, -2.0, 0.5])
        alpha = solve_min_norm(gram([g, -g]))
        np.testing.assert_allclose(alpha, [0.5, 0.5], atol=1e-9)
        assert np.linalg.norm(combine([g, -g], alpha)) < 1e-8

    def test_identical_gradients(self):
        g = np.array([3.0, 4.0])
        M = gram([g, g, g])
        alpha = solve_min_norm(M)
        assert_simplex(alpha)
        assert objective(M, alpha) == pytest.approx(25.0, abs=1e-9)

    def test_worked_example(self):
        gradients = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
        M = gram(gradients)
        alpha = solve_min_norm(M)
        assert_simplex(alpha)
        assert objective(M, alpha) == pytest.approx(0.5, abs=1e-6)
        np.testing.assert_allclose(alpha, [0.5, 0.5, 0.0], atol=1e-6)
        grid = simplex_grid()
        assert abs(objective(M, alpha) - np.einsum("ni,ij,nj->n", grid, M, grid).min()) <= 0.01

    def test_all_zero_gradients_uniform(self):
        np.testing.assert_allclose(solve_min_norm(np.zeros((3, 3))), np.full(3, 1 / 3))

    def test_non_finite_rejected(self):
        M = np.eye(2)
        M[0, 1] = np.nan
        with pytest.raises(SolverError):
            solve_min_norm(M)

    def test_non_square_rejected(self):
        with pytest.raises(SolverError):
            solve_min_norm(np.ones((2, 3)))

    def test_matches_grid_search(self):
        grid = simplex_grid()
        for gradients in random_instances():
            M = gram(gradients)
            alpha = solve_min_norm(M, tol=TOL)
            assert_simplex(alpha)
            best = np.einsum("ni,ij,nj->n", grid, M, grid).min()
            assert abs(objective(M, alpha) - best) <= 0.01
            assert objective(M, alpha) <= best + TOL

    def test_common_descent_direction(self):
        for gradients in random_instances(seed=1):
            alpha = solve_min_norm(gram(gradients), tol=TOL)
            d = combine(gradients, alpha)
            norm_sq = float(d @ d)
            for g in gradients:
                assert g @ d >= norm_sq - TOL * (1 + norm_sq)

    def test_no_worse_than_vertices_or_uniform(self):
        for gradients in random_instances(count=50, seed=2):
            M = gram(gradients)
            value = objective(M, solve_min_norm(M))
            assert value <= M.diagonal().min() + TOL * (1 + value)
            assert value <= objective(M, np.full(3, 1 / 3)) + TOL * (1 + value)

    def test_large_scale_gradients(self):
        rng = np.random.default_rng(4)
        gradients = [1e3 * rng.normal(size=10) for _ in range(3)]
        M = gram(gradients)
        alpha = solve_min_norm(M, tol=TOL)
        d = combine(gradients, alpha)
        for g in gradients:
            assert g @ d >= d @ d - TOL * (1 + d @ d)

    def test_plain_frank_wolfe_still_valid(self):
        for gradients in random_instances(count=20, seed=5):
            M = gram(gradients)
            alpha = solve_min_norm(M, corrective=False, max_iter=1000)
            assert_simplex(alpha)
            assert objective(M, alpha) <= objective(M, np.full(3, 1 / 3)) + 1e-12


class TestCombine:
    def test_vertex(self):
        gradients = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])]
        np.testing.assert_array_equal(combine(gradients, np.array([1.0, 0.0, 0.0])), gradients[0])

    def test_identical_gradients(self):
        g = np.array([0.5, -1.5])
        np.testing.assert_allclose(combine([g, g, g], np.array([0.2, 0.3, 0.5])), g)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        gradients = [rng.normal(size=5) for _ in range(3)]
        a, b = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.1, 0.3])
        np.testing.assert_allclose(
            combine(gradients, a) + combine(gradients, b),
            2 * combine(gradients, (a + b) / 2),
        )

    def test_rejects_non_simplex(self):
        with pytest.raises(SolverError):
            combine([np.ones(2), np.ones(2)], np.array([0.7, 0.7]))


def test_normalize_gradients():
    out = normalize_gradients([np.array([3.0, 4.0]), np.zeros(2)])
    np.testing.assert_allclose(out[0], [0.6, 0.8])
    np.testing.assert_array_equal(out[1], [0.0, 0.0])
