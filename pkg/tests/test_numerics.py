import numpy as np
import pytest

from mergelab.errors import ShapeError, SingularMatrixError
from mergelab.numerics import Rng, matmul, solve_spd


def naive_matmul(a, b):
    """Triple-loop oracle, deliberately independent of numpy's matmul."""
    r, k = a.shape
    k2, c = b.shape
    out = np.zeros((r, c), dtype=np.float64)
    for i in range(r):
        for j in range(c):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def test_matmul_identity():
    a = np.arange(9, dtype=np.float64).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_zeros():
    b = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(matmul(np.zeros((2, 3)), b), np.zeros((2, 4)))


def test_matmul_against_triple_loop_oracle():
    rng = np.random.default_rng(42)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() <= 1e-12


def test_matmul_oracle_on_100_random_shapes():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        r, k, c = rng.integers(1, 12, size=3)
        a = rng.standard_normal((r, k))
        b = rng.standard_normal((k, c))
        worst = max(worst, np.abs(matmul(a, b) - naive_matmul(a, b)).max())
    assert worst <= 1e-10


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_solve_spd_identity():
    b = np.random.default_rng(1).standard_normal((4, 2))
    assert np.allclose(solve_spd(np.eye(4), b), b, atol=1e-14)


def test_solve_spd_scaled_identity():
    b = np.random.default_rng(2).standard_normal((5, 3))
    assert np.allclose(solve_spd(2.0 * np.eye(5), b), b / 2.0, atol=1e-14)


def test_solve_spd_residual_on_100_random_systems():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 65))
        m = int(rng.integers(1, 5))
        low = rng.standard_normal((n, n))
        a = low @ low.T + np.eye(n)
        b = rng.standard_normal((n, m))
        x = solve_spd(a, b)
        assert np.linalg.norm(a @ x - b) <= 1e-8 * max(np.linalg.norm(b), 1e-30)


def test_solve_spd_rejects_indefinite():
    a = np.diag([1.0, -1.0])
    with pytest.raises(SingularMatrixError):
        solve_spd(a, np.ones((2, 1)))


def test_rng_replays_identically():
    a = Rng(123)
    b = Rng(123)
    assert np.array_equal(a.normal((16,), dtype=np.float64), b.normal((16,), dtype=np.float64))
    assert np.array_equal(a.integers(0, 1000, size=16), b.integers(0, 1000, size=16))


def test_rng_seeds_differ():
    a = Rng(1).normal((16,), dtype=np.float64)
    b = Rng(2).normal((16,), dtype=np.float64)
    assert not np.array_equal(a, b)


def test_rng_split_independent():
    root = Rng(5)
    a = root.split("a").normal((8,), dtype=np.float64)
    b = root.split("b").normal((8,), dtype=np.float64)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, Rng(5).split("a").normal((8,), dtype=np.float64))
