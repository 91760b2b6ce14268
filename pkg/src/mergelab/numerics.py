"""Seeded randomness and the small dense linear-algebra kernel.

Arrays are plain numpy ndarrays: float32 for training runs, float64 for
gradient checking and merge arithmetic. Conversions are explicit at call
sites. All public operations return finite values or raise.
"""
from __future__ import annotations

import hashlib

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ShapeError, SingularMatrixError

# Ordered mapping from parameter name to tensor. Plain dicts preserve
# insertion order, which fixes the layer order everywhere.
ParamSet = dict[str, np.ndarray]

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label) -> int:
    """Stable 64-bit child seed from a parent seed and a stream label."""
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic random stream backed by numpy's Philox generator.

    Philox is counter-based, so an identical seed replays the identical
    draw sequence on every platform. A stream is single-owner; concurrent
    work should receive independent child streams via :meth:`split`.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, label) -> "Rng":
        """Independent child stream derived from this seed and a label."""
        return Rng(derive_seed(self.seed, label))

    def normal(self, shape, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product of two rank-2 arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise FloatingPointError("matmul produced non-finite values")
    return out


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite a (Cholesky).

    The caller guarantees positive definiteness (typically via a ridge
    term); a failed factorization raises SingularMatrixError.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"solve_spd: matrix must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve_spd: rhs shape {b.shape} does not match matrix {a.shape}")
    try:
        factor = cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix of shape {a.shape} is not positive definite: {exc}") from exc
    x = cho_solve(factor, b, check_finite=False)
    if not np.isfinite(x).all():
        raise SingularMatrixError("solve produced non-finite values; matrix is near-singular")
    return x
