"""Dense linear algebra, reproducible RNG streams, and Gaussian sampling.

All numerics are float64. Arrays are plain numpy ndarrays in row-major
order; shape checks happen at module boundaries so downstream code can
assume consistent dimensions.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    """Raised when array dimensions do not match an operation's contract."""


class NotSpdError(ValueError):
    """Raised when a matrix expected to be symmetric positive definite is not."""


class Rng:
    """Reproducible random stream keyed by a 64-bit seed.

    Backed by the counter-based Philox generator, so identical seeds give
    identical streams across runs and platforms. Child streams derived via
    `child(*key)` depend only on (seed, key), which makes per-record and
    per-stage generation reproducible regardless of evaluation order.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed) if _seq is None else _seq
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def child(self, *key: int) -> "Rng":
        """Independent stream determined by this stream's seed and `key`."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in key))
        return Rng(self.seed, _seq=seq)

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def as_matrix(a, name="array") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def cholesky(m, sym_tol: float = 1e-10) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    m = as_matrix(m, "m")
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix must be square, got {m.shape}")
    denom = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > sym_tol * denom:
        raise NotSpdError("matrix is not symmetric within tolerance")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotSpdError("matrix is not positive definite") from exc


class SpdMatrix:
    """Symmetric positive definite matrix stored via its lower Cholesky factor.

    One factorization up front makes sampling, solves, and log-determinants
    O(d^2) afterwards.
    """

    def __init__(self, chol_lower: np.ndarray):
        L = as_matrix(chol_lower, "chol_lower")
        if L.shape[0] != L.shape[1]:
            raise ShapeError(f"Cholesky factor must be square, got {L.shape}")
        if np.any(np.diag(L) <= 0.0):
            raise NotSpdError("Cholesky factor must have strictly positive diagonal")
        self.chol = L

    @property
    def dim(self) -> int:
        return self.chol.shape[0]

    @classmethod
    def from_dense(cls, m, sym_tol: float = 1e-10) -> "SpdMatrix":
        return cls(cholesky(m, sym_tol=sym_tol))

    @classmethod
    def identity(cls, d: int) -> "SpdMatrix":
        return cls(np.eye(d))

    @classmethod
    def diagonal(cls, diag) -> "SpdMatrix":
        diag = np.asarray(diag, dtype=np.float64)
        if np.any(diag <= 0.0):
            raise NotSpdError("diagonal entries must be positive")
        return cls(np.diag(np.sqrt(diag)))

    def dense(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def solve(self, b) -> np.ndarray:
        """Solve m x = b via two triangular solves."""
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.dim:
            raise ShapeError(f"rhs has leading dim {b.shape[0]}, expected {self.dim}")
        w = solve_triangular(self.chol, b, lower=True)
        return solve_triangular(self.chol.T, w, lower=False)

    def inverse_dense(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def quad_form(self, v) -> np.ndarray:
        """v^T m^{-1} v, batched over trailing columns of v."""
        w = solve_triangular(self.chol, np.asarray(v, dtype=np.float64), lower=True)
        return np.sum(w * w, axis=0)


def solve_spd(m, b) -> np.ndarray:
    """Solve m x = b for SPD m given as a dense matrix."""
    return SpdMatrix.from_dense(m).solve(b)


def sample_gaussian(rng: Rng, mean, cov: SpdMatrix) -> np.ndarray:
    """One draw from N(mean, cov) as mean + L z with z standard normal."""
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (cov.dim,):
        raise ShapeError(f"mean shape {mean.shape} does not match cov dim {cov.dim}")
    z = rng.standard_normal(cov.dim)
    return mean + cov.chol @ z


def sample_gaussian_batch(rng: Rng, mean, cov: SpdMatrix, n: int) -> np.ndarray:
    """n draws from N(mean, cov), one per row."""
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (cov.dim,):
        raise ShapeError(f"mean shape {mean.shape} does not match cov dim {cov.dim}")
    z = rng.standard_normal((n, cov.dim))
    return mean[None, :] + z @ cov.chol.T
