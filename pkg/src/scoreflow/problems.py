"""Inverse problem definitions: forward operators, likelihoods, and scores.

Two concrete problems are provided:

* `LinearGaussianProblem`: y = A x + eps with Gaussian prior and noise.
  Its posterior is Gaussian with a closed form, which serves as the ground
  truth oracle for validating the whole inference pipeline.
* `NonlinearToyProblem`: a small limited-view imaging problem. Parameters
  are g-by-g images with a high-contrast rim; the forward operator blurs
  the image, applies a componentwise saturating nonlinearity, and keeps
  only the top rows. Uncertainty therefore concentrates in the unobserved
  bottom rows.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve, gaussian_filter

from .numerics import LOG_2PI, Rng, ShapeError, SpdMatrix


class InverseProblem:
    """Interface shared by all problems.

    Subclasses set x_dim / y_dim and implement the forward operator,
    log-likelihood, score, and prior sampling. `image_shape` is None for
    non-image parameter vectors.
    """

    x_dim: int
    y_dim: int
    has_analytic_posterior: bool = False
    image_shape: tuple[int, int] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_noise(self, rng: Rng) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, x, y) -> float:
        raise NotImplementedError

    def score(self, x0, y) -> np.ndarray:
        raise NotImplementedError

    def sample_prior(self, rng: Rng) -> np.ndarray:
        raise NotImplementedError

    def default_fiducial(self) -> np.ndarray:
        raise NotImplementedError

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.x_dim,):
            raise ShapeError(f"x must have shape ({self.x_dim},), got {x.shape}")
        return x

    def _check_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.y_dim,):
            raise ShapeError(f"y must have shape ({self.y_dim},), got {y.shape}")
        return y

    def simulate(self, x, rng: Rng) -> np.ndarray:
        """One observation: forward operator plus one noise draw."""
        x = self._check_x(x)
        return self.forward(x) + self.sample_noise(rng)


class AnalyticPosterior:
    """Gaussian posterior with explicit mean and covariance."""

    def __init__(self, mean: np.ndarray, cov: SpdMatrix):
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != (cov.dim,):
            raise ShapeError(f"mean shape {mean.shape} does not match cov dim {cov.dim}")
        self.mean = mean
        self.cov = cov


class LinearGaussianProblem(InverseProblem):
    """y = A x + eps with x ~ N(prior_mean, prior_cov), eps ~ N(0, noise_cov)."""

    has_analytic_posterior = True

    def __init__(self, A, prior_mean, prior_cov: SpdMatrix, noise_cov: SpdMatrix):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2:
            raise ShapeError(f"A must be 2-D, got shape {A.shape}")
        self.A = A
        self.y_dim, self.x_dim = A.shape
        prior_mean = np.asarray(prior_mean, dtype=np.float64)
        if prior_mean.shape != (self.x_dim,):
            raise ShapeError(f"prior mean shape {prior_mean.shape}, expected ({self.x_dim},)")
        if prior_cov.dim != self.x_dim or noise_cov.dim != self.y_dim:
            raise ShapeError("covariance dims do not match A")
        self.prior_mean = prior_mean
        self.prior_cov = prior_cov
        self.noise_cov = noise_cov

    @classmethod
    def replication(cls, x_dim=16, y_dim=64, noise_std=0.1, prior_condition=10.0, seed=2024):
        """The validation configuration: random dense A scaled by 1/sqrt(x_dim),
        random SPD prior covariance with moderate condition number, white noise."""
        rng = Rng(seed)
        A = rng.child(0).standard_normal((y_dim, x_dim)) / np.sqrt(x_dim)
        Q, _ = np.linalg.qr(rng.child(1).standard_normal((x_dim, x_dim)))
        eigs = np.geomspace(1.0, 1.0 / prior_condition, x_dim)
        prior_cov = SpdMatrix.from_dense(Q @ np.diag(eigs) @ Q.T)
        noise_cov = SpdMatrix.diagonal(np.full(y_dim, noise_std**2))
        return cls(A, np.zeros(x_dim), prior_cov, noise_cov)

    def forward(self, x):
        return self.A @ self._check_x(x)

    def sample_noise(self, rng: Rng):
        return self.noise_cov.chol @ rng.standard_normal(self.y_dim)

    def log_likelihood(self, x, y) -> float:
        x = self._check_x(x)
        y = self._check_y(y)
        r = y - self.A @ x
        quad = float(self.noise_cov.quad_form(r))
        return -0.5 * (quad + self.noise_cov.log_det() + self.y_dim * LOG_2PI)

    def score(self, x0, y):
        x0 = self._check_x(x0)
        y = self._check_y(y)
        r = y - self.A @ x0
        return self.A.T @ self.noise_cov.solve(r)

    def sample_prior(self, rng: Rng):
        return self.prior_mean + self.prior_cov.chol @ rng.standard_normal(self.x_dim)

    def default_fiducial(self):
        return np.zeros(self.x_dim)

    def analytic_posterior(self, y) -> AnalyticPosterior:
        """Closed-form Gaussian posterior for the observation y."""
        y = self._check_y(y)
        prior_prec = self.prior_cov.inverse_dense()
        AtSi = self.A.T @ self.noise_cov.inverse_dense()
        precision = prior_prec + AtSi @ self.A
        prec_spd = SpdMatrix.from_dense(0.5 * (precision + precision.T))
        cov = prec_spd.inverse_dense()
        mean = prec_spd.solve(AtSi @ y + prior_prec @ self.prior_mean)
        return AnalyticPosterior(mean, SpdMatrix.from_dense(0.5 * (cov + cov.T)))


def gaussian_kernel_2d(size=3, sigma=1.0) -> np.ndarray:
    """Normalized symmetric 2-D Gaussian kernel."""
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


class NonlinearToyProblem(InverseProblem):
    """Limited-view nonlinear imaging problem on a g-by-g grid.

    Forward map: blur the image with a small symmetric kernel (zero-padded,
    hence self-adjoint), apply v = tanh(alpha * u), and observe the top
    `observed_rows` rows plus white Gaussian noise. The prior is a smooth
    random field inside a fixed high-contrast rim; the default fiducial is
    the rim plus a constant interior (the rim is treated as known).

    The default fiducial interior sits deep in the saturated range of the
    tanh, where the likelihood gradient is nearly flat, so the score
    computed there is weakly informative and the first refinement mostly
    removes the gross offset. Recomputing the score at the moved estimate
    then recovers the fine structure, which is what makes iterative
    refinement measurably better than a single amortized step here.
    """

    def __init__(
        self,
        grid=16,
        observed_rows=6,
        noise_std=0.05,
        nonlin_scale=3.0,
        blur_sigma=1.0,
        interior_base=0.5,
        fiducial_interior=3.0,
        blob_scale=0.8,
        blob_smoothness=2.0,
        rim_center=1.5,
        rim_halfwidth=0.1,
    ):
        if not 1 <= observed_rows <= grid:
            raise ValueError(f"observed_rows must be in [1, {grid}], got {observed_rows}")
        self.grid = int(grid)
        self.observed_rows = int(observed_rows)
        self.x_dim = self.grid * self.grid
        self.y_dim = self.observed_rows * self.grid
        self.noise_std = float(noise_std)
        self.nonlin_scale = float(nonlin_scale)
        self.kernel = gaussian_kernel_2d(3, blur_sigma)
        self.interior_base = float(interior_base)
        self.fiducial_interior = float(fiducial_interior)
        self.blob_scale = float(blob_scale)
        self.blob_smoothness = float(blob_smoothness)
        self.rim_center = float(rim_center)
        self.rim_halfwidth = float(rim_halfwidth)
        self.image_shape = (self.grid, self.grid)
        self._rim_mask = np.zeros((self.grid, self.grid), dtype=bool)
        self._rim_mask[0, :] = self._rim_mask[-1, :] = True
        self._rim_mask[:, 0] = self._rim_mask[:, -1] = True

    def _blur(self, img):
        return convolve(img, self.kernel, mode="constant", cval=0.0)

    def forward(self, x):
        x = self._check_x(x)
        img = x.reshape(self.grid, self.grid)
        v = np.tanh(self.nonlin_scale * self._blur(img))
        return v[: self.observed_rows].ravel()

    def forward_jvp(self, x, u):
        """Directional derivative of the forward map: J(x) u."""
        x = self._check_x(x)
        u = self._check_x(u)
        pre = self.nonlin_scale * self._blur(x.reshape(self.grid, self.grid))
        deriv = self.nonlin_scale * (1.0 - np.tanh(pre) ** 2)
        du = deriv * self._blur(u.reshape(self.grid, self.grid))
        return du[: self.observed_rows].ravel()

    def forward_vjp(self, x, v):
        """Adjoint action J(x)^T v; the blur is self-adjoint under zero padding."""
        x = self._check_x(x)
        v = self._check_y(v)
        pre = self.nonlin_scale * self._blur(x.reshape(self.grid, self.grid))
        deriv = self.nonlin_scale * (1.0 - np.tanh(pre) ** 2)
        full = np.zeros((self.grid, self.grid))
        full[: self.observed_rows] = v.reshape(self.observed_rows, self.grid)
        return self._blur(deriv * full).ravel()

    def sample_noise(self, rng: Rng):
        return self.noise_std * rng.standard_normal(self.y_dim)

    def log_likelihood(self, x, y) -> float:
        r = self._check_y(y) - self.forward(x)
        var = self.noise_std**2
        return -0.5 * (np.sum(r * r) / var + self.y_dim * np.log(var) + self.y_dim * LOG_2PI)

    def score(self, x0, y):
        r = self._check_y(y) - self.forward(x0)
        return self.forward_vjp(x0, r / self.noise_std**2)

    def sample_prior(self, rng: Rng):
        field = gaussian_filter(
            rng.standard_normal((self.grid, self.grid)),
            sigma=self.blob_smoothness,
            mode="constant",
        )
        # smoothing shrinks the pointwise std; rescale to the configured level
        field *= self.blob_scale / max(field.std(), 1e-12)
        img = self.interior_base + field
        rim = self.rim_center + rng.uniform(
            -self.rim_halfwidth, self.rim_halfwidth, int(self._rim_mask.sum())
        )
        img[self._rim_mask] = rim
        return img.ravel()

    def default_fiducial(self):
        img = np.full((self.grid, self.grid), self.fiducial_interior)
        img[self._rim_mask] = self.rim_center
        return img.ravel()

    def bottom_row_mask(self) -> np.ndarray:
        """Flat mask of pixels in the unobserved bottom rows."""
        m = np.zeros((self.grid, self.grid), dtype=bool)
        m[self.observed_rows :] = True
        return m.ravel()

    def top_row_mask(self) -> np.ndarray:
        m = np.zeros((self.grid, self.grid), dtype=bool)
        m[: self.observed_rows] = True
        return m.ravel()
