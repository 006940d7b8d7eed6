"""Concrete belief states for reward learning.

Three conjugate families:

* :class:`IndependentGaussianBelief` -- one Gaussian per action reward,
  updated by precision weighting.
* :class:`CorrelatedGaussianBelief` -- a joint Gaussian over the reward
  vector, updated by rank-one conditioning on a noisy scalar observation.
* :class:`NigLinearBelief` -- normal-inverse-gamma posterior for the
  quadratic-in-psi linear model ``y = t1*psi^2 + t2*psi + t3 + N(0, t4^2)``
  under the standard non-informative prior, which becomes proper once the
  design matrix has full column rank and at least four observations exist.

All beliefs are immutable values: updates return new instances, and
``sample_thetas`` makes each of them usable by the Monte Carlo backend of
:mod:`mocu_design.core`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "CorrelatedGaussianBelief",
    "ImproperPosteriorError",
    "InconsistentObservationError",
    "IndependentGaussianBelief",
    "NigLinearBelief",
    "StudentT",
    "quadratic_basis",
]


class InconsistentObservationError(ValueError):
    """A noise-free observation contradicts an already certain belief."""


class ImproperPosteriorError(RuntimeError):
    """The posterior is still improper (not enough data to normalize it)."""


def quadratic_basis(psi) -> np.ndarray:
    """Feature map [psi^2, psi, 1]; accepts scalars or 1-D arrays."""
    psi = np.asarray(psi, dtype=float)
    return np.stack([psi**2, psi, np.ones_like(psi)], axis=-1)


class IndependentGaussianBelief:
    """Per-action Gaussian reward beliefs with per-action observation noise."""

    def __init__(self, means, variances, noise_variances):
        m = np.asarray(means, dtype=float)
        v = np.asarray(variances, dtype=float)
        lam = np.asarray(noise_variances, dtype=float)
        if not (m.shape == v.shape == lam.shape) or m.ndim != 1:
            raise ValueError("means, variances and noise variances must be 1-D and equal length")
        if np.any(v < 0) or np.any(lam < 0):
            raise ValueError("variances and noise variances must be nonnegative")
        if not (np.isfinite(m).all() and np.isfinite(v).all() and np.isfinite(lam).all()):
            raise ValueError("belief parameters must be finite")
        for a in (m, v, lam):
            a.flags.writeable = False
        self.means = m
        self.variances = v
        self.noise_variances = lam

    def __len__(self) -> int:
        return len(self.means)

    def updated(self, action: int, observation: float) -> "IndependentGaussianBelief":
        """Precision-weighted conjugate update of one action's reward."""
        beta = self.variances[action]
        lam = self.noise_variances[action]
        y = float(observation)
        if beta == 0.0 and lam == 0.0:
            if y != self.means[action]:
                raise InconsistentObservationError(
                    f"noise-free observation {y} contradicts certain mean "
                    f"{self.means[action]} at action {action}")
            return self
        m = self.means.copy()
        v = self.variances.copy()
        # product form of ((m/beta + y/lam) / (1/beta + 1/lam)): stable at 0
        m[action] = (m[action] * lam + y * beta) / (beta + lam)
        v[action] = beta * lam / (beta + lam)
        return IndependentGaussianBelief(m, v, self.noise_variances)

    def sample_thetas(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.means + np.sqrt(self.variances) * rng.standard_normal((n, len(self)))


class CorrelatedGaussianBelief:
    """Joint Gaussian belief over the reward vector.

    The covariance must be symmetric within 1e-10 with eigenvalues above
    -1e-10; its diagonal plays the role of the per-action variances.
    """

    def __init__(self, mean, covariance, noise_variances):
        m = np.asarray(mean, dtype=float)
        S = np.asarray(covariance, dtype=float)
        lam = np.asarray(noise_variances, dtype=float)
        if m.ndim != 1 or S.shape != (len(m), len(m)) or lam.shape != m.shape:
            raise ValueError("shape mismatch between mean, covariance and noise")
        if not (np.isfinite(m).all() and np.isfinite(S).all() and np.isfinite(lam).all()):
            raise ValueError("belief parameters must be finite")
        if np.any(lam < 0):
            raise ValueError("noise variances must be nonnegative")
        if np.max(np.abs(S - S.T)) > 1e-10:
            raise ValueError("covariance must be symmetric within 1e-10")
        if np.linalg.eigvalsh(S).min() < -1e-10:
            raise ValueError("covariance must be PSD (eigenvalues >= -1e-10)")
        S = 0.5 * (S + S.T)
        for a in (m, S, lam):
            a.flags.writeable = False
        self.mean = m
        self.covariance = S
        self.noise_variances = lam

    def __len__(self) -> int:
        return len(self.mean)

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.covariance)

    def updated(self, action: int, observation: float) -> "CorrelatedGaussianBelief":
        """Rank-one conditioning on a noisy observation of one reward."""
        i = int(action)
        y = float(observation)
        denom = self.noise_variances[i] + self.covariance[i, i]
        if denom == 0.0:
            if y != self.mean[i]:
                raise InconsistentObservationError(
                    f"noise-free observation {y} contradicts certain mean "
                    f"{self.mean[i]} at action {i}")
            return self
        col = self.covariance[:, i]
        m = self.mean + (y - self.mean[i]) / denom * col
        S = self.covariance - np.outer(col, col) / denom
        S = 0.5 * (S + S.T)
        if self.noise_variances[i] == 0.0:
            # exact observation: kill residual round-off in row/column i
            S[i, :] = 0.0
            S[:, i] = 0.0
            m[i] = y
        return CorrelatedGaussianBelief(m, S, self.noise_variances)

    def standardized_update_slopes(self, action: int) -> np.ndarray:
        """Slope of the posterior mean in the standardized outcome.

        After observing action i, the posterior mean vector is
        ``mean + slopes * z`` with z standard normal under the prior
        predictive; slopes are ``cov[:, i] / sqrt(noise_i + cov[i, i])``.
        """
        i = int(action)
        denom = self.noise_variances[i] + self.covariance[i, i]
        if denom <= 0.0:
            raise ValueError(f"noise + variance must be positive at action {i}")
        if self.covariance[i, i] == 0.0:
            return np.zeros(len(self))
        return self.covariance[:, i] / np.sqrt(denom)

    def sample_thetas(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.covariance, size=n,
                                       method="svd")


@dataclass(frozen=True)
class StudentT:
    """Location-scale Student-t parameters (scale may be zero)."""

    location: float
    scale: float
    dof: float

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.scale == 0.0:
            return np.full(n, self.location)
        return self.location + self.scale * rng.standard_t(self.dof, size=n)


class NigLinearBelief:
    """Normal-inverse-gamma posterior for the quadratic reward model.

    Observations are (psi, y) pairs with design row [psi^2, psi, 1].  Under
    the non-informative prior the posterior is improper until at least four
    observations with a rank-3 design are available (three coefficients
    plus the noise variance); from then on the coefficient mean is the
    least-squares solution, the inverse-gamma shape is (n - 3) / 2 and the
    scale is half the residual sum of squares.

    Theta samples are [t1, t2, t3, t4] rows with t4 the noise standard
    deviation, matching the cost oracles in :mod:`mocu_design.bench`.
    """

    RANK_TOL = 1e-9

    def __init__(self, psis=(), ys=()):
        self.psis = tuple(float(p) for p in psis)
        self.ys = tuple(float(y) for y in ys)
        if len(self.psis) != len(self.ys):
            raise ValueError("psis and ys must have equal length")
        if any(not np.isfinite(v) for v in self.psis + self.ys):
            raise ValueError("observations must be finite")

    def __len__(self) -> int:
        return len(self.psis)

    def updated(self, psi: float, y: float) -> "NigLinearBelief":
        return NigLinearBelief(self.psis + (float(psi),), self.ys + (float(y),))

    def updated_batch(self, psis, ys) -> "NigLinearBelief":
        out = self
        for p, y in zip(psis, ys):
            out = out.updated(p, y)
        return out

    @cached_property
    def design_matrix(self) -> np.ndarray:
        if not self.psis:
            return np.zeros((0, 3))
        return quadratic_basis(np.array(self.psis))

    @cached_property
    def design_rank(self) -> int:
        if not self.psis:
            return 0
        return int(np.linalg.matrix_rank(self.design_matrix, tol=self.RANK_TOL))

    @property
    def proper(self) -> bool:
        return len(self) >= 4 and self.design_rank == 3

    def _require_proper(self):
        if not self.proper:
            raise ImproperPosteriorError(
                f"posterior is improper: n={len(self)}, design rank={self.design_rank} "
                "(need n >= 4 and rank 3)")

    @cached_property
    def _posterior_params(self):
        self._require_proper()
        X = self.design_matrix
        y = np.array(self.ys)
        m, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ m
        a = (len(self) - 3) / 2.0
        b = float(resid @ resid) / 2.0
        return m, X.T @ X, a, b

    @property
    def coefficient_mean(self) -> np.ndarray:
        """Posterior coefficient mean m_n (least squares under the flat prior)."""
        return self._posterior_params[0].copy()

    @property
    def scaled_precision(self) -> np.ndarray:
        """V_n^{-1} = X^T X."""
        return self._posterior_params[1].copy()

    @property
    def shape(self) -> float:
        return self._posterior_params[2]

    @property
    def scale(self) -> float:
        return self._posterior_params[3]

    def least_squares_coefficients(self) -> np.ndarray:
        """Plug-in coefficient estimate, defined for any nonempty data set.

        Used as the IBR fallback while the posterior is improper (minimum
        norm solution when the design is rank deficient).
        """
        if not self.psis:
            raise ImproperPosteriorError("no observations yet")
        m, *_ = np.linalg.lstsq(self.design_matrix, np.array(self.ys), rcond=None)
        return m

    def posterior_mean_rewards(self, psi_grid) -> np.ndarray:
        """E[t1*psi^2 + t2*psi + t3] on a grid, plug-in when improper."""
        coeff = (self.coefficient_mean if self.proper
                 else self.least_squares_coefficients())
        return quadratic_basis(np.asarray(psi_grid)) @ coeff

    def sample_thetas(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw [t1, t2, t3, t4] rows: sigma^2 ~ InvGamma(a, b), coef | sigma ~ N."""
        m, xtx, a, b = self._posterior_params
        if b == 0.0:
            sigma2 = np.zeros(n)
        else:
            sigma2 = b / rng.gamma(shape=a, scale=1.0, size=n)
        v = np.linalg.inv(xtx)
        chol = np.linalg.cholesky(0.5 * (v + v.T))
        z = rng.standard_normal((n, 3))
        coeffs = m + np.sqrt(sigma2)[:, None] * (z @ chol.T)
        return np.column_stack([coeffs, np.sqrt(sigma2)])

    def predictive(self, psi: float) -> StudentT:
        """Student-t predictive for a new noisy observation at psi."""
        m, xtx, a, b = self._posterior_params
        phi = quadratic_basis(float(psi))
        scale2 = (b / a) * (1.0 + float(phi @ np.linalg.solve(xtx, phi)))
        return StudentT(location=float(phi @ m),
                        scale=float(np.sqrt(max(scale2, 0.0))),
                        dof=2.0 * a)
