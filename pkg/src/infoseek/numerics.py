"""Closed-form information calculus for Dirichlet and diagonal-Gaussian
distributions.

Every entropy, KL divergence, expectation, and sample used by the agents is
routed through this module so there is exactly one implementation of each
formula. All arithmetic is float64.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

__all__ = [
    "DirichletParams",
    "GaussianParams",
    "Simplex",
    "lgamma",
    "digamma",
    "trigamma",
    "log_beta",
    "dirichlet_entropy",
    "dirichlet_entropy_rows",
    "dirichlet_kl",
    "dirichlet_expected_log",
    "dirichlet_mean",
    "dirichlet_mean_rows",
    "dirichlet_sample",
    "gaussian_entropy",
    "gaussian_kl",
    "gaussian_kl_std_normal",
    "gaussian_reparam_sample",
]

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2PIE = float(np.log(2.0 * np.pi * np.e))

SIMPLEX_ATOL = 1e-9


@dataclass
class DirichletParams:
    """Concentration vector of a Dirichlet distribution (N >= 2 categories)."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or self.alpha.size < 2:
            raise ValueError("alpha must be a vector with at least 2 components")
        if not np.all(np.isfinite(self.alpha)) or np.any(self.alpha <= 0.0):
            raise ValueError("alpha components must be finite and strictly positive")

    @property
    def n(self) -> int:
        return self.alpha.size

    @property
    def total(self) -> float:
        return float(self.alpha.sum())


@dataclass
class GaussianParams:
    """Mean and log standard deviation of a diagonal Gaussian."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.mean.shape != self.log_std.shape or self.mean.ndim != 1:
            raise ValueError("mean and log_std must be vectors of equal length")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_std))):
            raise ValueError("Gaussian parameters must be finite")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


@dataclass
class Simplex:
    """Probability vector: nonnegative entries summing to 1 within 1e-9."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ValueError("probs must be a vector")
        if np.any(self.probs < 0.0) or not np.all(np.isfinite(self.probs)):
            raise ValueError("probs must be nonnegative and finite")
        if abs(float(self.probs.sum()) - 1.0) > SIMPLEX_ATOL:
            raise ValueError("probs must sum to 1 within 1e-9")


def _check_positive(x, name: str):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError(f"{name} requires strictly positive finite input")
    return arr


def lgamma(x):
    """Natural log of the gamma function. Scalar in, scalar out; arrays pass
    through elementwise."""
    arr = _check_positive(x, "lgamma")
    out = _sp.gammaln(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def digamma(x):
    """psi(x), the derivative of lgamma."""
    arr = _check_positive(x, "digamma")
    out = _sp.psi(arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def trigamma(x):
    """psi'(x), the derivative of digamma."""
    arr = _check_positive(x, "trigamma")
    out = _sp.polygamma(1, arr)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def log_beta(d: DirichletParams) -> float:
    """log of the multivariate beta function, the Dirichlet normalizer."""
    return float(_sp.gammaln(d.alpha).sum() - _sp.gammaln(d.alpha.sum()))


def _entropy_from_alpha(alpha: np.ndarray) -> np.ndarray:
    """Dirichlet entropy for alpha rows (last axis is the category axis)."""
    a0 = alpha.sum(axis=-1)
    n = alpha.shape[-1]
    logb = _sp.gammaln(alpha).sum(axis=-1) - _sp.gammaln(a0)
    return (
        logb
        + (a0 - n) * _sp.psi(a0)
        - ((alpha - 1.0) * _sp.psi(alpha)).sum(axis=-1)
    )


def dirichlet_entropy(d: DirichletParams) -> float:
    """Differential entropy of Dir(alpha)."""
    return float(_entropy_from_alpha(d.alpha))


def dirichlet_entropy_rows(alpha: np.ndarray) -> np.ndarray:
    """Entropy of each row of a 2-D array of concentration vectors.

    Fast path for action scoring; rows are not validated.
    """
    return _entropy_from_alpha(np.asarray(alpha, dtype=np.float64))


def dirichlet_kl(q: DirichletParams, p: DirichletParams) -> float:
    """KL( Dir(q) || Dir(p) ). Nonnegative; zero iff q == p."""
    if q.n != p.n:
        raise ValueError("dimension mismatch between q and p")
    qa, pa = q.alpha, p.alpha
    expected_log_term = ((qa - pa) * (_sp.psi(qa) - _sp.psi(qa.sum()))).sum()
    return float(log_beta(p) - log_beta(q) + expected_log_term)


def dirichlet_expected_log(d: DirichletParams) -> np.ndarray:
    """E[log z_i] under Dir(alpha): psi(alpha_i) - psi(alpha_0)."""
    return _sp.psi(d.alpha) - _sp.psi(d.alpha.sum())


def dirichlet_mean(d: DirichletParams) -> Simplex:
    """Mean of the Dirichlet: alpha / alpha_0."""
    return Simplex(d.alpha / d.alpha.sum())


def dirichlet_mean_rows(alpha: np.ndarray) -> np.ndarray:
    """Row-normalized means for a 2-D array of concentration vectors."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def dirichlet_sample(d: DirichletParams, rng: np.random.Generator) -> Simplex:
    """One draw from Dir(alpha): normalize independent Gamma(alpha_i, 1)
    variates pulled from the caller's stream."""
    g = rng.gamma(shape=d.alpha)
    total = g.sum()
    if total <= 0.0:
        # all-zero draw is possible for tiny alphas; fall back to the mean
        return dirichlet_mean(d)
    return Simplex(g / total)


def gaussian_entropy(g: GaussianParams) -> float:
    """Differential entropy of a diagonal Gaussian:
    sum_i log sigma_i + (D/2) log(2 pi e)."""
    return float(g.log_std.sum() + 0.5 * g.dim * LOG_2PIE)


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> float:
    """KL( N(q) || N(p) ) for diagonal Gaussians of equal dimension."""
    if q.dim != p.dim:
        raise ValueError("dimension mismatch between q and p")
    var_q = np.exp(2.0 * q.log_std)
    var_p = np.exp(2.0 * p.log_std)
    return float(
        (
            p.log_std
            - q.log_std
            + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p)
            - 0.5
        ).sum()
    )


def gaussian_kl_std_normal(g: GaussianParams) -> float:
    """KL( N(mean, sigma^2 I) || N(0, I) )."""
    return float(
        0.5 * (g.mean**2 + np.exp(2.0 * g.log_std) - 1.0 - 2.0 * g.log_std).sum()
    )


def gaussian_reparam_sample(g: GaussianParams, rng: np.random.Generator) -> np.ndarray:
    """mean + sigma * eps with eps ~ N(0, I) from the caller's stream."""
    return g.mean + g.std * rng.standard_normal(g.dim)
