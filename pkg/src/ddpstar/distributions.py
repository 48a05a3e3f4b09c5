"""Random variate generation and densities used by the sampler and the
simulation scenarios.

Conventions: ``Gamma(shape, rate)`` has mean shape/rate; ``IG(a, b)`` is
shape-scale with mean b/(a-1); ``W(nu, S)`` has mean ``nu * S``.
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats
from scipy.linalg import lapack, solve_triangular


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorisation fails.

    ``minor`` is the (1-based) order of the first leading minor that is not
    positive definite.
    """

    def __init__(self, minor: int, what: str = "matrix"):
        self.minor = minor
        super().__init__(f"{what} is not positive definite (leading minor {minor})")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for ``(seed, stream)``; distinct streams are independent."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def cholesky_lower(A, what: str = "matrix") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info), what)
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    return c


def sample_normal(rng, mean=0.0, sd=1.0, size=None):
    return rng.normal(mean, sd, size=size)


def sample_mvn(rng, mean, *, precision=None, covariance=None, chol=None):
    """One multivariate normal draw.

    With ``precision`` the draw solves against its Cholesky factor instead of
    inverting it. ``chol`` may pass a precomputed lower factor of the
    precision.
    """
    mean = np.asarray(mean, dtype=float)
    eps = rng.standard_normal(mean.shape[0])
    if precision is not None or chol is not None:
        if chol is None:
            chol = cholesky_lower(precision, "precision matrix")
        return mean + solve_triangular(chol, eps, lower=True, trans="T")
    if covariance is None:
        raise ValueError("need a precision or a covariance")
    return mean + cholesky_lower(covariance, "covariance matrix") @ eps


def sample_mvn_canonical(rng, precision, linear):
    """Draw from N(Q^-1 b, Q^-1) given precision Q and linear term b."""
    chol = cholesky_lower(precision, "precision matrix")
    eps = rng.standard_normal(len(linear))
    w = solve_triangular(chol, linear, lower=True, check_finite=False)
    return solve_triangular(chol, w + eps, lower=True, trans="T", check_finite=False)


def _positive(name, *vals):
    for v in vals:
        v = np.asarray(v, dtype=float)
        if not (v > 0).all() or not np.isfinite(v).all():
            raise ValueError(f"{name} parameters must be positive and finite, got {vals}")


def sample_gamma(rng, shape, rate, size=None):
    _positive("gamma", shape, rate)
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def sample_inverse_gamma(rng, a, b, size=None):
    _positive("inverse gamma", a, b)
    return np.asarray(b, dtype=float) / rng.gamma(a, 1.0, size=size)


def sample_beta(rng, a, b, size=None):
    _positive("beta", a, b)
    return rng.beta(a, b, size=size)


def sample_beta_with_complement(rng, a, b):
    """Beta draws via two gammas, returning ``(x, log(1 - x))``.

    ``log(1 - x)`` stays accurate when ``x`` rounds to 1 in floating point.
    """
    _positive("beta", a, b)
    la = _log_standard_gamma(rng, np.asarray(a, dtype=float))
    lb = _log_standard_gamma(rng, np.asarray(b, dtype=float))
    lt = np.logaddexp(la, lb)
    return np.exp(la - lt), lb - lt


def _log_standard_gamma(rng, shape):
    """``log G`` for ``G ~ Gamma(shape, 1)``; small shapes use the boost
    ``G(a) = G(a + 1) U^(1/a)`` so the logarithm never underflows."""
    small = shape < 1
    g = rng.standard_gamma(np.where(small, shape + 1, shape))
    u = rng.random(np.shape(shape))
    with np.errstate(divide="ignore"):
        return np.log(g) + np.where(small, np.log(u) / np.where(small, shape, 1.0), 0.0)


def sample_wishart(rng, nu, scale):
    """Wishart draw by the Bartlett decomposition; ``E = nu * scale``."""
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if nu <= p - 1:
        raise ValueError(f"Wishart degrees of freedom {nu} must exceed dimension - 1 = {p - 1}")
    L = cholesky_lower(scale, "Wishart scale matrix")
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(nu - np.arange(p)))
    A[np.tril_indices(p, -1)] = rng.standard_normal(p * (p - 1) // 2)
    LA = L @ A
    return LA @ LA.T


def sample_categorical(rng, weights, size=None):
    """Draw category indices; ``weights`` may have rows (one draw per row)."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("categorical weights must be non-negative")
    if w.ndim == 1:
        p = w / w.sum()
        return rng.choice(len(p), size=size, p=p)
    cw = np.cumsum(w, axis=1)
    u = rng.random(w.shape[0]) * cw[:, -1]
    return np.minimum((u[:, None] >= cw).sum(axis=1), w.shape[1] - 1)


def log_normal_pdf(y, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (y - mean) ** 2 / var)


def _check_scale(name, scale):
    if np.any(np.asarray(scale) <= 0):
        raise ValueError(f"{name} must be positive, got {scale}")


def skew_normal_pdf(y, xi, omega, alpha):
    _check_scale("skew normal scale", omega)
    z = (np.asarray(y, dtype=float) - xi) / omega
    return 2.0 / omega * stats.norm.pdf(z) * special.ndtr(alpha * z)


def skew_normal_cdf(y, xi, omega, alpha):
    _check_scale("skew normal scale", omega)
    return stats.skewnorm.cdf(y, alpha, loc=xi, scale=omega)


def skew_normal_rng(rng, xi, omega, alpha, size=None):
    """Skew-normal draws from the ``delta |U0| + sqrt(1 - delta^2) U1`` construction."""
    _check_scale("skew normal scale", omega)
    delta = alpha / np.sqrt(1 + alpha ** 2)
    u0 = np.abs(rng.standard_normal(size))
    u1 = rng.standard_normal(size)
    return xi + omega * (delta * u0 + np.sqrt(1 - delta ** 2) * u1)


def skew_normal_moments(xi, omega, alpha):
    delta = alpha / np.sqrt(1 + alpha ** 2)
    mean = xi + omega * delta * np.sqrt(2 / np.pi)
    var = omega ** 2 * (1 - 2 * delta ** 2 / np.pi)
    return mean, var


def shifted_t_pdf(y, mu, sigma, nu):
    _check_scale("t scale", sigma)
    _check_scale("t degrees of freedom", nu)
    return stats.t.pdf((np.asarray(y, dtype=float) - mu) / sigma, nu) / sigma


def shifted_t_cdf(y, mu, sigma, nu):
    _check_scale("t scale", sigma)
    _check_scale("t degrees of freedom", nu)
    return stats.t.cdf((np.asarray(y, dtype=float) - mu) / sigma, nu)


def shifted_t_rng(rng, mu, sigma, nu, size=None):
    _check_scale("t scale", sigma)
    _check_scale("t degrees of freedom", nu)
    return mu + sigma * rng.standard_t(nu, size=size)


def shifted_t_moments(mu, sigma, nu):
    var = sigma ** 2 * nu / (nu - 2) if nu > 2 else np.inf
    return mu, var
