"""Parametric component densities.

Each family has a small frozen parameter record, a vectorised log-density, a
closed-form weighted maximum-likelihood update and a sampler.  The exponential
family is parameterised by its mean, not its rate.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .errors import DecompositionError, DegenerateComponentError, DomainError, MixtureWarning

LOG_2PI = np.log(2.0 * np.pi)
VARIANCE_FLOOR = 1e-10
PIVOT_TOL = 1e-12


class Family(enum.Enum):
    NORMAL = "normal"
    POISSON = "poisson"
    EXPONENTIAL = "exponential"
    MVNORMAL = "mvnormal"
    PANEL_LINEAR = "panel_linear"


@dataclass(frozen=True)
class NormalParams:
    mu: float
    sigma2: float
    family = Family.NORMAL

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise DomainError(f"normal variance must be > 0, got {self.sigma2}")

    def vector(self):
        return np.array([self.mu, self.sigma2])


@dataclass(frozen=True)
class PoissonParams:
    lam: float
    family = Family.POISSON

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise DomainError(f"poisson rate must be > 0, got {self.lam}")

    def vector(self):
        return np.array([self.lam])


@dataclass(frozen=True)
class ExponentialParams:
    mean: float
    family = Family.EXPONENTIAL

    def __post_init__(self):
        if not (np.isfinite(self.mean) and self.mean > 0):
            raise DomainError(f"exponential mean must be > 0, got {self.mean}")

    def vector(self):
        return np.array([self.mean])


@dataclass(frozen=True, eq=False)
class MvNormalParams:
    mu: np.ndarray
    sigma: np.ndarray
    family = Family.MVNORMAL
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise DomainError(f"sigma shape {sigma.shape} does not match mean of length {mu.size}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "chol", cholesky(sigma))

    @property
    def dim(self):
        return self.mu.size

    def vector(self):
        iu = np.triu_indices(self.dim)
        return np.concatenate([self.mu, self.sigma[iu]])

    def __eq__(self, other):
        return (
            isinstance(other, MvNormalParams)
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.sigma, other.sigma)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PanelLinearParams:
    """Linear-Gaussian outcome model ``y = X beta_tilde + alpha + eps``.

    ``beta_tilde`` stacks the slope, the Mundlak coefficient and the T time
    effects.  A single observation has marginal variance
    ``sigma2_alpha + sigma2_eps``.
    """

    beta_tilde: np.ndarray
    sigma2_alpha: float
    sigma2_eps: float
    family = Family.PANEL_LINEAR

    def __post_init__(self):
        object.__setattr__(self, "beta_tilde", np.asarray(self.beta_tilde, dtype=float).ravel())
        if not self.sigma2_alpha >= 0:
            raise DomainError(f"sigma2_alpha must be >= 0, got {self.sigma2_alpha}")
        if not self.sigma2_eps > 0:
            raise DomainError(f"sigma2_eps must be > 0, got {self.sigma2_eps}")

    @property
    def total_variance(self):
        return self.sigma2_alpha + self.sigma2_eps

    @property
    def beta(self):
        return float(self.beta_tilde[0])

    @property
    def gamma(self):
        return float(self.beta_tilde[1])

    @property
    def delta(self):
        return self.beta_tilde[2:]

    def omega(self, periods):
        """T x T covariance of one unit's outcomes under this component."""
        return self.sigma2_alpha * np.ones((periods, periods)) + self.sigma2_eps * np.eye(periods)

    def vector(self):
        return np.concatenate([self.beta_tilde, [self.sigma2_alpha, self.sigma2_eps]])

    def __eq__(self, other):
        return (
            isinstance(other, PanelLinearParams)
            and np.array_equal(self.beta_tilde, other.beta_tilde)
            and self.sigma2_alpha == other.sigma2_alpha
            and self.sigma2_eps == other.sigma2_eps
        )

    __hash__ = None


ComponentParams = NormalParams | PoissonParams | ExponentialParams | MvNormalParams | PanelLinearParams


def cholesky(sigma):
    """Lower Cholesky factor; rejects asymmetric matrices and pivots below 1e-12."""
    sigma = np.asarray(sigma, dtype=float)
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12):
        raise DecompositionError("covariance matrix is not symmetric")
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"covariance matrix is not positive definite: {exc}") from None
    if np.any(np.diag(L) < PIVOT_TOL) or not np.all(np.isfinite(L)):
        raise DecompositionError("covariance matrix is numerically singular")
    return L


@dataclass(frozen=True, eq=False)
class MixtureModel:
    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(comps) < 1:
            raise DomainError("a mixture needs at least one component")
        if w.size != len(comps):
            raise DomainError(f"{len(comps)} components but {w.size} weights")
        if len({c.family for c in comps}) != 1:
            raise DomainError("mixture components must share one family")
        if len(comps) == 1:
            if abs(w[0] - 1.0) > 1e-12:
                raise DomainError("a one-component mixture has weight 1")
        elif np.any(w <= 0) or np.any(w >= 1):
            raise DomainError(f"mixing weights must lie in (0, 1), got {w}")
        if abs(w.sum() - 1.0) > 1e-12:
            raise DomainError(f"mixing weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)
        for a in range(len(comps)):
            for b in range(a + 1, len(comps)):
                if comps[a] == comps[b]:
                    warnings.warn(f"components {a} and {b} have identical parameters", MixtureWarning)

    @property
    def family(self):
        return self.components[0].family

    @property
    def n_components(self):
        return len(self.components)

    def permuted(self, order):
        order = list(order)
        return MixtureModel(tuple(self.components[k] for k in order), self.weights[order])


def _check_support(family, y):
    if not np.all(np.isfinite(y)):
        raise DomainError(f"{family.value}: non-finite observation")
    if family is Family.POISSON:
        bad = (y < 0) | (y != np.floor(y))
        if np.any(bad):
            raise DomainError(f"poisson: observation {y[bad].flat[0]!r} is not a nonnegative integer")
    elif family is Family.EXPONENTIAL:
        if np.any(y < 0):
            raise DomainError(f"exponential: observation {y[y < 0].flat[0]!r} is negative")


def logpdf(params, obs):
    """Vectorised log-density.

    ``obs`` is a 1-d array for univariate families, an ``(n, p)`` array for the
    multivariate normal and a ``(y, X)`` pair for the panel-linear family.
    """
    fam = params.family
    if fam is Family.PANEL_LINEAR:
        y, X = obs
        y = np.asarray(y, dtype=float)
        mean = np.asarray(X, dtype=float) @ params.beta_tilde
        s2 = params.total_variance
        return -0.5 * (LOG_2PI + np.log(s2)) - 0.5 * (y - mean) ** 2 / s2
    y = np.asarray(obs, dtype=float)
    _check_support(fam, y)
    if fam is Family.NORMAL:
        return -0.5 * (LOG_2PI + np.log(params.sigma2)) - 0.5 * (y - params.mu) ** 2 / params.sigma2
    if fam is Family.POISSON:
        return y * np.log(params.lam) - params.lam - gammaln(y + 1.0)
    if fam is Family.EXPONENTIAL:
        return -np.log(params.mean) - y / params.mean
    if fam is Family.MVNORMAL:
        L = params.chol
        single = y.ndim == 1
        Y = np.atleast_2d(y)
        if Y.shape[-1] != params.dim:
            raise DomainError(f"mvnormal: observation dimension {Y.shape[-1]} != {params.dim}")
        r = np.linalg.solve(L, (Y - params.mu).T) if params.dim > 0 else np.zeros((0, Y.shape[0]))
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out = -0.5 * (params.dim * LOG_2PI + logdet + (r**2).sum(axis=0))
        return out[0] if single else out
    raise DomainError(f"unknown family {fam}")


def log_density(params, obs):
    """log f(obs | params) for a single observation."""
    return float(np.asarray(logpdf(params, obs)).reshape(-1)[0])


def _degenerate(group, msg):
    return DegenerateComponentError(group if group is not None else -1, msg)


def weighted_mle(family, observations, weights, group=None):
    """Closed-form maximiser of sum_i w_i log f(y_i | theta).

    Variances use the divisor sum(w) and are floored at 1e-10.  ``group`` only
    labels the degenerate-component error.
    """
    family = Family(family)
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise _degenerate(group, "zero total weight")

    if family is Family.PANEL_LINEAR:
        y, X = observations
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        s2 = max(float(w @ (y - X @ coef) ** 2 / total), VARIANCE_FLOOR)
        return PanelLinearParams(coef, 0.0, s2)

    y = np.asarray(observations, dtype=float)
    _check_support(family, y)
    active = w > 0

    if family is Family.NORMAL:
        ya = y[active]
        if ya.size < 2 or ya.min() == ya.max():
            raise _degenerate(group, "all weight on a single point")
        mu = float(w @ y / total)
        s2 = float(w @ (y - mu) ** 2 / total)
        return NormalParams(mu, max(s2, VARIANCE_FLOOR))
    if family is Family.POISSON:
        lam = float(w @ y / total)
        if not lam > 0:
            raise _degenerate(group, "weighted mean of counts is zero")
        return PoissonParams(lam)
    if family is Family.EXPONENTIAL:
        m = float(w @ y / total)
        if not m > 0:
            raise _degenerate(group, "weighted mean is zero")
        return ExponentialParams(m)
    if family is Family.MVNORMAL:
        Y = np.atleast_2d(y)
        if np.unique(Y[active], axis=0).shape[0] < 2:
            raise _degenerate(group, "all weight on a single point")
        mu = w @ Y / total
        R = Y - mu
        sigma = (R * w[:, None]).T @ R / total
        sigma = 0.5 * (sigma + sigma.T)
        try:
            return MvNormalParams(mu, sigma)
        except DecompositionError as exc:
            raise _degenerate(group, f"weighted covariance singular ({exc})") from None
    raise DomainError(f"unknown family {family}")


def sample(params, n, rng):
    """Draw ``n`` i.i.d. observations with the caller's ``numpy`` Generator."""
    if n < 0:
        raise DomainError("sample size must be >= 0")
    fam = params.family
    if fam is Family.NORMAL:
        return params.mu + np.sqrt(params.sigma2) * rng.standard_normal(n)
    if fam is Family.POISSON:
        return rng.poisson(params.lam, n).astype(float)
    if fam is Family.EXPONENTIAL:
        return rng.exponential(params.mean, n)
    if fam is Family.MVNORMAL:
        z = rng.standard_normal((n, params.dim))
        return params.mu + z @ params.chol.T
    raise DomainError(f"sampling is not defined for {fam.value} (needs covariates)")


def moments(params):
    """Mean vector and covariance matrix of a component, used by distance classifiers."""
    fam = params.family
    if fam is Family.NORMAL:
        return np.array([params.mu]), np.array([[params.sigma2]])
    if fam is Family.POISSON:
        return np.array([params.lam]), np.array([[params.lam]])
    if fam is Family.EXPONENTIAL:
        return np.array([params.mean]), np.array([[params.mean**2]])
    if fam is Family.MVNORMAL:
        return params.mu, params.sigma
    raise DomainError(f"moments are not defined for {fam.value}")


def params_from_vector(family, vec, dim=None):
    """Inverse of ``params.vector()``; used by numerical checks."""
    family = Family(family)
    vec = np.asarray(vec, dtype=float)
    if family is Family.NORMAL:
        return NormalParams(float(vec[0]), float(vec[1]))
    if family is Family.POISSON:
        return PoissonParams(float(vec[0]))
    if family is Family.EXPONENTIAL:
        return ExponentialParams(float(vec[0]))
    if family is Family.MVNORMAL:
        mu = vec[:dim]
        S = np.zeros((dim, dim))
        S[np.triu_indices(dim)] = vec[dim:]
        S = S + np.triu(S, 1).T
        return MvNormalParams(mu, S)
    raise DomainError(f"no vector form for {family.value}")


def family_of(components: Sequence) -> Family:
    return components[0].family
