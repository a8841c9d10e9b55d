"""Hard classifiers, misclassification rates and distance oracles."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import densities
from .densities import Family, cholesky
from .errors import DimensionError, DomainError

HUNGARIAN_ABOVE = 8


class Rule(enum.Enum):
    JOINT_DENSITY = "joint_density"
    EUCLIDEAN = "euclidean"
    MAHALANOBIS = "mahalanobis"


class FeatureSource(enum.Enum):
    OUTCOME = "outcome"
    COVARIATES = "covariates"
    JOINT = "joint"


@dataclass(frozen=True)
class ClassifierSpec:
    rule: Rule = Rule.JOINT_DENSITY
    feature_source: FeatureSource = FeatureSource.OUTCOME

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule(self.rule))
        object.__setattr__(self, "feature_source", FeatureSource(self.feature_source))
        if self.feature_source is FeatureSource.JOINT and self.rule is not Rule.JOINT_DENSITY:
            raise DomainError("joint outcome/covariate features need the joint-density rule")


@dataclass(frozen=True, eq=False)
class Assignment:
    """N x G membership matrix, either one-hot rows or row-stochastic responsibilities.

    A hard assignment may carry all-zero rows for observations that were
    excluded from fitting (null label).
    """

    matrix: np.ndarray
    kind: str = "hard"

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", m)
        if self.kind == "hard":
            rows = m.sum(axis=1)
            if not (np.all((m == 0) | (m == 1)) and np.all((rows == 1) | (rows == 0))):
                raise DomainError("hard assignment rows must be one-hot")
        elif self.kind == "soft":
            if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-12):
                raise DomainError("soft assignment rows must be nonnegative and sum to 1")
        else:
            raise DomainError(f"unknown assignment kind {self.kind!r}")

    @classmethod
    def from_labels(cls, labels, n_groups):
        labels = np.asarray(labels, dtype=int)
        m = np.zeros((labels.size, n_groups))
        ok = labels >= 0
        m[np.flatnonzero(ok), labels[ok]] = 1.0
        return cls(m, "hard")

    @property
    def labels(self):
        """Integer group per row (argmax); -1 for null rows."""
        lab = self.matrix.argmax(axis=1)
        if self.kind == "hard":
            lab[self.matrix.sum(axis=1) == 0] = -1
        return lab

    @property
    def n_groups(self):
        return self.matrix.shape[1]

    def hardened(self):
        return Assignment.from_labels(self.matrix.argmax(axis=1), self.n_groups)

    def __len__(self):
        return self.matrix.shape[0]


def mahalanobis_sq(x, mean, cov):
    """Squared Mahalanobis distances of the rows of ``x`` via a Cholesky solve."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    L = cholesky(np.atleast_2d(cov))
    r = np.linalg.solve(L, (x - np.atleast_1d(mean)).T)
    return (r**2).sum(axis=0)


def _as_rows(y):
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def discriminants(spec, data, components, covariates=None, covariate_params=None):
    """N x G matrix of discriminant values h_j for each observation.

    ``data`` is the outcome array in the components' family format.
    ``covariates`` (N x q) and ``covariate_params`` (multivariate normal per
    group) are needed when the features include covariates.
    """
    spec = spec if isinstance(spec, ClassifierSpec) else ClassifierSpec(*spec)
    G = len(components)
    src = spec.feature_source

    if spec.rule is Rule.JOINT_DENSITY:
        cols = []
        for g in range(G):
            h = 0.0
            if src in (FeatureSource.OUTCOME, FeatureSource.JOINT):
                h = h + densities.logpdf(components[g], data)
            if src in (FeatureSource.COVARIATES, FeatureSource.JOINT):
                h = h + densities.logpdf(covariate_params[g], covariates)
            cols.append(np.broadcast_to(h, (_n_obs(data, covariates),)))
        return np.column_stack(cols)

    if src is FeatureSource.OUTCOME:
        feats = _as_rows(data)
        mom = [densities.moments(c) for c in components]
    else:
        feats = _as_rows(covariates)
        mom = [(c.mu, c.sigma) for c in covariate_params]
    out = np.empty((feats.shape[0], G))
    for g, (mean, cov) in enumerate(mom):
        if spec.rule is Rule.EUCLIDEAN:
            out[:, g] = -((feats - mean) ** 2).sum(axis=1)
        else:
            out[:, g] = -mahalanobis_sq(feats, mean, cov)
    return out


def _n_obs(data, covariates):
    if isinstance(data, tuple):
        return len(data[0])
    if data is not None:
        return np.asarray(data).shape[0]
    return np.asarray(covariates).shape[0]


def discriminant(spec, obs, group_params, covariate_obs=None, covariate_params=None):
    """Discriminant of a single observation for one group."""
    obs_arr = obs if isinstance(obs, tuple) else np.asarray(obs, dtype=float)[None, ...]
    if isinstance(obs, tuple):
        obs_arr = (np.atleast_1d(obs[0]), np.atleast_2d(obs[1]))
    cov = None if covariate_obs is None else np.atleast_2d(covariate_obs)
    cp = None if covariate_params is None else [covariate_params]
    return float(discriminants(spec, obs_arr, [group_params], cov, cp)[0, 0])


def argmax_labels(h):
    """Row-wise argmax; ties go to the lowest group index."""
    return np.argmax(h, axis=1)


def classify_hard(spec, data, model, covariates=None, covariate_params=None):
    components = model.components if hasattr(model, "components") else model
    h = discriminants(spec, data, components, covariates, covariate_params)
    return Assignment.from_labels(argmax_labels(h), len(components))


def _labels_of(a):
    return a.labels if isinstance(a, Assignment) else np.asarray(a, dtype=int)


def misclassification_rate(estimated, truth, n_groups=None):
    """Minimum misclassification rate over label permutations.

    Returns ``(rate, perm)`` where ``perm[g]`` is the estimated label matched to
    true group ``g``.  Rows with a null label in either argument count as
    misclassified.
    """
    est = _labels_of(estimated)
    tru = _labels_of(truth)
    if est.shape != tru.shape:
        raise DimensionError(f"assignments have {est.size} and {tru.size} rows")
    if isinstance(estimated, Assignment) and isinstance(truth, Assignment):
        if estimated.n_groups != truth.n_groups:
            raise DimensionError(f"{estimated.n_groups} vs {truth.n_groups} groups")
    G = n_groups
    if G is None:
        G = truth.n_groups if isinstance(truth, Assignment) else int(max(est.max(), tru.max()) + 1)
    N = est.size
    if N == 0:
        return 0.0, tuple(range(G))
    if max(est.max(), tru.max()) >= G:
        raise DimensionError(f"labels exceed {G} groups")
    agree = np.zeros((G, G))
    ok = (est >= 0) & (tru >= 0)
    np.add.at(agree, (tru[ok], est[ok]), 1.0)
    if G <= HUNGARIAN_ABOVE:
        best, best_perm = -1.0, None
        for perm in itertools.permutations(range(G)):
            s = agree[np.arange(G), perm].sum()
            if s > best:
                best, best_perm = s, perm
    else:
        rows, cols = linear_sum_assignment(-agree)
        best_perm = tuple(int(c) for c in cols[np.argsort(rows)])
        best = agree[np.arange(G), best_perm].sum()
    # each misclassified row contributes two mismatched one-hot entries -> /2N
    return float((N - best) / N), tuple(int(k) for k in best_perm)


@dataclass(frozen=True)
class GaussianGroupsDGP:
    """Groups of p-variate normal covariates with means ~ N(0, I) and covariance P P'.

    ``P`` is unit upper-triangular with N(0, 1) entries above the diagonal.
    ``mean_scale`` multiplies the drawn means; ``mean_gap`` (if set) overrides
    them with group g centred at ``g * mean_gap`` along every axis, and
    ``identity_cov`` replaces P P' by the identity.
    """

    n_groups: int = 2
    mean_scale: float = 1.0
    mean_gap: float | None = None
    identity_cov: bool = False
    identical: bool = False

    def draw_params(self, p, rng):
        G = self.n_groups
        if self.mean_gap is not None:
            mus = [np.full(p, g * self.mean_gap) for g in range(G)]
        else:
            mus = [self.mean_scale * rng.standard_normal(p) for _ in range(G)]
        covs = []
        for _ in range(G):
            if self.identity_cov:
                covs.append(np.eye(p))
            else:
                P = np.eye(p) + np.triu(rng.standard_normal((p, p)), 1)
                covs.append(P @ P.T)
        if self.identical:
            mus = [mus[0]] * G
            covs = [covs[0]] * G
        return mus, covs

    def draw(self, p, N, rng):
        mus, covs = self.draw_params(p, rng)
        z = rng.integers(0, self.n_groups, N)
        x = np.empty((N, p))
        for g in range(self.n_groups):
            idx = np.flatnonzero(z == g)
            L = cholesky(covs[g])
            x[idx] = mus[g] + rng.standard_normal((idx.size, p)) @ L.T
        return x, z, mus, covs


def uniform_error_estimate(rule, dgp, p, N, replications, rng, return_rate=False):
    """Monte Carlo probability of misclassifying at least one of N observations.

    Classification uses the true group parameters.  With ``return_rate`` the
    mean per-observation misclassification rate is returned as well.
    """
    spec = rule if isinstance(rule, ClassifierSpec) else ClassifierSpec(rule, FeatureSource.OUTCOME)
    if replications < 1:
        raise DomainError("replications must be >= 1")
    any_err = np.zeros(replications, dtype=bool)
    rates = np.zeros(replications)
    for r in range(replications):
        x, z, mus, covs = dgp.draw(p, N, rng)
        comps = [densities.MvNormalParams(m, c) for m, c in zip(mus, covs)]
        h = discriminants(spec, x, comps)
        rate, _ = misclassification_rate(argmax_labels(h), z, dgp.n_groups)
        rates[r] = rate
        any_err[r] = rate > 0
    if return_rate:
        return float(any_err.mean()), float(rates.mean())
    return float(any_err.mean())


# -- closed forms for the cross-group distance oracles ---------------------------


def expected_sq_euclidean(mu_own, cov_own, mu_other):
    """E||x - mu_other||^2 for x ~ (mu_own, cov_own): tr(cov) + ||mu_other - mu_own||^2."""
    a = np.asarray(mu_other) - np.asarray(mu_own)
    return float(np.trace(cov_own) + a @ a)


def expected_sq_mahalanobis(mu_own, cov_own, mu_other, cov_other):
    """E[(x - mu_j)' S_j^{-1} (x - mu_j)] for x from another group, via triangular factors.

    With S^{-1} = W W' (W lower triangular), A = W_own - W_other and
    V = W_own^{-1} A, the value is 2 sum_l d_ll + sum_{m<=l} v_lm^2 - p + ||a' W_other||^2,
    where d_ll = (W_own^{-1})_ll (W_other)_ll.
    """
    p = len(mu_own)
    W_own = np.linalg.cholesky(np.linalg.inv(cov_own))
    W_oth = np.linalg.cholesky(np.linalg.inv(cov_other))
    W_own_inv = np.linalg.inv(W_own)
    V = W_own_inv @ (W_own - W_oth)
    d = np.diag(W_own_inv) * np.diag(W_oth)
    b = (np.asarray(mu_other) - np.asarray(mu_own)) @ W_oth
    return float(2.0 * d.sum() + (np.tril(V) ** 2).sum() - p + b @ b)


def markov_bound_holds(f, g, prob):
    """Check P[f >= g] <= (E f + sqrt(Var g)/2) / E g by exact summation on a grid."""
    prob = np.asarray(prob, dtype=float)
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    Ef = prob @ f
    Eg = prob @ g
    var_g = max(prob @ (g - Eg) ** 2, 0.0)
    lhs = prob @ (f >= g)
    rhs = (Ef + 0.5 * np.sqrt(var_g)) / Eg
    return bool(lhs <= rhs * (1 + 1e-12) + 1e-15), float(lhs), float(rhs)
