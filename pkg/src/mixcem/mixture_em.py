"""EM maximisation of the (optionally penalised) mixture likelihood."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logsumexp

from . import densities
from .classify import Assignment
from .densities import Family, MixtureModel, NormalParams
from .errors import (
    DegenerateComponentError,
    DomainError,
    MixtureWarning,
    MonotonicityError,
    SingularHessianError,
)

SPLIT_QUANTILES = (0.9999, 0.9995, 0.999, 0.995, 0.99, 0.98, 0.97, 0.95)
MONOTONE_SLACK = 1e-8
EMPTY_COLUMN_FRACTION = 1e-6


@dataclass
class EmConfig:
    max_iter: int = 100
    loglik_tol: float = 1e-10
    rel_tol: float = 1e-4
    convergence: str = "absolute"  # or "relative"
    penalty: str | None = None  # None or "normal_variance"
    variance_floor: float = 1e-8
    check_monotone: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")
        if not (self.loglik_tol > 0 and self.rel_tol > 0):
            raise DomainError("tolerances must be > 0")
        if self.convergence not in ("absolute", "relative"):
            raise DomainError(f"unknown convergence rule {self.convergence!r}")
        if self.penalty not in (None, "normal_variance"):
            raise DomainError(f"unknown penalty {self.penalty!r}")


@dataclass
class FitReport:
    model: Any
    objective_trace: list
    iterations: int
    converged: bool
    responsibilities: Assignment | None = None
    hard_labels: Assignment | None = None
    variance_estimates: list | None = None
    exit_reason: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def objective(self):
        return self.objective_trace[-1]


def _n(data):
    return len(data[0]) if isinstance(data, tuple) else np.asarray(data).shape[0]


def component_logpdf(model, data):
    """N x G matrix of log f_g(y_i)."""
    return np.column_stack([densities.logpdf(c, data) for c in model.components])


def mixture_loglik(model, data):
    lp = component_logpdf(model, data) + np.log(model.weights)
    return float(logsumexp(lp, axis=1).sum())


def variance_penalty(model, n):
    """-n^{-1/2} sum_g (1/sigma_g^2 + log sigma_g^2) for normal components."""
    s2 = np.array([_variance(c) for c in model.components])
    if np.any(s2 <= 0):
        raise DomainError("penalty needs strictly positive variances")
    if np.isinf(n):
        return 0.0
    return float(-(1.0 / np.sqrt(n)) * np.sum(1.0 / s2 + np.log(s2)))


def _variance(c):
    if c.family is Family.NORMAL:
        return c.sigma2
    if c.family is Family.PANEL_LINEAR:
        return c.total_variance
    raise DomainError(f"the variance penalty is only defined for normal components, not {c.family.value}")


def objective(model, data, config):
    value = mixture_loglik(model, data)
    if config.penalty == "normal_variance":
        value += variance_penalty(model, _n(data))
    return value


def e_step(model, data):
    lp = component_logpdf(model, data) + np.log(model.weights)
    tau = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    # exact renormalisation keeps rows on the simplex to ~1 ulp
    tau /= tau.sum(axis=1, keepdims=True)
    return Assignment(tau, "soft")


def penalized_variance(weighted_ss, mass, n):
    """Maximiser in sigma^2 of -mass/2 log s2 - ss/(2 s2) - n^{-1/2}(1/s2 + log s2).

    Stationarity is linear in sigma^2: s2 = (ss + 2a) / (mass + 2a), a = n^{-1/2}.
    """
    a = 1.0 / np.sqrt(n)
    return (weighted_ss + 2.0 * a) / (mass + 2.0 * a)


def m_step(data, responsibilities, family=None, penalty=None, n_total=None):
    """Weighted MLE per column of the responsibilities; weights = column means."""
    tau = responsibilities.matrix if isinstance(responsibilities, Assignment) else np.asarray(responsibilities)
    return _m_step_rows(data, np.ascontiguousarray(tau.T), family, penalty, n_total)


def _m_step_rows(data, tau_rows, family=None, penalty=None, n_total=None):
    G, N = tau_rows.shape
    family = Family(family) if family is not None else _guess_family(data)
    mass = tau_rows.sum(axis=1)
    for g in range(G):
        if mass[g] < EMPTY_COLUMN_FRACTION * N:
            raise DegenerateComponentError(g, f"column mass {mass[g]:.3g} below {EMPTY_COLUMN_FRACTION}*N")
    comps = []
    for g in range(G):
        if penalty == "normal_variance":
            if family is not Family.NORMAL:
                raise DomainError("the normal penalty needs a normal family")
            y = np.asarray(data, dtype=float)
            mu = float(tau_rows[g] @ y / mass[g])
            ss = float(tau_rows[g] @ (y - mu) ** 2)
            comps.append(NormalParams(mu, penalized_variance(ss, mass[g], n_total or N)))
        else:
            comps.append(densities.weighted_mle(family, data, tau_rows[g], group=g))
    weights = mass / N
    weights = weights / weights.sum()
    if G == 1:
        weights = np.ones(1)
    return MixtureModel(tuple(comps), weights)


def _guess_family(data):
    if isinstance(data, tuple):
        return Family.PANEL_LINEAR
    return Family.MVNORMAL if np.asarray(data).ndim == 2 else Family.NORMAL


def _converged(prev, cur, config):
    if config.convergence == "absolute":
        return abs(cur - prev) < config.loglik_tol
    return abs(cur - prev) < config.rel_tol * abs(prev)


def _evaluate(model, data, config):
    """Objective and G x N responsibilities from one pass over the data."""
    # groups along the first axis: row-wise reductions over a tiny last axis are slow
    rows = [densities.logpdf(c, data) + np.log(w) for c, w in zip(model.components, model.weights)]
    top = np.maximum.reduce(rows)
    ex = np.exp(np.stack(rows) - top)
    tot = np.add.reduce(ex)
    value = float(np.sum(top + np.log(tot)))
    if config.penalty == "normal_variance":
        value += variance_penalty(model, _n(data))
    return value, ex / tot


def fit_em(data, init, config=None):
    config = config or EmConfig()
    family = init.family
    model = init
    value, tau = _evaluate(model, data, config)
    trace = [value]
    converged = False
    it = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MixtureWarning)
        for it in range(1, config.max_iter + 1):
            model = _m_step_rows(data, tau, family, config.penalty)
            value, tau = _evaluate(model, data, config)
            if config.check_monotone and value < trace[-1] - MONOTONE_SLACK:
                raise MonotonicityError(it, trace[-1], value)
            trace.append(value)
            if _converged(trace[-2], value, config):
                converged = True
                break
    tau = Assignment(tau.T, "soft")
    hard = tau.hardened()
    return FitReport(
        model=model,
        objective_trace=trace,
        iterations=it,
        converged=converged,
        responsibilities=tau,
        hard_labels=hard,
        variance_estimates=_try_sandwich(model, data, hard),
        exit_reason="converged" if converged else "max_iter",
    )


def _try_sandwich(model, data, hard):
    if model.family is Family.PANEL_LINEAR:
        return None
    try:
        return sandwich_variance(model, data, hard)
    except (SingularHessianError, DomainError, np.linalg.LinAlgError):
        return None


def quantile_split_inits(data, family, truth=None, quantiles=SPLIT_QUANTILES):
    """Two-component starting values from splits at extreme empirical quantiles.

    For every q the data are split into ``y < Q_q`` and ``y >= Q_q`` and each
    part is fitted by MLE; normal mixtures repeat with ``1 - q``.  Splits with
    an empty or degenerate part are skipped with a ``MixtureWarning``.  ``truth``
    (simulation only) is appended last.
    """
    family = Family(family)
    y = np.asarray(data, dtype=float)
    if y.ndim != 1:
        raise DomainError("quantile splits need univariate data")
    N = y.size
    qs = list(quantiles)
    if family is Family.NORMAL:
        qs += [1.0 - q for q in quantiles]
    inits = []
    skipped = []
    for q in qs:
        thr = np.quantile(y, q)
        lower = y < thr
        n1 = int(lower.sum())
        if n1 == 0 or n1 == N:
            skipped.append((q, "empty part"))
            continue
        try:
            c1 = densities.weighted_mle(family, y, lower.astype(float), group=0)
            c2 = densities.weighted_mle(family, y, (~lower).astype(float), group=1)
        except DegenerateComponentError as exc:
            skipped.append((q, str(exc)))
            continue
        pi1 = n1 / N
        inits.append(MixtureModel((c1, c2), np.array([pi1, 1.0 - pi1])))
    if skipped:
        warnings.warn(
            f"skipped {len(skipped)} quantile splits: " + ", ".join(f"q={q:g} ({why})" for q, why in skipped),
            MixtureWarning,
        )
    if truth is not None:
        inits.append(truth)
    return inits


# -- sandwich variance -------------------------------------------------------------


def scores(params, y):
    """Per-observation analytic scores, shape (n, k)."""
    fam = params.family
    y = np.asarray(y, dtype=float)
    if fam is Family.NORMAL:
        r = y - params.mu
        s2 = params.sigma2
        return np.column_stack([r / s2, -0.5 / s2 + 0.5 * r**2 / s2**2])
    if fam is Family.POISSON:
        return (y / params.lam - 1.0)[:, None]
    if fam is Family.EXPONENTIAL:
        m = params.mean
        return (-1.0 / m + y / m**2)[:, None]
    if fam is Family.MVNORMAL:
        Y = np.atleast_2d(y)
        p = params.dim
        S_inv = np.linalg.inv(params.sigma)
        R = Y - params.mu
        s_mu = R @ S_inv
        iu = np.triu_indices(p)
        # d/d sigma_ab of log f, counting both (a,b) and (b,a) entries off the diagonal
        M = 0.5 * (np.einsum("ni,nj->nij", s_mu, s_mu) - S_inv)
        mult = np.where(iu[0] == iu[1], 1.0, 2.0)
        s_sig = M[:, iu[0], iu[1]] * mult
        return np.hstack([s_mu, s_sig])
    raise DomainError(f"scores not implemented for {fam.value}")


def score_jacobian(params, y):
    """Summed derivative of the scores, s' = sum_i d s_i / d theta."""
    fam = params.family
    y = np.asarray(y, dtype=float)
    if fam is Family.NORMAL:
        r = y - params.mu
        s2 = params.sigma2
        n = y.size
        h_mm = -n / s2
        h_ms = -r.sum() / s2**2
        h_ss = n / (2 * s2**2) - (r**2).sum() / s2**3
        return np.array([[h_mm, h_ms], [h_ms, h_ss]])
    if fam is Family.POISSON:
        return np.array([[-(y.sum()) / params.lam**2]])
    if fam is Family.EXPONENTIAL:
        m = params.mean
        return np.array([[y.size / m**2 - 2.0 * y.sum() / m**3]])
    if fam is Family.MVNORMAL:
        # central differences of the analytic summed score
        vec = params.vector()
        k = vec.size
        J = np.empty((k, k))
        for j in range(k):
            h = 1e-6 * max(1.0, abs(vec[j]))
            up, dn = vec.copy(), vec.copy()
            up[j] += h
            dn[j] -= h
            s_up = scores(densities.params_from_vector(fam, up, params.dim), y).sum(axis=0)
            s_dn = scores(densities.params_from_vector(fam, dn, params.dim), y).sum(axis=0)
            J[:, j] = (s_up - s_dn) / (2 * h)
        return 0.5 * (J + J.T)
    raise DomainError(f"score derivative not implemented for {fam.value}")


def sandwich_variance(model, data, hard_labels):
    """{s'}^{-1} [sum_i s_i s_i'] {s'}^{-1} per group over the group's members."""
    labels = hard_labels.labels if isinstance(hard_labels, Assignment) else np.asarray(hard_labels)
    y = np.asarray(data, dtype=float)
    out = []
    for g, comp in enumerate(model.components):
        yg = y[labels == g]
        if len(yg) == 0:
            raise SingularHessianError(f"group {g} has no members")
        S = scores(comp, yg)
        H = score_jacobian(comp, yg)
        try:
            H_inv = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            raise SingularHessianError(f"score derivative of group {g} is singular") from None
        if not np.all(np.isfinite(H_inv)) or np.linalg.cond(H) > 1e14:
            raise SingularHessianError(f"score derivative of group {g} is singular")
        out.append(H_inv @ (S.T @ S) @ H_inv)
    return out


def sort_by_mean(model, descending=False):
    """Component order by mean (standard deviation breaks ties)."""
    keys = []
    for c in model.components:
        mean, cov = densities.moments(c)
        keys.append((float(mean[0]), float(np.sqrt(cov[0, 0]))))
    order = sorted(range(len(keys)), key=lambda k: keys[k], reverse=descending)
    return order
