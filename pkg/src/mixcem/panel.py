"""Latent-group linear panels: data generation, Mundlak design and the IWGLS estimator.

Memberships are per observation (unit, period).  For group g the outcome model is

    y_it = x_it1 beta_g + xbar_i1 gamma_g + delta_tg + alpha_ig + eps_it

with Var(alpha_ig) = sigma2_alpha_g and Var(eps_it) = sigma2_eps.  Estimation
alternates membership weights (posterior probabilities for EM, joint-density
hard labels for C-EM) with one weighted GLS step, the variance components,
the covariate-density parameters and the mixing weights.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import densities
from .classify import Assignment
from .densities import MixtureModel, MvNormalParams, PanelLinearParams
from .errors import (
    AllStartsFailedError,
    CollinearityError,
    DegenerateComponentError,
    DomainError,
    InsufficientDataError,
    MixtureError,
    MixtureWarning,
    MonotonicityError,
)
from .mixture_em import MONOTONE_SLACK, FitReport, penalized_variance

EIGEN_FLOOR = 1e-8


@dataclass
class PanelDataset:
    outcome: np.ndarray  # (N, T)
    covariates: np.ndarray  # (N, T, p)
    weights: np.ndarray | None = None  # (N, T) in [0, 1]
    truth_labels: np.ndarray | None = None  # (N, T) ints, 0-based
    unit_ids: list | None = None

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        if y.ndim != 2 or x.shape[:2] != y.shape:
            raise DomainError(f"outcome {y.shape} and covariates {x.shape} do not align")
        w = np.ones_like(y) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != y.shape or np.any(w < 0) or np.any(w > 1):
            raise DomainError("weights must be an (N, T) array in [0, 1]")
        live = w > 0
        if not (np.all(np.isfinite(y[live])) and np.all(np.isfinite(x[live]))):
            raise DomainError("non-finite outcome or covariate in a weighted cell")
        # zero-weight cells never enter a computation, so blank them out
        self.outcome = np.where(live, y, 0.0)
        self.covariates = np.where(live[:, :, None], x, 0.0)
        self.weights = w
        if self.truth_labels is not None:
            self.truth_labels = np.asarray(self.truth_labels, dtype=int)

    @property
    def units(self):
        return self.outcome.shape[0]

    @property
    def periods(self):
        return self.outcome.shape[1]

    @property
    def n_covariates(self):
        return self.covariates.shape[2]

    def subset(self, units):
        units = np.asarray(units)
        return PanelDataset(
            self.outcome[units],
            self.covariates[units],
            self.weights[units],
            None if self.truth_labels is None else self.truth_labels[units],
            None if self.unit_ids is None else [self.unit_ids[u] for u in units],
        )


@dataclass
class MundlakDesign:
    X: np.ndarray  # (N, T, 2 + T): x_it1, xbar_i1, time dummies
    xbar: np.ndarray  # (N,)
    excluded_units: list = field(default_factory=list)

    @property
    def columns(self):
        T = self.X.shape[1]
        return ["x1", "xbar1"] + [f"time{t + 1}" for t in range(T)]

    @property
    def rows(self):
        return self.X.reshape(-1, self.X.shape[2])


def mundlak_expand(dataset):
    """Design (x_it1, xbar_i1, 1[t=1..T]) with xbar over positively weighted periods."""
    N, T = dataset.units, dataset.periods
    if T < 2:
        raise DomainError("the Mundlak design needs T >= 2")
    w = dataset.weights
    x1 = dataset.covariates[:, :, 0]
    mass = w.sum(axis=1)
    excluded = [int(i) for i in np.flatnonzero(mass == 0)]
    if excluded:
        warnings.warn(f"units {excluded} have no weighted periods and are excluded", MixtureWarning)
    safe = np.where(mass > 0, mass, 1.0)
    xbar = np.where(mass > 0, (w * x1).sum(axis=1) / safe, 0.0)
    X = np.empty((N, T, 2 + T))
    X[:, :, 0] = x1
    X[:, :, 1] = xbar[:, None]
    X[:, :, 2:] = np.eye(T)[None, :, :]
    return MundlakDesign(X, xbar, excluded)


def omega_matrix(sigma2_alpha, sigma2_eps, periods):
    return sigma2_alpha * np.ones((periods, periods)) + sigma2_eps * np.eye(periods)


def _solve_normal(Q, b, columns, group):
    # pivoted QR flags the columns that do not add rank
    _, R, piv = scipy.linalg.qr(Q, pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(Q.shape) * np.finfo(float).eps * 1e3 * (diag[0] if diag.size else 1.0)
    rank = int((diag > tol).sum())
    if rank < Q.shape[0]:
        bad = [columns[k] if columns else int(k) for k in sorted(piv[rank:])]
        raise CollinearityError(bad, group)
    return np.linalg.solve(Q, b)


def _weighted_design(X, y, w):
    """X~ and y~ with every row scaled by its weight."""
    return X * w[:, :, None], y * w


def normal_matrix(X, w, omega):
    Xt = X * w[:, :, None]
    Oi = np.linalg.inv(omega)
    return np.einsum("itk,ts,isl->kl", Xt, Oi, Xt, optimize=True)


def iwgls_step(X, y, weights, omegas, columns=None):
    """One weighted GLS solve per group.

    ``X`` is (N, T, K), ``y`` (N, T), ``weights`` (G, N, T) membership weights
    already multiplied by the observation weights, ``omegas`` a list of T x T
    matrices.  Returns a list of coefficient vectors.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    W = np.asarray(weights, dtype=float)
    if W.ndim == 2:
        W = W[None]
    out = []
    for g in range(W.shape[0]):
        if W[g].sum() <= X.shape[2]:
            raise InsufficientDataError(f"group {g}: total weight {W[g].sum():.3g} <= {X.shape[2]} columns")
        Xt, yt = _weighted_design(X, y, W[g])
        Oi = np.linalg.inv(omegas[g])
        Q = np.einsum("itk,ts,isl->kl", Xt, Oi, Xt, optimize=True)
        b = np.einsum("itk,ts,is->k", Xt, Oi, yt, optimize=True)
        out.append(_solve_normal(0.5 * (Q + Q.T), b, columns, g))
    return out


@dataclass
class VarianceComponents:
    sigma2_alpha_eps: np.ndarray
    sigma2_alpha: np.ndarray
    sigma2_eps: np.ndarray


def variance_components(residuals, weights, n_mean_params=None, variance_floor=EIGEN_FLOOR):
    """Per-group total, unit-effect and idiosyncratic variances from weighted residuals.

    ``residuals`` and ``weights`` are (G, N, T).  The total variance divides by
    sum(w) - K with K mean parameters (default 2 + T).  The unit-effect variance
    is the weighted spread of unit-mean residuals, with unit weights
    proportional to sum_t w_it; units whose weight sum is 0 or exactly 1 are
    left out of it.
    """
    R = np.asarray(residuals, dtype=float)
    W = np.asarray(weights, dtype=float)
    if R.ndim == 2:
        R, W = R[None], W[None]
    G, N, T = W.shape
    K = 2 + T if n_mean_params is None else n_mean_params
    tot = np.empty(G)
    alpha = np.empty(G)
    for g in range(G):
        mass = W[g].sum()
        denom = mass - K
        if denom <= 0:
            raise InsufficientDataError(f"group {g}: weight {mass:.3g} leaves no degrees of freedom")
        tot[g] = float((W[g] * R[g] ** 2).sum() / denom)
        unit_mass = W[g].sum(axis=1)
        keep = (unit_mass > 0) & (unit_mass != 1.0)
        if not keep.any():
            alpha[g] = 0.0
            continue
        ebar = (W[g, keep] * R[g, keep]).sum(axis=1) / unit_mass[keep]
        a = unit_mass[keep] / unit_mass[keep].sum()
        alpha[g] = float(a @ (ebar - a @ ebar) ** 2)
    eps = np.maximum(tot - alpha, variance_floor)
    return VarianceComponents(tot, alpha, eps)


def cluster_robust_variance(X, residuals, omegas, weights):
    """Unit-clustered sandwich Q^{-1} [sum_i X~_i' O^{-1} e_i e_i' O^{-1} X~_i] Q^{-1} per group.

    ``residuals`` are unweighted y - X beta_g, shape (G, N, T); they are scaled
    by the membership weights like the design rows.
    """
    X = np.asarray(X, dtype=float)
    R = np.asarray(residuals, dtype=float)
    W = np.asarray(weights, dtype=float)
    if R.ndim == 2:
        R, W = R[None], W[None]
    out = []
    for g in range(W.shape[0]):
        Xt = X * W[g][:, :, None]
        et = R[g] * W[g]
        Oi = np.linalg.inv(omegas[g])
        Q = np.einsum("itk,ts,isl->kl", Xt, Oi, Xt, optimize=True)
        u = np.einsum("itk,ts,is->ik", Xt, Oi, et, optimize=True)
        try:
            Qi = np.linalg.inv(Q)
        except np.linalg.LinAlgError:
            raise CollinearityError([], g) from None
        if not np.all(np.isfinite(Qi)) or np.linalg.cond(Q) > 1e14:
            raise CollinearityError([], g)
        out.append(Qi @ (u.T @ u) @ Qi)
    return out


def floor_eigenvalues(S, floor=EIGEN_FLOOR):
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= floor:
        return S
    vals = np.maximum(vals, floor)
    S = (vecs * vals) @ vecs.T
    return 0.5 * (S + S.T)


def covariate_params(x, weights, floor=EIGEN_FLOOR, ddof=None):
    """Weighted mean and covariance (divisor sum(w) - ddof, ddof defaulting to p) per group."""
    x = np.asarray(x, dtype=float)  # (N, T, p)
    W = np.asarray(weights, dtype=float)
    p = x.shape[2]
    ddof = p if ddof is None else ddof
    flat = x.reshape(-1, p)
    out = []
    for g in range(W.shape[0]):
        w = W[g].ravel()
        mass = w.sum()
        if mass - ddof <= 0 or mass <= p:
            raise InsufficientDataError(f"group {g}: weight {mass:.3g} too small for a {p}-variate covariance")
        mu = w @ flat / mass
        R = flat - mu
        S = (R * w[:, None]).T @ R / (mass - ddof)
        out.append(MvNormalParams(mu, floor_eigenvalues(S, floor)))
    return out


# -- fitting ------------------------------------------------------------------


@dataclass
class PanelStart:
    """Starting values: outcome components with mixing weights, plus covariate densities."""

    model: MixtureModel
    covariate_params: list


@dataclass
class PanelConfig:
    max_iter: int = 100
    rel_tol: float = 1e-4
    penalty: str | None = "normal_variance"
    eigen_floor: float = EIGEN_FLOOR
    min_group_size: int | None = None
    check_monotone: bool = False
    m_step: str = "iwgls"

    def __post_init__(self):
        if self.m_step not in ("iwgls", "ml"):
            raise DomainError(f"m_step must be 'iwgls' or 'ml', got {self.m_step!r}")
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")


def _logf_y(components, X, y):
    """(G, N, T) outcome log-densities with the per-observation marginal variance."""
    out = []
    for c in components:
        mean = X @ c.beta_tilde
        s2 = c.total_variance
        out.append(-0.5 * (densities.LOG_2PI + np.log(s2)) - 0.5 * (y - mean) ** 2 / s2)
    return np.stack(out)


def _logp_x(psi, x):
    N, T, p = x.shape
    return np.stack([densities.logpdf(c, x.reshape(-1, p)).reshape(N, T) for c in psi])


def _penalty(components, n):
    return float(-(1.0 / np.sqrt(n)) * sum(1.0 / c.total_variance + np.log(c.total_variance) for c in components))


def _e_or_c_step(algorithm, comps, psi, pis, X, y, x, w, penalty):
    """Membership weights (G, N, T) and the objective at the given parameters."""
    ly = _logf_y(comps, X, y)
    live = w > 0
    n_obs = int(live.sum())
    if algorithm == "EM":
        lp = ly + np.log(pis)[:, None, None]
        top = lp.max(axis=0)
        ex = np.exp(lp - top)
        tot = ex.sum(axis=0)
        value = float((w * (top + np.log(tot))).sum())
        if penalty == "normal_variance":
            value += _penalty(comps, n_obs)
        member = ex / tot
    else:
        h = ly + _logp_x(psi, x)
        lab = np.argmax(h, axis=0)
        value = float((w * np.take_along_axis(h, lab[None], axis=0)[0]).sum())
        G = len(comps)
        member = (lab[None] == np.arange(G)[:, None, None]).astype(float)
    return member * w[None], value


def _labels_from(member, w):
    lab = np.argmax(member, axis=0)
    return np.where(w > 0, lab, -1)


def _m_step(algorithm, member, X, y, x, comps, config, columns, n_obs, penalty):
    G = member.shape[0]
    T = y.shape[1]
    K = X.shape[2]
    min_size = config.min_group_size if config.min_group_size is not None else K + 1
    for g in range(G):
        if member[g].sum() < min_size:
            raise DegenerateComponentError(g, f"weight {member[g].sum():.3g} below {min_size}")
    if config.m_step == "iwgls":
        omegas = [omega_matrix(c.sigma2_alpha, c.sigma2_eps, T) for c in comps]
        betas = iwgls_step(X, y, member, omegas, columns)
        resid = np.stack([y - X @ b for b in betas])
        vc = variance_components(resid, member, K, config.eigen_floor)
        alpha, eps = vc.sigma2_alpha, vc.sigma2_eps
        psi = covariate_params(x, member, config.eigen_floor)
    else:
        # exact maximiser of the per-observation objective: OLS with rows scaled
        # by sqrt(w) (so w enters the normal equations once, not squared),
        # ML (or penalised ML) total variance, ML covariate moments
        betas = iwgls_step(X, y, np.sqrt(member), [np.eye(T)] * G, columns)
        resid = np.stack([y - X @ b for b in betas])
        vc = variance_components(resid, member, K, config.eigen_floor)
        total = np.empty(G)
        for g in range(G):
            ss = float((member[g] * resid[g] ** 2).sum())
            mass = float(member[g].sum())
            total[g] = penalized_variance(ss, mass, n_obs) if penalty == "normal_variance" else ss / mass
        total = np.maximum(total, config.eigen_floor)
        alpha = np.minimum(vc.sigma2_alpha, total - config.eigen_floor)
        alpha = np.maximum(alpha, 0.0)
        eps = total - alpha
        psi = covariate_params(x, member, config.eigen_floor, ddof=0)
    new = [PanelLinearParams(b, float(a), float(e)) for b, a, e in zip(betas, alpha, eps)]
    pis = member.reshape(G, -1).sum(axis=1) / n_obs
    pis = pis / pis.sum()
    return new, psi, pis, resid, vc


def fit_panel(dataset, G, algorithm, start, config=None):
    """Fit a G-group linear panel by EM (soft) or C-EM (joint-density hard labels).

    ``start`` is a :class:`PanelStart`.  EM stops when the relative change of the
    (penalised) mixture log-likelihood drops below ``rel_tol``; C-EM stops when
    the labels repeat.
    """
    algorithm = algorithm.upper()
    if algorithm not in ("EM", "CEM"):
        raise DomainError(f"unknown algorithm {algorithm!r}")
    config = config or PanelConfig()
    design = mundlak_expand(dataset) if dataset.periods >= 2 else None
    X, y, x = design.X, dataset.outcome, dataset.covariates
    w = dataset.weights.copy()
    if design.excluded_units:
        w[design.excluded_units] = 0.0
    n_obs = int((w > 0).sum())
    columns = design.columns
    comps = list(start.model.components)
    psi = list(start.covariate_params)
    pis = np.asarray(start.model.weights, dtype=float)
    if len(comps) != G or len(psi) != G:
        raise DomainError(f"start has {len(comps)} components for G={G}")
    penalty = config.penalty if algorithm == "EM" else None

    member, value = _e_or_c_step(algorithm, comps, psi, pis, X, y, x, w, penalty)
    labels = _labels_from(member, w)
    trace = [value]
    converged = False
    it = 0
    resid = vc = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MixtureWarning)
        for it in range(1, config.max_iter + 1):
            comps, psi, pis, resid, vc = _m_step(algorithm, member, X, y, x, comps, config, columns, n_obs, penalty)
            if algorithm == "CEM":
                pis = np.bincount(labels[w > 0], minlength=G) / n_obs
            member, value = _e_or_c_step(algorithm, comps, psi, pis, X, y, x, w, penalty)
            if config.check_monotone and value < trace[-1] - MONOTONE_SLACK:
                raise MonotonicityError(it, trace[-1], value)
            trace.append(value)
            new_labels = _labels_from(member, w)
            if algorithm == "CEM":
                if np.array_equal(new_labels, labels):
                    converged = True
                    break
            elif abs(trace[-1] - trace[-2]) < config.rel_tol * abs(trace[-2]):
                converged = True
                labels = new_labels
                break
            labels = new_labels
    return _panel_report(dataset, design, comps, psi, pis, member, labels, trace, it, converged, algorithm, w)


def _panel_report(dataset, design, comps, psi, pis, member, labels, trace, it, converged, algorithm, w):
    G = len(comps)
    T = dataset.periods
    X, y = design.X, dataset.outcome
    if algorithm == "CEM":
        pis = np.bincount(labels[w > 0], minlength=G) / max(int((w > 0).sum()), 1)
    if G == 1:
        pis = np.ones(1)
    if np.any(pis <= 0):
        raise DegenerateComponentError(int(np.argmin(pis)), "empty group at exit", it)
    pis = pis / pis.sum()
    model = MixtureModel(tuple(comps), pis)
    resid = np.stack([y - X @ c.beta_tilde for c in comps])
    omegas = [omega_matrix(c.sigma2_alpha, c.sigma2_eps, T) for c in comps]
    try:
        crv = cluster_robust_variance(X, resid, omegas, member)
    except (CollinearityError, np.linalg.LinAlgError):
        crv = None
    flat_lab = labels.ravel()
    soft = None
    if algorithm == "EM":
        tau = (member / np.where(w > 0, w, 1.0)[None]).reshape(G, -1).T
        tau[flat_lab < 0] = 1.0 / G
        soft = Assignment(tau / tau.sum(axis=1, keepdims=True), "soft")
    return FitReport(
        model=model,
        objective_trace=trace,
        iterations=it,
        converged=converged,
        responsibilities=soft,
        hard_labels=Assignment.from_labels(flat_lab, G),
        variance_estimates=crv,
        exit_reason="converged" if converged else "max_iter",
        extra={
            "algorithm": algorithm,
            "covariate_params": psi,
            "labels": labels,
            "membership": member,
            "transition_counts": transition_counts(labels, G),
            "columns": design.columns,
        },
    )


def transition_counts(labels, G):
    """Counts of (group at t-1 -> group at t) over units with both periods labelled."""
    labels = np.asarray(labels)
    a = labels[:, :-1].ravel()
    b = labels[:, 1:].ravel()
    ok = (a >= 0) & (b >= 0)
    counts = np.zeros((G, G), dtype=int)
    np.add.at(counts, (a[ok], b[ok]), 1)
    return counts


def multi_start_panel(dataset, G, algorithm, starts, config=None):
    """Best-objective fit over several starts; failures land in ``extra['failures']``."""
    best, failures = None, []
    for k, s in enumerate(starts):
        try:
            rep = fit_panel(dataset, G, algorithm, s, config)
        except (MixtureError, np.linalg.LinAlgError) as exc:
            failures.append((k, exc))
            continue
        if best is None or rep.objective > best.objective:
            best = rep
            best.extra["start"] = k
    if best is None:
        raise AllStartsFailedError(failures)
    best.extra["failures"] = failures
    return best


def predict_weights(fit, covariates, rule="posterior"):
    """Membership weights (G, N, T) for new rows from the covariate densities alone.

    ``rule="posterior"`` gives pi_g p_g(x) / sum_j pi_j p_j(x), the forecast
    weights that minimise expected squared error given x; ``rule="hard"`` gives
    one-hot weights at argmax_g log p_g(x), the C-step rule without outcomes.
    """
    if rule not in ("posterior", "hard"):
        raise DomainError(f"rule must be 'posterior' or 'hard', got {rule!r}")
    psi = fit.extra["covariate_params"]
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.shape[2] != psi[0].dim:
        raise DomainError(f"covariates have {x.shape[2]} columns, fit expects {psi[0].dim}")
    lp = _logp_x(psi, x)
    G = len(psi)
    if rule == "posterior":
        lp = lp + np.log(fit.model.weights)[:, None, None]
        top = lp.max(axis=0)
        ex = np.exp(lp - top)
        return ex / ex.sum(axis=0)
    lab = np.argmax(lp, axis=0)
    return (lab[None] == np.arange(G)[:, None, None]).astype(float)


def predict_outcome(fit, X, membership):
    """y-hat_it = sum_g w_itg X_it beta_g for design ``X`` (N, T, K) and weights (G, N, T)."""
    X = np.asarray(X, dtype=float)
    W = np.asarray(membership, dtype=float)
    comps = fit.model.components
    K = comps[0].beta_tilde.size
    if X.shape[-1] != K:
        raise DomainError(f"design has {X.shape[-1]} columns, fit expects {K}")
    return sum(W[g] * (X @ c.beta_tilde) for g, c in enumerate(comps))


# -- data generation ----------------------------------------------------------------


@dataclass
class PanelTruth:
    model: MixtureModel
    covariate_params: list
    labels: np.ndarray
    transition: np.ndarray


def generate_exercise2(N, T, G, p, rng, sigma2_eps=1.0):
    """Simulate a latent-group Mundlak panel with Markov memberships.

    Memberships start uniform and follow a transition matrix with Dirichlet(1)
    rows.  beta_g, gamma_g ~ N(0, 1); delta_tg ~ N(mean of x_it1 in group g at
    t, 1); alpha_ig ~ N(0, g); covariates x_it ~ N_p(mu_g, P_g P_g') with unit
    upper-triangular P_g.
    """
    if min(N, T, G, p) < 1:
        raise DomainError("N, T, G and p must be >= 1")
    trans = rng.dirichlet(np.ones(G), size=G)
    z = np.empty((N, T), dtype=int)
    z[:, 0] = rng.integers(0, G, N)
    for t in range(1, T):
        u = rng.random(N)
        cum = np.cumsum(trans[z[:, t - 1]], axis=1)
        z[:, t] = np.minimum((u[:, None] > cum).sum(axis=1), G - 1)

    mus = [rng.standard_normal(p) for _ in range(G)]
    covs = []
    for _ in range(G):
        P = np.eye(p) + np.triu(rng.standard_normal((p, p)), 1)
        covs.append(P @ P.T)
    psi = [MvNormalParams(m, c) for m, c in zip(mus, covs)]
    x = np.empty((N, T, p))
    e = rng.standard_normal((N, T, p))
    for g in range(G):
        idx = z == g
        x[idx] = mus[g] + e[idx] @ psi[g].chol.T
    x1 = x[:, :, 0]
    xbar = x1.mean(axis=1)

    beta = rng.standard_normal(G)
    gamma = rng.standard_normal(G)
    delta = np.empty((G, T))
    for g in range(G):
        for t in range(T):
            members = z[:, t] == g
            centre = x1[members, t].mean() if members.any() else 0.0
            delta[g, t] = centre + rng.standard_normal()
    sig_alpha = np.arange(1, G + 1, dtype=float)
    alpha = rng.standard_normal((N, G)) * np.sqrt(sig_alpha)
    eps = rng.standard_normal((N, T)) * np.sqrt(sigma2_eps)
    tt = np.arange(T)[None, :]
    y = x1 * beta[z] + xbar[:, None] * gamma[z] + delta[z, tt] + np.take_along_axis(alpha, z, axis=1) + eps

    comps = tuple(
        PanelLinearParams(np.concatenate([[beta[g], gamma[g]], delta[g]]), sig_alpha[g], sigma2_eps)
        for g in range(G)
    )
    pis = np.bincount(z.ravel(), minlength=G) / z.size
    if np.any(pis == 0):
        # a group never realised: fall back to a tiny weight so the truth is a valid mixture
        pis = np.maximum(pis, 1e-9)
        pis = pis / pis.sum()
    truth = PanelTruth(MixtureModel(comps, pis if G > 1 else np.ones(1)), psi, z, trans)
    return PanelDataset(y, x, truth_labels=z), truth


def random_start(dataset, G, rng, jitter=0.1):
    """Coefficients N(0,1), sigma2_alpha 0, sigma2_eps 1, covariate params from pooled moments."""
    K = 2 + dataset.periods
    live = dataset.weights.ravel() > 0
    flat = dataset.covariates.reshape(-1, dataset.n_covariates)[live]
    mu = flat.mean(axis=0)
    S = floor_eigenvalues(np.atleast_2d(np.cov(flat, rowvar=False)))
    comps = tuple(PanelLinearParams(rng.standard_normal(K), 0.0, 1.0) for _ in range(G))
    psi = [MvNormalParams(mu + jitter * rng.standard_normal(mu.size), S) for _ in range(G)]
    return PanelStart(MixtureModel(comps, np.full(G, 1.0 / G)), psi)


def truth_start(truth):
    return PanelStart(truth.model, list(truth.covariate_params))


# -- CSV ingestion ----------------------------------------------------------------


class IngestionError(MixtureError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


def read_panel_csv(path):
    """Long-format panel: unit_id, period, y, w, x1..xp[, group].  Missing cells only via w=0."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file") from None
        header = [h.strip() for h in header]
        need = ["unit_id", "period", "y", "w"]
        missing = [c for c in need if c not in header]
        if missing:
            raise IngestionError(f"header lacks columns {missing}", 1)
        xcols = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:]))
        if not xcols:
            raise IngestionError("header has no covariate columns x1..xp", 1)
        if [int(h[1:]) for h in xcols] != list(range(1, len(xcols) + 1)):
            raise IngestionError("covariate columns must be x1..xp without gaps", 1)
        idx = {h: header.index(h) for h in need + xcols}
        gidx = header.index("group") if "group" in header else None
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                unit = row[idx["unit_id"]].strip()
                period = int(row[idx["period"]])
                wv = float(row[idx["w"]])
            except ValueError as exc:
                raise IngestionError(str(exc), lineno) from None
            if not 0 <= wv <= 1:
                raise IngestionError(f"weight {wv} outside [0, 1]", lineno)
            vals = []
            for h in ["y"] + xcols:
                cell = row[idx[h]].strip()
                if cell == "":
                    if wv > 0:
                        raise IngestionError(f"missing {h} with positive weight", lineno)
                    vals.append(0.0)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise IngestionError(f"non-numeric {h}={cell!r}", lineno) from None
                if wv > 0 and not np.isfinite(vals[-1]):
                    raise IngestionError(f"non-finite {h}", lineno)
            grp = None
            if gidx is not None and row[gidx].strip() != "":
                try:
                    grp = int(row[gidx])
                except ValueError:
                    raise IngestionError(f"non-integer group {row[gidx]!r}", lineno) from None
            records.append((unit, period, wv, vals, grp, lineno))
    if not records:
        raise IngestionError("no data rows")
    units = list(dict.fromkeys(r[0] for r in records))
    periods = sorted({r[1] for r in records})
    ui = {u: k for k, u in enumerate(units)}
    ti = {t: k for k, t in enumerate(periods)}
    N, T, p = len(units), len(periods), len(xcols)
    y = np.zeros((N, T))
    x = np.zeros((N, T, p))
    w = np.zeros((N, T))
    seen = np.zeros((N, T), dtype=bool)
    groups = np.full((N, T), -1)
    has_group = False
    for unit, period, wv, vals, grp, lineno in records:
        i, t = ui[unit], ti[period]
        if seen[i, t]:
            raise IngestionError(f"duplicate (unit_id, period) = ({unit}, {period})", lineno)
        seen[i, t] = True
        y[i, t] = vals[0]
        x[i, t] = vals[1:]
        w[i, t] = wv
        if grp is not None:
            groups[i, t] = grp - 1 if grp >= 1 else grp
            has_group = True
    return PanelDataset(y, x, w, groups if has_group else None, units), periods


def write_panel_csv(path, dataset, periods=None, include_truth=True):
    N, T, p = dataset.units, dataset.periods, dataset.n_covariates
    periods = periods or list(range(1, T + 1))
    ids = dataset.unit_ids or [str(i + 1) for i in range(N)]
    header = ["unit_id", "period", "y", "w"] + [f"x{j + 1}" for j in range(p)]
    truth = include_truth and dataset.truth_labels is not None
    if truth:
        header.append("group")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i in range(N):
            for t in range(T):
                row = [ids[i], periods[t], repr(float(dataset.outcome[i, t])), repr(float(dataset.weights[i, t]))]
                row += [repr(float(v)) for v in dataset.covariates[i, t]]
                if truth:
                    row.append(int(dataset.truth_labels[i, t]) + 1)
                wr.writerow(row)


def with_weights(dataset, weights):
    return replace(dataset, weights=weights)
