"""Classification EM: alternate per-group MLE and hard classification."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import densities
from .classify import Assignment, ClassifierSpec, FeatureSource, Rule, argmax_labels, discriminants
from .densities import MixtureModel, MvNormalParams
from .errors import (
    AllStartsFailedError,
    CycleError,
    DegenerateComponentError,
    DomainError,
    MixtureError,
    MixtureWarning,
    MonotonicityError,
)
from .mixture_em import MONOTONE_SLACK, FitReport, sandwich_variance


@dataclass
class CemConfig:
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    max_iter: int = 100
    min_group_size: int = 2
    covariate_model: bool = False
    cycle_window: int = 10
    check_monotone: bool = True

    def __post_init__(self):
        if self.min_group_size < 1:
            raise DomainError("min_group_size must be >= 1")
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")
        src = self.classifier.feature_source
        if src is not FeatureSource.OUTCOME and not self.covariate_model:
            raise DomainError("classifying on covariates requires covariate_model=True")


def _take(data, idx):
    if isinstance(data, tuple):
        return tuple(np.asarray(d)[idx] for d in data)
    return np.asarray(data)[idx]


def _covariate_loglik(psi, x, labels):
    total = 0.0
    for g, p in enumerate(psi):
        m = labels == g
        if m.any():
            total += float(densities.logpdf(p, x[m]).sum())
    return total


def cml_objective(model, data, labels, covariates=None, covariate_params=None):
    """sum_i sum_g z_ig log f_g(y_i) (+ log p_g(x_i) when covariate parameters are given)."""
    lab = labels.labels if isinstance(labels, Assignment) else np.asarray(labels, dtype=int)
    total = 0.0
    for g, comp in enumerate(model.components):
        m = lab == g
        if m.any():
            total += float(densities.logpdf(comp, _take(data, m)).sum())
    if covariate_params is not None:
        total += _covariate_loglik(covariate_params, np.asarray(covariates, dtype=float), lab)
    return total


def _m_step(family, data, x, labels, G, config, iteration):
    comps, psi = [], []
    for g in range(G):
        w = (labels == g).astype(float)
        n_g = int(w.sum())
        if n_g < config.min_group_size:
            raise DegenerateComponentError(g, f"{n_g} members < min_group_size {config.min_group_size}", iteration)
        try:
            comps.append(densities.weighted_mle(family, data, w, group=g))
            if config.covariate_model:
                psi.append(densities.weighted_mle(densities.Family.MVNORMAL, x, w, group=g))
        except DegenerateComponentError as exc:
            raise DegenerateComponentError(g, str(exc), iteration) from None
    return comps, (psi if config.covariate_model else None)


def _uses_joint_objective(config):
    return config.classifier.rule is Rule.JOINT_DENSITY


def fit_cem(data, init, config=None, covariates=None, init_covariate_params=None, obs_weights=None):
    """Run C-EM from ``init`` until the hard labels stop changing.

    Rows with ``obs_weights == 0`` are left out of every step and keep the null
    label -1.  The C-ML objective is recorded after each C-step; with the
    joint-density classifier it must not decrease.
    """
    config = config or CemConfig()
    G = init.n_components
    family = init.family
    full_n = len(data[0]) if isinstance(data, tuple) else np.asarray(data).shape[0]
    keep = np.ones(full_n, dtype=bool) if obs_weights is None else np.asarray(obs_weights) > 0
    d = _take(data, keep)
    x = None
    if config.covariate_model:
        if covariates is None or init_covariate_params is None:
            raise DomainError("covariate_model needs covariates and initial covariate parameters")
        x = np.asarray(covariates, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        x = x[keep]
        psi = list(init_covariate_params)
    else:
        psi = None
    spec = config.classifier
    comps = list(init.components)

    def classify(comps, psi):
        h = discriminants(spec, d, comps, x, psi)
        return argmax_labels(h)

    def objective(comps, psi, labels):
        model = MixtureModel(tuple(comps), np.full(G, 1.0 / G))
        return cml_objective(model, d, labels, x, psi if config.covariate_model else None)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MixtureWarning)
        labels = classify(comps, psi)
        trace = [objective(comps, psi, labels)]
        history = [labels.tobytes()]
        snapshots = [(trace[0], comps, psi, labels)]
        converged = False
        it = 0
        for it in range(1, config.max_iter + 1):
            comps, psi = _m_step(family, d, x, labels, G, config, it)
            new_labels = classify(comps, psi)
            value = objective(comps, psi, new_labels)
            if (
                config.check_monotone
                and _uses_joint_objective(config)
                and value < trace[-1] - MONOTONE_SLACK
            ):
                raise MonotonicityError(it, trace[-1], value)
            trace.append(value)
            snapshots.append((value, comps, psi, new_labels))
            snapshots = snapshots[-(config.cycle_window + 1):]
            key = new_labels.tobytes()
            if np.array_equal(new_labels, labels):
                labels = new_labels
                converged = True
                break
            recent = history[-config.cycle_window:]
            if key in recent:
                period = len(recent) - recent.index(key)
                best = max(snapshots, key=lambda s: s[0])
                report = _report(best[1], best[2], best[3], G, keep, trace, it, False, d, "cycle")
                raise CycleError(period, it, best=report)
            history.append(key)
            labels = new_labels
    return _report(comps, psi, labels, G, keep, trace, it, converged, d,
                   "converged" if converged else "max_iter")


def _report(comps, psi, labels, G, keep, trace, it, converged, d, reason):
    counts = np.bincount(labels, minlength=G).astype(float)
    weights = counts / counts.sum()
    if G == 1:
        weights = np.ones(1)
    if np.any(weights <= 0):
        raise DegenerateComponentError(int(np.argmin(weights)), "empty group at exit", it)
    model = MixtureModel(tuple(comps), weights)
    full = np.full(keep.size, -1)
    full[keep] = labels
    hard = Assignment.from_labels(full, G)
    variances = None
    if comps[0].family is not densities.Family.PANEL_LINEAR:
        try:
            variances = sandwich_variance(model, d, labels)
        except (MixtureError, np.linalg.LinAlgError):
            variances = None
    return FitReport(
        model=model,
        objective_trace=list(trace),
        iterations=it,
        converged=converged,
        responsibilities=None,
        hard_labels=hard,
        variance_estimates=variances,
        exit_reason=reason,
        extra={"covariate_params": psi, "labels": full},
    )


def multi_start_cem(data, inits, config=None, covariates=None, init_covariate_params=None, obs_weights=None):
    """Best-objective C-EM fit over several starts; failed starts are recorded in ``extra['failures']``."""
    if len(inits) < 1:
        raise DomainError("need at least one initial model")
    psis = init_covariate_params if init_covariate_params is not None else [None] * len(inits)
    best, failures = None, []
    for k, (init, psi) in enumerate(zip(inits, psis)):
        try:
            rep = fit_cem(data, init, config, covariates, psi, obs_weights)
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


def mvnormal_from_moments(x):
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    return MvNormalParams(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, bias=True)))
