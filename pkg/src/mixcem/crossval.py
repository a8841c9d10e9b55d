"""Repeated unit-level K-fold cross-validation for latent-group panels.

Units, never single observations, are allocated to folds, so every period of a
test unit is held out together.  Test memberships come from the fitted
covariate densities alone because outcomes are unknown at prediction time; by
default they are posterior weights pi_g p_g(x), so an uninformative covariate
model averages the group lines instead of picking one at random.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, MixtureError, MixtureWarning
from .panel import (
    PanelConfig,
    PanelStart,
    mundlak_expand,
    multi_start_panel,
    predict_outcome,
    predict_weights,
    random_start,
)


@dataclass
class CvPlan:
    folds: int = 2
    repetitions: int = 10
    seed: int = 0
    warm_start: bool = False
    n_inits: int = 25
    test_weights: str = "posterior"

    def __post_init__(self):
        if self.test_weights not in ("posterior", "hard"):
            raise DomainError("test_weights must be 'posterior' or 'hard'")
        if self.folds < 2:
            raise DomainError("folds must be >= 2")
        if self.repetitions < 1:
            raise DomainError("repetitions must be >= 1")
        if self.n_inits < 1:
            raise DomainError("n_inits must be >= 1")


@dataclass
class FoldRecord:
    repetition: int
    fold: int
    n_test: int
    sse: float
    rmse: float
    converged: bool
    failure: str = ""
    mass: float = 0.0
    train_estimates: np.ndarray | None = field(default=None, repr=False)


@dataclass
class CvReport:
    G: int
    algorithm: str
    rmse_overall: float
    folds: list
    baseline_rmse: float
    relative_to_G1: float

    @property
    def rmse_per_fold(self):
        return [f.rmse for f in self.folds]

    def to_dict(self):
        return {
            "G": self.G,
            "algorithm": self.algorithm,
            "rmse_overall": self.rmse_overall,
            "baseline_rmse": self.baseline_rmse,
            "relative_to_G1": self.relative_to_G1,
            "folds": [
                {k: getattr(f, k) for k in ("repetition", "fold", "n_test", "sse", "rmse", "converged", "failure")}
                for f in self.folds
            ],
        }

    def csv_rows(self):
        rows = [
            {
                "G": self.G,
                "algorithm": self.algorithm,
                "repetition": f.repetition,
                "fold": f.fold,
                "n_test": f.n_test,
                "rmse": f.rmse,
                "relative_to_G1": "",
                "failure": f.failure,
            }
            for f in self.folds
        ]
        rows.append(
            {
                "G": self.G,
                "algorithm": self.algorithm,
                "repetition": "all",
                "fold": "all",
                "n_test": sum(f.n_test for f in self.folds),
                "rmse": self.rmse_overall,
                "relative_to_G1": self.relative_to_G1,
                "failure": "",
            }
        )
        return rows


def split_units(N, plan, rng=None):
    """(train, test) unit-index pairs: ``plan.folds`` per repetition, folds partition the units."""
    if N < plan.folds:
        raise DomainError(f"{N} units cannot fill {plan.folds} folds")
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    out = []
    for _ in range(plan.repetitions):
        perm = rng.permutation(N)
        for test in np.array_split(perm, plan.folds):
            test = np.sort(test)
            train = np.setdiff1d(np.arange(N), test)
            out.append((train, test))
    return out


def _fold_rng(seed, rep, fold):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, fold)))


def _estimate_vector(fit):
    parts = [c.vector() for c in fit.model.components]
    parts.append(np.asarray(fit.model.weights))
    parts += [np.concatenate([p.mu, p.sigma.ravel()]) for p in fit.extra["covariate_params"]]
    return np.concatenate(parts)


WARM_START_STREAM = 2**31


def _warm_start(dataset, G, algorithm, plan, config):
    starts = [random_start(dataset, G, _fold_rng(plan.seed, WARM_START_STREAM, k)) for k in range(plan.n_inits)]
    fit = multi_start_panel(dataset, G, algorithm, starts, config)
    if not fit.converged:
        return None
    return PanelStart(fit.model, list(fit.extra["covariate_params"]))


def _evaluate(dataset, G, algorithm, plan, config, splits, positions=None):
    warm = _warm_start(dataset, G, algorithm, plan, config) if plan.warm_start else None
    records = []
    positions = range(len(splits)) if positions is None else positions
    for k, (train, test) in zip(positions, splits):
        rep, fold = divmod(k, plan.folds)
        tr = dataset.subset(train)
        te = dataset.subset(test)
        rng = _fold_rng(plan.seed, rep, fold)
        starts = [warm] if warm is not None else [random_start(tr, G, rng) for _ in range(plan.n_inits)]
        try:
            fit = multi_start_panel(tr, G, algorithm, starts, config)
            design = mundlak_expand(te)
            weights = predict_weights(fit, te.covariates, plan.test_weights)
            yhat = predict_outcome(fit, design.X, weights)
        except (MixtureError, np.linalg.LinAlgError) as exc:
            records.append(FoldRecord(rep, fold, 0, 0.0, float("nan"), False, f"{type(exc).__name__}: {exc}"))
            continue
        w = te.weights
        live = w > 0
        err2 = (w * (te.outcome - yhat) ** 2)[live]
        mass = float(w[live].sum())
        sse = math.fsum(err2.tolist())
        records.append(
            FoldRecord(rep, fold, int(live.sum()), sse, math.sqrt(sse / mass), bool(fit.converged), "", mass,
                       _estimate_vector(fit))
        )
    ok = [r for r in records if not r.failure]
    if not ok:
        raise MixtureError(f"all {len(records)} folds failed: {records[0].failure}")
    rmse = math.sqrt(math.fsum(r.sse for r in ok) / math.fsum(r.mass for r in ok))
    return rmse, records


def cross_validate(dataset, G, algorithm="CEM", plan=None, config=None):
    """Repeated K-fold RMSE of a G-group fit, with a one-group baseline on the same splits."""
    plan = plan or CvPlan()
    config = config or PanelConfig()
    splits = split_units(dataset.units, plan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MixtureWarning)
        rmse, records = _evaluate(dataset, G, algorithm, plan, config, splits)
        if G == 1:
            base = rmse
        else:
            base, _ = _evaluate(dataset, 1, algorithm, plan, config, splits)
    return CvReport(G, algorithm.upper(), rmse, records, base, rmse / base)


def leakage_check(dataset, G, algorithm="CEM", plan=None, config=None, offset=1e3):
    """Folds whose training estimates change when the test outcomes are shifted by ``offset``.

    Each fold is refitted on a copy of the data in which only that fold's test
    units are poisoned; an empty result means no test outcome reached training.
    """
    plan = plan or CvPlan()
    config = config or PanelConfig()
    splits = split_units(dataset.units, plan)
    leaks = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MixtureWarning)
        _, clean = _evaluate(dataset, G, algorithm, plan, config, splits)
        for k, (train, test) in enumerate(splits):
            y = dataset.outcome.copy()
            y[test] += offset
            poisoned = replace(dataset, outcome=y)
            try:
                _, rec = _evaluate(poisoned, G, algorithm, plan, config, [(train, test)], [k])
                b = rec[0].train_estimates
            except MixtureError:
                b = None
            a = clean[k].train_estimates
            if (a is None) != (b is None) or (a is not None and a.tobytes() != b.tobytes()):
                leaks.append(k)
    return leaks
