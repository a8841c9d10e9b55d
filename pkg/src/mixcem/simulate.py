"""Monte Carlo harness for the univariate mixture study and the latent-group panel study.

Every replication draws its own generator from ``SeedSequence(root_seed,
spawn_key=(index,))`` so results do not depend on execution order or on the
number of worker processes.
"""

from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import densities
from .cem import CemConfig, multi_start_cem
from .classify import Assignment, misclassification_rate
from .densities import Family, MixtureModel
from .errors import DomainError, MixtureError, MixtureWarning, ScenarioAbortedError
from .mixture_em import EmConfig, FitReport, fit_em, quantile_split_inits, sort_by_mean
from .panel import PanelConfig, generate_exercise2, multi_start_panel, random_start


class Exercise(enum.Enum):
    ONE = "one"
    TWO = "two"


class AlignRule(enum.Enum):
    SORT_BY_MEAN = "sort_by_mean"
    MATCH_TRUTH = "match_truth"


@dataclass
class Scenario:
    exercise: Exercise = Exercise.ONE
    family: Family = Family.NORMAL
    true_model: MixtureModel | None = None
    N: int = 1000
    T: int = 5
    p: int = 1
    G: int = 2
    replications: int = 100
    seed: int = 0
    algorithms: tuple = ("EM",)

    def __post_init__(self):
        self.exercise = Exercise(self.exercise)
        self.family = Family(self.family)
        self.algorithms = tuple(a.upper() for a in self.algorithms)
        if self.replications < 1:
            raise DomainError("replications must be >= 1")
        if self.N < 1:
            raise DomainError("N must be >= 1")
        bad = [a for a in self.algorithms if a not in ("EM", "CEM")]
        if bad or not self.algorithms:
            raise DomainError(f"algorithms must be a non-empty subset of EM, CEM; got {self.algorithms}")
        if self.exercise is Exercise.ONE:
            if self.true_model is None:
                raise DomainError("exercise one needs a true model")
            if self.true_model.n_components != 2 or self.true_model.family not in (
                Family.NORMAL,
                Family.POISSON,
                Family.EXPONENTIAL,
            ):
                raise DomainError("exercise one needs a univariate two-component mixture")
            self.G = 2
        elif min(self.T, self.p, self.G) < 1:
            raise DomainError("T, p and G must be >= 1")


@dataclass
class SimConfig:
    em: EmConfig | None = None
    cem: CemConfig | None = None
    panel: PanelConfig = field(default_factory=PanelConfig)
    n_inits: int = 25
    workers: int = 1
    max_failure_fraction: float = 0.5


@dataclass
class ParamSummary:
    truth: float
    mean_estimate: float
    bias: float
    mse: float
    p2_5: float
    p97_5: float
    n: int


@dataclass
class ReplicationResult:
    index: int
    estimates: dict = field(default_factory=dict)  # algorithm -> {name: value}
    truth: dict = field(default_factory=dict)  # name -> value (per replication)
    misclassification: dict = field(default_factory=dict)  # algorithm -> rate
    converged: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)  # algorithm -> message


@dataclass
class SimulationReport:
    scenario: Scenario
    summaries: dict  # algorithm -> {name: ParamSummary}
    misclassification: dict  # algorithm -> list of rates (successful replications)
    successes: dict
    failures: dict
    non_converged: dict
    replications: list

    def values(self, algorithm, name):
        """Per-replication estimates of one parameter (successful replications only)."""
        return np.array([r.estimates[algorithm][name] for r in self.replications if algorithm in r.estimates])

    def truths(self, algorithm, name):
        return np.array([r.truth[name] for r in self.replications if algorithm in r.estimates])

    def zero_misclassification_fraction(self, algorithm):
        rates = np.asarray(self.misclassification[algorithm])
        return float((rates == 0).mean()) if rates.size else float("nan")

    def to_dict(self):
        sc = self.scenario
        out = {
            "scenario": {
                "exercise": sc.exercise.value,
                "family": sc.family.value,
                "N": sc.N,
                "T": sc.T,
                "p": sc.p,
                "G": sc.G,
                "replications": sc.replications,
                "seed": sc.seed,
                "algorithms": list(sc.algorithms),
            },
            "algorithms": {},
        }
        for alg in sc.algorithms:
            rates = np.asarray(self.misclassification.get(alg, []), dtype=float)
            out["algorithms"][alg] = {
                "successes": self.successes[alg],
                "failures": self.failures[alg],
                "non_converged": self.non_converged[alg],
                "parameters": {k: vars(v) for k, v in self.summaries.get(alg, {}).items()},
                "misclassification": {
                    "mean": float(rates.mean()) if rates.size else None,
                    "zero_fraction": float((rates == 0).mean()) if rates.size else None,
                    "p2_5": float(np.percentile(rates, 2.5)) if rates.size else None,
                    "p97_5": float(np.percentile(rates, 97.5)) if rates.size else None,
                },
            }
        return out

    def csv_rows(self):
        rows = []
        for alg in self.scenario.algorithms:
            for name, s in self.summaries.get(alg, {}).items():
                rows.append(
                    {
                        "algorithm": alg,
                        "parameter": name,
                        "N": self.scenario.N,
                        "mean_estimate": s.mean_estimate,
                        "bias": s.bias,
                        "mse": s.mse,
                        "p2.5": s.p2_5,
                        "p97.5": s.p97_5,
                    }
                )
        return rows


def replication_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


# -- summaries ----------------------------------------------------------------------


def summarize(estimates, truth):
    """Bias, MSE and 2.5/97.5 percentiles per parameter.

    ``estimates`` maps a name to per-replication values; ``truth`` maps a name to
    a scalar or to per-replication true values.
    """
    out = {}
    for name, vals in estimates.items():
        v = np.asarray(vals, dtype=float)
        if v.size == 0:
            raise DomainError(f"no successful replications for {name}")
        t = np.broadcast_to(np.asarray(truth[name], dtype=float), v.shape)
        err = v - t
        out[name] = ParamSummary(
            truth=float(t.mean()),
            mean_estimate=float(v.mean()),
            bias=float(err.mean()),
            mse=float((err**2).mean()),
            p2_5=float(np.percentile(v, 2.5)),
            p97_5=float(np.percentile(v, 97.5)),
            n=int(v.size),
        )
    return out


def bootstrap_mean_interval(values, rng, level=0.95, n_boot=4000):
    """Percentile bootstrap interval for the mean of ``values``."""
    v = np.asarray(values, dtype=float)
    idx = rng.integers(0, v.size, size=(n_boot, v.size))
    means = v[idx].mean(axis=1)
    a = (1 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


# -- label alignment -------------------------------------------------------------------


def _permute_fit(fit, order):
    """Reorder components so that new component k is old component order[k]."""
    order = list(order)
    G = len(order)
    inverse = np.empty(G, dtype=int)
    inverse[order] = np.arange(G)
    model = fit.model.permuted(order)
    hard = None
    if fit.hard_labels is not None:
        lab = fit.hard_labels.labels
        hard = Assignment.from_labels(np.where(lab >= 0, inverse[np.maximum(lab, 0)], -1), G)
    soft = None
    if fit.responsibilities is not None:
        soft = Assignment(fit.responsibilities.matrix[:, order], "soft")
    variances = None
    if fit.variance_estimates is not None and len(fit.variance_estimates) == G:
        variances = [fit.variance_estimates[k] for k in order]
    else:
        variances = fit.variance_estimates
    extra = dict(fit.extra)
    if extra.get("covariate_params") is not None:
        extra["covariate_params"] = [extra["covariate_params"][k] for k in order]
    if extra.get("labels") is not None:
        lab = np.asarray(extra["labels"])
        extra["labels"] = np.where(lab >= 0, inverse[np.maximum(lab, 0)], -1)
    if extra.get("membership") is not None:
        extra["membership"] = extra["membership"][order]
    if extra.get("transition_counts") is not None:
        extra["transition_counts"] = extra["transition_counts"][np.ix_(order, order)]
    extra["permutation"] = order
    return FitReport(
        model=model,
        objective_trace=list(fit.objective_trace),
        iterations=fit.iterations,
        converged=fit.converged,
        responsibilities=soft,
        hard_labels=hard,
        variance_estimates=variances,
        exit_reason=fit.exit_reason,
        extra=extra,
    )


def align_labels(fit, rule, truth=None, truth_labels=None):
    """Resolve label switching.

    SORT_BY_MEAN orders components by ascending mean (standard deviation on
    ties); with ``truth`` given, the sorted components are laid out in the
    truth's own mean order instead.  MATCH_TRUTH applies the permutation that
    minimises the misclassification rate against ``truth_labels``.
    """
    rule = AlignRule(rule)
    if rule is AlignRule.SORT_BY_MEAN:
        est = sort_by_mean(fit.model)
        if truth is None:
            return _permute_fit(fit, est)
        ref = sort_by_mean(truth)
        order = [0] * len(est)
        for k in range(len(est)):
            order[ref[k]] = est[k]
        return _permute_fit(fit, order)
    if truth_labels is None:
        raise DomainError("MATCH_TRUTH needs truth labels")
    G = fit.model.n_components
    lab = fit.extra.get("labels")
    lab = fit.hard_labels.labels if lab is None else np.asarray(lab)
    _, perm = misclassification_rate(np.ravel(lab), np.ravel(truth_labels), G)
    return _permute_fit(fit, list(perm))


# -- exercise one ------------------------------------------------------------------------


def draw_exercise1(model, N, rng):
    """Fixed memberships: the first floor(pi_1 N) draws come from component 1."""
    n1 = int(math.floor(model.weights[0] * N))
    z = np.concatenate([np.zeros(n1, dtype=int), np.ones(N - n1, dtype=int)])
    y = np.empty(N)
    for g, comp in enumerate(model.components):
        m = z == g
        y[m] = densities.sample(comp, int(m.sum()), rng)
    if model.family is Family.POISSON:
        y = np.round(y)
    return y, z


def _scalar_params(model):
    out = {}
    for g, c in enumerate(model.components, start=1):
        if isinstance(c, densities.NormalParams):
            out[f"mu{g}"] = float(c.mu)
            out[f"sigma{g}"] = float(np.sqrt(c.sigma2))
        elif isinstance(c, densities.PoissonParams):
            out[f"lambda{g}"] = float(c.lam)
        elif isinstance(c, densities.ExponentialParams):
            out[f"mean{g}"] = float(c.mean)
        out[f"pi{g}"] = float(model.weights[g - 1])
    return out


def _default_em(family):
    return EmConfig(penalty="normal_variance" if family is Family.NORMAL else None)


def _best_em(y, inits, config):
    best, failures = None, []
    for k, init in enumerate(inits):
        try:
            fit = fit_em(y, init, config)
        except (MixtureError, np.linalg.LinAlgError) as exc:
            failures.append((k, exc))
            continue
        if best is None or fit.objective > best.objective:
            best = fit
            best.extra["start"] = k
    if best is None:
        raise MixtureError(f"all {len(inits)} starts failed: {failures[0][1] if failures else 'no starts'}")
    best.extra["failures"] = failures
    return best


def _exercise1_replication(scenario, config, index):
    rng = replication_rng(scenario.seed, index)
    truth = scenario.true_model
    y, z = draw_exercise1(truth, scenario.N, rng)
    res = ReplicationResult(index, truth=_scalar_params(truth))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MixtureWarning)
        try:
            inits = quantile_split_inits(y, scenario.family, truth=truth)
        except MixtureError as exc:
            for alg in scenario.algorithms:
                res.failures[alg] = f"{type(exc).__name__}: {exc}"
            return res
        for alg in scenario.algorithms:
            try:
                if alg == "EM":
                    fit = _best_em(y, inits, config.em or _default_em(scenario.family))
                else:
                    fit = multi_start_cem(y, inits, config.cem or CemConfig())
            except (MixtureError, np.linalg.LinAlgError) as exc:
                res.failures[alg] = f"{type(exc).__name__}: {exc}"
                continue
            fit = align_labels(fit, AlignRule.SORT_BY_MEAN, truth=truth)
            res.estimates[alg] = _scalar_params(fit.model)
            res.misclassification[alg] = misclassification_rate(fit.hard_labels.labels, z, 2)[0]
            res.converged[alg] = bool(fit.converged)
    return res


def run_exercise1(scenario, config=None):
    """Replicate: draw data, fit from every quantile split plus the truth, keep the best fit."""
    if scenario.exercise is not Exercise.ONE:
        raise DomainError("run_exercise1 needs an exercise-one scenario")
    return _run(scenario, config or SimConfig(), _exercise1_replication)


# -- exercise two ---------------------------------------------------------------------------


def _panel_params(model, T):
    out = {}
    for g, c in enumerate(model.components, start=1):
        out[f"beta{g}"] = c.beta
        out[f"gamma{g}"] = c.gamma
        for t in range(T):
            out[f"delta{t + 1}_{g}"] = float(c.delta[t])
        out[f"sigma2_alpha{g}"] = float(c.sigma2_alpha)
        out[f"sigma2_eps{g}"] = float(c.sigma2_eps)
        out[f"pi{g}"] = float(model.weights[g - 1])
    return out


def _exercise2_replication(scenario, config, index):
    rng = replication_rng(scenario.seed, index)
    G, T = scenario.G, scenario.T
    dataset, truth = generate_exercise2(scenario.N, T, G, scenario.p, rng)
    starts = [random_start(dataset, G, rng) for _ in range(config.n_inits)]
    res = ReplicationResult(index, truth=_panel_params(truth.model, T))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MixtureWarning)
        for alg in scenario.algorithms:
            try:
                fit = multi_start_panel(dataset, G, alg, starts, config.panel)
            except (MixtureError, np.linalg.LinAlgError) as exc:
                res.failures[alg] = f"{type(exc).__name__}: {exc}"
                continue
            fit = align_labels(fit, AlignRule.MATCH_TRUTH, truth_labels=truth.labels)
            res.estimates[alg] = _panel_params(fit.model, T)
            res.misclassification[alg] = misclassification_rate(fit.extra["labels"].ravel(), truth.labels.ravel(), G)[0]
            res.converged[alg] = bool(fit.converged)
    return res


def run_exercise2(scenario, config=None):
    """Replicate: generate a panel, build random starts, fit each algorithm from the same starts."""
    if scenario.exercise is not Exercise.TWO:
        raise DomainError("run_exercise2 needs an exercise-two scenario")
    return _run(scenario, config or SimConfig(), _exercise2_replication)


# -- driver -------------------------------------------------------------------------------------


def _call(args):
    fn, scenario, config, index = args
    return fn(scenario, config, index)


def _run(scenario, config, fn):
    jobs = [(fn, scenario, config, i) for i in range(scenario.replications)]
    if config.workers > 1 and scenario.replications > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_call, jobs))
    else:
        results = [_call(j) for j in jobs]
    results.sort(key=lambda r: r.index)
    summaries, rates, succ, fail, nonconv = {}, {}, {}, {}, {}
    for alg in scenario.algorithms:
        ok = [r for r in results if alg in r.estimates]
        fail[alg] = scenario.replications - len(ok)
        succ[alg] = len(ok)
        if fail[alg] > config.max_failure_fraction * scenario.replications:
            msgs = sorted({r.failures.get(alg, "") for r in results if alg in r.failures})
            raise ScenarioAbortedError(
                f"{alg}: {fail[alg]} of {scenario.replications} replications failed ({'; '.join(msgs[:3])})"
            )
        nonconv[alg] = sum(1 for r in ok if not r.converged[alg])
        rates[alg] = [r.misclassification[alg] for r in ok]
        names = list(ok[0].estimates[alg])
        summaries[alg] = summarize(
            {n: [r.estimates[alg][n] for r in ok] for n in names},
            {n: [r.truth[n] for r in ok] for n in names},
        )
    return SimulationReport(scenario, summaries, rates, succ, fail, nonconv, results)
