"""Command-line entry point: ``mixcem {sim1,sim2,fit,cv,validate-config}``.

Every command reads a TOML or JSON config, computes all results in memory,
writes its data files and finally a ``manifest.json`` that lists them.  Exit
codes: 0 success, 1 estimation failure, 2 invalid config or input data,
3 aborted scenario.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__, densities
from .classify import misclassification_rate
from .crossval import CvPlan, cross_validate
from .densities import Family, MixtureModel
from .errors import MixtureError, ScenarioAbortedError
from .panel import (
    IngestionError,
    PanelConfig,
    multi_start_panel,
    random_start,
    read_panel_csv,
)
from .simulate import Exercise, Scenario, SimConfig, run_exercise1, run_exercise2

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2, 3


class ConfigError(Exception):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


# -- config loading and validation ---------------------------------------------------------------


def load_config(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw.decode("utf-8"))
        return tomllib.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    except UnicodeDecodeError:
        raise ConfigError("config is not UTF-8") from None


def _get(table, key, kind, default=None, required=False, where=""):
    name = f"{where}.{key}" if where else key
    if key not in table:
        if required:
            raise ConfigError("missing required field", name)
        return default
    value = table[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", name)
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", name)
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", name)
    elif kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", name)
    elif kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", name)
    return value


def _int_list(table, key, where, default=None, required=False, minimum=1):
    value = table.get(key, default)
    name = f"{where}.{key}"
    if value is None:
        if required:
            raise ConfigError("missing required field", name)
        return None
    values = value if isinstance(value, list) else [value]
    if not values:
        raise ConfigError("must not be empty", name)
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            raise ConfigError(f"expected integers >= {minimum}, got {v!r}", name)
    return values


def _float_pair(table, key, where):
    name = f"{where}.{key}"
    v = table.get(key)
    if not isinstance(v, list) or len(v) != 2 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError("expected a list of two numbers", name)
    return [float(x) for x in v]


def _table(cfg, key, required=True):
    t = cfg.get(key)
    if t is None:
        if required:
            raise ConfigError("missing required table", key)
        return {}
    if not isinstance(t, dict):
        raise ConfigError("expected a table", key)
    return t


def _algorithms(table, where, default=("EM", "CEM")):
    algs = table.get("algorithms", list(default))
    if not isinstance(algs, list) or not algs:
        raise ConfigError("expected a non-empty list", f"{where}.algorithms")
    out = []
    for a in algs:
        if not isinstance(a, str) or a.upper() not in ("EM", "CEM"):
            raise ConfigError(f"unknown algorithm {a!r} (use EM or CEM)", f"{where}.algorithms")
        out.append(a.upper())
    return tuple(dict.fromkeys(out))


def truth_model(family, truth):
    """Two-component univariate truth from a config table."""
    pi = _float_pair(truth, "pi", "truth") if "pi" in truth else None
    if pi is None:
        raise ConfigError("missing required field", "truth.pi")
    if not all(0 < p < 1 for p in pi) or abs(sum(pi) - 1) > 1e-12:
        raise ConfigError("weights must lie in (0, 1) and sum to 1", "truth.pi")
    try:
        if family is Family.NORMAL:
            mu = _float_pair(truth, "mu", "truth")
            sigma = _float_pair(truth, "sigma", "truth")
            comps = tuple(densities.NormalParams(m, s**2) for m, s in zip(mu, sigma))
        elif family is Family.POISSON:
            comps = tuple(densities.PoissonParams(v) for v in _float_pair(truth, "lambda", "truth"))
        elif family is Family.EXPONENTIAL:
            comps = tuple(densities.ExponentialParams(v) for v in _float_pair(truth, "mean", "truth"))
        else:
            raise ConfigError(f"family {family.value} is not univariate", "scenario.family")
        return MixtureModel(comps, np.array(pi))
    except MixtureError as exc:
        raise ConfigError(str(exc), "truth") from None


@dataclass
class Job:
    command: str
    out_dir: str | None
    seed: int
    payload: dict = field(default_factory=dict)


def validate(cfg, command=None, overrides=None):
    """Check a parsed config for ``command`` and return a resolved :class:`Job`."""
    overrides = overrides or {}
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be a table")
    command = command or _get(cfg, "command", str, required=True)
    if command not in ("sim1", "sim2", "fit", "cv"):
        raise ConfigError(f"unknown command {command!r}", "command")
    out_dir = _get(cfg, "out_dir", str)
    seed = overrides.get("seed")
    if command in ("sim1", "sim2"):
        sc = _table(cfg, "scenario")
        seed = seed if seed is not None else _get(sc, "seed", int, 0, where="scenario")
        reps = overrides.get("replications") or _get(sc, "replications", int, 100, where="scenario")
        if reps < 1:
            raise ConfigError("must be >= 1", "scenario.replications")
        Ns = _int_list(sc, "N", "scenario", required=True)
        algs = _algorithms(sc, "scenario", ("EM",) if command == "sim1" else ("EM", "CEM"))
        payload = {"N": Ns, "replications": reps, "algorithms": algs}
        if command == "sim1":
            fam_name = _get(sc, "family", str, "normal", where="scenario")
            try:
                family = Family(fam_name)
            except ValueError:
                raise ConfigError(f"unknown family {fam_name!r}", "scenario.family") from None
            payload["family"] = family
            payload["truth"] = truth_model(family, _table(cfg, "truth"))
        else:
            payload["T"] = _int_list(sc, "T", "scenario", default=5)[0]
            payload["p"] = _int_list(sc, "p", "scenario", default=1)[0]
            payload["G"] = _int_list(sc, "G", "scenario", default=2)[0]
            payload["n_inits"] = _int_list(sc, "n_inits", "scenario", default=25)[0]
            if payload["T"] < 2:
                raise ConfigError("must be >= 2", "scenario.T")
        payload["m_step"] = _get(sc, "m_step", str, "iwgls", where="scenario")
        if payload["m_step"] not in ("iwgls", "ml"):
            raise ConfigError("expected 'iwgls' or 'ml'", "scenario.m_step")
        return Job(command, out_dir, seed, payload)
    # fit and cv work on a data file
    table = _table(cfg, "model" if command == "fit" else "cv")
    where = "model" if command == "fit" else "cv"
    data = overrides.get("data") or _get(table, "data", str, where=where)
    if not data:
        raise ConfigError("missing required field (or pass --data)", f"{where}.data")
    seed = seed if seed is not None else _get(table, "seed", int, 0, where=where)
    algorithm = _get(table, "algorithm", str, "CEM", where=where).upper()
    if algorithm not in ("EM", "CEM"):
        raise ConfigError(f"unknown algorithm {algorithm!r}", f"{where}.algorithm")
    n_inits = _int_list(table, "n_inits", where, default=25)[0]
    m_step = _get(table, "m_step", str, "iwgls", where=where)
    if m_step not in ("iwgls", "ml"):
        raise ConfigError("expected 'iwgls' or 'ml'", f"{where}.m_step")
    payload = {"data": data, "algorithm": algorithm, "n_inits": n_inits, "m_step": m_step}
    if command == "fit":
        payload["G"] = _int_list(table, "G", where, required=True)[0]
    else:
        payload["G"] = _int_list(table, "G", where, default=[1, 2])
        payload["folds"] = _int_list(table, "folds", where, default=2, minimum=2)[0]
        payload["repetitions"] = _int_list(table, "repetitions", where, default=10)[0]
        payload["warm_start"] = _get(table, "warm_start", bool, False, where=where)
        payload["test_weights"] = _get(table, "test_weights", str, "posterior", where=where)
        if payload["test_weights"] not in ("posterior", "hard"):
            raise ConfigError("expected 'posterior' or 'hard'", "cv.test_weights")
    return Job(command, out_dir, seed, payload)


# -- output helpers ----------------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _json_text(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(rows, columns):
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="raise")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()


def _write_outputs(out_dir, files, manifest):
    """Write data files, then the manifest last as the commit marker."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in files.items():
        p = out / name
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, p)
        paths.append(str(p))
    manifest["outputs"] = paths
    manifest["end_time"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    mp = out / "manifest.json"
    tmp = mp.with_suffix(".json.tmp")
    tmp.write_text(_json_text(manifest), encoding="utf-8")
    os.replace(tmp, mp)
    return paths


# -- commands -----------------------------------------------------------------------------------------------

PARAM_COLUMNS = ["algorithm", "parameter", "N", "mean_estimate", "bias", "mse", "p2.5", "p97.5"]


def _run_sims(job, workers):
    pl = job.payload
    reports = []
    for N in pl["N"]:
        if job.command == "sim1":
            sc = Scenario(Exercise.ONE, pl["family"], pl["truth"], N=N, replications=pl["replications"],
                          seed=job.seed, algorithms=pl["algorithms"])
            reports.append(run_exercise1(sc, SimConfig(workers=workers)))
        else:
            sc = Scenario(Exercise.TWO, Family.PANEL_LINEAR, None, N=N, T=pl["T"], p=pl["p"], G=pl["G"],
                          replications=pl["replications"], seed=job.seed, algorithms=pl["algorithms"])
            cfg = SimConfig(panel=PanelConfig(m_step=pl["m_step"]), n_inits=pl["n_inits"], workers=workers)
            reports.append(run_exercise2(sc, cfg))
    return reports


def _sim_files(job, reports):
    rows = [r for rep in reports for r in rep.csv_rows()]
    files = {
        "report.json": _json_text({"reports": [rep.to_dict() for rep in reports]}),
        "parameters.csv": _csv_text(rows, PARAM_COLUMNS),
    }
    summary_cols = ["N", "replications"]
    for alg in job.payload["algorithms"]:
        summary_cols += [f"{alg}_successes", f"{alg}_failures", f"{alg}_non_converged", f"{alg}_misclass_mean",
                         f"{alg}_misclass_zero_fraction", f"{alg}_misclass_p2.5", f"{alg}_misclass_p97.5"]
    summary = []
    for rep in reports:
        row = {"N": rep.scenario.N, "replications": rep.scenario.replications}
        for alg in job.payload["algorithms"]:
            m = rep.to_dict()["algorithms"][alg]["misclassification"]
            row.update({
                f"{alg}_successes": rep.successes[alg],
                f"{alg}_failures": rep.failures[alg],
                f"{alg}_non_converged": rep.non_converged[alg],
                f"{alg}_misclass_mean": m["mean"],
                f"{alg}_misclass_zero_fraction": m["zero_fraction"],
                f"{alg}_misclass_p2.5": m["p2_5"],
                f"{alg}_misclass_p97.5": m["p97_5"],
            })
        summary.append(row)
    files["summary.csv"] = _csv_text(summary, summary_cols)
    return files


def _fit_files(job):
    pl = job.payload
    dataset, periods = read_panel_csv(pl["data"])
    rng = np.random.default_rng(job.seed)
    G = pl["G"]
    starts = [random_start(dataset, G, rng) for _ in range(pl["n_inits"] if G > 1 else 1)]
    fit = multi_start_panel(dataset, G, pl["algorithm"], starts, PanelConfig(m_step=pl["m_step"]))
    cols = fit.extra["columns"]
    groups = []
    for g, comp in enumerate(fit.model.components):
        V = fit.variance_estimates[g] if fit.variance_estimates is not None else None
        se = np.sqrt(np.clip(np.diag(V), 0, None)) if V is not None else [None] * len(cols)
        groups.append({
            "group": g + 1,
            "pi": float(fit.model.weights[g]),
            "coefficients": {c: float(b) for c, b in zip(cols, comp.beta_tilde)},
            "cluster_robust_se": {c: (None if s is None else float(s)) for c, s in zip(cols, se)},
            "sigma2_alpha": comp.sigma2_alpha,
            "sigma2_eps": comp.sigma2_eps,
            "covariate_mean": fit.extra["covariate_params"][g].mu,
            "covariate_cov": fit.extra["covariate_params"][g].sigma,
        })
    labels = fit.extra["labels"]
    report = {
        "algorithm": pl["algorithm"],
        "G": G,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "objective": fit.objective,
        "exit_reason": fit.exit_reason,
        "failed_starts": len(fit.extra.get("failures", [])),
        "groups": groups,
        "transition_counts": fit.extra["transition_counts"],
        "periods": periods,
    }
    if dataset.truth_labels is not None and np.all(dataset.truth_labels[dataset.weights > 0] >= 0):
        live = dataset.weights > 0
        n_groups = max(G, int(dataset.truth_labels[live].max()) + 1)
        rate, _ = misclassification_rate(labels[live], dataset.truth_labels[live], n_groups)
        report["misclassification_vs_truth"] = rate
    ids = dataset.unit_ids
    mem_cols = ["unit_id", "period", "group"]
    if fit.responsibilities is not None:
        mem_cols += [f"posterior{g + 1}" for g in range(G)]
        post = fit.responsibilities.matrix.reshape(dataset.units, dataset.periods, G)
    rows = []
    for i in range(dataset.units):
        for t in range(dataset.periods):
            if dataset.weights[i, t] == 0:
                continue
            r = {"unit_id": ids[i], "period": periods[t], "group": int(labels[i, t]) + 1}
            if fit.responsibilities is not None:
                r.update({f"posterior{g + 1}": float(post[i, t, g]) for g in range(G)})
            rows.append(r)
    return {"fit.json": _json_text(report), "memberships.csv": _csv_text(rows, mem_cols)}


def _cv_files(job):
    pl = job.payload
    dataset, _ = read_panel_csv(pl["data"])
    plan = CvPlan(folds=pl["folds"], repetitions=pl["repetitions"], seed=job.seed,
                  warm_start=pl["warm_start"], n_inits=pl["n_inits"], test_weights=pl["test_weights"])
    reports = [cross_validate(dataset, G, pl["algorithm"], plan, PanelConfig(m_step=pl["m_step"])) for G in pl["G"]]
    fold_cols = ["G", "algorithm", "repetition", "fold", "n_test", "rmse", "relative_to_G1", "failure"]
    rel = [{"G": r.G, "algorithm": r.algorithm, "rmse": r.rmse_overall, "baseline_rmse": r.baseline_rmse,
            "relative_to_G1": r.relative_to_G1} for r in reports]
    return {
        "cv.json": _json_text({"reports": [r.to_dict() for r in reports]}),
        "folds.csv": _csv_text([row for r in reports for row in r.csv_rows()], fold_cols),
        "relative_rmse.csv": _csv_text(rel, ["G", "algorithm", "rmse", "baseline_rmse", "relative_to_G1"]),
    }


def build_parser():
    parser = argparse.ArgumentParser(prog="mixcem", description="Finite mixtures by EM and classification EM.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("sim1", "univariate mixture Monte Carlo study"),
        ("sim2", "latent-group panel Monte Carlo study"),
        ("fit", "fit a latent-group panel to a long-format CSV"),
        ("cv", "repeated unit-level cross-validation on a long-format CSV"),
        ("validate-config", "check a config file without running it"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="TOML or JSON config file")
        if name != "validate-config":
            p.add_argument("--out-dir", help="output directory (overrides out_dir in the config)")
            p.add_argument("--seed", type=int, help="root seed (overrides the config)")
            p.add_argument("--threads", type=int, default=None, help="worker processes for replications")
        if name in ("sim1", "sim2"):
            p.add_argument("--replications", type=int, help="override the replication count")
        if name in ("fit", "cv"):
            p.add_argument("--data", help="long-format panel CSV (overrides the config)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    start = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        cfg = load_config(args.config)
        if args.command == "validate-config":
            job = validate(cfg)
            print(f"{args.config}: valid {job.command} config")
            return EXIT_OK
        overrides = {
            "seed": args.seed,
            "replications": getattr(args, "replications", None),
            "data": getattr(args, "data", None),
        }
        if overrides["replications"] is not None and overrides["replications"] < 1:
            raise ConfigError("must be >= 1", "--replications")
        job = validate(cfg, args.command, overrides)
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    workers = args.threads if args.threads is not None else (os.cpu_count() or 1)
    out_dir = args.out_dir or job.out_dir or "mixcem-out"
    try:
        if job.command in ("sim1", "sim2"):
            files = _sim_files(job, _run_sims(job, max(workers, 1)))
        elif job.command == "fit":
            files = _fit_files(job)
        else:
            files = _cv_files(job)
    except IngestionError as exc:
        print(f"error: {job.payload.get('data')}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioAbortedError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (MixtureError, np.linalg.LinAlgError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    manifest = {
        "command": job.command,
        "config": str(args.config),
        "seed": job.seed,
        "version": __version__,
        "start_time": start,
    }
    _write_outputs(out_dir, files, manifest)
    print(f"wrote {len(files)} files and manifest.json to {out_dir}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
