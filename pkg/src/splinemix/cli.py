"""Command-line front door.

Subcommands: simulate, fit, enumerate, mc, misspec, stepwise, importance.
Every option can come from a JSON config document (validated against
CONFIG_SCHEMA); command-line flags override config fields. Every output file
carries a header block (comment rows or a "meta" object) recording the tool
version, the hash of the effective config, and the seed, and full runs write
a manifest. Wall-clock timings go to a separate timings.json so that all
other outputs are byte-identical across reruns and worker counts.

Exit codes: 0 success, 2 validation error, 3 non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .classify import entropy as entropy_metric
from .data import LongitudinalDataset
from .dataio import export_dataset, ingest
from .errors import DegenerateClassError, InvalidInputError, SplinemixError
from .fitting import (
    FitOptions,
    FittedModel,
    enumerate_classes,
    fit,
    information_criteria,
    three_step_fit,
    two_step_fit,
)
from .forest import ForestConfig, variable_importance
from .growth import Frame
from .model import MixtureSpec, ModelKind
from .montecarlo import (
    DEFAULT_KINDS,
    misspecification_experiment,
    run_condition,
    truth_table,
)
from .simulate import condition_by_id, condition_grid, generate, verify_condition

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "splinemix run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "out": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
        "condition": {"type": "string"},
        "reps": {"type": "integer", "minimum": 1},
        "kmax": {"type": "integer", "minimum": 1},
        "n": {"type": "integer", "minimum": 1},
        "mode": {"enum": ["deterministic", "sampled"]},
        "kinds": {"type": "array", "items": {"enum": ["full", "gp", "cp", "fmm"]}},
        "with_misspec": {"type": "boolean"},
        "outcomes": {"type": "string"},
        "covariates": {"type": "string"},
        "kind": {"enum": ["full", "gp", "cp", "fmm"]},
        "classes": {"type": "integer", "minimum": 1},
        "gating": {"type": "array", "items": {"type": "string"}},
        "expert": {"type": "array", "items": {"type": "string"}},
        "frame": {"enum": ["original", "reparameterized"]},
        "optimizer": {"enum": ["em", "direct"]},
        "standardize": {"type": "boolean"},
        "covariate_density": {"enum": ["joint", "conditional"]},
        "method": {"enum": ["two", "three", "both"]},
        "names": {"type": "array", "items": {"type": "string"}},
        "trees": {"type": "integer", "minimum": 1},
        "candidates": {"type": "integer", "minimum": 1},
        "min_leaf": {"type": "integer", "minimum": 2},
        "depth": {"type": "integer", "minimum": 1},
        "min_improvement": {"type": "number"},
        "max_attempts": {"type": "integer", "minimum": 1},
    },
}

_ENV_THREADS = "SPLINEMIX_THREADS"


# execution-environment keys: they never influence results, so they are left
# out of the config hash and manifest echo (worker count must not change bytes)
_ENV_KEYS = ("out", "threads")


def _experiment_config(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in _ENV_KEYS}


def _config_hash(config: dict) -> str:
    blob = json.dumps(_experiment_config(config), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not np.isfinite(v) else v
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (Frame, ModelKind)):
        return obj.value
    return obj


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _header_lines(config, seed):
    return (
        f"splinemix {__version__}",
        f"config_hash {_config_hash(config)}",
        f"seed {seed}",
    )


def _write_csv(path, header_lines, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _meta(config, seed, command):
    return {
        "tool": "splinemix",
        "version": __version__,
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
    }


def _write_manifest(outdir, config, seed, command, outputs, t_start):
    manifest = {
        "meta": _meta(config, seed, command),
        "config": _experiment_config(config),
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    _write_json(os.path.join(outdir, "manifest.json"), manifest)
    _write_json(
        os.path.join(outdir, "timings.json"),
        {"wall_seconds": time.perf_counter() - t_start, "note": "timings are excluded from the determinism contract"},
    )


def _load_config(path):
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"config is not valid JSON: {exc}") from exc
    try:
        import jsonschema

        jsonschema.validate(config, CONFIG_SCHEMA)
    except ImportError:
        _validate_config_fallback(config)
    except Exception as exc:  # jsonschema.ValidationError
        raise InvalidInputError(f"config failed schema validation: {exc}") from exc
    return config


def _validate_config_fallback(config):
    if not isinstance(config, dict):
        raise InvalidInputError("config must be a JSON object")
    unknown = set(config) - set(CONFIG_SCHEMA["properties"])
    if unknown:
        raise InvalidInputError(f"unknown config fields: {sorted(unknown)}")


class _IOFailure(Exception):
    pass


def _merged(args, config, key, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _split_names(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v for v in value.split(",") if v]


def _load_dataset(args, config, expert_names, standardize):
    outcomes = _merged(args, config, "outcomes")
    covariates = _merged(args, config, "covariates")
    if outcomes is None:
        raise InvalidInputError("an outcomes CSV is required (--outcomes)")
    try:
        result = ingest(
            outcomes,
            covariates,
            expert_covariates=tuple(expert_names or ()),
            standardize=standardize,
        )
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc
    for note in result.notices:
        print(f"notice: {note}", file=sys.stderr)
    return result


def _estimates_payload(fitted: FittedModel):
    return [
        {
            "name": e.name,
            "frame": e.frame,
            "estimate": e.estimate,
            "se": e.se,
            "ci_low": e.ci_low,
            "ci_high": e.ci_high,
        }
        for e in fitted.estimates
    ]


def _fit_report(fitted: FittedModel, config, seed, extra=None):
    aic, bic, neg2 = information_criteria(fitted)
    report = {
        "meta": _meta(config, seed, "fit"),
        "spec": {
            "kind": fitted.spec.kind.value,
            "n_classes": fitted.spec.n_classes,
            "gating_covariates": list(fitted.spec.gating_covariates),
            "expert_covariates": list(fitted.spec.expert_covariates),
            "frame": fitted.spec.frame.value,
            "expert_covariate_density": fitted.spec.expert_covariate_density,
        },
        "convergence": {
            "converged": fitted.converged,
            "attempts": fitted.n_attempts,
            "iterations": fitted.n_iter,
            "optimizer": fitted.options.optimizer,
            "se_singular": fitted.se_singular,
        },
        "loglik": fitted.loglik,
        "neg2ll": neg2,
        "aic": aic,
        "bic": bic,
        "n_parameters": fitted.n_parameters,
        "n_individuals": fitted.n_individuals,
        "entropy": entropy_metric(fitted.responsibilities) if fitted.spec.n_classes > 1 else None,
        "estimates": _estimates_payload(fitted),
        "responsibilities": fitted.responsibilities,
    }
    if extra:
        report.update(extra)
    return report


# ---------------------------------------------------------------------------
# Commands


def _cmd_simulate(args, config):
    t0 = time.perf_counter()
    seed = int(_merged(args, config, "seed", 0))
    outdir = _merged(args, config, "out", ".")
    os.makedirs(outdir, exist_ok=True)
    cond_id = _merged(args, config, "condition")
    if cond_id is None:
        raise InvalidInputError("--condition is required (see `splinemix conditions`)")
    condition = condition_by_id(cond_id)
    mode = _merged(args, config, "mode", "deterministic")
    gen = generate(condition, seed=seed, membership_mode=mode)
    headers = _header_lines(config, seed)
    out_csv = os.path.join(outdir, "outcomes.csv")
    cov_csv = os.path.join(outdir, "covariates.csv")
    export_dataset(gen.dataset, out_csv, cov_csv, header_lines=headers)
    truth = {
        "meta": _meta(config, seed, "simulate"),
        "condition": {
            "id": condition.condition_id,
            "scenario": condition.scenario,
            "knots": condition.knots,
            "allocation": condition.allocation,
            "r2": condition.r2,
            "theta_eps": condition.theta_eps,
            "n": condition.n,
        },
        "membership_mode": mode,
        "memberships": gen.memberships,
        "parameters": truth_table(condition),
        "diagnostics": verify_condition(condition),
    }
    truth_json = os.path.join(outdir, "truth.json")
    _write_json(truth_json, truth)
    _write_manifest(outdir, config, seed, "simulate", [out_csv, cov_csv, truth_json], t0)
    print(f"wrote {out_csv}, {cov_csv}, {truth_json}")
    return EXIT_OK


def _build_spec(args, config):
    kind = ModelKind(_merged(args, config, "kind", "fmm"))
    gating = _split_names(_merged(args, config, "gating")) or []
    expert = _split_names(_merged(args, config, "expert")) or []
    return MixtureSpec(
        kind=kind,
        n_classes=int(_merged(args, config, "classes", 1)),
        gating_covariates=tuple(gating),
        expert_covariates=tuple(expert),
        frame=Frame(_merged(args, config, "frame", "reparameterized")),
        expert_covariate_density=_merged(args, config, "covariate_density", "joint"),
    )


def _cmd_fit(args, config):
    t0 = time.perf_counter()
    seed = int(_merged(args, config, "seed", 0))
    outdir = _merged(args, config, "out", ".")
    os.makedirs(outdir, exist_ok=True)
    spec = _build_spec(args, config)
    standardize = bool(_merged(args, config, "standardize", True))
    result = _load_dataset(args, config, spec.expert_covariates, standardize)
    options = FitOptions(
        seed=seed,
        optimizer=_merged(args, config, "optimizer", "em"),
        max_attempts=int(_merged(args, config, "max_attempts", 10)),
        inner_max_iter=12,
    )
    try:
        fitted = fit(spec, result.dataset, options=options)
    except DegenerateClassError as exc:
        _write_json(
            os.path.join(outdir, "fit.json"),
            {"meta": _meta(config, seed, "fit"), "error": str(exc), "converged": False},
        )
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    report = _fit_report(
        fitted, config, seed, extra={"standardization": result.standardization}
    )
    fit_json = os.path.join(outdir, "fit.json")
    _write_json(fit_json, report)
    _write_manifest(outdir, config, seed, "fit", [fit_json], t0)
    print(f"wrote {fit_json} (converged={fitted.converged}, loglik={fitted.loglik:.4f})")
    return EXIT_OK if fitted.converged else EXIT_NONCONVERGENCE


def _cmd_enumerate(args, config):
    t0 = time.perf_counter()
    seed = int(_merged(args, config, "seed", 0))
    outdir = _merged(args, config, "out", ".")
    os.makedirs(outdir, exist_ok=True)
    result = _load_dataset(args, config, (), True)
    kmax = int(_merged(args, config, "kmax", 3))
    options = FitOptions(seed=seed, inner_max_iter=12, compute_se=False)
    enum = enumerate_classes(result.dataset, kmax, options)
    headers = _header_lines(config, seed)
    table_csv = os.path.join(outdir, "enumeration.csv")
    _write_csv(
        table_csv,
        headers,
        ["k", "converged", "loglik", "aic", "bic"],
        [(k, conv, ll, aic, bic) for (k, conv, ll, aic, bic) in enum.table],
    )
    choice_json = os.path.join(outdir, "enumeration.json")
    _write_json(
        choice_json,
        {
            "meta": _meta(config, seed, "enumerate"),
            "chosen_k": enum.chosen_k,
            "table": [
                {"k": k, "converged": conv, "loglik": ll, "aic": aic, "bic": bic}
                for (k, conv, ll, aic, bic) in enum.table
            ],
        },
    )
    _write_manifest(outdir, config, seed, "enumerate", [table_csv, choice_json], t0)
    print(f"chosen K = {enum.chosen_k}")
    return EXIT_OK


def _records_rows(records):
    rows = []
    for rec in records:
        for name in sorted(rec.estimates):
            est, se, lo, hi = rec.estimates[name]
            rows.append(
                (
                    rec.condition_id,
                    rec.replication,
                    rec.kind,
                    int(rec.converged),
                    rec.attempts,
                    name,
                    est,
                    se,
                    lo,
                    hi,
                )
            )
    return rows


def _summary_rows(summary):
    rows = []
    for (kind, name), m in sorted(summary.metrics.items()):
        rows.append(
            (
                summary.condition_id,
                kind,
                name,
                m.truth,
                m.n_reps,
                m.bias,
                m.rel_bias,
                m.empirical_se,
                m.rmse,
                m.rel_rmse,
                m.coverage,
                m.mc_se_bias,
            )
        )
    return rows


def _clustering_rows(summary):
    rows = []
    for kind in summary.kinds:
        clus = summary.clustering.get(kind, {})
        rows.append(
            (
                summary.condition_id,
                kind,
                summary.convergence_rate.get(kind, float("nan")),
                clus.get("accuracy", float("nan")),
                clus.get("entropy", float("nan")),
                clus.get("kappa_vs_fmm", float("nan")),
            )
        )
    return rows


def _cmd_mc(args, config, with_misspec=False):
    t0 = time.perf_counter()
    seed = int(_merged(args, config, "seed", 0))
    outdir = _merged(args, config, "out", ".")
    os.makedirs(outdir, exist_ok=True)
    cond_id = _merged(args, config, "condition")
    if cond_id is None:
        raise InvalidInputError("--condition is required")
    condition = condition_by_id(cond_id)
    reps = int(_merged(args, config, "reps", 100))
    workers = int(_merged(args, config, "threads", os.environ.get(_ENV_THREADS, 1)))
    kinds = _merged(args, config, "kinds")
    kinds = tuple(ModelKind(k) for k in kinds) if kinds else DEFAULT_KINDS
    mode = _merged(args, config, "mode", "sampled")
    command = "misspec" if with_misspec else "mc"
    if with_misspec:
        summary, records, comparison = misspecification_experiment(
            condition, n_reps=reps, seed=seed, kinds=kinds, workers=workers, membership_mode=mode
        )
    else:
        summary, records = run_condition(
            condition,
            kinds=kinds,
            n_reps=reps,
            seed=seed,
            workers=workers,
            membership_mode=mode,
            with_misspec=bool(_merged(args, config, "with_misspec", False)),
        )
        comparison = None
    headers = _header_lines(config, seed)
    outputs = []
    rep_csv = os.path.join(outdir, "replications.csv")
    _write_csv(
        rep_csv,
        headers,
        ["condition", "replication", "kind", "converged", "attempts", "parameter", "estimate", "se", "ci_low", "ci_high"],
        _records_rows(records),
    )
    outputs.append(rep_csv)
    sum_csv = os.path.join(outdir, "summary.csv")
    _write_csv(
        sum_csv,
        headers,
        ["condition", "kind", "parameter", "truth", "n_reps", "bias", "rel_bias", "empirical_se", "rmse", "rel_rmse", "coverage", "mc_se_bias"],
        _summary_rows(summary),
    )
    outputs.append(sum_csv)
    clus_csv = os.path.join(outdir, "clustering.csv")
    _write_csv(
        clus_csv,
        headers,
        ["condition", "kind", "convergence_rate", "mean_accuracy", "mean_entropy", "mean_kappa_vs_fmm"],
        _clustering_rows(summary),
    )
    outputs.append(clus_csv)
    run_json = os.path.join(outdir, f"{command}.json")
    payload = {
        "meta": _meta(config, seed, command),
        "condition": condition.condition_id,
        "membership_mode": mode,
        "target_reps": summary.target_reps,
        "kept_reps": summary.kept_reps,
        "attempted_reps": summary.attempted_reps,
        "aborted": summary.aborted,
        "convergence_rate": summary.convergence_rate,
        "clustering": summary.clustering,
    }
    if comparison is not None:
        payload["comparison"] = comparison
    _write_json(run_json, payload)
    outputs.append(run_json)
    _write_manifest(outdir, config, seed, command, outputs, t0)
    print(
        f"{command}: kept {summary.kept_reps}/{summary.target_reps} reps "
        f"(attempted {summary.attempted_reps}); wrote {len(outputs)} files to {outdir}"
    )
    if summary.aborted:
        print("warning: attempt budget exhausted before reaching target", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _cmd_stepwise(args, config):
    t0 = time.perf_counter()
    seed = int(_merged(args, config, "seed", 0))
    outdir = _merged(args, config, "out", ".")
    os.makedirs(outdir, exist_ok=True)
    gating = _split_names(_merged(args, config, "gating"))
    if not gating:
        raise InvalidInputError("--gating names are required for stepwise estimation")
    expert = _split_names(_merged(args, config, "expert")) or []
    classes = int(_merged(args, config, "classes", 2))
    method = _merged(args, config, "method", "both")
    standardize = bool(_merged(args, config, "standardize", True))
    result = _load_dataset(args, config, expert, standardize)
    first_spec = MixtureSpec(
        kind=ModelKind.GP if expert else ModelKind.FMM,
        n_classes=classes,
        expert_covariates=tuple(expert),
    )
    options = FitOptions(seed=seed, inner_max_iter=12, compute_se=False)
    first = fit(first_spec, result.dataset, options=options)
    if not first.converged:
        print("first-step fit did not converge", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    rows = []
    outputs = []
    results = {}
    if method in ("three", "both"):
        res3 = three_step_fit(result.dataset, first, gating, seed=seed)
        results["three-step"] = res3
    if method in ("two", "both"):
        res2 = two_step_fit(result.dataset, first, gating, options=FitOptions(seed=seed, compute_se=True))
        results["two-step"] = res2
    for label, res in results.items():
        names = ["intercept", *res.gating_covariates]
        for k in range(res.coefficients.shape[0]):
            for j, nm in enumerate(names):
                rows.append(
                    (
                        label,
                        k + 2,
                        nm,
                        res.coefficients[k, j],
                        res.ses[k, j],
                        res.ci_low[k, j],
                        res.ci_high[k, j],
                        int(res.separated),
                    )
                )
    headers = _header_lines(config, seed)
    step_csv = os.path.join(outdir, "stepwise.csv")
    _write_csv(
        step_csv,
        headers,
        ["method", "class", "term", "estimate", "se", "ci_low", "ci_high", "separated"],
        rows,
    )
    outputs.append(step_csv)
    _write_manifest(outdir, config, seed, "stepwise", outputs, t0)
    print(f"wrote {step_csv}")
    return EXIT_OK


def _cmd_importance(args, config):
    t0 = time.perf_counter()
    seed = int(_merged(args, config, "seed", 0))
    outdir = _merged(args, config, "out", ".")
    os.makedirs(outdir, exist_ok=True)
    names = _split_names(_merged(args, config, "names"))
    standardize = bool(_merged(args, config, "standardize", True))
    result = _load_dataset(args, config, (), standardize)
    if not names:
        names = list(result.dataset.covariate_names)
    workers = int(_merged(args, config, "threads", os.environ.get(_ENV_THREADS, 1)))
    fc = ForestConfig(
        n_trees=int(_merged(args, config, "trees", 128)),
        candidate_size=int(_merged(args, config, "candidates", 2)),
        min_leaf=int(_merged(args, config, "min_leaf", 25)),
        max_depth=int(_merged(args, config, "depth", 3)),
        min_improvement=float(_merged(args, config, "min_improvement", 3.84)),
        seed=seed,
    )
    report = variable_importance(result.dataset, names, fc, workers=workers)
    headers = _header_lines(config, seed)
    imp_csv = os.path.join(outdir, "importance.csv")
    _write_csv(
        imp_csv,
        headers,
        ["covariate", "score", "rank", "trees_used", "dispersion"],
        [
            (nm, report.scores[nm], report.ranks[nm], report.trees_used[nm], report.dispersion[nm])
            for nm in report.ordered()
        ],
    )
    imp_json = os.path.join(outdir, "importance.json")
    _write_json(
        imp_json,
        {
            "meta": _meta(config, seed, "importance"),
            "n_trees": report.n_trees,
            "scores": report.scores,
            "ranks": report.ranks,
            "trees_used": report.trees_used,
        },
    )
    _write_manifest(outdir, config, seed, "importance", [imp_csv, imp_json], t0)
    print(f"wrote {imp_csv}")
    return EXIT_OK


def _cmd_conditions(args, config):
    for cond in condition_grid():
        print(cond.condition_id)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="splinemix",
        description="Mixtures of bilinear-spline growth models with covariates",
    )
    parser.add_argument("--version", action="version", version=f"splinemix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its fields")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("simulate", help="write a synthetic dataset for a design cell")
    common(p)
    p.add_argument("--condition", default=None, help="condition id, e.g. s1-sep2-bal-r13.13-t1")
    p.add_argument("--mode", choices=["deterministic", "sampled"], default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit one mixture model to a dataset")
    common(p)
    p.add_argument("--outcomes", default=None)
    p.add_argument("--covariates", default=None)
    p.add_argument("--kind", choices=["full", "gp", "cp", "fmm"], default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--gating", default=None, help="comma-separated covariate names")
    p.add_argument("--expert", default=None, help="comma-separated covariate names")
    p.add_argument("--frame", choices=["original", "reparameterized"], default=None)
    p.add_argument("--optimizer", choices=["em", "direct"], default=None)
    p.add_argument("--max-attempts", dest="max_attempts", type=int, default=None)
    p.add_argument("--no-standardize", dest="standardize", action="store_false", default=None)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("enumerate", help="choose the class count by BIC (no covariates)")
    common(p)
    p.add_argument("--outcomes", default=None)
    p.add_argument("--covariates", default=None)
    p.add_argument("--kmax", type=int, default=None)
    p.set_defaults(func=_cmd_enumerate)

    p = sub.add_parser("mc", help="replicated simulation-estimation study for one cell")
    common(p)
    p.add_argument("--condition", default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--kinds", default=None, help="comma-separated subset of full,gp,cp,fmm")
    p.add_argument("--mode", choices=["deterministic", "sampled"], default=None)
    p.add_argument("--with-misspec", dest="with_misspec", action="store_true", default=None)
    p.set_defaults(func=lambda a, c: _cmd_mc(a, c, with_misspec=False))

    p = sub.add_parser("misspec", help="misspecified all-covariates-gating comparison")
    common(p)
    p.add_argument("--condition", default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--kinds", default=None)
    p.add_argument("--mode", choices=["deterministic", "sampled"], default=None)
    p.set_defaults(func=lambda a, c: _cmd_mc(a, c, with_misspec=True))

    p = sub.add_parser("stepwise", help="two-/three-step gating-coefficient estimation")
    common(p)
    p.add_argument("--outcomes", default=None)
    p.add_argument("--covariates", default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--gating", default=None)
    p.add_argument("--expert", default=None)
    p.add_argument("--method", choices=["two", "three", "both"], default=None)
    p.set_defaults(func=_cmd_stepwise)

    p = sub.add_parser("importance", help="forest-based covariate importance")
    common(p)
    p.add_argument("--outcomes", default=None)
    p.add_argument("--covariates", default=None)
    p.add_argument("--names", default=None, help="candidate covariates (default: all)")
    p.add_argument("--trees", type=int, default=None)
    p.add_argument("--candidates", type=int, default=None)
    p.add_argument("--min-leaf", dest="min_leaf", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.set_defaults(func=_cmd_importance)

    p = sub.add_parser("conditions", help="list all design-cell condition ids")
    p.set_defaults(func=_cmd_conditions, config=None)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    config = {}
    if getattr(args, "config", None):
        try:
            config = _load_config(args.config)
        except InvalidInputError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        except _IOFailure as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    # effective config for hashing: config overridden by explicit flags
    effective = dict(config)
    for key, value in vars(args).items():
        if key in ("func", "command", "config") or value is None:
            continue
        effective[key] = value
    try:
        return args.func(args, effective)
    except (InvalidInputError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DegenerateClassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except _IOFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
