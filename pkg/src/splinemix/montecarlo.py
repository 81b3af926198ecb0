"""Replicated simulation-estimation experiments and performance summaries.

Each replication generates one dataset from a design cell, fits the requested
model kinds, and records estimates, confidence intervals, convergence and
clustering metrics. Replications continue until the target number of
joint-convergent solutions accumulates (every requested kind converged);
summaries are computed over the kept replications only.

Per-replication seeds derive deterministically from (master seed, condition
uid, replication index), so results are identical for any worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .classify import Assignment, accuracy, entropy, kappa_agreement, modal_assignment
from .errors import DegenerateClassError, InvalidInputError
from .fitting import FitOptions, FittedModel, fit, information_criteria
from .growth import Frame
from .model import MixtureSpec, ModelKind, MixtureParams
from .simulate import (
    COVARIATE_NAMES,
    GeneratedDataset,
    SimCondition,
    generate,
    true_parameters,
)

__all__ = [
    "PerformanceMetrics",
    "ReplicationRecord",
    "ConditionSummary",
    "performance_metrics",
    "run_condition",
    "misspecification_experiment",
    "truth_table",
    "DEFAULT_KINDS",
]

DEFAULT_KINDS = (ModelKind.FULL, ModelKind.GP, ModelKind.CP, ModelKind.FMM)
_BATCH = 16  # replication batch size; fixed so results never depend on workers
MISSPEC_LABEL = "misspec-cp"


@dataclass(frozen=True)
class PerformanceMetrics:
    truth: float
    n_reps: int
    bias: float  # mean(est - truth)
    rel_bias: float  # nan when truth == 0
    empirical_se: float
    rmse: float
    rel_rmse: float  # nan when truth == 0
    coverage: float
    mc_se_bias: float
    relative_defined: bool


def performance_metrics(estimates, ci_low, ci_high, truth: float) -> PerformanceMetrics:
    """Simulation performance measures for one parameter.

    Relative bias sum(est - truth) / (S truth); empirical SE with the S-1
    denominator; relative RMSE sqrt(sum((est - truth)^2) / S) / truth;
    coverage as the fraction of CIs containing the truth; and the Monte Carlo
    SE of bias sqrt(Var(est) / S). Relative measures are undefined at
    truth = 0 and reported as NaN with the absolute variants still filled in.
    """
    est = np.asarray(estimates, dtype=float)
    lo = np.asarray(ci_low, dtype=float)
    hi = np.asarray(ci_high, dtype=float)
    s = est.size
    if s < 2:
        raise InvalidInputError("need at least two replications")
    bias = float(np.mean(est - truth))
    emp_se = float(np.sqrt(np.sum((est - est.mean()) ** 2) / (s - 1)))
    rmse = float(np.sqrt(np.sum((est - truth) ** 2) / s))
    with np.errstate(invalid="ignore"):
        cover_flags = (lo <= truth) & (truth <= hi)
    coverage = float(np.mean(cover_flags))
    mc_se = float(np.sqrt(np.var(est, ddof=1) / s))
    defined = truth != 0.0
    return PerformanceMetrics(
        truth=float(truth),
        n_reps=s,
        bias=bias,
        rel_bias=bias / truth if defined else float("nan"),
        empirical_se=emp_se,
        rmse=rmse,
        rel_rmse=rmse / abs(truth) if defined else float("nan"),
        coverage=coverage,
        mc_se_bias=mc_se,
        relative_defined=bool(defined),
    )


@dataclass(frozen=True)
class ReplicationRecord:
    condition_id: str
    replication: int
    kind: str
    converged: bool
    attempts: int
    n_iter: int
    loglik: float
    aic: float
    bic: float
    accuracy: float
    entropy: float
    kappa_vs_fmm: float
    estimates: dict  # name -> (estimate, se, ci_low, ci_high)
    wall_time: float
    em_monotone: bool = True


@dataclass(frozen=True)
class ConditionSummary:
    condition_id: str
    kinds: tuple
    target_reps: int
    kept_reps: int
    attempted_reps: int
    aborted: bool
    convergence_rate: dict  # kind -> convergent / attempted
    metrics: dict  # (kind, parameter) -> PerformanceMetrics
    clustering: dict  # kind -> {"accuracy": .., "entropy": .., "kappa_vs_fmm": ..}
    kept_indices: tuple


def truth_table(condition: SimCondition) -> dict:
    """Generating values keyed by the original-frame parameter names."""
    params = true_parameters(condition)
    out = {}
    for k, cp in enumerate(params.classes):
        pre = f"class{k + 1}"
        mu = cp.beta_e0 + cp.b_e @ cp.mu_xe
        for j in range(3):
            out[f"{pre}.mu_eta{j}"] = float(mu[j])
        for a in range(3):
            for b in range(a, 3):
                out[f"{pre}.psi{a}{b}"] = float(cp.psi[a, b])
        out[f"{pre}.knot"] = float(cp.gamma)
        out[f"{pre}.theta_eps"] = float(cp.theta_eps)
        for j in range(3):
            for c, nm in enumerate(COVARIATE_NAMES[2:]):
                out[f"{pre}.path.eta{j}.{nm}"] = float(cp.b_e[j, c])
        for c, nm in enumerate(COVARIATE_NAMES[2:]):
            out[f"{pre}.mu_x.{nm}"] = float(cp.mu_xe[c])
            out[f"{pre}.phi.{nm}.{nm}"] = float(cp.phi[c, c])
        out[f"{pre}.phi.x_e1.x_e2"] = float(cp.phi[0, 1])
    out["gating2.intercept"] = float(params.gating.intercepts[0])
    for c, nm in enumerate(COVARIATE_NAMES[:2]):
        out[f"gating2.{nm}"] = float(params.gating.coefficients[0, c])
    return out


def _spec_for_kind(kind: ModelKind, frame: Frame = Frame.REPARAMETERIZED) -> MixtureSpec:
    gating = COVARIATE_NAMES[:2] if kind.has_gating_covariates else ()
    expert = COVARIATE_NAMES[2:] if kind.has_expert_covariates else ()
    return MixtureSpec(
        kind=kind, n_classes=2, gating_covariates=gating, expert_covariates=expert, frame=frame
    )


def misspecified_cp_spec(frame: Frame = Frame.REPARAMETERIZED) -> MixtureSpec:
    """The common misspecification: every covariate gates class membership."""
    return MixtureSpec(
        kind=ModelKind.CP, n_classes=2, gating_covariates=COVARIATE_NAMES, frame=frame
    )


def _truth_match_order(fitted: FittedModel, truth: MixtureParams) -> list:
    """Permutation matching fitted classes to generating classes by the
    normalized distance over knots and growth-factor means."""
    import itertools

    k = truth.n_classes
    fitted_orig = fitted.params_original
    feats_t, feats_f = [], []
    for cp in truth.classes:
        feats_t.append(np.concatenate([[cp.gamma], cp.beta_e0 + cp.b_e @ cp.mu_xe]))
    for cp in fitted_orig.classes:
        feats_f.append(np.concatenate([[cp.gamma], cp.beta_e0 + cp.b_e @ cp.mu_xe]))
    scale = np.maximum(1.0, np.abs(np.asarray(feats_t)).max(axis=0))
    best, best_d = None, np.inf
    for perm in itertools.permutations(range(k)):
        d = sum(
            float(np.sum(((feats_f[perm[j]] - feats_t[j]) / scale) ** 2)) for j in range(k)
        )
        if d < best_d:
            best_d, best = d, perm
    return list(best)


def _seed_for(master_seed: int, condition: SimCondition, rep: int, slot: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((master_seed, condition.uid + 1_000_000, rep, slot))


def _fit_one_kind(gen: GeneratedDataset, kind_label: str, spec: MixtureSpec,
                  options: FitOptions, seed_seq, truth: MixtureParams):
    t0 = time.perf_counter()
    opts = replace(options, seed=int(seed_seq.generate_state(1)[0]))
    try:
        fitted = fit(spec, gen.dataset, options=opts)
    except DegenerateClassError:
        return None, _failed_record(gen, kind_label, time.perf_counter() - t0)
    if fitted.converged:
        order = _truth_match_order(fitted, truth)
        if order != list(range(spec.n_classes)):
            refit_params = fitted.params.relabel(order)
            fitted = replace(
                fitted,
                params=refit_params,
                params_original=refit_params.to_frame(Frame.ORIGINAL),
                params_reparameterized=refit_params.to_frame(Frame.REPARAMETERIZED),
                packed=fitted.layout.pack(refit_params),
                responsibilities=fitted.responsibilities[:, order],
            )
            if fitted.options.compute_se:
                from .fitting import _se_table
                from .likelihood import LikelihoodEngine

                engine = LikelihoodEngine(spec, gen.dataset)
                ests, vcov, singular, _ = _se_table(
                    engine, spec, fitted.layout, fitted.packed, fitted.frozen_mask,
                    fitted.options.se_step,
                )
                fitted = replace(fitted, estimates=ests, vcov_packed=vcov, se_singular=singular)
    aic, bic, _ = information_criteria(fitted)
    post = fitted.responsibilities
    assign = modal_assignment(post, seed=int(seed_seq.generate_state(2)[1]))
    truth_assign = Assignment(labels=gen.memberships, n_classes=spec.n_classes)
    acc = accuracy(assign, truth_assign)
    ent = entropy(post) if spec.n_classes > 1 else float("nan")
    table = fitted.estimate_table("original")
    estimates = {
        nm: (e.estimate, e.se, e.ci_low, e.ci_high) for nm, e in table.items()
    }
    trace_ok = bool(np.all(np.diff(fitted.ll_trace) >= -1e-8)) if fitted.ll_trace.size > 1 else True
    record = ReplicationRecord(
        condition_id=gen.condition.condition_id,
        replication=-1,  # filled by caller
        kind=kind_label,
        converged=fitted.converged,
        attempts=fitted.n_attempts,
        n_iter=fitted.n_iter,
        loglik=fitted.loglik,
        aic=aic,
        bic=bic,
        accuracy=acc,
        entropy=ent,
        kappa_vs_fmm=float("nan"),
        estimates=estimates,
        wall_time=time.perf_counter() - t0,
        em_monotone=trace_ok,
    )
    return assign, record


def _failed_record(gen: GeneratedDataset, kind_label: str, wall: float) -> ReplicationRecord:
    return ReplicationRecord(
        condition_id=gen.condition.condition_id,
        replication=-1,
        kind=kind_label,
        converged=False,
        attempts=0,
        n_iter=0,
        loglik=float("nan"),
        aic=float("nan"),
        bic=float("nan"),
        accuracy=float("nan"),
        entropy=float("nan"),
        kappa_vs_fmm=float("nan"),
        estimates={},
        wall_time=wall,
        em_monotone=True,
    )


def _run_replication(args):
    (condition, kinds, master_seed, rep, options, membership_mode, with_misspec) = args
    gen = generate(
        condition,
        seed=int(_seed_for(master_seed, condition, rep, 0).generate_state(1)[0]),
        membership_mode=membership_mode,
    )
    truth = gen.params
    records = {}
    assigns = {}
    for slot, kind in enumerate(kinds, start=1):
        spec = _spec_for_kind(kind)
        assign, rec = _fit_one_kind(gen, kind.value, spec, options, _seed_for(master_seed, condition, rep, slot), truth)
        records[kind.value] = replace(rec, replication=rep)
        assigns[kind.value] = assign
    # the respecified model is only fit on jointly convergent replications
    if with_misspec and all(records[k.value].converged for k in kinds):
        spec = misspecified_cp_spec()
        assign, rec = _fit_one_kind(
            gen, MISSPEC_LABEL, spec, options, _seed_for(master_seed, condition, rep, 99), truth
        )
        records[MISSPEC_LABEL] = replace(rec, replication=rep)
        assigns[MISSPEC_LABEL] = assign
    # agreement with the covariate-free solution
    if "fmm" in assigns and assigns["fmm"] is not None:
        for label, assign in assigns.items():
            if label == "fmm" or assign is None:
                continue
            try:
                kap, _, _ = kappa_agreement(assigns["fmm"], assign)
            except InvalidInputError:
                kap = float("nan")
            records[label] = replace(records[label], kappa_vs_fmm=kap)
    return rep, records


def run_condition(
    condition: SimCondition,
    kinds=DEFAULT_KINDS,
    n_reps: int = 100,
    seed: int = 0,
    options: FitOptions | None = None,
    workers: int = 1,
    membership_mode: str = "sampled",
    with_misspec: bool = False,
    max_attempt_factor: int = 10,
    progress=None,
):
    """Replicate generate-and-fit until ``n_reps`` joint-convergent solutions.

    Returns (ConditionSummary, records) where records is a flat tuple of
    ReplicationRecord sorted by (replication, kind). The misspecified
    all-covariates-gating model can be fit alongside on the same data.
    """
    kinds = tuple(ModelKind(k) for k in kinds)
    options = options or FitOptions(compute_se=True, inner_max_iter=12)
    all_records: dict[int, dict] = {}
    kept: list[int] = []
    rep_cursor = 0
    aborted = False
    max_reps = max_attempt_factor * n_reps

    def joint_ok(recs):
        return all(recs[k.value].converged for k in kinds)

    batch_size = min(_BATCH, n_reps)  # config-determined, never worker-dependent
    while len(kept) < n_reps:
        if rep_cursor >= max_reps:
            aborted = True
            break
        batch = list(range(rep_cursor, min(rep_cursor + batch_size, max_reps)))
        rep_cursor = batch[-1] + 1
        args = [
            (condition, kinds, seed, rep, options, membership_mode, with_misspec)
            for rep in batch
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_replication, args))
        else:
            results = [_run_replication(a) for a in args]
        for rep, recs in sorted(results):
            all_records[rep] = recs
        for rep in batch:
            if len(kept) < n_reps and joint_ok(all_records[rep]):
                kept.append(rep)
            if len(kept) == n_reps:
                break
        if progress:
            progress(len(kept), rep_cursor)
        if len(kept) == n_reps:
            break

    # truncate to replications up to and including the last kept one
    last = kept[-1] if len(kept) == n_reps else rep_cursor - 1
    used_reps = [r for r in sorted(all_records) if r <= last]
    labels = [k.value for k in kinds] + ([MISSPEC_LABEL] if with_misspec else [])

    truth = truth_table(condition)
    metrics = {}
    clustering = {}
    convergence = {}
    for label in labels:
        recs = [all_records[r][label] for r in used_reps if label in all_records[r]]
        n_conv = sum(r.converged for r in recs)
        convergence[label] = n_conv / len(recs) if recs else float("nan")
        kept_recs = [
            all_records[r][label]
            for r in kept
            if label in all_records[r] and all_records[r][label].converged
        ]
        if label == MISSPEC_LABEL:
            # convergence of the respecified model is reported relative to the
            # replications kept for the correctly-specified models
            sub = [all_records[r][label] for r in kept if label in all_records[r]]
            convergence[label] = (
                sum(r.converged for r in sub) / len(sub) if sub else float("nan")
            )
        if kept_recs:
            clustering[label] = {
                "accuracy": float(np.nanmean([r.accuracy for r in kept_recs])),
                "entropy": float(np.nanmean([r.entropy for r in kept_recs])),
                "kappa_vs_fmm": float(np.nanmean([r.kappa_vs_fmm for r in kept_recs]))
                if label != "fmm"
                else float("nan"),
            }
            names = set.intersection(*(set(r.estimates) for r in kept_recs))
            for nm in sorted(names):
                if nm not in truth:
                    continue
                est = [r.estimates[nm][0] for r in kept_recs]
                lo = [r.estimates[nm][2] for r in kept_recs]
                hi = [r.estimates[nm][3] for r in kept_recs]
                if len(est) >= 2:
                    metrics[(label, nm)] = performance_metrics(est, lo, hi, truth[nm])
    flat = tuple(
        all_records[r][label]
        for r in used_reps
        for label in labels
        if label in all_records[r]
    )
    summary = ConditionSummary(
        condition_id=condition.condition_id,
        kinds=tuple(labels),
        target_reps=n_reps,
        kept_reps=len(kept),
        attempted_reps=len(used_reps),
        aborted=aborted,
        convergence_rate=convergence,
        metrics=metrics,
        clustering=clustering,
        kept_indices=tuple(kept),
    )
    return summary, flat


def misspecification_experiment(
    condition: SimCondition,
    n_reps: int = 100,
    seed: int = 0,
    kinds=DEFAULT_KINDS,
    options: FitOptions | None = None,
    workers: int = 1,
    membership_mode: str = "sampled",
):
    """Fit the all-covariates-gating model alongside correctly specified ones.

    Returns (summary, records, comparison) where comparison holds the
    side-by-side mean accuracy / entropy and the misspecified model's
    convergence rate over kept replications.
    """
    summary, records = run_condition(
        condition,
        kinds=kinds,
        n_reps=n_reps,
        seed=seed,
        options=options,
        workers=workers,
        membership_mode=membership_mode,
        with_misspec=True,
    )
    comparison = {
        "condition_id": condition.condition_id,
        "misspec_convergence": summary.convergence_rate.get(MISSPEC_LABEL, float("nan")),
        "accuracy": {k: v["accuracy"] for k, v in summary.clustering.items()},
        "entropy": {k: v["entropy"] for k, v in summary.clustering.items()},
    }
    return summary, records, comparison
