"""Acceptance suite.

One test per release criterion, in order, each printing a [PASS] line with
the measured values when its assertions hold. The Monte Carlo, misspecified-
model and forest checks run at desk scale (100 kept replications, 20 seeded
forests) and dominate the runtime; everything else is seconds.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete.
"""

import filecmp
import json
import os
import time

import numpy as np
import pytest

import splinemix as sm
from splinemix.classify import Assignment, accuracy, entropy, kappa_agreement
from splinemix.cli import main as cli_main
from splinemix.fitting import FitOptions, fit, three_step_fit, two_step_fit
from splinemix.forest import ForestConfig, variable_importance
from splinemix.growth import Frame, forward_jacobian, loading_matrix, implied_mean
from splinemix.likelihood import LikelihoodEngine, responsibilities
from splinemix.model import (
    GatingParams,
    MixtureParams,
    MixtureSpec,
    ModelKind,
)
from splinemix.montecarlo import (
    misspecification_experiment,
    performance_metrics,
    run_condition,
)
from splinemix.simulate import (
    PSI_FIXED,
    SCENARIO_MEANS,
    SimCondition,
    condition_by_id,
    condition_grid,
    generate,
    generate_importance_scenario,
)
from test_fitting import oracle_single_class_ml, pack_oracle_start, single_class_dataset

WORKERS = int(os.environ.get("SPLINEMIX_THREADS", "2"))
MC_OPTIONS = FitOptions(compute_se=True, inner_max_iter=12)


def _report(line):
    print(f"\n[PASS] {line}")


def test_criterion_01_design_fidelity():
    t0 = time.perf_counter()
    grid = condition_grid()
    assert len(grid) == 108
    for cond in grid:
        want = SCENARIO_MEANS[cond.scenario]
        assert np.array_equal(cond.class_means[0], want[0])
        assert np.array_equal(cond.class_means[1], want[1])
        assert cond.knots in ((4.0, 5.0), (3.75, 5.25), (3.5, 5.5))
        assert cond.theta_eps in (1.0, 2.0)
        assert cond.r2 in ((0.13, 0.13), (0.13, 0.26), (0.26, 0.26))
    assert np.array_equal(
        PSI_FIXED, np.array([[25.0, 1.5, 1.5], [1.5, 1.0, 0.3], [1.5, 0.3, 1.0]])
    )
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _report(f"criterion 1: 108 design cells with the published values ({elapsed:.3f}s)")


def test_criterion_02_mahalanobis_oracle():
    t0 = time.perf_counter()
    psi_inv = np.linalg.inv(PSI_FIXED)  # explicit-inverse oracle
    for scenario, (mu1, mu2) in SCENARIO_MEANS.items():
        diff = mu1 - mu2
        oracle = float(np.sqrt(diff @ psi_inv @ diff))
        assert oracle == pytest.approx(0.86, abs=0.01)
        packaged = sm.mahalanobis_distance(mu1, mu2, PSI_FIXED)
        assert packaged == pytest.approx(oracle, rel=1e-10)
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    _report(f"criterion 2: class distance 0.86 +/- 0.01 in all scenarios ({elapsed:.3f}s)")


def test_criterion_03_reparameterization_suite():
    want = np.array([[1.0, 4.0, 0.0], [0.0, 0.5, 0.5], [0.0, -0.5, 0.5]])
    assert np.array_equal(forward_jacobian(4.0), want)

    rng = np.random.default_rng(2026)
    worst_rt, worst_mean = 0.0, 0.0
    for _ in range(1000):
        mean = rng.normal(scale=10, size=3)
        a = rng.normal(size=(3, 3))
        cov = a @ a.T + 0.1 * np.eye(3)
        b_e = rng.normal(size=(3, 2))
        gamma = rng.uniform(0.5, 8.5)
        m1, c1, b1 = sm.reparameterize(mean, cov, b_e, gamma)
        m2, c2, b2 = sm.inverse_reparameterize(m1, c1, b1, gamma)
        worst_rt = max(
            worst_rt,
            np.abs(m2 - mean).max(),
            np.abs(c2 - cov).max(),
            np.abs(b2 - b_e).max(),
        )
        t = np.sort(rng.uniform(0, 9, size=6))
        cp = sm.ClassParams(
            beta_e0=mean, psi=cov, gamma=gamma, theta_eps=1.0,
            b_e=b_e, mu_xe=rng.normal(size=2), phi=np.eye(2), frame=Frame.ORIGINAL,
        )
        lm_o = loading_matrix(t, gamma, Frame.ORIGINAL)
        lm_r = loading_matrix(t, gamma, Frame.REPARAMETERIZED)
        diff = np.abs(
            implied_mean(cp, lm_o) - implied_mean(cp.to_frame(Frame.REPARAMETERIZED), lm_r)
        ).max()
        worst_mean = max(worst_mean, diff)
    assert worst_rt < 1e-10
    assert worst_mean < 1e-10
    _report(
        f"criterion 3: round trip {worst_rt:.2e}, frame-equivalent means {worst_mean:.2e}, "
        "jacobian exact"
    )


def test_criterion_04_estimator_oracle_equivalence():
    # (a) K = 1 mixture fit against an independent single-class ML fit
    rng = np.random.default_rng(4004)
    data = single_class_dataset(rng, n=120, j=6)
    spec = MixtureSpec(kind=ModelKind.FMM, n_classes=1)
    fitted = fit(spec, data, options=FitOptions(seed=0, compute_se=False, inner_max_iter=12))
    assert fitted.converged
    cp = fitted.params_original.classes[0]
    kb = fitted.layout.knot_bounds
    oracle_ll = oracle_single_class_ml(
        data,
        kb,
        [
            pack_oracle_start([100, -5, -2.6], np.eye(3), 4.3, 1.0, kb),
            pack_oracle_start(cp.beta_e0, cp.psi + 1e-10 * np.eye(3), cp.gamma, cp.theta_eps, kb),
        ],
    )
    delta_a = abs(fitted.loglik - oracle_ll)
    assert delta_a < 1e-6

    # (b) zero-coefficient full-kind responsibilities match the finite mixture
    gen = generate(
        SimCondition(scenario=1, knots=(3.5, 5.5), allocation="balanced",
                     r2=(0.13, 0.13), theta_eps=1.0, n=200, uid=1040),
        seed=44, membership_mode="sampled",
    )
    data2 = gen.dataset
    cp1 = sm.ClassParams(beta_e0=[96, -5, -2.6], psi=PSI_FIXED, gamma=3.5, theta_eps=1.0)
    cp2 = sm.ClassParams(beta_e0=[104, -5, -2.6], psi=PSI_FIXED, gamma=5.5, theta_eps=1.0)
    spec_f = MixtureSpec(kind=ModelKind.FMM, n_classes=2, frame=Frame.ORIGINAL)
    params_f = MixtureParams(
        classes=(cp1, cp2), gating=GatingParams(intercepts=[0.2], coefficients=np.zeros((1, 0)))
    )
    x_e = data2.covariate_matrix(("x_e1", "x_e2"))
    pooled_mu, pooled_phi = x_e.mean(axis=0), np.cov(x_e, rowvar=False)
    spec_full = MixtureSpec(
        kind=ModelKind.FULL, n_classes=2,
        gating_covariates=("x_g1", "x_g2"), expert_covariates=("x_e1", "x_e2"),
        frame=Frame.ORIGINAL,
    )
    params_full = MixtureParams(
        classes=tuple(
            sm.ClassParams(
                beta_e0=c.beta_e0, psi=c.psi, gamma=c.gamma, theta_eps=c.theta_eps,
                b_e=np.zeros((3, 2)), mu_xe=pooled_mu, phi=pooled_phi,
            )
            for c in (cp1, cp2)
        ),
        gating=GatingParams(intercepts=[0.2], coefficients=np.zeros((1, 2))),
    )
    r_f = responsibilities(spec_f, params_f, data2)
    r_full = responsibilities(spec_full, params_full, data2)
    delta_b = np.abs(r_f - r_full).max()
    assert delta_b < 1e-8

    # (c) EM log-likelihood non-decreasing on logged runs
    worst_drop = 0.0
    for seed in range(3):
        gen = generate(
            SimCondition(scenario=1, knots=(3.5, 5.5), allocation="balanced",
                         r2=(0.13, 0.13), theta_eps=1.0, n=250, uid=1041 + seed),
            seed=seed, membership_mode="sampled",
        )
        f = fit(MixtureSpec(kind=ModelKind.FMM, n_classes=2), gen.dataset,
                options=FitOptions(seed=seed, compute_se=False, inner_max_iter=12))
        if f.ll_trace.size > 1:
            worst_drop = min(worst_drop, float(np.diff(f.ll_trace).min()))
    assert worst_drop >= -1e-8
    _report(
        f"criterion 4: |dloglik| vs oracle {delta_a:.2e}; responsibilities match {delta_b:.2e}; "
        f"worst EM step {worst_drop:.2e}"
    )


def test_criterion_05_closed_form_metrics():
    assert entropy(np.eye(2)[np.array([0, 1, 0])]) == pytest.approx(1.0, abs=1e-12)
    assert entropy(np.full((5, 2), 0.5)) == pytest.approx(0.0, abs=1e-12)
    assert entropy(np.array([[1.0, 0.0], [0.5, 0.5]])) == pytest.approx(0.5, abs=1e-12)

    truth = Assignment(labels=np.array([1, 2, 1, 2, 2, 1]), n_classes=2)
    swapped = Assignment(labels=3 - truth.labels, n_classes=2)
    assert accuracy(swapped, truth) == pytest.approx(1.0, abs=1e-12)
    assert accuracy(truth, truth) == pytest.approx(1.0, abs=1e-12)

    a = Assignment(labels=np.array([1] * 50 + [2] * 50), n_classes=2)
    b = Assignment(labels=np.array([1] * 45 + [2] * 5 + [1] * 5 + [2] * 45), n_classes=2)
    kappa, _, _ = kappa_agreement(a, b)
    assert kappa == pytest.approx(0.80, abs=1e-12)

    m = performance_metrics([1.9, 2.1], [1.0, 1.0], [3.0, 3.0], truth=2.0)
    assert m.rel_bias == pytest.approx(0.0, abs=1e-12)
    assert m.empirical_se == pytest.approx(np.sqrt(0.02), abs=1e-12)
    assert m.rel_rmse == pytest.approx(0.05, abs=1e-12)
    _report("criterion 5: entropy/accuracy/kappa/metric hand cases exact to 1e-12")


def test_criterion_06_desk_scale_monte_carlo():
    t0 = time.perf_counter()
    cond = condition_by_id("s1-sep2-bal-r13.13-t1")
    summary, _ = run_condition(
        cond, n_reps=100, seed=2026, workers=WORKERS, options=MC_OPTIONS,
        membership_mode="sampled",
    )
    assert not summary.aborted
    joint_rate = summary.kept_reps / summary.attempted_reps
    assert joint_rate >= 0.85

    worst_bias = 0.0
    for kind in ("full", "gp", "cp", "fmm"):
        for c in (1, 2):
            for j in range(3):
                m = summary.metrics[(kind, f"class{c}.mu_eta{j}")]
                worst_bias = max(worst_bias, abs(m.rel_bias))
    assert worst_bias <= 0.05

    knot_cov = [summary.metrics[("full", f"class{c}.knot")].coverage for c in (1, 2)]
    for cov in knot_cov:
        assert 0.90 <= cov <= 0.98

    acc = summary.clustering["full"]["accuracy"]
    assert 0.75 <= acc <= 0.95
    _report(
        "criterion 6: joint convergence "
        f"{joint_rate:.3f}, max |rel bias| means {worst_bias:.4f}, "
        f"knot coverage {knot_cov}, full accuracy {acc:.3f} "
        f"({(time.perf_counter() - t0) / 60:.1f} min)"
    )


def test_criterion_07_misspecification_replication():
    t0 = time.perf_counter()
    cond = condition_by_id("s1-sep1-bal-r26.26-t1")
    summary, _, comparison = misspecification_experiment(
        cond, n_reps=100, seed=2027, workers=WORKERS, options=MC_OPTIONS,
        membership_mode="sampled",
    )
    assert not summary.aborted
    mis_conv = comparison["misspec_convergence"]
    assert mis_conv >= 0.90
    gap = comparison["accuracy"]["full"] - comparison["accuracy"]["misspec-cp"]
    assert gap >= 0.05
    _report(
        f"criterion 7: misspecified convergence {mis_conv:.3f}, accuracy gap "
        f"full - misspec = {gap:.3f} ({(time.perf_counter() - t0) / 60:.1f} min)"
    )


def test_criterion_08_forest_properties():
    t0 = time.perf_counter()
    n_forests = 20
    outrank_hits = 0
    monotone_hits = 0
    for s in range(n_forests):
        data3, meta3 = generate_importance_scenario(3, seed=3000 + s, n=500)
        cfg = ForestConfig(n_trees=128, candidate_size=2, seed=100 + s)
        rep3 = variable_importance(data3, data3.covariate_names, cfg, workers=WORKERS)
        signal_ok = all(
            rep3.scores[sig] > rep3.scores[nz]
            for sig in meta3["signal"]
            for nz in meta3["noise"]
        )
        outrank_hits += signal_ok

        data1, meta1 = generate_importance_scenario(1, seed=3000 + s, n=500)
        rep1 = variable_importance(data1, data1.covariate_names, cfg, workers=WORKERS)
        sig3 = np.mean([rep3.scores[nm] for nm in meta3["signal"]])
        sig1 = np.mean([rep1.scores[nm] for nm in meta1["signal"]])
        monotone_hits += sig3 > sig1
    assert outrank_hits >= int(0.9 * n_forests)
    assert monotone_hits >= int(0.9 * n_forests)
    _report(
        f"criterion 8: signal outranks noise in {outrank_hits}/{n_forests} forests, "
        f"scenario-3 > scenario-1 signal importance in {monotone_hits}/{n_forests} "
        f"({(time.perf_counter() - t0) / 60:.1f} min)"
    )


def test_criterion_09_stepwise_consistency():
    cond = SimCondition(
        scenario=1, knots=(3.5, 5.5), allocation="balanced", r2=(0.13, 0.13),
        theta_eps=1.0, n=5000, uid=1090,
        class_means=(np.array([90.0, -5.0, -2.6]), np.array([110.0, -5.0, -2.6])),
    )
    gen = generate(cond, seed=909, membership_mode="sampled")
    fmm = fit(
        MixtureSpec(kind=ModelKind.FMM, n_classes=2), gen.dataset,
        options=FitOptions(seed=1, compute_se=False, inner_max_iter=12),
    )
    assert fmm.converged

    res3 = three_step_fit(gen.dataset, fmm, ("x_g1", "x_g2"), seed=5)
    err3 = abs(res3.coefficients[0, 1] - np.log(1.5))
    assert err3 <= 0.1

    res2 = two_step_fit(gen.dataset, fmm, ("x_g1", "x_g2"), options=FitOptions(seed=2, compute_se=True))
    err2 = abs(res2.coefficients[0, 1] - np.log(1.5))
    assert err2 <= 0.1

    # frozen-parameter contract, bit for bit
    for cp_new, cp_old in zip(res2.fitted.params.classes, fmm.params.classes):
        assert np.array_equal(cp_new.beta_e0, cp_old.beta_e0)
        assert np.array_equal(cp_new.psi, cp_old.psi)
        assert cp_new.gamma == cp_old.gamma
        assert cp_new.theta_eps == cp_old.theta_eps
    _report(
        f"criterion 9: three-step error {err3:.3f}, two-step error {err2:.3f} "
        "(target log(1.5) +/- 0.1); frozen blocks bit-identical"
    )


def test_criterion_10_determinism(tmp_path):
    sim_args = ["simulate", "--condition", "s3-sep1.5-1to2-r13.26-t2", "--seed", "77"]
    a, b = tmp_path / "sim_a", tmp_path / "sim_b"
    assert cli_main(sim_args + ["--out", str(a)]) == 0
    assert cli_main(sim_args + ["--out", str(b)]) == 0
    for name in ("outcomes.csv", "covariates.csv", "truth.json", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

    mc_args = ["mc", "--condition", "s1-sep2-bal-r13.13-t1", "--reps", "2",
               "--kinds", "fmm", "--seed", "99"]
    c, d = tmp_path / "mc_t1", tmp_path / "mc_t2"
    assert cli_main(mc_args + ["--threads", "1", "--out", str(c)]) == 0
    assert cli_main(mc_args + ["--threads", "2", "--out", str(d)]) == 0
    compared = 0
    for name in ("replications.csv", "summary.csv", "clustering.csv", "mc.json", "manifest.json"):
        assert (c / name).read_bytes() == (d / name).read_bytes(), name
        compared += 1
    _report(
        f"criterion 10: {compared} output files byte-identical across worker counts "
        "(timings excluded by design)"
    )
