"""Maximum-likelihood estimation for the spline mixture models.

The default estimator is EM with quasi-Newton M-steps over the packed
parameter vector; a direct quasi-Newton optimizer of the marginal likelihood
is available for cross-checking. Non-convergent attempts are retried with
multiplicatively jittered start values, up to the attempt budget. After every
fit, classes are relabelled by ascending knot and estimates are reported in
both parameter frames with standard errors from the numerically
differentiated observed information.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .data import LongitudinalDataset
from .errors import DegenerateClassError, InvalidInputError, NumericError
from .growth import ClassParams, Frame, forward_map
from .likelihood import LikelihoodEngine
from .model import (
    GatingParams,
    MixtureParams,
    MixtureSpec,
    ModelKind,
    ParamLayout,
    gating_probabilities,
    parameter_count,
)

__all__ = [
    "FitOptions",
    "FittedModel",
    "ParameterEstimate",
    "fit",
    "default_start",
    "knot_bounds_from_data",
    "standard_errors",
    "information_criteria",
    "enumerate_classes",
    "two_step_fit",
    "three_step_fit",
    "multinomial_logit",
]

# Generous box constraints on packed coordinates keep the quasi-Newton steps
# out of overflow territory; they are far outside any plausible solution.
_LOC_BOUND = 1e6
_LOGVAR_BOUND = 11.5  # variances within [1e-5, 1e5] on the log scale
_KNOT_U_BOUND = 30.0
MIN_CLASS_MASS = 2.0
SEPARATION_CAP = 15.0
_PENALTY = 1e30


def _safe_objective(fun):
    """Make a (value, grad) objective finite everywhere for L-BFGS-B."""

    def wrapped(z):
        try:
            with np.errstate(all="ignore"):
                value, grad = fun(z)
        except (InvalidInputError, NumericError, np.linalg.LinAlgError, FloatingPointError):
            return _PENALTY, np.zeros_like(z)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return _PENALTY, np.zeros_like(z)
        return value, grad

    return wrapped


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 2000
    tol: float = 1e-8  # relative log-likelihood change between EM iterations
    max_attempts: int = 10
    perturb_scale: float = 0.25  # retries draw factors from U(1-s, 1+s)
    optimizer: str = "em"  # "em" | "direct"
    seed: int = 0
    inner_max_iter: int = 40  # quasi-Newton iterations per M-step block
    compute_se: bool = True
    se_step: float = 1e-4
    direct_gtol: float = 1e-7

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.max_attempts < 1:
            raise InvalidInputError("tolerances must be positive and budgets >= 1")
        if self.optimizer not in ("em", "direct"):
            raise InvalidInputError("optimizer must be 'em' or 'direct'")


@dataclass(frozen=True)
class ParameterEstimate:
    name: str
    frame: str  # "original" | "reparameterized" | "shared"
    estimate: float
    se: float = np.nan
    ci_low: float = np.nan
    ci_high: float = np.nan


@dataclass(frozen=True)
class FittedModel:
    spec: MixtureSpec
    options: FitOptions
    layout: ParamLayout
    packed: np.ndarray
    params: MixtureParams  # estimation frame
    params_original: MixtureParams
    params_reparameterized: MixtureParams
    loglik: float
    ll_trace: np.ndarray
    responsibilities: np.ndarray
    converged: bool
    n_attempts: int
    n_iter: int
    n_individuals: int
    estimates: tuple = ()  # tuple[ParameterEstimate]
    vcov_packed: np.ndarray | None = None
    se_singular: bool = False
    frozen_mask: np.ndarray | None = None

    def estimate_table(self, frame: str | None = None) -> dict:
        out = {}
        for est in self.estimates:
            if frame is None or est.frame == frame or est.frame == "shared":
                out[est.name] = est
        return out

    @property
    def n_parameters(self) -> int:
        return parameter_count(self.spec)


class _DegenerateAttempt(Exception):
    def __init__(self, mass):
        super().__init__(f"class responsibility mass fell below {MIN_CLASS_MASS}: {mass}")
        self.mass = mass


# ---------------------------------------------------------------------------
# Start values


def knot_bounds_from_data(data: LongitudinalDataset) -> tuple:
    """Interior-wave knot window: median second and second-to-last occasions."""
    lows, highs = [], []
    for t in data.times:
        lows.append(t[1] if t.size >= 3 else t[0])
        highs.append(t[-2] if t.size >= 3 else t[-1])
    lo, hi = float(np.median(lows)), float(np.median(highs))
    if hi <= lo:
        lo, hi = float(min(t[0] for t in data.times)), float(max(t[-1] for t in data.times))
    return lo, hi


def _two_piece_lsq(t: np.ndarray, y: np.ndarray, knots: np.ndarray):
    """Best pooled two-piece linear fit over candidate knots; returns
    (gamma, original-frame coefficients, residual variance)."""
    best = None
    for g in knots:
        x = np.column_stack([np.ones_like(t), np.minimum(t, g), np.maximum(t - g, 0.0)])
        coef, _, _, _ = np.linalg.lstsq(x, y, rcond=None)
        sse = float(np.sum((y - x @ coef) ** 2))
        if best is None or sse < best[0]:
            best = (sse, g, coef)
    _, g, coef = best
    return float(g), coef


def default_start(spec: MixtureSpec, data: LongitudinalDataset, knot_bounds: tuple) -> MixtureParams:
    """Start values: two-piece least squares on the pooled curve for the
    growth-factor means, unit diagonal covariance, path coefficients 0.5,
    logistic coefficients 1.0, and knots spread over the interior window.

    Class symmetry is broken twice: knots start at evenly spaced interior
    quantiles and intercepts start at quantiles of the per-individual first
    observations, so components cannot share one basin of attraction.
    """
    t_all = np.concatenate(data.times)
    y_all = np.concatenate(data.outcomes)
    lo, hi = knot_bounds
    candidates = np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), 9)
    g_star, coef = _two_piece_lsq(t_all, y_all, candidates)

    k = spec.n_classes
    if k == 1:
        knots = [g_star]
        icpt_shift = [0.0]
    else:
        knots = [lo + (hi - lo) * (j + 1) / (k + 1) for j in range(k)]
        first_y = np.array([y[0] for y in data.outcomes])
        quantiles = np.quantile(first_y, [(j + 1) / (k + 1) for j in range(k)])
        icpt_shift = quantiles - first_y.mean()
    c_e = spec.n_expert if spec.kind.has_expert_covariates else 0
    x_e = data.covariate_matrix(spec.expert_covariates)
    classes = []
    for j in range(k):
        if c_e:
            b_e = np.full((3, c_e), 0.5)
            mu_xe = x_e.mean(axis=0)
            phi = np.cov(x_e, rowvar=False).reshape(c_e, c_e) + 1e-6 * np.eye(c_e)
        else:
            b_e, mu_xe, phi = np.zeros((3, 0)), np.zeros(0), np.zeros((0, 0))
        means = coef.copy()
        means[0] += icpt_shift[j]
        cp = ClassParams(
            beta_e0=means,
            psi=np.eye(3),
            gamma=float(knots[j]),
            theta_eps=1.0,
            b_e=b_e,
            mu_xe=mu_xe,
            phi=phi,
            frame=Frame.ORIGINAL,
        )
        classes.append(cp.to_frame(spec.frame))
    c_g = spec.n_gating if spec.kind.has_gating_covariates else 0
    gating = GatingParams(
        intercepts=np.zeros(k - 1),
        coefficients=np.ones((k - 1, c_g)),
    )
    return MixtureParams(classes=tuple(classes), gating=gating)


def _perturb_packed(layout: ParamLayout, vec: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    """Multiply every natural start value by an independent uniform factor."""
    params = layout.unpack(vec)
    lo, hi = layout.knot_bounds
    width = hi - lo

    def u(shape=None):
        return rng.uniform(1.0 - scale, 1.0 + scale, size=shape)

    classes = []
    for cp in params.classes:
        low_psi = np.linalg.cholesky(cp.psi + 1e-10 * np.eye(3)) * u((3, 3))
        gamma = float(np.clip(cp.gamma * u(), lo + 1e-3 * width, hi - 1e-3 * width))
        if cp.n_covariates:
            c = cp.n_covariates
            low_phi = np.linalg.cholesky(cp.phi + 1e-10 * np.eye(c)) * u((c, c))
            phi = low_phi @ low_phi.T
            b_e = cp.b_e * u(cp.b_e.shape)
            mu_xe = cp.mu_xe * u(cp.mu_xe.shape)
        else:
            phi, b_e, mu_xe = cp.phi, cp.b_e, cp.mu_xe
        classes.append(
            ClassParams(
                beta_e0=cp.beta_e0 * u(3),
                psi=low_psi @ low_psi.T,
                gamma=gamma,
                theta_eps=float(cp.theta_eps * u()),
                b_e=b_e,
                mu_xe=mu_xe,
                phi=phi,
                frame=cp.frame,
            )
        )
    gating = GatingParams(
        intercepts=params.gating.intercepts * u(params.gating.intercepts.shape),
        coefficients=params.gating.coefficients * u(params.gating.coefficients.shape),
    )
    return layout.pack(MixtureParams(classes=tuple(classes), gating=gating))


# ---------------------------------------------------------------------------
# Optimizer internals


def _packed_bounds(layout: ParamLayout) -> list:
    bounds = [(-_LOC_BOUND, _LOC_BOUND)] * layout.size
    for name, sl in layout.slices.items():
        if name.endswith(".psi") or name.endswith(".phi"):
            dim = 3 if name.endswith(".psi") else layout.spec.n_expert
            for j in range(sl.start, sl.start + dim):
                bounds[j] = (-_LOGVAR_BOUND, _LOGVAR_BOUND)
        elif name.endswith(".knot"):
            bounds[sl.start] = (-_KNOT_U_BOUND, _KNOT_U_BOUND)
        elif name.endswith(".theta"):
            bounds[sl.start] = (-_LOGVAR_BOUND, _LOGVAR_BOUND)
    return bounds


def _class_block_indices(layout: ParamLayout, k: int, include_moments: bool) -> np.ndarray:
    pre = f"class{k + 1}"
    names = [f"{pre}.beta_e0", f"{pre}.psi", f"{pre}.knot", f"{pre}.theta"]
    if layout.spec.kind.has_expert_covariates:
        names.append(f"{pre}.b_e")
        if include_moments:
            names += [f"{pre}.mu_xe", f"{pre}.phi"]
    return layout.indices(*names)


def _weighted_moments(x: np.ndarray, w: np.ndarray):
    total = w.sum()
    mu = (w[:, None] * x).sum(axis=0) / total
    s = x - mu
    phi = (w[:, None] * s).T @ s / total
    dim = x.shape[1]
    return mu, phi + 1e-10 * np.eye(dim)


def _class_objective(engine, layout, vec, k, idx, weights, include_xe):
    """Negative weighted class term over the packed coordinates ``idx``."""
    pre = f"class{k + 1}"
    base = vec.copy()

    def fun(z):
        base[idx] = z
        params = layout.unpack(base)
        cp = params.classes[k]
        knot_u = base[layout.block(f"{pre}.knot")][0]
        value, grads = engine.class_y_value_grad(cp, weights, knot_u, layout)
        grad = np.zeros(layout.size)
        grad[layout.block(f"{pre}.beta_e0")] = grads["beta_e0"]
        grad[layout.block(f"{pre}.psi")] = grads["psi"]
        grad[layout.block(f"{pre}.knot")] = grads["knot"]
        grad[layout.block(f"{pre}.theta")] = grads["theta"]
        if cp.n_covariates:
            grad[layout.block(f"{pre}.b_e")] = grads["b_e"]
        if include_xe:
            xval, xg = engine.xe_value_grad(cp, weights)
            value += xval
            grad[layout.block(f"{pre}.mu_xe")] = xg["mu_xe"]
            grad[layout.block(f"{pre}.phi")] = xg["phi"]
        return -value, -grad[idx]

    return fun


def _gating_newton(engine, layout, vec, resp, free_mask, max_steps=8):
    """Masked Newton ascent of the responsibility-weighted gating term."""
    spec = layout.spec
    k = spec.n_classes
    if k == 1:
        return vec
    sl_i = layout.block("gating.intercepts")
    sl_c = layout.block("gating.coefficients")
    idx = np.concatenate([np.arange(sl_i.start, sl_i.stop), np.arange(sl_c.start, sl_c.stop)])
    free = free_mask[idx]
    if not free.any():
        return vec
    x = engine.packed.x_g
    c_g = x.shape[1]
    z = np.column_stack([np.ones(engine.packed.n), x])  # (n, 1+c_g)

    # closed form for covariate-free gates with fully free logits
    if c_g == 0 and free.all():
        mass = resp.sum(axis=0)
        mass = np.clip(mass, 1e-12, None)
        logits = np.log(mass[1:]) - np.log(mass[0])
        out = vec.copy()
        out[sl_i] = logits
        return out

    def unpack_gate(v):
        return GatingParams(intercepts=v[sl_i], coefficients=v[sl_c].reshape(k - 1, c_g))

    def value(v):
        params = layout.unpack(v)
        val, g_i, g_c = engine.gating_value_grad(params, resp)
        grad = np.concatenate([g_i, g_c.ravel()])
        return val, grad

    cur = vec.copy()
    val0, grad = value(cur)
    for _ in range(max_steps):
        gate = unpack_gate(cur)
        probs = gating_probabilities(x if c_g else np.zeros((engine.packed.n, 0)), gate)
        # Hessian blocks over (intercept, coefs) per class pair
        dim = (k - 1) * (1 + c_g)
        hess = np.zeros((dim, dim))
        for a in range(1, k):
            for b in range(1, k):
                wab = probs[:, a] * ((a == b) - probs[:, b])
                blk = (z * wab[:, None]).T @ z
                hess[(a - 1) * (1 + c_g) : a * (1 + c_g), (b - 1) * (1 + c_g) : b * (1 + c_g)] = -blk
        # reorder gradient (intercepts..., coefs...) -> per-class (icpt, coefs)
        def to_newton_order(g):
            out = np.zeros(dim)
            for a in range(k - 1):
                out[a * (1 + c_g)] = g[a]
                out[a * (1 + c_g) + 1 : (a + 1) * (1 + c_g)] = g[k - 1 + a * c_g : k - 1 + (a + 1) * c_g]
            return out

        def from_newton_order(s):
            g_i = np.array([s[a * (1 + c_g)] for a in range(k - 1)])
            g_c = np.concatenate([s[a * (1 + c_g) + 1 : (a + 1) * (1 + c_g)] for a in range(k - 1)]) if c_g else np.zeros(0)
            return np.concatenate([g_i, g_c])

        g_n = to_newton_order(grad)
        free_n = to_newton_order(free.astype(float)) > 0.5
        step = np.zeros(dim)
        sub = free_n
        try:
            step[sub] = np.linalg.solve(-hess[np.ix_(sub, sub)] + 1e-10 * np.eye(sub.sum()), g_n[sub])
        except np.linalg.LinAlgError:
            break
        step_vec = from_newton_order(step)
        # backtracking to guarantee ascent
        alpha = 1.0
        improved = False
        for _ in range(20):
            trial = cur.copy()
            trial[idx] = cur[idx] + alpha * step_vec * free
            val_t, grad_t = value(trial)
            if val_t >= val0 - 1e-12:
                if val_t > val0:
                    improved = True
                cur, val0, grad = trial, val_t, grad_t
                break
            alpha *= 0.5
        if not improved and alpha < 1.0:
            break
        if np.max(np.abs(grad[free.nonzero()[0]] if c_g else grad)) < 1e-9:
            break
        if np.max(np.abs(step_vec)) < 1e-12:
            break
    return cur


def _m_step(engine, layout, vec, resp, opts, free_mask, bounds):
    spec = layout.spec
    include_xe_model = spec.kind.has_expert_covariates and spec.expert_covariate_density == "joint"
    out = vec.copy()
    for k in range(spec.n_classes):
        pre = f"class{k + 1}"
        w = resp[:, k]
        moments_inline = False
        if spec.kind.has_expert_covariates:
            mom_idx = layout.indices(f"{pre}.mu_xe", f"{pre}.phi")
            if free_mask[mom_idx].all() and include_xe_model:
                mu, phi = _weighted_moments(engine.packed.x_e, w)
                params_now = layout.unpack(out)
                cp_now = params_now.classes[k]
                updated = ClassParams(
                    beta_e0=cp_now.beta_e0, psi=cp_now.psi, gamma=cp_now.gamma,
                    theta_eps=cp_now.theta_eps, b_e=cp_now.b_e, mu_xe=mu, phi=phi,
                    frame=cp_now.frame,
                )
                new_params = MixtureParams(
                    classes=tuple(updated if j == k else c for j, c in enumerate(params_now.classes)),
                    gating=params_now.gating,
                )
                out = layout.pack(new_params)
            elif include_xe_model:
                moments_inline = True
        idx = _class_block_indices(layout, k, include_moments=moments_inline)
        idx = idx[free_mask[idx]]
        if idx.size == 0:
            continue
        fun = _safe_objective(_class_objective(engine, layout, out, k, idx, w, include_xe=moments_inline))
        z0 = out[idx].copy()
        f0 = fun(z0)[0]
        res = minimize(
            fun, z0, jac=True, method="L-BFGS-B",
            bounds=[bounds[j] for j in idx],
            options={"maxiter": opts.inner_max_iter, "ftol": 1e-12, "gtol": 1e-8},
        )
        if np.isfinite(res.fun) and res.fun <= f0 + 1e-12:
            out[idx] = res.x
    out = _gating_newton(engine, layout, out, resp, free_mask)
    return out


def _run_em(engine, layout, vec, opts, free_mask, bounds):
    trace = []
    converged = False
    resp = None
    ll = -np.inf
    for it in range(opts.max_iter):
        params = layout.unpack(vec)
        ll, resp = engine.loglik_resp(params)
        if not np.isfinite(ll):
            raise _DegenerateAttempt(np.zeros(layout.spec.n_classes))
        trace.append(ll)
        if len(trace) >= 2:
            rel = abs(trace[-1] - trace[-2]) / (abs(trace[-2]) + 1e-12)
            if rel < opts.tol:
                converged = True
                break
        mass = resp.sum(axis=0)
        if layout.spec.n_classes > 1 and mass.min() < MIN_CLASS_MASS:
            raise _DegenerateAttempt(mass)
        vec = _m_step(engine, layout, vec, resp, opts, free_mask, bounds)
    mass = resp.sum(axis=0)
    if layout.spec.n_classes > 1 and mass.min() < MIN_CLASS_MASS:
        raise _DegenerateAttempt(mass)
    return vec, ll, resp, np.array(trace), converged, len(trace)


def _run_direct(engine, layout, vec, opts, free_mask, bounds):
    free_idx = np.nonzero(free_mask)[0]
    base = vec.copy()
    trace = []

    def fun(z):
        full = base.copy()
        full[free_idx] = z
        ll, grad = engine.marginal_value_grad(layout, full)
        if np.isfinite(ll):
            trace.append(ll)
        return -ll, -grad[free_idx]

    res = minimize(
        _safe_objective(fun), vec[free_idx], jac=True, method="L-BFGS-B",
        bounds=[bounds[j] for j in free_idx],
        options={"maxiter": opts.max_iter, "ftol": max(opts.tol * 1e-3, 1e-13), "gtol": opts.direct_gtol},
    )
    out = base.copy()
    out[free_idx] = res.x
    params = layout.unpack(out)
    ll, resp = engine.loglik_resp(params)
    mass = resp.sum(axis=0)
    if layout.spec.n_classes > 1 and mass.min() < MIN_CLASS_MASS:
        raise _DegenerateAttempt(mass)
    converged = bool(res.success) and np.isfinite(ll)
    return out, ll, resp, np.array(trace + [ll]), converged, int(res.nit)


# ---------------------------------------------------------------------------
# Natural-parameter reporting


def _natural_entries(spec: MixtureSpec, layout: ParamLayout, vec: np.ndarray):
    """Names and values of reportable parameters in both frames."""
    params = layout.unpack(vec)
    names, values, frames = [], [], []

    def add(name, value, frame):
        names.append(name)
        values.append(float(value))
        frames.append(frame)

    for frame_name, pset in (
        ("original", params.to_frame(Frame.ORIGINAL)),
        ("reparameterized", params.to_frame(Frame.REPARAMETERIZED)),
    ):
        for k, cp in enumerate(pset.classes):
            pre = f"class{k + 1}"
            mu_eta = cp.beta_e0 + (cp.b_e @ cp.mu_xe if cp.n_covariates else 0.0)
            for j in range(3):
                add(f"{pre}.mu_eta{j}", mu_eta[j], frame_name)
            for a in range(3):
                for b in range(a, 3):
                    add(f"{pre}.psi{a}{b}", cp.psi[a, b], frame_name)
            if cp.n_covariates:
                for j in range(3):
                    add(f"{pre}.beta_e0_{j}", cp.beta_e0[j], frame_name)
                for j in range(3):
                    for c, nm in enumerate(spec.expert_covariates):
                        add(f"{pre}.path.eta{j}.{nm}", cp.b_e[j, c], frame_name)
    # frame-free blocks
    pset = params
    for k, cp in enumerate(pset.classes):
        pre = f"class{k + 1}"
        add(f"{pre}.knot", cp.gamma, "shared")
        add(f"{pre}.theta_eps", cp.theta_eps, "shared")
        if cp.n_covariates:
            for c, nm in enumerate(spec.expert_covariates):
                add(f"{pre}.mu_x.{nm}", cp.mu_xe[c], "shared")
            for a in range(cp.n_covariates):
                for b in range(a, cp.n_covariates):
                    add(
                        f"{pre}.phi.{spec.expert_covariates[a]}.{spec.expert_covariates[b]}",
                        cp.phi[a, b],
                        "shared",
                    )
    pi = pset.mixing_proportions()
    for k in range(spec.n_classes):
        add(f"pi{k + 1}", pi[k], "shared")
    if spec.kind.has_gating_covariates:
        for k in range(1, spec.n_classes):
            add(f"gating{k + 1}.intercept", pset.gating.intercepts[k - 1], "shared")
            for c, nm in enumerate(spec.gating_covariates):
                add(f"gating{k + 1}.{nm}", pset.gating.coefficients[k - 1, c], "shared")
    elif spec.n_classes > 1:
        for k in range(1, spec.n_classes):
            add(f"gating{k + 1}.intercept", pset.gating.intercepts[k - 1], "shared")
    return names, np.array(values), frames


def _natural_jacobian(spec, layout, vec, free_idx, step=1e-6):
    """FD Jacobian of the natural-parameter map w.r.t. free packed coords."""
    _, base_vals, _ = _natural_entries(spec, layout, vec)
    jac = np.zeros((base_vals.size, free_idx.size))
    for col, j in enumerate(free_idx):
        h = step * max(1.0, abs(vec[j]))
        vp, vm = vec.copy(), vec.copy()
        vp[j] += h
        vm[j] -= h
        _, up, _ = _natural_entries(spec, layout, vp)
        _, dn, _ = _natural_entries(spec, layout, vm)
        jac[:, col] = (up - dn) / (2.0 * h)
    return jac


def _observed_information(engine, layout, vec, free_idx, step):
    """-Hessian of the marginal log-likelihood via central FD of the gradient."""
    dim = free_idx.size
    hess = np.zeros((dim, dim))
    for col, j in enumerate(free_idx):
        h = step * max(1.0, abs(vec[j]))
        vp, vm = vec.copy(), vec.copy()
        vp[j] += h
        vm[j] -= h
        _, gp = engine.marginal_value_grad(layout, vp)
        _, gm = engine.marginal_value_grad(layout, vm)
        hess[:, col] = (gp[free_idx] - gm[free_idx]) / (2.0 * h)
    sym = 0.5 * (hess + hess.T)
    return -sym, hess


def standard_errors(fitted: FittedModel, data: LongitudinalDataset):
    """Recompute SEs/CIs from the observed information at the estimates."""
    engine = LikelihoodEngine(fitted.spec, data)
    return _se_table(engine, fitted.spec, fitted.layout, fitted.packed,
                     fitted.frozen_mask, fitted.options.se_step)


def _se_table(engine, spec, layout, vec, frozen_mask, step):
    free_mask = np.ones(layout.size, dtype=bool) if frozen_mask is None else ~frozen_mask
    free_idx = np.nonzero(free_mask)[0]
    info, raw_hess = _observed_information(engine, layout, vec, free_idx, step)
    singular = False
    try:
        vcov = np.linalg.inv(info)
        if not np.all(np.isfinite(vcov)) or np.any(np.diag(vcov) <= 0):
            singular = True
    except np.linalg.LinAlgError:
        singular = True
        vcov = None
    if singular:
        eigval, eigvec = np.linalg.eigh(info)
        inv_eig = np.where(eigval > 1e-10 * max(1.0, eigval.max()), 1.0 / np.clip(eigval, 1e-300, None), np.nan)
        vcov = (eigvec * inv_eig) @ eigvec.T
    names, values, frames = _natural_entries(spec, layout, vec)
    jac = _natural_jacobian(spec, layout, vec, free_idx)
    var = np.einsum("pj,jk,pk->p", jac, vcov, jac)
    se = np.where(var > 0, np.sqrt(np.abs(var)), np.nan)
    ests = tuple(
        ParameterEstimate(
            name=nm, frame=fr, estimate=val, se=float(s),
            ci_low=float(val - 1.96 * s), ci_high=float(val + 1.96 * s),
        )
        for nm, val, fr, s in zip(names, values, frames, se)
    )
    return ests, vcov, singular, raw_hess


# ---------------------------------------------------------------------------
# Public fit


def _canonical_order(params: MixtureParams):
    gammas = [cp.gamma for cp in params.classes]
    return sorted(range(len(gammas)), key=lambda j: gammas[j])


def fit(
    spec: MixtureSpec,
    data: LongitudinalDataset,
    start: MixtureParams | None = None,
    options: FitOptions | None = None,
    frozen: dict | None = None,
    knot_bounds: tuple | None = None,
) -> FittedModel:
    """Estimate a mixture spec on a dataset with the retry policy.

    ``frozen`` maps parameter-block names (``layout.slices`` keys, 'class*'
    wildcards allowed) to fixed values; frozen coordinates are excluded from
    optimization and kept bit-for-bit.
    """
    options = options or FitOptions()
    if knot_bounds is None:
        knot_bounds = knot_bounds_from_data(data)
    layout = ParamLayout(spec, knot_bounds=knot_bounds)
    engine = LikelihoodEngine(spec, data)
    p = parameter_count(spec)
    if data.n <= p:
        warnings.warn(
            f"sample size {data.n} does not exceed parameter count {p}; estimates may be unstable"
        )

    base_params = start if start is not None else default_start(spec, data, knot_bounds)
    base_vec = layout.pack(base_params)

    free_mask = np.ones(layout.size, dtype=bool)
    if frozen:
        for name, value in frozen.items():
            idx = layout.indices(name)
            vals = _frozen_values(layout, name, value)
            hold = ~np.isnan(vals)  # NaN entries stay free
            free_mask[idx[hold]] = False
            base_vec[idx[hold]] = vals[hold]
    frozen_mask = ~free_mask if frozen else None

    bounds = _packed_bounds(layout)
    rng = np.random.default_rng(options.seed)
    runner = _run_em if options.optimizer == "em" else _run_direct

    best = None  # (converged, ll, result tuple, attempt)
    attempts_used = 0
    for attempt in range(1, options.max_attempts + 1):
        attempts_used = attempt
        if attempt == 1:
            vec0 = base_vec.copy()
        else:
            vec0 = _perturb_packed(layout, base_vec, rng, options.perturb_scale)
            if frozen_mask is not None:
                vec0[frozen_mask] = base_vec[frozen_mask]
        try:
            result = runner(engine, layout, vec0, options, free_mask, bounds)
        except (_DegenerateAttempt, np.linalg.LinAlgError):
            continue
        vec_f, ll, resp, trace, converged, n_iter = result
        if not np.isfinite(ll):
            continue
        cand = (converged, ll, result)
        if best is None or (cand[0], cand[1]) > (best[0], best[1]):
            best = cand
        if converged:
            break
    if best is None:
        raise DegenerateClassError(
            f"all {options.max_attempts} attempts collapsed a class or failed numerically"
        )
    converged, ll, (vec_f, _, resp, trace, _, n_iter) = best

    params_est = layout.unpack(vec_f)
    order = _canonical_order(params_est)
    if order != list(range(spec.n_classes)):
        params_est = params_est.relabel(order)
        vec_f = layout.pack(params_est)
        ll, resp = engine.loglik_resp(params_est)

    if options.compute_se and converged:
        estimates, vcov, singular, _ = _se_table(engine, spec, layout, vec_f, frozen_mask, options.se_step)
    else:
        names, values, frames = _natural_entries(spec, layout, vec_f)
        estimates = tuple(
            ParameterEstimate(name=nm, frame=fr, estimate=val) for nm, val, fr in zip(names, values, frames)
        )
        vcov, singular = None, False

    return FittedModel(
        spec=spec,
        options=options,
        layout=layout,
        packed=vec_f,
        params=params_est,
        params_original=params_est.to_frame(Frame.ORIGINAL),
        params_reparameterized=params_est.to_frame(Frame.REPARAMETERIZED),
        loglik=ll,
        ll_trace=trace,
        responsibilities=resp,
        converged=converged,
        n_attempts=attempts_used,
        n_iter=n_iter,
        n_individuals=data.n,
        estimates=estimates,
        vcov_packed=vcov,
        se_singular=singular,
        frozen_mask=frozen_mask,
    )


def _frozen_values(layout: ParamLayout, name: str, value):
    idx = layout.indices(name)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(idx.size, float(arr))
    if arr.size != idx.size:
        raise InvalidInputError(f"frozen value for {name} has size {arr.size}, expected {idx.size}")
    return arr.ravel()


def information_criteria(fitted: FittedModel):
    """(AIC, BIC, -2ll) with the spec's free-parameter count."""
    p = parameter_count(fitted.spec)
    neg2 = -2.0 * fitted.loglik
    aic = neg2 + 2.0 * p
    bic = neg2 + p * np.log(fitted.n_individuals)
    return float(aic), float(bic), float(neg2)


@dataclass(frozen=True)
class EnumerationResult:
    chosen_k: int
    table: tuple  # rows of (k, converged, loglik, aic, bic)
    fits: tuple


def enumerate_classes(data: LongitudinalDataset, k_max: int, options: FitOptions | None = None) -> EnumerationResult:
    """Fit covariate-free mixtures for K = 1..k_max and pick the BIC minimum."""
    if k_max < 1:
        raise InvalidInputError("k_max must be >= 1")
    options = options or FitOptions()
    rows, fits = [], []
    best = None
    for k in range(1, k_max + 1):
        spec = MixtureSpec(kind=ModelKind.FMM, n_classes=k)
        opts_k = replace(options, seed=options.seed + 1000 * k, compute_se=False)
        try:
            fk = fit(spec, data, options=opts_k)
        except DegenerateClassError:
            warnings.warn(f"K={k} failed all attempts; excluded from enumeration")
            rows.append((k, False, np.nan, np.nan, np.nan))
            fits.append(None)
            continue
        aic, bic, neg2 = information_criteria(fk)
        rows.append((k, fk.converged, fk.loglik, aic, bic))
        fits.append(fk)
        if not fk.converged:
            warnings.warn(f"K={k} did not converge; excluded from selection")
            continue
        if best is None or bic < best[0]:
            best = (bic, k)
    if best is None:
        raise DegenerateClassError("no class count produced a convergent fit")
    return EnumerationResult(chosen_k=best[1], table=tuple(rows), fits=tuple(fits))


# ---------------------------------------------------------------------------
# Stepwise estimators


def multinomial_logit(x: np.ndarray, targets: np.ndarray, max_iter: int = 200, tol: float = 1e-10):
    """Weighted multinomial logistic regression by Newton/IRLS.

    ``targets`` is (n, K) with rows summing to one (hard labels one-hot).
    Returns (coefficients (K-1, 1+c) with intercept first, covariance of the
    flattened coefficients, converged flag, separation flag).
    """
    x = np.asarray(x, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n, c = x.shape
    k = targets.shape[1]
    if k < 2:
        raise InvalidInputError("need at least two classes")
    sd = x.std(axis=0)
    if np.any(sd == 0):
        names = np.nonzero(sd == 0)[0]
        raise InvalidInputError(f"zero-variance design columns: {names.tolist()}")
    z = np.column_stack([np.ones(n), x])
    dim = (k - 1) * (1 + c)
    beta = np.zeros(dim)
    separated = False
    converged = False

    def predictors(b):
        mat = b.reshape(k - 1, 1 + c)
        s = np.zeros((n, k))
        s[:, 1:] = z @ mat.T
        return s

    def value_grad(b):
        s = predictors(b)
        shift = s - s.max(axis=1, keepdims=True)
        logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
        val = float(np.sum(targets * logp))
        diff = targets - np.exp(logp)
        grad = (diff[:, 1:].T @ z).ravel()
        return val, grad, np.exp(logp)

    val, grad, probs = value_grad(beta)
    for _ in range(max_iter):
        hess = np.zeros((dim, dim))
        for a in range(1, k):
            for b_ in range(1, k):
                w = probs[:, a] * ((a == b_) - probs[:, b_])
                blk = (z * w[:, None]).T @ z
                hess[(a - 1) * (1 + c) : a * (1 + c), (b_ - 1) * (1 + c) : b_ * (1 + c)] = blk
        try:
            step = np.linalg.solve(hess + 1e-10 * np.eye(dim), grad)
        except np.linalg.LinAlgError:
            break
        alpha = 1.0
        for _ in range(30):
            trial = beta + alpha * step
            val_t, grad_t, probs_t = value_grad(trial)
            if val_t >= val - 1e-12:
                beta, val, grad, probs = trial, val_t, grad_t, probs_t
                break
            alpha *= 0.5
        if np.abs(beta).max() > SEPARATION_CAP:
            separated = True
            beta = np.clip(beta, -SEPARATION_CAP, SEPARATION_CAP)
            warnings.warn(
                "complete or quasi-complete separation detected; coefficients capped at "
                f"+/-{SEPARATION_CAP}"
            )
            val, grad, probs = value_grad(beta)
            break
        if np.max(np.abs(grad)) < tol * max(1.0, n):
            converged = True
            break
    # covariance from the final information
    hess = np.zeros((dim, dim))
    for a in range(1, k):
        for b_ in range(1, k):
            w = probs[:, a] * ((a == b_) - probs[:, b_])
            blk = (z * w[:, None]).T @ z
            hess[(a - 1) * (1 + c) : a * (1 + c), (b_ - 1) * (1 + c) : b_ * (1 + c)] = blk
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        cov = np.full((dim, dim), np.nan)
    return beta.reshape(k - 1, 1 + c), cov, converged, separated


@dataclass(frozen=True)
class StepwiseResult:
    method: str
    gating_covariates: tuple
    coefficients: np.ndarray  # (K-1, 1+c) intercept first
    ses: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    separated: bool
    fitted: FittedModel | None = None


def three_step_fit(
    data: LongitudinalDataset,
    fitted: FittedModel,
    gating_covariates,
    seed: int = 0,
) -> StepwiseResult:
    """Modal-assignment three-step estimator of the gating coefficients."""
    from .classify import modal_assignment, posterior_matrix

    post = posterior_matrix(fitted, data)
    assign = modal_assignment(post, seed=seed)
    k = fitted.spec.n_classes
    labels = assign.labels
    counts = np.bincount(labels - 1, minlength=k)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise InvalidInputError(f"class {empty[0] + 1} is empty after modal assignment")
    x = data.covariate_matrix(tuple(gating_covariates))
    onehot = np.zeros((data.n, k))
    onehot[np.arange(data.n), labels - 1] = 1.0
    coefs, cov, _, separated = multinomial_logit(x, onehot)
    ses = np.sqrt(np.clip(np.diag(cov), 0, None)).reshape(coefs.shape)
    return StepwiseResult(
        method="three-step",
        gating_covariates=tuple(gating_covariates),
        coefficients=coefs,
        ses=ses,
        ci_low=coefs - 1.96 * ses,
        ci_high=coefs + 1.96 * ses,
        separated=separated,
    )


def two_step_fit(
    data: LongitudinalDataset,
    fitted: FittedModel,
    gating_covariates,
    options: FitOptions | None = None,
) -> StepwiseResult:
    """Two-step estimator: gating parameters maximize the full-model
    likelihood with every within-class parameter frozen at the first-step
    estimates."""
    if not fitted.converged:
        raise InvalidInputError("two-step estimation requires a converged first-step fit")
    gating_covariates = tuple(gating_covariates)
    x = data.covariate_matrix(gating_covariates)
    if np.any(x.std(axis=0) == 0):
        raise InvalidInputError("gating covariates must have positive variance")
    base_spec = fitted.spec
    kind = ModelKind.FULL if base_spec.kind.has_expert_covariates else ModelKind.CP
    spec = MixtureSpec(
        kind=kind,
        n_classes=base_spec.n_classes,
        gating_covariates=gating_covariates,
        expert_covariates=base_spec.expert_covariates,
        frame=base_spec.frame,
        expert_covariate_density=base_spec.expert_covariate_density,
    )
    start = MixtureParams(
        classes=fitted.params.classes,
        gating=GatingParams(
            intercepts=fitted.params.gating.intercepts.copy(),
            coefficients=np.zeros((base_spec.n_classes - 1, len(gating_covariates))),
        ),
    )
    frozen = {}
    lay = ParamLayout(spec, knot_bounds=fitted.layout.knot_bounds)
    probe = lay.pack(start)
    for name, sl in lay.slices.items():
        if name.startswith("class"):
            frozen[name] = probe[sl]
    opts = replace(options or fitted.options, optimizer="direct", max_attempts=3)
    refit = fit(spec, data, start=start, options=opts, frozen=frozen,
                knot_bounds=fitted.layout.knot_bounds)
    # freezing contract: class blocks bit-for-bit identical to the input
    for name in frozen:
        if not np.array_equal(refit.packed[lay.slices[name]], probe[lay.slices[name]]):
            raise RuntimeError(f"frozen block {name} changed during two-step optimization")
    k = spec.n_classes
    c = len(gating_covariates)
    coefs = np.column_stack([refit.params.gating.intercepts, refit.params.gating.coefficients])
    table = refit.estimate_table()
    ses = np.full((k - 1, 1 + c), np.nan)
    for j in range(1, k):
        ses[j - 1, 0] = table[f"gating{j + 1}.intercept"].se
        for ci, nm in enumerate(gating_covariates):
            ses[j - 1, 1 + ci] = table[f"gating{j + 1}.{nm}"].se
    return StepwiseResult(
        method="two-step",
        gating_covariates=gating_covariates,
        coefficients=coefs,
        ses=ses,
        ci_low=coefs - 1.96 * ses,
        ci_high=coefs + 1.96 * ses,
        separated=bool(np.abs(coefs).max() > SEPARATION_CAP),
        fitted=refit,
    )
