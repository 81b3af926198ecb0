"""Mixture log-likelihood, responsibilities, and analytic gradients.

The within-class outcome covariance is Lambda Psi Lambda' + theta I with a
3 x 3 core, so densities are evaluated through the matrix-inversion and
matrix-determinant lemmas: only batched 3 x 3 inverses are needed no matter
how many occasions an individual has. Individuals are grouped by occasion
count so that everything runs as stacked array operations.

Gradients are analytic for every parameter except the knot, which enters the
loadings through a kink; its derivative uses central finite differences with
a fixed step in time units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .data import LongitudinalDataset
from .errors import InvalidInputError, NumericError
from .growth import ClassParams, Frame, loading_rows
from .model import (
    GatingParams,
    MixtureParams,
    MixtureSpec,
    ParamLayout,
    gating_log_probabilities,
)

__all__ = ["PackedData", "LikelihoodEngine", "class_log_density", "log_likelihood", "responsibilities"]

LOG_2PI = float(np.log(2.0 * np.pi))
KNOT_FD_STEP = 1e-4  # time units, per the documented kink handling


def _det3(c: np.ndarray) -> np.ndarray:
    return (
        c[..., 0, 0] * (c[..., 1, 1] * c[..., 2, 2] - c[..., 1, 2] * c[..., 2, 1])
        - c[..., 0, 1] * (c[..., 1, 0] * c[..., 2, 2] - c[..., 1, 2] * c[..., 2, 0])
        + c[..., 0, 2] * (c[..., 1, 0] * c[..., 2, 1] - c[..., 1, 1] * c[..., 2, 0])
    )


def _inv3(c: np.ndarray, det: np.ndarray) -> np.ndarray:
    out = np.empty_like(c)
    out[..., 0, 0] = c[..., 1, 1] * c[..., 2, 2] - c[..., 1, 2] * c[..., 2, 1]
    out[..., 0, 1] = c[..., 0, 2] * c[..., 2, 1] - c[..., 0, 1] * c[..., 2, 2]
    out[..., 0, 2] = c[..., 0, 1] * c[..., 1, 2] - c[..., 0, 2] * c[..., 1, 1]
    out[..., 1, 0] = c[..., 1, 2] * c[..., 2, 0] - c[..., 1, 0] * c[..., 2, 2]
    out[..., 1, 1] = c[..., 0, 0] * c[..., 2, 2] - c[..., 0, 2] * c[..., 2, 0]
    out[..., 1, 2] = c[..., 0, 2] * c[..., 1, 0] - c[..., 0, 0] * c[..., 1, 2]
    out[..., 2, 0] = c[..., 1, 0] * c[..., 2, 1] - c[..., 1, 1] * c[..., 2, 0]
    out[..., 2, 1] = c[..., 0, 1] * c[..., 2, 0] - c[..., 0, 0] * c[..., 2, 1]
    out[..., 2, 2] = c[..., 0, 0] * c[..., 1, 1] - c[..., 0, 1] * c[..., 1, 0]
    return out / det[..., None, None]


@dataclass(frozen=True)
class _Group:
    idx: np.ndarray  # positions of these individuals in the dataset
    times: np.ndarray  # (m, J)
    y: np.ndarray  # (m, J)


class PackedData:
    """Dataset views grouped by occasion count, plus role-selected covariates."""

    def __init__(self, data: LongitudinalDataset, spec: MixtureSpec):
        self.n = data.n
        self.spec = spec
        by_len: dict[int, list[int]] = {}
        for i, t in enumerate(data.times):
            by_len.setdefault(t.size, []).append(i)
        groups = []
        for j in sorted(by_len):
            idx = np.array(by_len[j], dtype=int)
            groups.append(
                _Group(
                    idx=idx,
                    times=np.stack([data.times[i] for i in idx]),
                    y=np.stack([data.outcomes[i] for i in idx]),
                )
            )
        self.groups = tuple(groups)
        self.x_g = data.covariate_matrix(spec.gating_covariates)
        self.x_e = data.covariate_matrix(spec.expert_covariates)


def _y_terms(cp: ClassParams, group: _Group, x_e: np.ndarray):
    """Per-individual conditional outcome log density and reusable pieces."""
    lam = loading_rows(group.times, cp.gamma, cp.frame)  # (m, J, 3)
    eta = cp.beta_e0 + (x_e @ cp.b_e.T if cp.n_covariates else 0.0)  # (m, 3) or (3,)
    if np.ndim(eta) == 1:
        mu = lam @ eta
    else:
        mu = np.einsum("mjk,mk->mj", lam, eta)
    d = group.y - mu
    theta = cp.theta_eps
    m_mat = np.einsum("mja,mjb->mab", lam, lam)
    c_mat = np.eye(3) + (m_mat @ cp.psi) / theta
    det = _det3(c_mat)
    inv = _inv3(c_mat, det)
    u = np.einsum("mja,mj->ma", lam, d)
    q = np.einsum("ab,mbc,mc->ma", cp.psi, inv, u)  # A (I + M A / theta)^-1 u
    dd = np.einsum("mj,mj->m", d, d)
    quad = (dd - np.einsum("ma,ma->m", u, q) / theta) / theta
    n_occ = group.times.shape[1]
    # the exact quadratic form is non-negative; strongly negative values mean
    # catastrophic cancellation (near-singular covariance) and are rejected,
    # small negatives are round-off and clipped
    with np.errstate(invalid="ignore", divide="ignore"):
        bad = ~(quad > -1e-6 * (dd / theta + 1.0)) | ~(det > 0)
        quad = np.clip(quad, 0.0, None)
        safe_det = np.where(det > 0, det, 1.0)
        logdens = -0.5 * (n_occ * (LOG_2PI + np.log(theta)) + np.log(safe_det) + quad)
        logdens = np.where(bad, -np.inf, logdens)
    return logdens, (lam, d, m_mat, inv, u, q)


def _y_grad_pieces(cp: ClassParams, group: _Group, x_e: np.ndarray, w: np.ndarray, pieces):
    """Weighted gradient of the conditional outcome term for one group.

    Returns contributions for beta_e0, b_e, psi (full-matrix convention) and
    theta (pre log-chain).
    """
    lam, d, m_mat, inv, u, q = pieces
    theta = cp.theta_eps
    n_occ = group.times.shape[1]
    lam_q = np.einsum("mjk,mk->mj", lam, q)
    sid = d / theta - lam_q / theta**2  # Sigma^-1 d
    v = np.einsum("mjk,mj->mk", lam, sid)  # Lambda' Sigma^-1 d
    g_b0 = np.einsum("m,mk->k", w, v)
    g_be = np.einsum("m,mk,mc->kc", w, v, x_e) if cp.n_covariates else None
    a_inv = np.einsum("ab,mbc->mac", cp.psi, inv)  # A (I + M A / theta)^-1
    s_mat = m_mat / theta - np.einsum("mab,mbc,mcd->mad", m_mat, a_inv, m_mat) / theta**2
    g_psi = 0.5 * (np.einsum("m,ma,mb->ab", w, v, v) - np.einsum("m,mab->ab", w, s_mat))
    g_psi = 0.5 * (g_psi + g_psi.T)
    tr_sinv = n_occ / theta - np.einsum("mab,mba->m", a_inv, m_mat) / theta**2
    g_theta = 0.5 * (np.einsum("m,mj,mj->", w, sid, sid) - float(w @ tr_sinv))
    return g_b0, g_be, g_psi, g_theta


def _xe_loglik(cp: ClassParams, x_e: np.ndarray):
    """Gaussian log density of the expert covariates under the class moments."""
    c = cp.n_covariates
    s = x_e - cp.mu_xe
    try:
        cho = cho_factor(cp.phi, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            "class covariate covariance is singular", condition_number=np.linalg.cond(cp.phi)
        ) from exc
    sol = cho_solve(cho, s.T).T
    quad = np.einsum("mc,mc->m", s, sol)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    return -0.5 * (c * LOG_2PI + logdet + quad), sol


def _chol_chain(g_mat: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Chain a symmetric full-matrix gradient onto the packed Cholesky coords."""
    low = np.linalg.cholesky(mat)
    gl = 2.0 * g_mat @ low
    dim = mat.shape[0]
    out = [np.diag(gl) * np.diag(low)]
    for i in range(1, dim):
        out.append(gl[i, :i])
    return np.concatenate(out)


class LikelihoodEngine:
    """Evaluates the mixture likelihood and its gradient on one dataset."""

    def __init__(self, spec: MixtureSpec, data: LongitudinalDataset):
        self.spec = spec
        self.data = data
        self.packed = PackedData(data, spec)
        self._include_xe = spec.kind.has_expert_covariates and spec.expert_covariate_density == "joint"

    # -- values --------------------------------------------------------

    def class_y_loglik(self, cp: ClassParams) -> np.ndarray:
        """Per-individual conditional outcome log density for one class."""
        out = np.empty(self.packed.n)
        for g in self.packed.groups:
            x_e = self.packed.x_e[g.idx]
            out[g.idx] = _y_terms(cp, g, x_e)[0]
        return out

    def class_terms(self, params: MixtureParams) -> np.ndarray:
        """(n, K) class log densities, including the covariate term if joint."""
        out = np.empty((self.packed.n, params.n_classes))
        for k, cp in enumerate(params.classes):
            term = self.class_y_loglik(cp)
            if self._include_xe:
                term = term + _xe_loglik(cp, self.packed.x_e)[0]
            out[:, k] = term
        return out

    def gating_log(self, params: MixtureParams) -> np.ndarray:
        logp = gating_log_probabilities(self.packed.x_g, params.gating)
        if logp.ndim == 1:
            logp = np.tile(logp, (self.packed.n, 1))
        return logp

    def parts(self, params: MixtureParams) -> np.ndarray:
        """(n, K) joint log contributions log g_k(x_i) + log f_k(data_i)."""
        return self.gating_log(params) + self.class_terms(params)

    def loglik_resp(self, params: MixtureParams):
        parts = self.parts(params)
        row_ll = logsumexp(parts, axis=1)
        resp = np.exp(parts - row_ll[:, None])
        return float(row_ll.sum()), resp

    def loglik(self, params: MixtureParams) -> float:
        parts = self.parts(params)
        return float(logsumexp(parts, axis=1).sum())

    def weighted_class_y(self, cp: ClassParams, w: np.ndarray) -> float:
        """Responsibility-weighted conditional outcome term for one class."""
        total = 0.0
        for g in self.packed.groups:
            logdens, _ = _y_terms(cp, g, self.packed.x_e[g.idx])
            total += float(w[g.idx] @ logdens)
        return total

    # -- gradients -----------------------------------------------------

    def _knot_fd(self, cp: ClassParams, w: np.ndarray) -> float:
        """d(weighted conditional term)/d gamma by central differences."""
        h = KNOT_FD_STEP
        up = ClassParams(
            beta_e0=cp.beta_e0, psi=cp.psi, gamma=cp.gamma + h, theta_eps=cp.theta_eps,
            b_e=cp.b_e, mu_xe=cp.mu_xe, phi=cp.phi, frame=cp.frame,
        )
        dn = ClassParams(
            beta_e0=cp.beta_e0, psi=cp.psi, gamma=cp.gamma - h, theta_eps=cp.theta_eps,
            b_e=cp.b_e, mu_xe=cp.mu_xe, phi=cp.phi, frame=cp.frame,
        )
        return (self.weighted_class_y(up, w) - self.weighted_class_y(dn, w)) / (2.0 * h)

    def class_y_value_grad(self, cp: ClassParams, w: np.ndarray, knot_u: float, layout: ParamLayout):
        """Weighted conditional term value and packed-coordinate gradients.

        Gradient keys: beta_e0, psi, knot, b_e (if present), theta — all in
        packed coordinates (Cholesky / logit / log chains applied).
        """
        value = 0.0
        g_b0 = np.zeros(3)
        g_be = np.zeros((3, cp.n_covariates)) if cp.n_covariates else None
        g_psi = np.zeros((3, 3))
        g_theta = 0.0
        for g in self.packed.groups:
            x_e = self.packed.x_e[g.idx]
            logdens, pieces = _y_terms(cp, g, x_e)
            wg = w[g.idx]
            value += float(wg @ logdens)
            p_b0, p_be, p_psi, p_theta = _y_grad_pieces(cp, g, x_e, wg, pieces)
            g_b0 += p_b0
            if p_be is not None:
                g_be += p_be
            g_psi += p_psi
            g_theta += p_theta
        grads = {
            "beta_e0": g_b0,
            "psi": _chol_chain(g_psi, cp.psi),
            "knot": np.array([self._knot_fd(cp, w) * layout.knot_jacobian(knot_u)]),
            "theta": np.array([g_theta * cp.theta_eps]),
        }
        if cp.n_covariates:
            grads["b_e"] = g_be.ravel()
        return value, grads

    def xe_value_grad(self, cp: ClassParams, w: np.ndarray):
        """Weighted covariate-density term value and packed gradients."""
        logdens, sol = _xe_loglik(cp, self.packed.x_e)
        value = float(w @ logdens)
        g_mu = np.einsum("m,mc->c", w, sol)
        phi_inv = cho_solve(cho_factor(cp.phi, lower=True), np.eye(cp.n_covariates))
        g_phi = 0.5 * (np.einsum("m,ma,mb->ab", w, sol, sol) - float(w.sum()) * phi_inv)
        g_phi = 0.5 * (g_phi + g_phi.T)
        return value, {"mu_xe": g_mu, "phi": _chol_chain(g_phi, cp.phi)}

    def gating_value_grad(self, params: MixtureParams, resp: np.ndarray):
        """Weighted gating term value and gradient w.r.t. intercepts/coefs."""
        logp = self.gating_log(params)
        value = float(np.sum(resp * logp))
        diff = resp - np.exp(logp)  # (n, K)
        g_icpt = diff[:, 1:].sum(axis=0)
        g_coef = diff[:, 1:].T @ self.packed.x_g
        return value, g_icpt, g_coef

    def marginal_value_grad(self, layout: ParamLayout, vec: np.ndarray):
        """Marginal mixture log-likelihood and its full packed gradient.

        Uses the responsibility-weighted complete-data gradient, which equals
        the marginal gradient at the evaluation point.
        """
        params = layout.unpack(vec)
        ll, resp = self.loglik_resp(params)
        grad = np.zeros(layout.size)
        for k, cp in enumerate(params.classes):
            pre = f"class{k + 1}"
            knot_u = vec[layout.block(f"{pre}.knot")][0]
            _, grads = self.class_y_value_grad(cp, resp[:, k], knot_u, layout)
            grad[layout.block(f"{pre}.beta_e0")] = grads["beta_e0"]
            grad[layout.block(f"{pre}.psi")] = grads["psi"]
            grad[layout.block(f"{pre}.knot")] = grads["knot"]
            grad[layout.block(f"{pre}.theta")] = grads["theta"]
            if cp.n_covariates:
                grad[layout.block(f"{pre}.b_e")] = grads["b_e"]
            if self._include_xe:
                _, xg = self.xe_value_grad(cp, resp[:, k])
                grad[layout.block(f"{pre}.mu_xe")] = xg["mu_xe"]
                grad[layout.block(f"{pre}.phi")] = xg["phi"]
        _, g_icpt, g_coef = self.gating_value_grad(params, resp)
        grad[layout.block("gating.intercepts")] = g_icpt
        grad[layout.block("gating.coefficients")] = g_coef.ravel()
        return ll, grad


# ---------------------------------------------------------------------------
# Spec-level convenience operations


def class_log_density(y, times, x_e, params: ClassParams, include_covariate_density=None) -> float:
    """Log density of one individual's data under one class.

    The outcome term is Gaussian with the conditional-on-covariates mean; a
    Gaussian covariate term is added when the class carries covariates (the
    joint reading), unless ``include_covariate_density`` is explicitly False.
    """
    y = np.asarray(y, dtype=float).ravel()
    t = np.asarray(times, dtype=float).ravel()
    x_e = np.asarray(x_e, dtype=float).ravel()
    if y.size != t.size:
        raise InvalidInputError("y and times must have equal lengths")
    if x_e.size != params.n_covariates:
        raise InvalidInputError(
            f"x_e has length {x_e.size}, class expects {params.n_covariates}"
        )
    group = _Group(idx=np.array([0]), times=t[None, :], y=y[None, :])
    logdens, _ = _y_terms(params, group, x_e[None, :])
    total = float(logdens[0])
    if include_covariate_density is None:
        include_covariate_density = params.n_covariates > 0
    if include_covariate_density and params.n_covariates:
        total += float(_xe_loglik(params, x_e[None, :])[0][0])
    return total


def log_likelihood(spec: MixtureSpec, params: MixtureParams, data: LongitudinalDataset) -> float:
    """Observed-data mixture log-likelihood, computed in log space."""
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    return LikelihoodEngine(spec, data).loglik(params.to_frame(spec.frame))


def responsibilities(spec: MixtureSpec, params: MixtureParams, data: LongitudinalDataset) -> np.ndarray:
    """Posterior class probabilities for every individual (rows sum to one)."""
    _, resp = LikelihoodEngine(spec, data).loglik_resp(params.to_frame(spec.frame))
    return resp
