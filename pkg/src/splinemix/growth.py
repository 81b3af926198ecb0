"""Bilinear-spline growth kernel.

Factor loadings for a linear-linear trajectory with a class-specific knot,
the implied outcome moments for one latent class, and the linear transforms
between the two parameter frames:

* ``original``: intercept at t=0 plus one slope per segment.
* ``reparameterized``: value at the knot, mean slope, and half the slope
  difference, which makes the knot an estimable coefficient.

All functions are pure and operate on immutable inputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericError

__all__ = [
    "Frame",
    "GrowthFactors",
    "ClassParams",
    "LoadingMatrix",
    "loading_matrix",
    "implied_mean",
    "implied_covariance",
    "forward_map",
    "inverse_map",
    "forward_jacobian",
    "inverse_jacobian",
    "reparameterize",
    "inverse_reparameterize",
    "mahalanobis_distance",
]

# Eigenvalues of a covariance matrix may dip slightly below zero after a
# linear transform; anything above this floor is treated as PSD and clipped.
PSD_TOL = 1e-9


class Frame(str, enum.Enum):
    """Parameter frame a set of growth-factor quantities lives in."""

    ORIGINAL = "original"
    REPARAMETERIZED = "reparameterized"


@dataclass(frozen=True)
class GrowthFactors:
    """A single individual's growth-factor triple with its frame tag."""

    eta0: float
    eta1: float
    eta2: float
    frame: Frame = Frame.ORIGINAL

    def as_array(self) -> np.ndarray:
        return np.array([self.eta0, self.eta1, self.eta2], dtype=float)


def _check_psd(mat: np.ndarray, name: str) -> np.ndarray:
    """Validate symmetry/PSD within tolerance and clip round-off negatives."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InvalidInputError(f"{name} must be a square matrix, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    if not np.allclose(mat, mat.T, atol=1e-8, rtol=1e-8):
        raise InvalidInputError(f"{name} must be symmetric")
    mat = 0.5 * (mat + mat.T)
    eigval, eigvec = np.linalg.eigh(mat)
    tol = PSD_TOL * max(1.0, float(np.abs(eigval).max()))
    if eigval.min() < -tol:
        raise InvalidInputError(
            f"{name} is not positive semi-definite (min eigenvalue {eigval.min():.3e})"
        )
    if eigval.min() < 0.0:
        mat = (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
        mat = 0.5 * (mat + mat.T)
    return mat


@dataclass(frozen=True)
class ClassParams:
    """Parameters of one latent class's within-class growth model.

    ``beta_e0``, ``psi`` and ``b_e`` are expressed in ``frame``; the knot,
    covariate moments, and residual variance are frame-free.
    """

    beta_e0: np.ndarray  # (3,) growth-factor intercepts
    psi: np.ndarray  # (3, 3) unexplained growth-factor covariance
    gamma: float  # knot location, time units
    theta_eps: float  # residual variance
    b_e: np.ndarray = field(default_factory=lambda: np.zeros((3, 0)))  # (3, c)
    mu_xe: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (c,)
    phi: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (c, c)
    frame: Frame = Frame.ORIGINAL

    def __post_init__(self):
        object.__setattr__(self, "beta_e0", np.asarray(self.beta_e0, dtype=float).reshape(3))
        object.__setattr__(self, "psi", _check_psd(self.psi, "psi"))
        b_e = np.asarray(self.b_e, dtype=float)
        if b_e.ndim != 2 or b_e.shape[0] != 3:
            raise InvalidInputError(f"b_e must be 3 x c, got {b_e.shape}")
        object.__setattr__(self, "b_e", b_e)
        mu_xe = np.asarray(self.mu_xe, dtype=float).ravel()
        if mu_xe.shape[0] != b_e.shape[1]:
            raise InvalidInputError(
                f"mu_xe length {mu_xe.shape[0]} does not match b_e columns {b_e.shape[1]}"
            )
        object.__setattr__(self, "mu_xe", mu_xe)
        if self.n_covariates:
            object.__setattr__(self, "phi", _check_psd(self.phi, "phi"))
            if self.phi.shape[0] != self.n_covariates:
                raise InvalidInputError("phi dimension does not match covariate count")
        else:
            object.__setattr__(self, "phi", np.zeros((0, 0)))
        if not np.isfinite(self.gamma):
            raise InvalidInputError("gamma must be finite")
        if not (np.isfinite(self.theta_eps) and self.theta_eps > 0):
            raise InvalidInputError("theta_eps must be a positive finite number")

    @property
    def n_covariates(self) -> int:
        return self.b_e.shape[1]

    def to_frame(self, frame: Frame) -> "ClassParams":
        """Re-express the frame-tagged blocks in ``frame``."""
        if frame == self.frame:
            return self
        if self.frame == Frame.ORIGINAL:
            mean, cov, b_e = reparameterize(self.beta_e0, self.psi, self.b_e, self.gamma)
        else:
            mean, cov, b_e = inverse_reparameterize(self.beta_e0, self.psi, self.b_e, self.gamma)
        return ClassParams(
            beta_e0=mean,
            psi=cov,
            gamma=self.gamma,
            theta_eps=self.theta_eps,
            b_e=b_e,
            mu_xe=self.mu_xe,
            phi=self.phi,
            frame=frame,
        )


@dataclass(frozen=True)
class LoadingMatrix:
    """J x 3 factor-loading matrix tagged with the frame it was built in."""

    values: np.ndarray
    frame: Frame

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


def loading_rows(times: np.ndarray, gamma: float, frame: Frame) -> np.ndarray:
    """Raw loading rows for ``times`` (any shape); appends a trailing axis of 3."""
    t = np.asarray(times, dtype=float)
    ones = np.ones_like(t)
    if frame == Frame.ORIGINAL:
        col1 = np.minimum(t, gamma)
        col2 = np.maximum(t - gamma, 0.0)
    else:
        col1 = t - gamma
        col2 = np.sqrt((t - gamma) ** 2)
    return np.stack([ones, col1, col2], axis=-1)


def loading_matrix(times, gamma: float, frame: Frame = Frame.ORIGINAL) -> LoadingMatrix:
    """Factor loadings of a bilinear spline with knot ``gamma`` at ``times``."""
    t = np.asarray(times, dtype=float).ravel()
    if t.size < 1:
        raise InvalidInputError("times must contain at least one measurement occasion")
    if not np.all(np.isfinite(t)) or not np.isfinite(gamma):
        raise InvalidInputError("times and gamma must be finite")
    frame = Frame(frame)
    return LoadingMatrix(values=loading_rows(t, float(gamma), frame), frame=frame)


def implied_mean(params: ClassParams, loadings: LoadingMatrix) -> np.ndarray:
    """Class-implied mean vector of the repeated outcomes."""
    if loadings.frame != params.frame:
        raise InvalidInputError(
            f"loading frame {loadings.frame.value} does not match params frame {params.frame.value}"
        )
    eta_mean = params.beta_e0 + params.b_e @ params.mu_xe
    return loadings.values @ eta_mean


def implied_covariance(params: ClassParams, loadings: LoadingMatrix) -> np.ndarray:
    """Class-implied covariance matrix of the repeated outcomes."""
    if loadings.frame != params.frame:
        raise InvalidInputError(
            f"loading frame {loadings.frame.value} does not match params frame {params.frame.value}"
        )
    lam = loadings.values
    between = params.psi
    if params.n_covariates:
        between = between + params.b_e @ params.phi @ params.b_e.T
    cov = lam @ between @ lam.T + params.theta_eps * np.eye(lam.shape[0])
    return 0.5 * (cov + cov.T)


def forward_jacobian(gamma: float) -> np.ndarray:
    """Jacobian of the original -> reparameterized growth-factor map."""
    return np.array([[1.0, gamma, 0.0], [0.0, 0.5, 0.5], [0.0, -0.5, 0.5]])


def inverse_jacobian(gamma: float) -> np.ndarray:
    """Jacobian of the reparameterized -> original growth-factor map."""
    return np.array([[1.0, -gamma, gamma], [0.0, 1.0, -1.0], [0.0, 1.0, 1.0]])


def forward_map(eta: np.ndarray, gamma: float) -> np.ndarray:
    """Map original growth factors to (value at knot, mean slope, half difference)."""
    eta = np.asarray(eta, dtype=float)
    return forward_jacobian(gamma) @ eta


def inverse_map(eta_prime: np.ndarray, gamma: float) -> np.ndarray:
    """Map reparameterized growth factors back to the original triple."""
    eta_prime = np.asarray(eta_prime, dtype=float)
    return inverse_jacobian(gamma) @ eta_prime


def _transform(mean, cov, b_e, jac):
    mean = np.asarray(mean, dtype=float).reshape(3)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3):
        raise InvalidInputError(f"cov must be 3 x 3, got {cov.shape}")
    b_e = np.asarray(b_e, dtype=float)
    if b_e.ndim != 2 or b_e.shape[0] != 3:
        raise InvalidInputError(f"b_e must be 3 x c, got {b_e.shape}")
    return jac @ mean, jac @ cov @ jac.T, jac @ b_e


def reparameterize(mean, cov, b_e, gamma: float):
    """Original-frame (mean, covariance, path matrix) -> reparameterized frame."""
    return _transform(mean, cov, b_e, forward_jacobian(gamma))


def inverse_reparameterize(mean, cov, b_e, gamma: float):
    """Reparameterized-frame (mean, covariance, path matrix) -> original frame."""
    return _transform(mean, cov, b_e, inverse_jacobian(gamma))


def mahalanobis_distance(mu1, mu2, psi) -> float:
    """Distance between two growth-factor mean vectors under covariance ``psi``."""
    mu1 = np.asarray(mu1, dtype=float).ravel()
    mu2 = np.asarray(mu2, dtype=float).ravel()
    psi = np.asarray(psi, dtype=float)
    diff = mu1 - mu2
    try:
        sol = np.linalg.solve(psi, diff)
    except np.linalg.LinAlgError as exc:
        raise NumericError("psi is singular", condition_number=np.linalg.cond(psi)) from exc
    cond = np.linalg.cond(psi)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericError("psi is numerically singular", condition_number=cond)
    return float(np.sqrt(diff @ sol))
