"""Mixture model specification, gating probabilities and parameter packing.

Four model kinds are supported:

* ``fmm`` — no covariates anywhere; mixing proportions are free parameters.
* ``cp``  — covariates predict class membership through a multinomial gate.
* ``gp``  — covariates predict within-class growth factors; free proportions.
* ``full`` — both roles at once (roles must not overlap).

Free parameters are packed into a flat vector for the optimizer. Covariance
blocks are stored through log-diagonal Cholesky factors and the knot through
a bounded logistic transform, so every real vector decodes to a valid model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .errors import InvalidInputError
from .growth import ClassParams, Frame

__all__ = [
    "ModelKind",
    "MixtureSpec",
    "GatingParams",
    "MixtureParams",
    "ParamLayout",
    "gating_probabilities",
    "gating_log_probabilities",
    "parameter_count",
]


class ModelKind(str, enum.Enum):
    FMM = "fmm"
    CP = "cp"
    GP = "gp"
    FULL = "full"

    @property
    def has_gating_covariates(self) -> bool:
        return self in (ModelKind.CP, ModelKind.FULL)

    @property
    def has_expert_covariates(self) -> bool:
        return self in (ModelKind.GP, ModelKind.FULL)


@dataclass(frozen=True)
class MixtureSpec:
    """Declarative description of the mixture variant being fit."""

    kind: ModelKind
    n_classes: int
    gating_covariates: tuple = ()
    expert_covariates: tuple = ()
    frame: Frame = Frame.REPARAMETERIZED
    # "joint" multiplies the within-class outcome density by a class-specific
    # Gaussian density of the expert covariates; "conditional" treats them as
    # fixed regressors. Only meaningful for gp/full kinds.
    expert_covariate_density: str = "joint"

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "frame", Frame(self.frame))
        object.__setattr__(self, "gating_covariates", tuple(self.gating_covariates))
        object.__setattr__(self, "expert_covariates", tuple(self.expert_covariates))
        if self.n_classes < 1:
            raise InvalidInputError("n_classes must be >= 1")
        if self.expert_covariate_density not in ("joint", "conditional"):
            raise InvalidInputError("expert_covariate_density must be 'joint' or 'conditional'")
        overlap = set(self.gating_covariates) & set(self.expert_covariates)
        if overlap:
            raise InvalidInputError(
                f"covariates may hold only one role per model, got both roles for {sorted(overlap)}"
            )
        if self.gating_covariates and not kind.has_gating_covariates:
            raise InvalidInputError(f"{kind.value} model forbids gating covariates")
        if self.expert_covariates and not kind.has_expert_covariates:
            raise InvalidInputError(f"{kind.value} model forbids expert covariates")
        if kind.has_gating_covariates and not self.gating_covariates:
            raise InvalidInputError(f"{kind.value} model requires gating covariates")
        if kind.has_expert_covariates and not self.expert_covariates:
            raise InvalidInputError(f"{kind.value} model requires expert covariates")

    @property
    def n_gating(self) -> int:
        return len(self.gating_covariates)

    @property
    def n_expert(self) -> int:
        return len(self.expert_covariates)


@dataclass(frozen=True)
class GatingParams:
    """Multinomial-logit gate; class 1 is the reference with predictor 0.

    For kinds without gating covariates the coefficient block is empty and
    the intercepts are the free mixing-proportion logits.
    """

    intercepts: np.ndarray  # (K-1,)
    coefficients: np.ndarray  # (K-1, c_g)

    def __post_init__(self):
        icpt = np.asarray(self.intercepts, dtype=float).ravel()
        coef = np.asarray(self.coefficients, dtype=float)
        if coef.ndim != 2 or coef.shape[0] != icpt.shape[0]:
            raise InvalidInputError("coefficients must be (K-1, c_g)")
        if not (np.all(np.isfinite(icpt)) and np.all(np.isfinite(coef))):
            raise InvalidInputError("gating parameters must be finite")
        object.__setattr__(self, "intercepts", icpt)
        object.__setattr__(self, "coefficients", coef)

    @property
    def n_classes(self) -> int:
        return self.intercepts.shape[0] + 1


def gating_log_probabilities(x_g, gp: GatingParams) -> np.ndarray:
    """Log class probabilities for covariate rows ``x_g`` (n, c_g) or (c_g,)."""
    x = np.asarray(x_g, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("gating covariates must be finite")
    if x.shape[1] != gp.coefficients.shape[1]:
        raise InvalidInputError(
            f"covariate length {x.shape[1]} does not match coefficients {gp.coefficients.shape[1]}"
        )
    pred = np.zeros((x.shape[0], gp.n_classes))
    if gp.n_classes > 1:
        pred[:, 1:] = gp.intercepts + x @ gp.coefficients.T
    shift = pred - pred.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    return logp[0] if single else logp


def gating_probabilities(x_g, gp: GatingParams) -> np.ndarray:
    """Class-membership probability simplex given gating covariates."""
    return np.exp(gating_log_probabilities(x_g, gp))


@dataclass(frozen=True)
class MixtureParams:
    """Full parameter set for a mixture spec: per-class params plus the gate."""

    classes: tuple  # tuple[ClassParams], all in a common frame
    gating: GatingParams

    def __post_init__(self):
        classes = tuple(self.classes)
        if not classes:
            raise InvalidInputError("at least one class required")
        frames = {cp.frame for cp in classes}
        if len(frames) != 1:
            raise InvalidInputError("all classes must share one frame")
        if self.gating.n_classes != len(classes):
            raise InvalidInputError("gating class count does not match classes")
        object.__setattr__(self, "classes", classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def frame(self) -> Frame:
        return self.classes[0].frame

    def to_frame(self, frame: Frame) -> "MixtureParams":
        return MixtureParams(
            classes=tuple(cp.to_frame(frame) for cp in self.classes),
            gating=self.gating,
        )

    def mixing_proportions(self) -> np.ndarray:
        """Gate evaluated at zero covariates (the free proportions for fmm/gp)."""
        return gating_probabilities(np.zeros(self.gating.coefficients.shape[1]), self.gating)

    def relabel(self, order) -> "MixtureParams":
        """Permute class labels; new class ``j`` is old class ``order[j]``.

        Gating predictors are re-expressed against the new reference class so
        that the implied probabilities are unchanged.
        """
        order = list(order)
        if sorted(order) != list(range(self.n_classes)):
            raise InvalidInputError("order must be a permutation of 0..K-1")
        k = self.n_classes
        icpt = np.concatenate([[0.0], self.gating.intercepts])
        coef = np.vstack([np.zeros((1, self.gating.coefficients.shape[1])), self.gating.coefficients])
        new_icpt = icpt[order] - icpt[order[0]]
        new_coef = coef[order] - coef[order[0]]
        gating = GatingParams(intercepts=new_icpt[1:], coefficients=new_coef[1:])
        return MixtureParams(classes=tuple(self.classes[i] for i in order), gating=gating)


def parameter_count(spec: MixtureSpec) -> int:
    """Number of free parameters, as used by AIC/BIC."""
    c_e = spec.n_expert
    per_class = 3 + 6 + 1 + 1  # growth-factor intercepts, psi, knot, residual
    if spec.kind.has_expert_covariates:
        per_class += 3 * c_e + c_e + c_e * (c_e + 1) // 2
    gating = (spec.n_classes - 1) * (1 + spec.n_gating)
    return spec.n_classes * per_class + gating


# ---------------------------------------------------------------------------
# Packing


def _chol_to_vec(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor as [log diag..., strict lower by row...]."""
    dim = mat.shape[0]
    try:
        low = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        low = np.linalg.cholesky(mat + 1e-10 * np.eye(dim))
    out = [np.log(np.diag(low))]
    for i in range(1, dim):
        out.append(low[i, :i])
    return np.concatenate(out) if out else np.zeros(0)


def _vec_to_chol(vec: np.ndarray, dim: int) -> np.ndarray:
    low = np.zeros((dim, dim))
    np.fill_diagonal(low, np.exp(vec[:dim]))
    pos = dim
    for i in range(1, dim):
        low[i, :i] = vec[pos : pos + i]
        pos += i
    return low @ low.T


def _tri_size(dim: int) -> int:
    return dim * (dim + 1) // 2


@dataclass(frozen=True)
class ParamLayout:
    """Maps between MixtureParams and the flat vector the optimizer sees."""

    spec: MixtureSpec
    knot_bounds: tuple = (0.0, 9.0)
    slices: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lo, hi = self.knot_bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise InvalidInputError("knot bounds must be finite with hi > lo")
        slices = {}
        pos = 0

        def take(name, width):
            nonlocal pos
            slices[name] = slice(pos, pos + width)
            pos += width

        c_e = self.spec.n_expert if self.spec.kind.has_expert_covariates else 0
        for k in range(self.spec.n_classes):
            take(f"class{k + 1}.beta_e0", 3)
            take(f"class{k + 1}.psi", 6)
            take(f"class{k + 1}.knot", 1)
            if c_e:
                take(f"class{k + 1}.b_e", 3 * c_e)
                take(f"class{k + 1}.mu_xe", c_e)
                take(f"class{k + 1}.phi", _tri_size(c_e))
            take(f"class{k + 1}.theta", 1)
        k_free = self.spec.n_classes - 1
        c_g = self.spec.n_gating if self.spec.kind.has_gating_covariates else 0
        take("gating.intercepts", k_free)
        take("gating.coefficients", k_free * c_g)
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "size", pos)

    def encode_knot(self, gamma: float) -> float:
        lo, hi = self.knot_bounds
        frac = np.clip((gamma - lo) / (hi - lo), 1e-9, 1 - 1e-9)
        return float(logit(frac))

    def decode_knot(self, u: float) -> float:
        lo, hi = self.knot_bounds
        return float(lo + (hi - lo) * expit(u))

    def knot_jacobian(self, u: float) -> float:
        """d gamma / d u at packed coordinate ``u``."""
        lo, hi = self.knot_bounds
        s = expit(u)
        return float((hi - lo) * s * (1.0 - s))

    def pack(self, params: MixtureParams) -> np.ndarray:
        spec = self.spec
        if params.n_classes != spec.n_classes:
            raise InvalidInputError("params class count does not match spec")
        if params.frame != spec.frame:
            params = params.to_frame(spec.frame)
        vec = np.zeros(self.size)
        c_e = spec.n_expert if spec.kind.has_expert_covariates else 0
        for k, cp in enumerate(params.classes):
            if cp.n_covariates != c_e:
                raise InvalidInputError(
                    f"class {k + 1} has {cp.n_covariates} covariates, spec expects {c_e}"
                )
            pre = f"class{k + 1}"
            vec[self.slices[f"{pre}.beta_e0"]] = cp.beta_e0
            vec[self.slices[f"{pre}.psi"]] = _chol_to_vec(cp.psi)
            vec[self.slices[f"{pre}.knot"]] = self.encode_knot(cp.gamma)
            if c_e:
                vec[self.slices[f"{pre}.b_e"]] = cp.b_e.ravel()
                vec[self.slices[f"{pre}.mu_xe"]] = cp.mu_xe
                vec[self.slices[f"{pre}.phi"]] = _chol_to_vec(cp.phi)
            vec[self.slices[f"{pre}.theta"]] = np.log(cp.theta_eps)
        gp = params.gating
        c_g = spec.n_gating if spec.kind.has_gating_covariates else 0
        if gp.coefficients.shape[1] != c_g:
            raise InvalidInputError("gating coefficient width does not match spec")
        vec[self.slices["gating.intercepts"]] = gp.intercepts
        vec[self.slices["gating.coefficients"]] = gp.coefficients.ravel()
        return vec

    def unpack(self, vec: np.ndarray) -> MixtureParams:
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.shape[0] != self.size:
            raise InvalidInputError(f"vector length {vec.shape[0]} != layout size {self.size}")
        spec = self.spec
        c_e = spec.n_expert if spec.kind.has_expert_covariates else 0
        classes = []
        for k in range(spec.n_classes):
            pre = f"class{k + 1}"
            if c_e:
                b_e = vec[self.slices[f"{pre}.b_e"]].reshape(3, c_e)
                mu_xe = vec[self.slices[f"{pre}.mu_xe"]]
                phi = _vec_to_chol(vec[self.slices[f"{pre}.phi"]], c_e)
            else:
                b_e, mu_xe, phi = np.zeros((3, 0)), np.zeros(0), np.zeros((0, 0))
            classes.append(
                ClassParams(
                    beta_e0=vec[self.slices[f"{pre}.beta_e0"]],
                    psi=_vec_to_chol(vec[self.slices[f"{pre}.psi"]], 3),
                    gamma=self.decode_knot(vec[self.slices[f"{pre}.knot"]][0]),
                    theta_eps=float(np.exp(vec[self.slices[f"{pre}.theta"]][0])),
                    b_e=b_e,
                    mu_xe=mu_xe,
                    phi=phi,
                    frame=spec.frame,
                )
            )
        k_free = spec.n_classes - 1
        c_g = spec.n_gating if spec.kind.has_gating_covariates else 0
        gating = GatingParams(
            intercepts=vec[self.slices["gating.intercepts"]],
            coefficients=vec[self.slices["gating.coefficients"]].reshape(k_free, c_g),
        )
        return MixtureParams(classes=tuple(classes), gating=gating)

    def block(self, name: str) -> slice:
        return self.slices[name]

    def indices(self, *names) -> np.ndarray:
        """Flat indices of the named blocks (supports 'class*' wildcards)."""
        out = []
        for name in names:
            if name.startswith("class*"):
                suffix = name[len("class*") :]
                keys = [k for k in self.slices if k.startswith("class") and k.endswith(suffix)]
            else:
                keys = [name]
            for key in keys:
                if key not in self.slices:
                    raise InvalidInputError(f"unknown parameter block {key}")
                out.extend(range(self.slices[key].start, self.slices[key].stop))
        return np.array(sorted(set(out)), dtype=int)
