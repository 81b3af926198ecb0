"""Synthetic data generation for the simulation study and forest scenarios.

The design grid crosses three trajectory scenarios, three knot separations,
two allocation ratios, three explained-variance combinations, and two
residual variances (108 cells). Data generation follows the study recipe:
memberships come first from the gating covariates, then growth factors and
direct-effect covariates are drawn jointly per class, occasions are jittered
uniformly around ten equally spaced waves, and outcomes follow the
class-specific spline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset
from .errors import InvalidInputError
from .growth import ClassParams, Frame, mahalanobis_distance
from .model import GatingParams, MixtureParams, MixtureSpec, ModelKind, gating_probabilities

__all__ = [
    "SimCondition",
    "GeneratedDataset",
    "condition_grid",
    "condition_by_id",
    "calibrate_path_coefficients",
    "true_parameters",
    "generate",
    "verify_condition",
    "generate_importance_scenario",
    "IMPORTANCE_SCENARIOS",
]

N_INDIVIDUALS = 500
N_WAVES = 10
TIME_JITTER = 0.25
PSI_FIXED = np.array([[25.0, 1.5, 1.5], [1.5, 1.0, 0.3], [1.5, 0.3, 1.0]])
GATING_SLOPES = (np.log(1.5), np.log(1.7))
UNBALANCED_INTERCEPT = 0.775
KNOT_PAIRS = ((4.00, 5.00), (3.75, 5.25), (3.50, 5.50))
R2_PAIRS = ((0.13, 0.13), (0.13, 0.26), (0.26, 0.26))
SCENARIO_MEANS = {
    1: (np.array([98.0, -5.0, -2.6]), np.array([102.0, -5.0, -2.6])),
    2: (np.array([100.0, -4.4, -2.0]), np.array([100.0, -3.6, -2.0])),
    3: (np.array([100.0, -5.0, -2.6]), np.array([100.0, -5.0, -3.4])),
}
COVARIATE_NAMES = ("x_g1", "x_g2", "x_e1", "x_e2")
PATH_RATIO = 1.5  # second direct-effect coefficient relative to the first


@dataclass(frozen=True)
class SimCondition:
    scenario: int
    knots: tuple  # (gamma_1, gamma_2)
    allocation: str  # "balanced" | "1:2"
    r2: tuple  # explained-variance targets per class
    theta_eps: float
    n: int = N_INDIVIDUALS
    uid: int = -1  # stable index in the grid; custom conditions use >= 1000
    r2_base: str = "unexplained"  # "unexplained" | "total"
    class_means: tuple = ()  # override of the scenario means, original frame

    def __post_init__(self):
        if self.scenario not in (1, 2, 3):
            raise InvalidInputError("scenario must be 1, 2 or 3")
        if self.allocation not in ("balanced", "1:2"):
            raise InvalidInputError("allocation must be 'balanced' or '1:2'")
        if self.r2_base not in ("unexplained", "total"):
            raise InvalidInputError("r2_base must be 'unexplained' or 'total'")
        if not all(0 < r < 1 for r in self.r2):
            raise InvalidInputError("r2 targets must lie in (0, 1)")
        means = self.class_means or SCENARIO_MEANS[self.scenario]
        object.__setattr__(self, "class_means", tuple(np.asarray(m, float) for m in means))
        object.__setattr__(self, "knots", tuple(float(g) for g in self.knots))
        object.__setattr__(self, "r2", tuple(float(r) for r in self.r2))

    @property
    def knot_separation(self) -> float:
        return round(self.knots[1] - self.knots[0], 10)

    @property
    def gating_intercept(self) -> float:
        return 0.0 if self.allocation == "balanced" else UNBALANCED_INTERCEPT

    @property
    def condition_id(self) -> str:
        alloc = "bal" if self.allocation == "balanced" else "1to2"
        r2 = f"{int(round(self.r2[0] * 100))}.{int(round(self.r2[1] * 100))}"
        return (
            f"s{self.scenario}-sep{self.knot_separation:g}-{alloc}"
            f"-r{r2}-t{self.theta_eps:g}"
        )


@dataclass(frozen=True)
class GeneratedDataset:
    dataset: LongitudinalDataset
    memberships: np.ndarray  # values in 1..K
    params: MixtureParams  # generating values, original frame
    spec: MixtureSpec  # correctly specified full model
    condition: SimCondition
    seed: int
    membership_mode: str


def condition_grid() -> list:
    """All 108 design cells in a stable order."""
    grid = []
    uid = 0
    for scenario in (1, 2, 3):
        for knots in KNOT_PAIRS:
            for allocation in ("balanced", "1:2"):
                for r2 in R2_PAIRS:
                    for theta in (1.0, 2.0):
                        grid.append(
                            SimCondition(
                                scenario=scenario,
                                knots=knots,
                                allocation=allocation,
                                r2=r2,
                                theta_eps=theta,
                                uid=uid,
                            )
                        )
                        uid += 1
    return grid


def condition_by_id(condition_id: str) -> SimCondition:
    for cond in condition_grid():
        if cond.condition_id == condition_id:
            return cond
    raise InvalidInputError(f"unknown condition id {condition_id!r}")


def calibrate_path_coefficients(psi_value: float, r2: float, r2_base: str = "unexplained"):
    """Direct-effect coefficients so two independent standardized covariates
    explain fraction ``r2`` of one growth factor's variance.

    The second coefficient is locked at 1.5x the first. With ``psi_value``
    read as the unexplained variance, beta1^2 (1 + 1.5^2) = r2/(1-r2) * psi;
    with the 'total' reading, beta1^2 (1 + 1.5^2) = r2 * psi.
    """
    if not (0 < r2 < 1):
        raise InvalidInputError("r2 must lie in (0, 1)")
    if psi_value <= 0:
        raise InvalidInputError("psi_value must be positive")
    if r2_base == "unexplained":
        explained = r2 / (1.0 - r2) * psi_value
    elif r2_base == "total":
        explained = r2 * psi_value
    else:
        raise InvalidInputError("r2_base must be 'unexplained' or 'total'")
    beta1 = float(np.sqrt(explained / (1.0 + PATH_RATIO**2)))
    return beta1, PATH_RATIO * beta1


def _path_matrix(psi: np.ndarray, r2: float, r2_base: str) -> np.ndarray:
    rows = [calibrate_path_coefficients(psi[j, j], r2, r2_base) for j in range(3)]
    return np.array(rows)


def _class_psi(psi: np.ndarray, b_e: np.ndarray, r2_base: str) -> np.ndarray:
    if r2_base == "unexplained":
        return psi.copy()
    residual = psi - b_e @ b_e.T
    eigval = np.linalg.eigvalsh(residual)
    if eigval.min() < -1e-9:
        raise InvalidInputError("total-variance reading yields a non-PSD residual covariance")
    return residual


def true_parameters(condition: SimCondition) -> MixtureParams:
    """Generating parameter values in the original frame."""
    classes = []
    for k in range(2):
        b_e = _path_matrix(PSI_FIXED, condition.r2[k], condition.r2_base)
        classes.append(
            ClassParams(
                beta_e0=condition.class_means[k],
                psi=_class_psi(PSI_FIXED, b_e, condition.r2_base),
                gamma=condition.knots[k],
                theta_eps=condition.theta_eps,
                b_e=b_e,
                mu_xe=np.zeros(2),
                phi=np.eye(2),
                frame=Frame.ORIGINAL,
            )
        )
    gating = GatingParams(
        intercepts=np.array([condition.gating_intercept]),
        coefficients=np.array([list(GATING_SLOPES)]),
    )
    return MixtureParams(classes=tuple(classes), gating=gating)


def full_spec(frame: Frame = Frame.REPARAMETERIZED) -> MixtureSpec:
    return MixtureSpec(
        kind=ModelKind.FULL,
        n_classes=2,
        gating_covariates=COVARIATE_NAMES[:2],
        expert_covariates=COVARIATE_NAMES[2:],
        frame=frame,
    )


def _assign_memberships(probs: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "deterministic":
        return probs.argmax(axis=1) + 1
    if mode == "sampled":
        cum = probs.cumsum(axis=1)
        draws = rng.uniform(size=probs.shape[0])
        return (draws[:, None] > cum).sum(axis=1) + 1
    raise InvalidInputError("membership mode must be 'deterministic' or 'sampled'")


def _spline_outcomes(times, gammas, eta, memberships, theta, rng):
    n, j = times.shape
    y = np.empty((n, j))
    for k in np.unique(memberships):
        rows = memberships == k
        t = times[rows]
        gamma = gammas[k - 1]
        lam1 = np.minimum(t, gamma)
        lam2 = np.maximum(t - gamma, 0.0)
        e = eta[rows]
        y[rows] = e[:, [0]] + e[:, [1]] * lam1 + e[:, [2]] * lam2
    y += rng.normal(scale=np.sqrt(theta), size=(n, j))
    return y


def generate(condition: SimCondition, seed: int, membership_mode: str = "deterministic") -> GeneratedDataset:
    """One synthetic dataset for a design cell, reproducible from the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = true_parameters(condition)
    n = condition.n

    x_g = rng.standard_normal((n, 2))
    probs = gating_probabilities(x_g, params.gating)
    memberships = _assign_memberships(probs, membership_mode, rng)

    eta = np.empty((n, 3))
    x_e = np.empty((n, 2))
    for k in (1, 2):
        rows = np.nonzero(memberships == k)[0]
        cp = params.classes[k - 1]
        cov = np.zeros((5, 5))
        cov[:3, :3] = cp.b_e @ cp.phi @ cp.b_e.T + cp.psi
        cov[:3, 3:] = cp.b_e @ cp.phi
        cov[3:, :3] = (cp.b_e @ cp.phi).T
        cov[3:, 3:] = cp.phi
        mean = np.concatenate([cp.beta_e0, cp.mu_xe])
        draw = rng.multivariate_normal(mean, cov, size=rows.size, method="cholesky")
        eta[rows] = draw[:, :3]
        x_e[rows] = draw[:, 3:]

    waves = np.arange(N_WAVES, dtype=float)
    times = waves + rng.uniform(-TIME_JITTER, TIME_JITTER, size=(n, N_WAVES))
    gammas = [cp.gamma for cp in params.classes]
    y = _spline_outcomes(times, gammas, eta, memberships, condition.theta_eps, rng)

    dataset = LongitudinalDataset(
        ids=tuple(f"sim{i:05d}" for i in range(n)),
        times=tuple(times[i] for i in range(n)),
        outcomes=tuple(y[i] for i in range(n)),
        covariate_names=COVARIATE_NAMES,
        covariates=np.column_stack([x_g, x_e]),
    )
    return GeneratedDataset(
        dataset=dataset,
        memberships=memberships,
        params=params,
        spec=full_spec(),
        condition=condition,
        seed=seed,
        membership_mode=membership_mode,
    )


def verify_condition(condition: SimCondition) -> dict:
    """Design diagnostics: class distance under the fixed covariance."""
    params = true_parameters(condition)
    dist = mahalanobis_distance(
        params.classes[0].beta_e0, params.classes[1].beta_e0, PSI_FIXED
    )
    return {
        "condition_id": condition.condition_id,
        "mahalanobis": dist,
        "target": 0.86,
        "within_tolerance": bool(abs(dist - 0.86) <= 0.01),
        "knot_separation": condition.knot_separation,
    }


# ---------------------------------------------------------------------------
# Covariate-importance scenarios (one- and two-class designs with noise)

IMPORTANCE_SCENARIOS = {
    1: {"classes": 1, "r2": (0.02,)},
    2: {"classes": 1, "r2": (0.13,)},
    3: {"classes": 1, "r2": (0.26,)},
    4: {"classes": 2, "r2": (0.02, 0.02)},
    5: {"classes": 2, "r2": (0.02, 0.13)},
    6: {"classes": 2, "r2": (0.13, 0.13)},
    7: {"classes": 2, "r2": (0.13, 0.26)},
    8: {"classes": 2, "r2": (0.26, 0.26)},
}
_ONE_CLASS_MEAN = np.array([98.0, -5.0, -2.6])
_ONE_CLASS_KNOT = 4.5


def generate_importance_scenario(
    scenario: int,
    seed: int,
    n: int = N_INDIVIDUALS,
    n_noise: int = 2,
    theta_eps: float = 1.0,
):
    """Data for one covariate-screening scenario, noise covariates included.

    Returns (dataset, meta) where meta records the signal/noise covariate
    names and true memberships.
    """
    if scenario not in IMPORTANCE_SCENARIOS:
        raise InvalidInputError(f"scenario must be in {sorted(IMPORTANCE_SCENARIOS)}")
    info = IMPORTANCE_SCENARIOS[scenario]
    rng = np.random.default_rng(np.random.SeedSequence((seed, scenario)))
    if info["classes"] == 1:
        b_e = _path_matrix(PSI_FIXED, info["r2"][0], "unexplained")
        x_e = rng.standard_normal((n, 2))
        eta = (
            _ONE_CLASS_MEAN
            + x_e @ b_e.T
            + rng.multivariate_normal(np.zeros(3), PSI_FIXED, size=n, method="cholesky")
        )
        memberships = np.ones(n, dtype=int)
        waves = np.arange(N_WAVES, dtype=float)
        times = waves + rng.uniform(-TIME_JITTER, TIME_JITTER, size=(n, N_WAVES))
        y = _spline_outcomes(times, [_ONE_CLASS_KNOT], eta, memberships, theta_eps, rng)
        noise = rng.standard_normal((n, n_noise))
        names = ("x_e1", "x_e2") + tuple(f"noise{i + 1}" for i in range(n_noise))
        dataset = LongitudinalDataset(
            ids=tuple(f"imp{i:05d}" for i in range(n)),
            times=tuple(times[i] for i in range(n)),
            outcomes=tuple(y[i] for i in range(n)),
            covariate_names=names,
            covariates=np.column_stack([x_e, noise]),
        )
        meta = {
            "signal": ("x_e1", "x_e2"),
            "noise": names[2:],
            "memberships": memberships,
            "scenario": scenario,
        }
        return dataset, meta

    condition = SimCondition(
        scenario=1,
        knots=(3.5, 5.5),
        allocation="balanced",
        r2=info["r2"],
        theta_eps=theta_eps,
        n=n,
        uid=9000 + scenario,
    )
    gen = generate(condition, seed=seed, membership_mode="sampled")
    noise = rng.standard_normal((n, n_noise))
    names = COVARIATE_NAMES + tuple(f"noise{i + 1}" for i in range(n_noise))
    dataset = gen.dataset.with_covariates(
        names, np.column_stack([gen.dataset.covariates, noise])
    )
    meta = {
        "signal": COVARIATE_NAMES,
        "noise": names[4:],
        "memberships": gen.memberships,
        "scenario": scenario,
    }
    return dataset, meta
