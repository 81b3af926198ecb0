"""Mixtures of bilinear-spline growth models with covariate effects.

Estimation (EM or direct quasi-Newton), posterior classification metrics,
a simulation-study harness, stepwise gating estimators, and a
likelihood-split forest for covariate importance screening.
"""

from .classify import (
    Assignment,
    accuracy,
    entropy,
    kappa_agreement,
    modal_assignment,
    posterior_matrix,
)
from .data import LongitudinalDataset
from .errors import DegenerateClassError, InvalidInputError, NumericError, SplinemixError
from .fitting import (
    EnumerationResult,
    FitOptions,
    FittedModel,
    default_start,
    enumerate_classes,
    fit,
    information_criteria,
    multinomial_logit,
    standard_errors,
    three_step_fit,
    two_step_fit,
)
from .growth import (
    ClassParams,
    Frame,
    GrowthFactors,
    LoadingMatrix,
    implied_covariance,
    implied_mean,
    inverse_reparameterize,
    loading_matrix,
    mahalanobis_distance,
    reparameterize,
)
from .likelihood import class_log_density, log_likelihood, responsibilities
from .model import (
    GatingParams,
    MixtureParams,
    MixtureSpec,
    ModelKind,
    ParamLayout,
    gating_probabilities,
    parameter_count,
)
from .simulate import (
    GeneratedDataset,
    SimCondition,
    calibrate_path_coefficients,
    condition_by_id,
    condition_grid,
    generate,
    generate_importance_scenario,
    true_parameters,
    verify_condition,
)

__version__ = "0.1.0"
