"""Mixed effects envelope estimation for multivariate longitudinal regression.

Estimates a multivariate linear mixed model in which the error covariance
carries an envelope (reducing-subspace) structure, giving regression
coefficient estimates that can be far more efficient than the standard
mixed-model MLE.  Includes EM fitting, greedy basis estimation, BIC
dimension selection, asymptotic/bootstrap inference, comparison baselines
(OLS, response envelope, response PLS) and a simulation benchmark harness.
"""

from .errors import (
    MixenvError,
    SingularCovarianceError,
    RankDeficientDesignError,
    InformationSingularityError,
    UnstableBootstrapError,
    DataFormatError,
)
from .model import (
    LongitudinalDataset,
    NaturalParams,
    EnvelopeParams,
    SimulationConfig,
    natural_of_envelope,
    orth_complement,
    obs_loglik,
    check_strict_conditions,
    simulate,
    scenario_config,
    envelope_of_span,
    prop1_basis,
)
from .em import EmOptions, FitResult, PosteriorMoments, e_step, m_step, fit_standard_em
from .envelope import (
    OneDProblem,
    EnvelopeFitOptions,
    oneD_basis,
    envelope_objective_F,
    envelope_m_step,
    fit_mixed_envelope,
    select_u_bic,
)
from .baselines import (
    VectorizedRegressionData,
    vectorize_balanced,
    pool_observations,
    fit_ols,
    fit_response_envelope,
    fit_response_pls,
)
from .inference import (
    FisherBlocks,
    GradientG,
    BootstrapResult,
    fisher_info,
    score_contributions,
    gradient_G,
    avar_em,
    avar_envelope,
    closed_form_avar_special,
    sandwich_avar,
    bootstrap_se,
)
from .bench import BenchReport, Demo2dReport, run_simulation_study, run_demo2d

__version__ = "0.1.0"

__all__ = [
    "LongitudinalDataset",
    "NaturalParams",
    "EnvelopeParams",
    "SimulationConfig",
    "natural_of_envelope",
    "obs_loglik",
    "check_strict_conditions",
    "simulate",
    "scenario_config",
    "prop1_basis",
    "EmOptions",
    "FitResult",
    "PosteriorMoments",
    "e_step",
    "m_step",
    "fit_standard_em",
    "OneDProblem",
    "EnvelopeFitOptions",
    "oneD_basis",
    "envelope_objective_F",
    "envelope_m_step",
    "fit_mixed_envelope",
    "select_u_bic",
    "VectorizedRegressionData",
    "vectorize_balanced",
    "pool_observations",
    "fit_ols",
    "fit_response_envelope",
    "fit_response_pls",
    "FisherBlocks",
    "GradientG",
    "BootstrapResult",
    "fisher_info",
    "score_contributions",
    "gradient_G",
    "avar_em",
    "avar_envelope",
    "closed_form_avar_special",
    "sandwich_avar",
    "bootstrap_se",
    "BenchReport",
    "Demo2dReport",
    "run_simulation_study",
    "run_demo2d",
    "orth_complement",
    "envelope_of_span",
    "MixenvError",
    "SingularCovarianceError",
    "RankDeficientDesignError",
    "InformationSingularityError",
    "UnstableBootstrapError",
    "DataFormatError",
]
