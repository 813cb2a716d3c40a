"""PAC confidence sets for probabilistic forecasters."""

from .baseline import chi2_quantile, mass_set_categorical, mass_set_gaussian
from .bounds import (
    BoundKind,
    Budget,
    Infeasible,
    PacParams,
    binomial_tail,
    direct_alpha,
    log_binomial_tail,
    min_n_direct,
    min_n_vc,
    vc_alpha,
)
from .confset import (
    EllipsoidSet,
    Interval,
    Threshold,
    bounding_box,
    categorical_set,
    ellipsoid_set,
    interval_set,
    member,
)
from .estimator import (
    Example,
    FittedArtifact,
    ScoredExample,
    empirical_risk,
    end_to_end,
    fit_threshold,
)
from .forecaster import (
    AllInfinite,
    CategoricalForecast,
    EmptyCalibration,
    GaussianForecast,
    Temperature,
    apply_temperature,
    fit_temperature,
    log_prob,
)
from .harness import SizeStats, empirical_error, make_world, size_stats, sweep, verify_pac
from .trajectory import (
    LinearGaussian,
    TabulatedDynamics,
    TrajectoryForecast,
    calibrate_trajectory,
    per_step_sets,
    rollout,
    sample_truth,
)

__version__ = "0.1.0"

__all__ = [
    "AllInfinite",
    "BoundKind",
    "Budget",
    "CategoricalForecast",
    "EllipsoidSet",
    "EmptyCalibration",
    "Example",
    "FittedArtifact",
    "GaussianForecast",
    "Infeasible",
    "Interval",
    "LinearGaussian",
    "PacParams",
    "ScoredExample",
    "SizeStats",
    "TabulatedDynamics",
    "Temperature",
    "Threshold",
    "TrajectoryForecast",
    "apply_temperature",
    "binomial_tail",
    "bounding_box",
    "calibrate_trajectory",
    "categorical_set",
    "chi2_quantile",
    "direct_alpha",
    "ellipsoid_set",
    "empirical_error",
    "empirical_risk",
    "end_to_end",
    "fit_temperature",
    "fit_threshold",
    "interval_set",
    "log_binomial_tail",
    "log_prob",
    "make_world",
    "mass_set_categorical",
    "mass_set_gaussian",
    "member",
    "min_n_direct",
    "min_n_vc",
    "per_step_sets",
    "rollout",
    "sample_truth",
    "size_stats",
    "sweep",
    "vc_alpha",
    "verify_pac",
]
