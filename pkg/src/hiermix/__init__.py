"""Coherent probabilistic forecasting for hierarchical count series.

A neural forecaster whose predictive distribution is a finite mixture of
independent Poissons over the bottom-level series. Because every mixture
component aggregates linearly, forecasts at every level of the hierarchy
come from the same joint distribution: samples are coherent by
construction, no reconciliation step needed.
"""

from .autograd import ShapeError, Tensor, grad_check, load_tensors, save_tensors
from .data import (
    DataError,
    FeatureBundle,
    Partition,
    SeriesDataset,
    SyntheticSpec,
    build_feature_bundle,
    feature_dims,
    generate_synthetic,
    load_csv,
    partition,
    preprocess_counts,
)
from .hierarchy import (
    HierarchyError,
    HierarchyStructure,
    aggregate_values,
    build_summation_matrix,
    coherence_residual,
    load_hierarchy,
    parse_hierarchy_spec,
)
from .metrics import (
    EvaluationReport,
    QuantileGrid,
    crps,
    evaluate,
    evaluate_model,
    msse,
    naive1,
    quantile_loss,
    scrps_level,
    seasonal_naive,
)
from .mixture import (
    MixtureMarginal,
    PoissonMixtureForecast,
    aggregate_rates,
    bottom_marginal,
    covariance,
    covariance_matrix_nondiag_rank,
    full_forecast,
    log_joint_pmf,
    marginal_cdf,
    marginal_pmf,
    marginal_quantile,
    marginal_quantiles,
    sample_coherent,
)
from .network import ModelConfig, PoissonMixtureNet
from .objectives import (
    GroupingScheme,
    default_grouping,
    nll_batch,
    nll_groupbu,
    nll_joint,
    nll_naivebu,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    clip_gradients,
    creation_dates,
    hyper_search,
    retrain_shift,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "EvaluationReport",
    "FeatureBundle",
    "GroupingScheme",
    "HierarchyError",
    "HierarchyStructure",
    "MixtureMarginal",
    "ModelConfig",
    "Partition",
    "PoissonMixtureForecast",
    "PoissonMixtureNet",
    "QuantileGrid",
    "SeriesDataset",
    "ShapeError",
    "SyntheticSpec",
    "Tensor",
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "aggregate_rates",
    "aggregate_values",
    "bottom_marginal",
    "build_feature_bundle",
    "build_summation_matrix",
    "coherence_residual",
    "clip_gradients",
    "covariance",
    "covariance_matrix_nondiag_rank",
    "creation_dates",
    "crps",
    "default_grouping",
    "evaluate",
    "evaluate_model",
    "feature_dims",
    "full_forecast",
    "generate_synthetic",
    "grad_check",
    "hyper_search",
    "load_csv",
    "load_hierarchy",
    "load_tensors",
    "log_joint_pmf",
    "marginal_cdf",
    "marginal_pmf",
    "marginal_quantile",
    "marginal_quantiles",
    "msse",
    "naive1",
    "nll_batch",
    "nll_groupbu",
    "nll_joint",
    "nll_naivebu",
    "parse_hierarchy_spec",
    "partition",
    "preprocess_counts",
    "quantile_loss",
    "retrain_shift",
    "sample_coherent",
    "save_tensors",
    "scrps_level",
    "seasonal_naive",
    "train",
]
