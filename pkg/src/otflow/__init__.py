"""Nonparametric triangular transport flows for conditional sampling.

The package fits a composition of small kernel-expansion maps that pushes a
product reference measure onto an empirical joint sample. With the output
block frozen (lambda = inf) the fitted map becomes a conditional sampler:
feed prior draws of x alongside a fixed y_star and read off x | y_star.
"""

from .baselines import (
    Chain,
    McmcConfig,
    closest_to_mean,
    energy_distance,
    energy_permutation_test,
    l1_grid_error,
    nw_ckde,
    nw_conditional_weights,
    rw_metropolis,
)
from .core import (
    JointDataset,
    NumericsError,
    RngState,
    SampleBatch,
    ValidationError,
    append_markers,
    build_product_reference,
    split_dataset,
)
from .features import (
    DensityEstimate,
    Feature,
    FeatureSet,
    Schedule,
    bandwidth_for_center,
    kde_fit,
    schedule_m,
    select_centers,
    silverman_bandwidths,
)
from .flow import (
    ElementaryMap,
    FlowConfig,
    FlowDiagnostics,
    FlowModel,
    c_transform_numeric,
    conditional_sample,
    empirical_dual_objective,
    expansion_second_order,
    fit_flow,
    fit_flow_batches,
    flow_config_from_dict,
    gram_matrix,
    load_model,
    model_from_json_dict,
    model_to_json_dict,
    newton_coefficients,
    objective_gradient,
    prepare_reference,
    push_forward,
    save_model,
)
from .problems import (
    LV_TRUE_PARAMS,
    BananaProblem,
    IntegrationError,
    LVParams,
    LVProblem,
    banana_conditional_pdf,
    banana_joint_sample,
    lv_canonical_fixture,
    lv_joint_sample,
    lv_log_likelihood,
    lv_log_posterior_logspace,
    lv_log_prior,
    lv_prior_sample,
    lv_simulate,
)
from .transforms import ColumnTransform, fit_column_transform

__version__ = "0.1.0"

__all__ = [
    "BananaProblem",
    "Chain",
    "ColumnTransform",
    "DensityEstimate",
    "ElementaryMap",
    "Feature",
    "FeatureSet",
    "FlowConfig",
    "FlowDiagnostics",
    "FlowModel",
    "IntegrationError",
    "JointDataset",
    "LVParams",
    "LVProblem",
    "LV_TRUE_PARAMS",
    "McmcConfig",
    "NumericsError",
    "RngState",
    "SampleBatch",
    "Schedule",
    "ValidationError",
    "append_markers",
    "bandwidth_for_center",
    "banana_conditional_pdf",
    "banana_joint_sample",
    "build_product_reference",
    "c_transform_numeric",
    "closest_to_mean",
    "conditional_sample",
    "empirical_dual_objective",
    "energy_distance",
    "energy_permutation_test",
    "expansion_second_order",
    "fit_column_transform",
    "fit_flow",
    "fit_flow_batches",
    "flow_config_from_dict",
    "gram_matrix",
    "kde_fit",
    "l1_grid_error",
    "load_model",
    "lv_canonical_fixture",
    "lv_joint_sample",
    "lv_log_likelihood",
    "lv_log_posterior_logspace",
    "lv_log_prior",
    "lv_prior_sample",
    "lv_simulate",
    "model_from_json_dict",
    "model_to_json_dict",
    "newton_coefficients",
    "nw_ckde",
    "nw_conditional_weights",
    "objective_gradient",
    "prepare_reference",
    "push_forward",
    "rw_metropolis",
    "save_model",
    "schedule_m",
    "select_centers",
    "silverman_bandwidths",
    "split_dataset",
]
