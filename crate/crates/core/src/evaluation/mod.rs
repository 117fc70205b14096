//! Distributional and point metrics, the perturbed-propensity sample-size
//! experiment, and S-/T-learner baselines.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod samples;

pub use baselines::{
    fit_regressor, fit_s_learner, fit_st_learners, fit_t_learner, PointLearner, RegressorConfig, StLearners,
};
pub use experiment::{
    median_by_size, run_orthogonality_experiment, OrthogonalityConfig, OrthogonalityRow, ORTHOGONALITY_COLUMNS,
};
pub use metrics::{
    coverage, pehe, po_rmse, predictive_interval, quantile_sorted, wasserstein_1d, wasserstein_1d_seeded,
};
pub use report::{
    arm_wasserstein, evaluate_model, evaluate_samples, in_sample_subset, oracle_reference, point_mass_samples,
    score_point_predictions, ArmMetrics, EvalConfig, EvalReport, Evaluation, PointArmMetrics, ReportMeta, SplitMetrics,
    UnitRow, WassersteinMode, UNIT_COLUMNS,
};
pub use samples::{cate_and_pehe, PosteriorSamples};
