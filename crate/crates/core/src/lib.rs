//! Synthetic difference-in-differences and related panel estimators.

pub mod error;
pub mod estimators;
pub mod inference;
pub mod lab;
mod linalg;
pub mod mc;
pub mod panel;
pub mod rng;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
pub use panel::{load_panel, load_wide, read_long, validate_block, write_long, BlockDesign, CovariateSet, LongFormat, LongTable, Panel};
pub use weights::{
    compute_zeta, sc_weight_set, sc_weights, sdid_weights, solve_simplex_ls, time_weights, unit_weights, SimplexLsProblem,
    SimplexLsSolution, SolverOptions, TieBreak, WeightSet,
};
pub use estimators::{
    adjusted_outcomes, did, estimate, sc, sdid, tau_hat, weighted_double_difference, weighted_twfe_regress, Estimate,
    EstimatorOptions, FixedEffects, InfluenceTable, Method,
};
pub use mc::{mc_cv_curve, mc_estimate, McOptions};
pub use inference::{
    bootstrap_variance, confidence_interval, jackknife_replicates, jackknife_variance, lambda_generalization_diagnostic,
    method_weights, placebo_variance, variance, InferenceOptions, SeMethod, VarianceEstimate,
};
pub use lab::{
    calibrate, calibrate_panel, decompose_additive, fit_ar2_covariance, fit_assignment, fit_low_rank, run_experiment,
    simulate_panel, Ar2Fit, AssignmentFit, Calibration, CalibrationEcho, CalibrationOptions, DgpSpec, ExperimentConfig,
    Scale, SimulationReport, Simulator,
};
