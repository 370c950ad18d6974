//! Experiment driver for the measure-control heat equation: configuration,
//! target generation, solver dispatch, and report output.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{AtomSpec, ExperimentConfig, GridSpec, SolverKind};
pub use pipeline::{
    canonical_runs, coarse_system, desired_state, fine_system, generate_desired_state,
    project_reachable_target, reproduce_paper, run_and_write, run_experiment, CliError,
};
pub use report::SolveReport;
