//! Simulation studies and the `mfeb` command line.

mod cli;
pub mod config;
pub mod experiments;
pub mod meta;
pub mod table;

pub use cli::cli_main;
pub use config::{DesignMode, Experiment, ExperimentConfig, Grid, NRule};
pub use experiments::{
    kappa_table, median, run_asymptotics, run_coverage, run_debias, run_mse, run_timing, CoverageSummary, EstimateRow,
    FailureRow, HistogramRow, IntervalRow, KappaRow, MethodSummary, ReplicationReport,
};
pub use table::Table;
