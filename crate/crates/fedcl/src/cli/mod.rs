//! Experiment configuration and the runner behind the `fedcl` binary.

mod config;
mod runner;

pub use config::{parse_config, parse_config_str, render_config, ExperimentConfig, Overrides};
pub use runner::{
    compare, comparison_csv, comparison_table, feature_exchange_baseline, gradient_suite,
    gradient_suite_report, probe_checkpoint, round_results_csv, run_experiment, summarize,
    summary_csv, summary_table, GradCheckLine, LedgerSummaryRow, RunArtifacts, VariantComparison,
};
