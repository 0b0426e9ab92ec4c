//! Configuration-driven experiment runner around `chain-core`.

pub mod config;
pub mod metrics;
pub mod runner;

pub use config::{parse_config, serialize_config, ConfigError, ExperimentConfig};
pub use metrics::{format_metrics, read_metrics, write_metrics, METRICS_HEADER};
pub use runner::{ablation_stem, run_experiment, CliError, Command, RunConfig};
