//! Configuration, dispatch and the acceptance suite behind the `sdevl`
//! binary.

pub mod config;
pub mod run;
pub mod suite;

pub use config::{parse_config, ConfigError, ExperimentConfig, Kind};
pub use run::{run, write_outputs, Check, ExperimentResult};
