//! Batch entry points for the `argm` binary: dataset generation, training,
//! evaluation, gradient verification, scan benchmarks and the ablation grid.
//!
//! Every command takes a [`config::RunConfig`] and writes the resolved
//! config next to its outputs.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_ablate, cmd_bench_scan, cmd_eval, cmd_generate_data, cmd_gradcheck, cmd_train};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Environment variable capping the worker thread count.
pub const THREADS_VAR: &str = "ARGM_THREADS";

/// Parses an `ARGM_THREADS` value; `None` leaves the default pool size.
pub fn parse_threads(value: Option<&str>) -> CliResult<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
    }
}
