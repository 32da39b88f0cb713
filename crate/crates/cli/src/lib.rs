//! Command-line front end for the dislocated-medium kinematics library.
//!
//! The library half of this crate turns a JSON scenario description into
//! grids, states and drivers, runs one of four operations (check,
//! reconstruct, evolve, converge) and renders the results as a JSON report,
//! newline-delimited diagnostics, and optional field dumps. The `dmk`
//! binary is a thin argument-parsing shell around these operations.
//!
//! Exit-code contract of the binary:
//!
//! * `0` — operation ran and every configured threshold held,
//! * `2` — operation ran but at least one threshold was violated,
//! * `3` — the configuration or command line could not be used,
//! * `4` — the numerics failed (blow-up, lost positivity, non-finite data).

use std::path::PathBuf;

pub mod config;
pub mod io;
pub mod providers;
pub mod report;
pub mod run;
pub mod scenario;

pub use config::{ScenarioConfig, Thresholds};
pub use report::Report;
pub use run::{initial_from_deformation, run_check, run_convergence, run_evolve, run_reconstruct};

/// Exit code for a clean run with all thresholds satisfied.
pub const EXIT_OK: i32 = 0;
/// Exit code when diagnostics exceeded a configured threshold.
pub const EXIT_THRESHOLD: i32 = 2;
/// Exit code for unusable configuration files or command lines.
pub const EXIT_CONFIG: i32 = 3;
/// Exit code for numerical failure during a run.
pub const EXIT_NUMERIC: i32 = 4;

/// Everything that can go wrong before or while running an operation.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The scenario file or command line cannot be used as given.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file could not be read or written.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Time integration failed mid-run.
    #[error("numerical blow-up at step {step}: {source}")]
    Blowup {
        step: usize,
        #[source]
        source: dmk_core::Error,
    },

    /// The numerics rejected the data outside of time stepping.
    #[error(transparent)]
    Numeric(#[from] dmk_core::Error),
}

impl CliError {
    /// Maps the error to the binary's exit-code contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Blowup { .. } | CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}
