//! Std companion to `altfl-core`: the AFLD dataset container, experiment
//! specs, the results archive, parallel sweeps, and reports. The `altfl`
//! binary wraps these as subcommands.

pub mod afld;
pub mod archive;
pub mod experiment;
pub mod report;
pub mod spec;

pub use archive::{Archive, RecordRow, ARCHIVE_ENV};
pub use experiment::{run_matrices, run_parallel, run_training_sweep, success_rate_par, Workspace};
pub use spec::ExperimentSpec;
